#!/usr/bin/env python3
"""
I2N 工厂网络模块

把企业级加权网络展开为带地理坐标的工厂级网络，企业对的连边数与权重逐项保持。
距离用球面 Haversine 公式，衰减核 G(d; τ) = exp(−d/τ)。
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from ingest import FactoryTable
from utils.errors import I2NError
from utils.logger import get_logger
from utils.rng import Stage, stream
from weights import WeightedNetwork

logger = get_logger()

EARTH_RADIUS_KM = 6371.0


class FactoryError(I2NError):
    """工厂展开错误"""
    stage = 'factory'


def haversine(lat1, lon1, lat2, lon2):
    """球面大圆距离（公里），输入为弧度，支持广播"""
    lat1, lon1 = np.asarray(lat1, dtype=np.float64), np.asarray(lon1, dtype=np.float64)
    lat2, lon2 = np.asarray(lat2, dtype=np.float64), np.asarray(lon2, dtype=np.float64)
    a = np.sin((lat2 - lat1) / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    return float(d) if d.ndim == 0 else d


def kernel(d, tau_km: float):
    """G(d; τ) = exp(−d/τ)"""
    if not tau_km > 0:
        raise FactoryError('InvalidTau', f"τ 必须为正: {tau_km}", {'tau_km': tau_km})
    g = np.exp(-np.asarray(d, dtype=np.float64) / tau_km)
    return float(g) if g.ndim == 0 else g


def prominence(factories: FactoryTable, tau_km: float, chunk: int = 2048) -> np.ndarray:
    """
    每个工厂在本企业内的显著度 ψ_i(a) ∝ Σ_{j≠i} Σ_{b∈𝒜(j)} G(d(a,b); τ)

    返回与 factories.frame 行对齐的数组，每个企业内部和为 1。

    Raises:
        FactoryError: IsolatedGeometry（少于 2 家企业，或某企业的全部 L_i(a) 为 0）
    """
    frame = factories.frame
    firm = frame['firm_id'].to_numpy()
    if np.unique(firm).size < 2:
        raise FactoryError('IsolatedGeometry', "计算显著度至少需要 2 家企业")
    lat, lon = frame['lat'].to_numpy(), frame['lon'].to_numpy()
    log_load = np.empty(len(frame))
    for start in range(0, len(frame), chunk):
        stop = min(len(frame), start + chunk)
        d = haversine(lat[start:stop, None], lon[start:stop, None], lat[None, :], lon[None, :])
        logits = -d / tau_km
        logits[firm[start:stop, None] == firm[None, :]] = -np.inf
        log_load[start:stop] = logsumexp(logits, axis=1)

    psi = np.empty(len(frame))
    for f in np.unique(firm):
        rows = np.flatnonzero(firm == f)
        if not np.any(np.isfinite(log_load[rows])):
            raise FactoryError('IsolatedGeometry', f"企业 {int(f)} 的所有工厂与其他企业的核权重都为 0",
                               {'firm_id': int(f)})
        psi[rows] = np.exp(log_load[rows] - logsumexp(log_load[rows]))
    return psi


@dataclass
class FactoryGraph:
    """工厂级网络；边端点是 factories.frame 的行号，firm_src/firm_dst 是企业网络的节点号"""

    factories: FactoryTable
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    firm_src: np.ndarray
    firm_dst: np.ndarray
    network: WeightedNetwork
    self_weights: np.ndarray

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    def aggregate(self) -> pd.DataFrame:
        """按企业对汇总工厂边权重"""
        frame = pd.DataFrame({'src': self.firm_src, 'dst': self.firm_dst, 'weight': self.weight})
        return frame.groupby(['src', 'dst'], sort=True)['weight'].sum().reset_index()

    def sector_totals(self) -> np.ndarray:
        """从工厂网络重算 ŝ_ℓ（企业自环权重计入本企业所在部门）"""
        g = self.network.graph
        totals = np.bincount(g.sector[self.firm_dst], weights=g.size[self.firm_src] * self.weight,
                             minlength=len(g.sector_labels))
        totals += np.bincount(g.sector, weights=g.size * self.self_weights, minlength=len(g.sector_labels))
        return totals

    def edge_distances(self) -> np.ndarray:
        frame = self.factories.frame
        lat, lon = frame['lat'].to_numpy(), frame['lon'].to_numpy()
        return haversine(lat[self.src], lon[self.src], lat[self.dst], lon[self.dst])

    def mean_distance(self) -> float:
        """按权重加权的平均边长（公里）"""
        if self.n_edges == 0:
            return 0.0
        return float(np.average(self.edge_distances(), weights=self.weight))

    def to_frame(self) -> pd.DataFrame:
        ids = self.factories.frame['factory_id'].to_numpy()
        firm_ids = self.network.graph.firm_id
        return pd.DataFrame({
            'src_factory': ids[self.src],
            'dst_factory': ids[self.dst],
            'src_firm': firm_ids[self.firm_src],
            'dst_firm': firm_ids[self.firm_dst],
            'weight': self.weight,
        })


class _Allocation:
    """动态矩阵 Q 的惰性表示：行 a 的分布 ∝ G(d(a,b)) × [企业对 (i, π(b)) 仍有剩余容量]"""

    def __init__(self, net: WeightedNetwork, factories: FactoryTable, node_of_factory: np.ndarray, tau_km: float):
        g = net.graph
        frame = factories.frame
        self.tau = tau_km
        self.lat, self.lon = frame['lat'].to_numpy(), frame['lon'].to_numpy()
        self.node_of_factory = node_of_factory
        self.factories_of = [np.flatnonzero(node_of_factory == i) for i in range(g.n_nodes)]
        self.remaining: List[Dict[int, float]] = [dict() for _ in range(g.n_nodes)]
        off = g.src != g.dst
        for i, j, w in zip(g.src[off].tolist(), g.dst[off].tolist(), net.weights[off].tolist()):
            self.remaining[i][j] = w

    def live_targets(self, i: int) -> np.ndarray:
        return np.array(sorted(self.remaining[i]), dtype=np.int64)

    def draw(self, a: int, i: int, rng: np.random.Generator, live: Optional[np.ndarray] = None) -> int:
        """从 Q 的第 a 行抽一个目标工厂"""
        live = self.live_targets(i) if live is None else live
        if live.size == 0:
            raise FactoryError('CapacityMismatch', f"企业节点 {i} 已无剩余连边", {'node': i})
        candidates = np.concatenate([self.factories_of[j] for j in live])
        d = haversine(self.lat[a], self.lon[a], self.lat[candidates], self.lon[candidates])
        logits = -np.atleast_1d(d) / self.tau
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        return int(candidates[rng.choice(candidates.size, p=probs)])


def allocate(net: WeightedNetwork, factories: FactoryTable, tau_km: float = 500.0, seed: int = 0) -> FactoryGraph:
    """
    把企业级连边分配到工厂对

    第一步：企业按编号升序、工厂按编号升序，每个工厂都抽一次目标。
      出度 d ≥ 工厂数 k 时逐个抽取并立即消耗容量；d < k 时所有工厂从同一个初始 Q 抽取，
      共用同一企业级连边的工厂边平分该边权重，之后再消耗容量。
    第二步：剩余连边按 ψ_i 抽源工厂、按当前 Q 行抽目标工厂，每次分配后更新 Q。

    Raises:
        FactoryError: MissingFactories / IsolatedGeometry / CapacityMismatch
    """
    g = net.graph
    frame = factories.frame
    node_index = pd.Index(g.firm_id)
    node_of_factory = node_index.get_indexer(frame['firm_id'].to_numpy())
    covered = np.zeros(g.n_nodes, dtype=bool)
    covered[node_of_factory[node_of_factory >= 0]] = True
    if not covered.all():
        missing = g.firm_id[~covered]
        raise FactoryError('MissingFactories', f"{missing.size} 家企业没有工厂坐标（如 {int(missing[0])}）",
                           {'firm_ids': missing[:20].tolist()})
    if np.any(node_of_factory < 0):
        # 网络中不存在的企业（如被剔除的孤立企业）的工厂不参与分配
        kept = node_of_factory >= 0
        factories = FactoryTable(frame[kept].reset_index(drop=True))
        frame = factories.frame
        node_of_factory = node_index.get_indexer(frame['firm_id'].to_numpy())

    psi = prominence(factories, tau_km)
    state = _Allocation(net, factories, node_of_factory, tau_km)
    rng = stream(seed, Stage.FACTORY)
    src: List[int] = []
    dst: List[int] = []
    wts: List[float] = []

    def consume(i: int, j: int):
        state.remaining[i].pop(j, None)

    # 第一步
    for i in range(g.n_nodes):
        own = state.factories_of[i]
        out_deg = len(state.remaining[i])
        if out_deg == 0:
            continue
        if out_deg >= own.size:
            for a in own:
                b = state.draw(int(a), i, rng)
                j = int(node_of_factory[b])
                src.append(int(a))
                dst.append(b)
                wts.append(state.remaining[i][j])
                consume(i, j)
        else:
            live = state.live_targets(i)
            picks = [(int(a), state.draw(int(a), i, rng, live)) for a in own]
            by_firm: Dict[int, List[int]] = {}
            for a, b in picks:
                by_firm.setdefault(int(node_of_factory[b]), []).append(len(src))
                src.append(a)
                dst.append(b)
                wts.append(0.0)
            for j, slots in by_firm.items():
                share = state.remaining[i][j] / len(slots)
                for s in slots:
                    wts[s] = share
                consume(i, j)

    # 第二步
    for i in range(g.n_nodes):
        own = state.factories_of[i]
        while state.remaining[i]:
            a = int(own[rng.choice(own.size, p=psi[own] / psi[own].sum())]) if own.size > 1 else int(own[0])
            b = state.draw(a, i, rng)
            j = int(node_of_factory[b])
            src.append(a)
            dst.append(b)
            wts.append(state.remaining[i][j])
            consume(i, j)

    src_arr = np.asarray(src, dtype=np.int64)
    dst_arr = np.asarray(dst, dtype=np.int64)
    order = np.lexsort((dst_arr, src_arr))
    src_arr, dst_arr = src_arr[order], dst_arr[order]
    result = FactoryGraph(
        factories=factories,
        src=src_arr,
        dst=dst_arr,
        weight=np.asarray(wts, dtype=np.float64)[order],
        firm_src=node_of_factory[src_arr],
        firm_dst=node_of_factory[dst_arr],
        network=net,
        self_weights=net.self_weights(),
    )
    _verify(result)
    logger.info(f"工厂网络展开完成: {len(frame)} 个工厂, {result.n_edges} 条工厂边, "
                f"加权平均距离 {result.mean_distance():.1f} km (τ={tau_km})")
    return result


def _verify(fg: FactoryGraph) -> float:
    """企业对聚合必须逐项等于企业级权重，返回最大偏差"""
    g = fg.network.graph
    off = g.src != g.dst
    expected = pd.DataFrame({'src': g.src[off], 'dst': g.dst[off], 'weight': fg.network.weights[off]})
    got = fg.aggregate()
    if len(got) != len(expected):
        raise FactoryError('CapacityMismatch', f"工厂边覆盖的企业对数 {len(got)} ≠ 企业边数 {len(expected)}",
                           {'factory_pairs': len(got), 'firm_edges': len(expected)})
    merged = expected.merge(got, on=['src', 'dst'], how='left', suffixes=('', '_agg'))
    diff = np.abs(merged['weight'] - merged['weight_agg'].fillna(np.inf))
    if np.any(diff > 1e-12):
        row = int(np.argmax(diff.to_numpy()))
        raise FactoryError('CapacityMismatch', "工厂边聚合权重与企业级权重不一致",
                           {'src': int(merged.at[row, 'src']), 'dst': int(merged.at[row, 'dst'])})
    if np.any(g.firm_id[fg.firm_src] == g.firm_id[fg.firm_dst]):
        raise FactoryError('CapacityMismatch', "出现了企业内部的工厂边")
    return float(diff.max()) if len(diff) else 0.0


def factory_report(fg: FactoryGraph) -> Dict[str, Any]:
    return {
        'n_factories': len(fg.factories),
        'n_factory_edges': fg.n_edges,
        'mean_distance_km': fg.mean_distance(),
        'max_aggregation_error': _verify(fg),
    }
