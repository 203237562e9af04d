#!/usr/bin/env python3
"""
I2N 骨架抽样模块

按块抽取有向无权骨架 A ~ Bernoulli(P)，不显式构造 P：
每个 (部门对, 规模分箱对) 块内以块最大概率做几何跳跃，再按 p_ij / p_max 接受。
另外提供孤立企业剔除和系综集中性诊断（Bernstein 带、度分布、边数 z 分数）。
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import sparse, stats
from scipy.special import expit

from gravity import BinSummary, GravityError, GravityParams
from ingest import FirmPopulation, IOTable
from utils.errors import I2NError
from utils.files import read_csv_artifact, require_file, write_csv_artifact
from utils.logger import get_logger
from utils.parallel import run_ordered
from utils.rng import Stage, stream

logger = get_logger()

PROVENANCE = ('sampled', 'closure', 'selfloop')
SAMPLED, CLOSURE, SELFLOOP = 0, 1, 2


class SamplerError(I2NError):
    """抽样阶段错误"""
    stage = 'sample'


@dataclass
class SparseDigraph:
    """稀疏有向图：边表 + 节点元数据（企业编号、部门、规模）"""

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    firm_id: np.ndarray
    sector: np.ndarray
    size: np.ndarray
    sector_labels: List[str]
    provenance: Optional[np.ndarray] = None

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        if self.provenance is None:
            self.provenance = np.full(self.src.size, SAMPLED, dtype=np.int8)
        self.provenance = np.asarray(self.provenance, dtype=np.int8)

    @classmethod
    def from_population(cls, pop: FirmPopulation, src=(), dst=(), provenance=None) -> 'SparseDigraph':
        return cls(pop.n_firms, np.asarray(src), np.asarray(dst), pop.firm_id.copy(), pop.sector.copy(),
                   pop.size.copy(), list(pop.sector_labels), provenance)

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    @property
    def population(self) -> FirmPopulation:
        return FirmPopulation(self.firm_id, self.sector, self.size, self.sector_labels)

    def with_edges(self, src, dst, provenance) -> 'SparseDigraph':
        """同一节点集上的新边表（按 (src, dst) 规范排序）"""
        src, dst = np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64)
        provenance = np.asarray(provenance, dtype=np.int8)
        order = np.lexsort((dst, src))
        return SparseDigraph(self.n_nodes, src[order], dst[order], self.firm_id, self.sector, self.size,
                             self.sector_labels, provenance[order])

    def out_degree(self, include_self_loops: bool = True) -> np.ndarray:
        keep = slice(None) if include_self_loops else self.src != self.dst
        return np.bincount(self.src[keep], minlength=self.n_nodes)

    def in_degree(self, include_self_loops: bool = True) -> np.ndarray:
        keep = slice(None) if include_self_loops else self.src != self.dst
        return np.bincount(self.dst[keep], minlength=self.n_nodes)

    def to_csr(self, weights: Optional[np.ndarray] = None) -> sparse.csr_matrix:
        data = np.ones(self.n_edges) if weights is None else np.asarray(weights, dtype=np.float64)
        return sparse.csr_matrix((data, (self.src, self.dst)), shape=(self.n_nodes, self.n_nodes))

    def has_edge(self, i: int, j: int) -> bool:
        return bool(np.any((self.src == i) & (self.dst == j)))

    def self_loop_count(self) -> int:
        return int(np.count_nonzero(self.src == self.dst))

    def subgraph(self, keep: np.ndarray) -> 'SparseDigraph':
        """保留 keep 为 True 的节点，重新编号"""
        keep = np.asarray(keep, dtype=bool)
        new_index = np.full(self.n_nodes, -1, dtype=np.int64)
        new_index[keep] = np.arange(int(keep.sum()))
        edge_keep = keep[self.src] & keep[self.dst]
        return SparseDigraph(int(keep.sum()), new_index[self.src[edge_keep]], new_index[self.dst[edge_keep]],
                             self.firm_id[keep], self.sector[keep], self.size[keep], self.sector_labels,
                             self.provenance[edge_keep])

    def edge_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'src': self.firm_id[self.src],
            'dst': self.firm_id[self.dst],
            'provenance': np.array(PROVENANCE)[self.provenance] if self.n_edges else np.array([], dtype=str),
        })


def save_edges(g: SparseDigraph, path: Union[str, Path], config_hash: str, seed: int,
               weights: Optional[np.ndarray] = None) -> Path:
    """写 edges.csv（或带 weight 列的 weighted_edges.csv），端点为企业编号"""
    frame = g.edge_frame()
    if weights is not None:
        frame.insert(2, 'weight', np.asarray(weights, dtype=np.float64))
    return write_csv_artifact(path, frame, config_hash, seed)


def load_edges(path: Union[str, Path], pop: FirmPopulation, stage: str = 'sample') -> Tuple[SparseDigraph, Optional[np.ndarray]]:
    """读取边表，返回 (图, 权重或 None)"""
    path = require_file(path, stage, '边表')
    frame = read_csv_artifact(path)
    index = pd.Index(pop.firm_id)
    src = index.get_indexer(frame['src'].to_numpy())
    dst = index.get_indexer(frame['dst'].to_numpy())
    if np.any(src < 0) or np.any(dst < 0):
        raise SamplerError('UnknownFirm', f"边表引用了企业表之外的企业: {path}", {'path': str(path)}, stage=stage)
    codes = {name: i for i, name in enumerate(PROVENANCE)}
    if 'provenance' in frame.columns:
        provenance = np.array([codes[str(p)] for p in frame['provenance']], dtype=np.int8)
    else:
        provenance = None
    weights = frame['weight'].to_numpy(dtype=np.float64) if 'weight' in frame.columns else None
    g = SparseDigraph.from_population(pop, src, dst, provenance)
    if weights is None:
        return g.with_edges(g.src, g.dst, g.provenance), None
    order = np.lexsort((g.dst, g.src))
    return g.with_edges(g.src, g.dst, g.provenance), weights[order]


@dataclass
class Block:
    """一个抽样块：行企业 × 列企业，块内 p ≤ p_max"""

    key: Tuple[int, ...]
    rows: np.ndarray
    cols: np.ndarray
    base: float
    p_max: float


class GravityProbability:
    """引力模型的分块概率；块由 (k, l, 行分箱, 列分箱) 标识"""

    def __init__(self, pop: FirmPopulation, io: IOTable, params: GravityParams, bins: int = 32):
        self.pop = pop
        self.alpha = params.alpha
        self.log_size = np.log(pop.size)
        cells = BinSummary(pop, max(1, bins)).sectors
        self._blocks: List[Block] = []
        for k, l in io.active_pairs():
            lam = params.lam[k, l]
            if not lam > 0:
                raise GravityError('MissingLambda', f"部门对 ({io.sectors[k]}, {io.sectors[l]}) 缺少 λ",
                                   {'k': io.sectors[k], 'l': io.sectors[l]}, stage='sample')
            base = np.log(params.z) + np.log(lam) + params.kappa * np.log(io.max_norm[k, l])
            for a, rows in enumerate(cells[k].members):
                top_a = self.log_size[rows].max()
                for b, cols in enumerate(cells[l].members):
                    top_b = self.log_size[cols].max()
                    p_max = float(expit(base + self.alpha * (top_a + top_b)))
                    self._blocks.append(Block((k, l, a, b), rows, cols, base, p_max))

    def blocks(self) -> List[Block]:
        return self._blocks

    def probabilities(self, block: Block, r: np.ndarray, c: np.ndarray) -> np.ndarray:
        return expit(block.base + self.alpha * (self.log_size[block.rows[r]] + self.log_size[block.cols[c]]))

    def matrix(self, block: Block, row_slice: slice = slice(None)) -> np.ndarray:
        rows = block.rows[row_slice]
        p = expit(block.base + self.alpha * (self.log_size[rows][:, None] + self.log_size[block.cols][None, :]))
        p[rows[:, None] == block.cols[None, :]] = 0.0
        return p


class DenseProbability:
    """显式概率矩阵（测试与小规模诊断用），按行分块"""

    def __init__(self, P: np.ndarray, pop: Optional[FirmPopulation] = None, rows_per_block: int = 256):
        self.P = np.asarray(P, dtype=np.float64)
        n = self.P.shape[0]
        self.pop = pop or FirmPopulation(np.arange(n), np.zeros(n, dtype=np.int64), np.ones(n), ['0'])
        cols = np.arange(n)
        self._blocks = []
        for chunk, start in enumerate(range(0, n, rows_per_block)):
            rows = np.arange(start, min(n, start + rows_per_block))
            self._blocks.append(Block((chunk,), rows, cols, 0.0, float(self.P[rows].max(initial=0.0))))

    def blocks(self) -> List[Block]:
        return self._blocks

    def probabilities(self, block: Block, r: np.ndarray, c: np.ndarray) -> np.ndarray:
        return self.P[block.rows[r], block.cols[c]]

    def matrix(self, block: Block, row_slice: slice = slice(None)) -> np.ndarray:
        rows = block.rows[row_slice]
        p = self.P[np.ix_(rows, block.cols)].copy()
        p[rows[:, None] == block.cols[None, :]] = 0.0
        return p


def _sample_block(provider, block: Block, seed: int, draw: int) -> Tuple[np.ndarray, np.ndarray]:
    n_cols = block.cols.size
    total = block.rows.size * n_cols
    if total == 0 or block.p_max <= 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)

    rng = stream(seed, Stage.SAMPLE, draw, *block.key)
    batch = int(min(total, total * block.p_max * 1.1 + 32))
    found = []
    pos = -1
    while True:
        steps = pos + np.cumsum(rng.geometric(block.p_max, size=batch))
        inside = steps[steps < total]
        found.append(inside)
        if inside.size < steps.size:
            break
        pos = int(steps[-1])
    candidates = np.concatenate(found)

    r, c = np.divmod(candidates, n_cols)
    accept = rng.random(candidates.size) * block.p_max < provider.probabilities(block, r, c)
    src, dst = block.rows[r[accept]], block.cols[c[accept]]
    off_diagonal = src != dst
    return src[off_diagonal], dst[off_diagonal]


def sample_graph(provider, seed: int, draw: int = 0, threads: int = 1) -> SparseDigraph:
    """从概率提供者抽一张图；块并行，合并后按 (src, dst) 规范排序"""
    parts = run_ordered(lambda b: _sample_block(provider, b, seed, draw), provider.blocks(), threads)
    if parts:
        src = np.concatenate([p[0] for p in parts])
        dst = np.concatenate([p[1] for p in parts])
    else:
        src = dst = np.empty(0, dtype=np.int64)
    g = SparseDigraph.from_population(provider.pop)
    return g.with_edges(src, dst, np.full(src.size, SAMPLED, dtype=np.int8))


def draw_backbone(pop: FirmPopulation, io: IOTable, params: GravityParams, seed: int,
                  bins: int = 32, threads: int = 1) -> SparseDigraph:
    """
    抽取骨架图：只在 S_kl > 0 的部门块内抽边，无自环

    Args:
        bins: 抽样用的每部门规模分箱数（只影响效率，不影响分布）
    """
    g = sample_graph(GravityProbability(pop, io, params, bins), seed, 0, threads)
    logger.info(f"骨架抽样完成: {g.n_nodes} 个节点, {g.n_edges} 条边")
    return g


def prune_isolates(g: SparseDigraph) -> Tuple[SparseDigraph, int]:
    """剔除入度和出度都为 0 的企业"""
    keep = (g.out_degree() + g.in_degree()) > 0
    removed = int(g.n_nodes - keep.sum())
    if removed == 0:
        return g, 0
    logger.info(f"剔除孤立企业 {removed} 家（{removed / g.n_nodes:.2%}）")
    return g.subgraph(keep), removed


@dataclass
class EnsembleStats:
    """系综精确统计量（按块求和）"""

    mu_E: float
    sigma2_E: float
    mu_out: np.ndarray
    var_out: np.ndarray
    mu_in: np.ndarray
    var_in: np.ndarray
    isolation: np.ndarray
    thresholds: np.ndarray
    model_bin_mass: np.ndarray
    method: str

    @property
    def expected_isolated_fraction(self) -> float:
        return float(self.isolation.mean()) if self.isolation.size else 0.0


def _degree_bins(degrees: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """度数落入 (h_{t-1}, h_t] 各区间的比例，最后一个区间右端开放"""
    counts = np.bincount(np.searchsorted(thresholds, degrees, side='left'), minlength=thresholds.size + 1)
    return counts / max(1, degrees.size)


def ensemble_stats(provider, n_thresholds: int = 10, dp_limit: int = 2000, mc_draws: int = 50,
                   seed: int = 0, threads: int = 1) -> EnsembleStats:
    """
    计算 μ_E、σ²_E、每个企业的出/入度均值方差、孤立概率和模型度分布

    N ≤ dp_limit 时模型度分布用 Bernoulli 卷积动态规划精确计算，否则用 Monte Carlo 抽样估计。
    """
    n = provider.pop.n_firms
    mu_out, var_out = np.zeros(n), np.zeros(n)
    mu_in, var_in = np.zeros(n), np.zeros(n)
    log_keep = np.zeros(n)

    def block_sums(block: Block):
        rows_per = max(1, (1 << 20) // max(1, block.cols.size))
        out = []
        for start in range(0, block.rows.size, rows_per):
            sl = slice(start, start + rows_per)
            p = provider.matrix(block, sl)
            pq = p * (1.0 - p)
            with np.errstate(divide='ignore'):
                lk = np.log1p(-p)
            out.append((block.rows[sl], p.sum(1), pq.sum(1), lk.sum(1), p.sum(0), pq.sum(0), lk.sum(0)))
        return block, out

    for block, chunks in run_ordered(block_sums, provider.blocks(), threads):
        for rows, po, qo, lo_, pi, qi, li in chunks:
            np.add.at(mu_out, rows, po)
            np.add.at(var_out, rows, qo)
            np.add.at(log_keep, rows, lo_)
            np.add.at(mu_in, block.cols, pi)
            np.add.at(var_in, block.cols, qi)
            np.add.at(log_keep, block.cols, li)

    quantiles = np.quantile(mu_out, np.linspace(0.05, 0.95, n_thresholds)) if n else np.empty(0)
    thresholds = np.unique(np.floor(quantiles).astype(np.int64))

    if n <= dp_limit:
        method = 'dp'
        dense = np.zeros((n, n))
        for block in provider.blocks():
            dense[np.ix_(block.rows, block.cols)] = provider.matrix(block)
        top = int(thresholds.max()) + 1 if thresholds.size else 1
        pmf = np.zeros((n, top + 1))
        pmf[:, 0] = 1.0
        # 截断到 top：最后一列吸收 ≥ top 的质量
        for j in range(n):
            p = dense[:, j][:, None]
            shifted = np.zeros_like(pmf)
            shifted[:, 1:] = pmf[:, :-1]
            shifted[:, -1] += pmf[:, -1]
            pmf = pmf * (1.0 - p) + shifted * p
        mean_pmf = pmf.mean(axis=0)
        cdf = np.cumsum(mean_pmf)[:top]
        at = cdf[thresholds] if thresholds.size else np.empty(0)
        model_bin_mass = np.diff(np.concatenate([[0.0], at, [1.0]]))
    else:
        method = 'monte_carlo'
        masses = [_degree_bins(sample_graph(provider, seed, d + 1_000_000, threads).out_degree(), thresholds)
                  for d in range(mc_draws)]
        model_bin_mass = np.mean(masses, axis=0)

    return EnsembleStats(
        mu_E=float(mu_out.sum()),
        sigma2_E=float(var_out.sum()),
        mu_out=mu_out,
        var_out=var_out,
        mu_in=mu_in,
        var_in=var_in,
        isolation=np.exp(log_keep),
        thresholds=thresholds,
        model_bin_mass=model_bin_mass,
        method=method,
    )


def bernstein_threshold(variance: np.ndarray, n_firms: int, delta: float) -> np.ndarray:
    """使 2exp(−t²/(2σ² + 2t/3)) = δ/N 的 t"""
    L = np.log(2.0 * n_firms / delta)
    return L / 3.0 + np.sqrt((L / 3.0) ** 2 + 2.0 * np.asarray(variance) * L)


def concentration_report(draws: Sequence[SparseDigraph], ensemble: EnsembleStats,
                         delta: float = 0.05) -> Dict[str, Any]:
    """
    系综集中性诊断

    每次抽样：Bernstein 带（δ/N 联合界）违背比例、度分布区间与模型的最大偏差、边数 z 分数。
    """
    if not draws:
        raise SamplerError('NoDraws', "至少需要一次抽样", stage='diagnostics')
    n = draws[0].n_nodes
    t = bernstein_threshold(ensemble.var_out, n, delta)
    sigma_E = float(np.sqrt(ensemble.sigma2_E))

    per_draw = []
    counts = []
    for g in draws:
        deg = g.out_degree(include_self_loops=False)
        violating = np.abs(deg - ensemble.mu_out) > t
        emp = _degree_bins(deg, ensemble.thresholds)
        edges = int(np.count_nonzero(g.src != g.dst))
        counts.append(edges)
        per_draw.append({
            'edges': edges,
            'z_score': (edges - ensemble.mu_E) / sigma_E if sigma_E > 0 else 0.0,
            'violation_fraction': float(violating.mean()) if n else 0.0,
            'pmf_sup_distance': float(np.max(np.abs(emp - ensemble.model_bin_mass))) if emp.size else 0.0,
        })

    z = np.array([d['z_score'] for d in per_draw])
    counts_arr = np.array(counts, dtype=np.float64)
    empirical_var = float(counts_arr.var(ddof=1)) if counts_arr.size > 1 else 0.0
    collapse = bool(len(draws) >= 10 and ensemble.sigma2_E > 0 and empirical_var < 0.5 * ensemble.sigma2_E)

    return {
        'n_draws': len(draws),
        'n_firms': n,
        'delta': delta,
        'mu_E': ensemble.mu_E,
        'sigma2_E': ensemble.sigma2_E,
        'pmf_method': ensemble.method,
        'thresholds': ensemble.thresholds.tolist(),
        'model_bin_mass': ensemble.model_bin_mass.tolist(),
        'expected_isolated_fraction': ensemble.expected_isolated_fraction,
        'draws': per_draw,
        'max_violation_fraction': max(d['violation_fraction'] for d in per_draw),
        'draws_with_violation': float(np.mean([d['violation_fraction'] > 0 for d in per_draw])),
        'max_pmf_sup_distance': max(d['pmf_sup_distance'] for d in per_draw),
        'z_mean': float(z.mean()),
        'z_std': float(z.std(ddof=1)) if z.size > 1 else 0.0,
        'z_skewness': float(stats.skew(z)) if z.size > 2 and np.ptp(z) > 0 else 0.0,
        'empirical_edge_variance': empirical_var,
        'variance_collapse': collapse,
    }
