#!/usr/bin/env python3
"""
I2N 网络统计模块
密度、互惠性、平均聚类系数、四种度同配系数与度分布 CCDF。
默认不计自环。无法定义的统计量记为 None（JSON 中为 null），不记为 0。
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import sparse, stats

from sampler import SparseDigraph
from utils.logger import get_logger

logger = get_logger()

ASSORTATIVITY_PAIRS = (('in', 'in'), ('in', 'out'), ('out', 'in'), ('out', 'out'))


@dataclass
class NetworkSummary:
    n_nodes: int
    n_edges: int
    density: Optional[float]
    reciprocity: Optional[float]
    clustering: Optional[float]
    assortativity: Dict[str, Optional[float]] = field(default_factory=dict)
    include_self_loops: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _adjacency(g: SparseDigraph, include_self_loops: bool) -> sparse.csr_matrix:
    keep = np.ones(g.n_edges, dtype=bool) if include_self_loops else g.src != g.dst
    data = np.ones(int(keep.sum()))
    A = sparse.csr_matrix((data, (g.src[keep], g.dst[keep])), shape=(g.n_nodes, g.n_nodes))
    A.data[:] = 1.0
    return A


def _clustering(A: sparse.csr_matrix) -> Optional[float]:
    """无向简单投影上的平均局部聚类系数，投影度 < 2 的节点记 0"""
    n = A.shape[0]
    if n == 0:
        return None
    U = ((A + A.T) > 0).astype(np.float64).tocsr()
    U.setdiag(0)
    U.eliminate_zeros()
    deg = np.asarray(U.sum(axis=1)).ravel()
    triangles = np.asarray((U @ U).multiply(U).sum(axis=1)).ravel() / 2.0
    local = np.zeros(n)
    ok = deg >= 2
    local[ok] = 2.0 * triangles[ok] / (deg[ok] * (deg[ok] - 1.0))
    return float(local.mean())


def _assortativity(src: np.ndarray, dst: np.ndarray, deg: Dict[str, np.ndarray]) -> Dict[str, Optional[float]]:
    out: Dict[str, Optional[float]] = {}
    for x, y in ASSORTATIVITY_PAIRS:
        key = f"{x}_{y}"
        if src.size < 2:
            out[key] = None
            continue
        a, b = deg[x][src].astype(np.float64), deg[y][dst].astype(np.float64)
        if a.std() == 0 or b.std() == 0:
            out[key] = None
            continue
        out[key] = float(np.corrcoef(a, b)[0, 1])
    return out


def summarize(g: SparseDigraph, include_self_loops: bool = False) -> NetworkSummary:
    """
    网络汇总统计

    density = E/(N(N−1))；reciprocity = 反向边存在的边的比例；
    assortativity(x, y) = 边上 源节点 x 度 与 目标节点 y 度 的 Pearson 相关。
    """
    n = g.n_nodes
    A = _adjacency(g, include_self_loops)
    coo = A.tocoo()
    src, dst = coo.row, coo.col
    n_edges = int(A.nnz)

    if n >= 2:
        pairs = n * n if include_self_loops else n * (n - 1)
        density = n_edges / pairs
    else:
        density = None

    off = src != dst
    non_self = int(off.sum())
    if non_self:
        reciprocated = A.multiply(A.T).tocoo()
        mutual = int(np.count_nonzero(reciprocated.row != reciprocated.col))
        reciprocity = mutual / non_self
    else:
        reciprocity = None

    clustering = _clustering(A) if n_edges else None
    deg = {'out': np.asarray(A.sum(axis=1)).ravel(), 'in': np.asarray(A.sum(axis=0)).ravel()}
    summary = NetworkSummary(n, n_edges, density, reciprocity, clustering,
                             _assortativity(src, dst, deg), include_self_loops)
    logger.info(f"网络统计: N={n}, E={n_edges}, 密度={density}, 互惠={reciprocity}, 聚类={clustering}")
    return summary


def degree_ccdf(g: SparseDigraph, which: str = 'total', include_self_loops: bool = False) -> pd.DataFrame:
    """(degree, ccdf) 表：ccdf = P(D ≥ degree)，按度数升序"""
    if which not in ('in', 'out', 'total'):
        raise ValueError(f"未知度类型: {which}")
    if which == 'in':
        deg = g.in_degree(include_self_loops)
    elif which == 'out':
        deg = g.out_degree(include_self_loops)
    else:
        deg = g.in_degree(include_self_loops) + g.out_degree(include_self_loops)
    if deg.size == 0:
        return pd.DataFrame({'degree': np.array([], dtype=np.int64), 'ccdf': np.array([], dtype=np.float64)})
    values, counts = np.unique(deg, return_counts=True)
    at_least = counts[::-1].cumsum()[::-1]
    return pd.DataFrame({'degree': values.astype(np.int64), 'ccdf': at_least / deg.size})


def ccdf_powerlaw_fit(ccdf: pd.DataFrame, d_min: Optional[float] = None,
                      d_max: Optional[float] = None) -> Dict[str, Any]:
    """在 [d_min, d_max] 上对 log10 CCDF ~ log10 degree 做最小二乘"""
    frame = ccdf[ccdf['degree'] > 0]
    if d_min is not None:
        frame = frame[frame['degree'] >= d_min]
    if d_max is not None:
        frame = frame[frame['degree'] <= d_max]
    if len(frame) < 3:
        return {'slope': None, 'intercept': None, 'r2': None, 'n_points': int(len(frame)), 'decades': 0.0}
    x = np.log10(frame['degree'].to_numpy(dtype=np.float64))
    y = np.log10(frame['ccdf'].to_numpy(dtype=np.float64))
    fit = stats.linregress(x, y)
    return {
        'slope': float(fit.slope),
        'intercept': float(fit.intercept),
        'r2': float(fit.rvalue ** 2),
        'n_points': int(len(frame)),
        'decades': float(x.max() - x.min()),
    }
