#!/usr/bin/env python3
"""
I2N 引力模型模块

连边强度 x_ij = z λ_kl S_kl^κ (m_i m_j)^α，连边概率 p_ij = x_ij / (1 + x_ij)。
参数在对数坐标 ζ = log z、ℓ_kl = log λ_kl 下估计：
目标 (Σp − n_d)²，约束为各部门期望流入的相对误差带 |T_l − s_l| / s_l ≤ ε_g。

求解器：增广拉格朗日外层 + L-BFGS-B 内层（盒约束），解析梯度。
分箱模式下按 (部门, 规模分箱) 单元格对求和，单次评估 O(N_S² B²)。
"""

import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.optimize import brentq, minimize
from scipy.special import expit

from ingest import FirmPopulation, IOTable
from utils.errors import I2NError
from utils.logger import get_logger
from utils.parallel import run_ordered
from utils.rng import Stage, stream

logger = get_logger()

# 单个块的最大元素数（按行分片）
_BLOCK_ELEMENTS = 1 << 20
_RHO_INIT = 10.0
_RHO_MAX = 1e8


class GravityError(I2NError):
    """引力模型拟合错误"""
    stage = 'fit'


class ParamBounds(BaseModel):
    """参数盒约束"""

    z: Tuple[float, float] = (1e-8, 1e4)
    alpha: Tuple[float, float] = (0.05, 0.95)
    kappa: Tuple[float, float] = (0.01, 0.99)
    lam: Tuple[float, float] = (1e-6, 1e3)

    @field_validator('z', 'alpha', 'kappa', 'lam')
    @classmethod
    def validate_box(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        if not 0 < v[0] < v[1]:
            raise ValueError(f"无效的参数盒: {v}")
        return v


class FitConfig(BaseModel):
    """拟合配置"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    target_links: float = Field(gt=0, description="目标连边数 n_d")
    sector_tolerance: float = Field(default=0.05, gt=0, description="部门误差带 ε_g")
    bins: int = Field(default=0, ge=0, description="每部门分箱数 B，0 表示精确计算")
    max_iterations: int = Field(default=50, ge=1, description="外层迭代上限")
    inner_iterations: int = Field(default=500, ge=1, description="内层迭代上限")
    opt_tol: float = Field(default=1e-6, gt=0)
    feas_tol: float = Field(default=1e-6, gt=0)
    seed: int = 0
    bounds: ParamBounds = Field(default_factory=ParamBounds)
    initial_alpha: float = 0.5
    initial_kappa: float = 0.5
    fixed_lambda: Optional[np.ndarray] = Field(default=None, description="固定的 λ 矩阵（N_S×N_S）")
    warm_rounds: int = Field(default=8, ge=1)
    threads: int = 1


@dataclass
class GravityParams:
    """引力模型参数；lam 为 N_S×N_S 矩阵，S_kl = 0 处为 0（结构性缺失）"""

    z: float
    alpha: float
    kappa: float
    lam: np.ndarray

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64)

    def log_vector(self, pairs: Sequence[Tuple[int, int]]) -> np.ndarray:
        ell = np.array([np.log(self.lam[k, l]) for k, l in pairs]) if pairs else np.empty(0)
        return np.concatenate([[np.log(self.z), self.alpha, self.kappa], ell])

    @classmethod
    def from_log_vector(cls, u: np.ndarray, pairs: Sequence[Tuple[int, int]], n_sectors: int) -> 'GravityParams':
        lam = np.zeros((n_sectors, n_sectors))
        for q, (k, l) in enumerate(pairs):
            lam[k, l] = np.exp(u[3 + q])
        return cls(float(np.exp(u[0])), float(u[1]), float(u[2]), lam)

    def to_dict(self, io: IOTable) -> Dict[str, Any]:
        return {
            'z': self.z,
            'alpha': self.alpha,
            'kappa': self.kappa,
            'lambda': [{'k': io.sectors[k], 'l': io.sectors[l], 'value': float(self.lam[k, l])}
                       for k, l in io.active_pairs()],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], io: IOTable) -> 'GravityParams':
        lam = np.zeros((io.n_sectors, io.n_sectors))
        for entry in data.get('lambda', []):
            lam[io.index_of(entry['k']), io.index_of(entry['l'])] = float(entry['value'])
        return cls(float(data['z']), float(data['alpha']), float(data['kappa']), lam)


def intensity(m_i, m_j, k: int, l: int, params: GravityParams, io: IOTable):
    """连边强度 x_ij = z λ_kl S_kl^κ (m_i m_j)^α"""
    s_kl = io.max_norm[k, l]
    if s_kl == 0:
        prod = np.asarray(m_i, dtype=np.float64) * np.asarray(m_j, dtype=np.float64)
        return 0.0 if prod.ndim == 0 else np.zeros_like(prod)
    lam = params.lam[k, l] if params.lam.size else 0.0
    if not lam > 0:
        raise GravityError('MissingLambda', f"部门对 ({io.sectors[k]}, {io.sectors[l]}) 缺少 λ",
                           {'k': io.sectors[k], 'l': io.sectors[l]})
    return params.z * lam * s_kl ** params.kappa * (np.asarray(m_i) * np.asarray(m_j)) ** params.alpha


def link_probability(x):
    """p = x / (1 + x)"""
    x = np.asarray(x, dtype=np.float64)
    p = x / (1.0 + x)
    return float(p) if p.ndim == 0 else p


@dataclass
class SectorBins:
    """一个部门内的规模分箱（对数等宽）"""

    members: List[np.ndarray]
    count: np.ndarray
    centroid: np.ndarray
    low: np.ndarray
    high: np.ndarray
    mass: np.ndarray  # Σ m_i


class BinSummary:
    """(部门, 分箱) 单元格汇总：企业数、质心、规模和、Σ m^α 缓存"""

    def __init__(self, pop: FirmPopulation, n_bins: int):
        if n_bins < 1:
            raise ValueError(f"分箱数至少为 1: {n_bins}")
        self.n_bins = n_bins
        self._size = pop.size
        self._power_cache: Dict[float, List[np.ndarray]] = {}
        self.sectors: List[SectorBins] = [self._bin_sector(pop, k) for k in range(pop.n_sectors)]

    def _bin_sector(self, pop: FirmPopulation, k: int) -> SectorBins:
        members = pop.members(k)
        if members.size == 0:
            empty = np.empty(0)
            return SectorBins([], empty, empty, empty, empty, empty)
        logs = np.log(pop.size[members])
        lo, hi = logs.min(), logs.max()
        if hi - lo <= 0:
            slot = np.zeros(members.size, dtype=np.int64)
        else:
            edges = np.linspace(lo, hi, self.n_bins + 1)
            slot = np.clip(np.searchsorted(edges, logs, side='right') - 1, 0, self.n_bins - 1)
        groups = [members[slot == b] for b in range(self.n_bins) if np.any(slot == b)]
        sizes = [pop.size[g] for g in groups]
        return SectorBins(
            members=groups,
            count=np.array([g.size for g in groups], dtype=np.float64),
            centroid=np.array([s.mean() for s in sizes]),
            low=np.array([s.min() for s in sizes]),
            high=np.array([s.max() for s in sizes]),
            mass=np.array([s.sum() for s in sizes]),
        )

    @property
    def total_count(self) -> int:
        return int(sum(b.count.sum() for b in self.sectors))

    def power_sum(self, alpha: float) -> List[np.ndarray]:
        """每个单元格的 Σ m_i^α（按 α 缓存）"""
        key = float(alpha)
        if key not in self._power_cache:
            self._power_cache[key] = [np.array([np.sum(self._size[g] ** alpha) for g in b.members])
                                      for b in self.sectors]
        return self._power_cache[key]

    def jensen_gap(self, alpha: float) -> float:
        """用质心代替单元格内企业时 Σ m^α 的最大相对偏差"""
        gap = 0.0
        for bins, exact in zip(self.sectors, self.power_sum(alpha)):
            if bins.count.size:
                approx = bins.count * bins.centroid ** alpha
                gap = max(gap, float(np.max(np.abs(exact - approx) / exact)))
        return gap


@dataclass
class _Units:
    """一个部门的求和单元（精确模式下每个企业一个单元）"""

    count: np.ndarray
    log_size: np.ndarray
    mass: np.ndarray

    @property
    def n(self) -> int:
        return self.count.size


@dataclass
class GravityEvaluation:
    """一次目标/约束评估的结果"""

    objective: float
    sector_violations: np.ndarray
    gradient: np.ndarray
    expected_links: float
    inflow: np.ndarray
    relative_gap: np.ndarray
    links_gradient: np.ndarray
    inflow_jacobian: np.ndarray


class GravityModel:
    """预处理过的评估器，拟合过程中重复调用 evaluate(u)"""

    def __init__(self, pop: FirmPopulation, io: IOTable, bins: int = 0, threads: int = 1):
        if pop.n_sectors != io.n_sectors:
            raise GravityError('InvalidInput', "企业部门数与投入产出表不一致")
        self.io = io
        self.pop = pop
        self.threads = threads
        self.pairs = io.active_pairs()
        self.n_sectors = io.n_sectors
        self.n_params = 3 + len(self.pairs)
        self.pair_k = np.array([k for k, _ in self.pairs], dtype=np.int64)
        self.pair_l = np.array([l for _, l in self.pairs], dtype=np.int64)
        self.log_s = np.log(io.max_norm[self.pair_k, self.pair_l]) if self.pairs else np.empty(0)
        self.share = io.row_share[self.pair_k, self.pair_l] if self.pairs else np.empty(0)
        self.sector_sizes = pop.sector_sizes
        self.constrained = self.sector_sizes > 0

        self.summary: Optional[BinSummary] = None
        if bins > 0:
            self.summary = BinSummary(pop, bins)
            self.units = [_Units(b.count, np.log(b.centroid), b.mass) for b in self.summary.sectors]
        else:
            self.units = []
            for k in range(pop.n_sectors):
                m = pop.size[pop.members(k)]
                self.units.append(_Units(np.ones(m.size), np.log(m), m.copy()))

    def admissible_pairs(self) -> float:
        """可连边的有序企业对总数"""
        total = 0.0
        for k, l in self.pairs:
            a, b = self.units[k].count.sum(), self.units[l].count.sum()
            total += a * b - (a if k == l else 0.0)
        return total

    def _pair_terms(self, q: int, zeta: float, alpha: float, kappa: float, ell: float) -> np.ndarray:
        k, l = self.pairs[q]
        ua, ub = self.units[k], self.units[l]
        terms = np.zeros(6)
        if ua.n == 0 or ub.n == 0:
            return terms
        base = zeta + ell + kappa * self.log_s[q]
        rows = max(1, _BLOCK_ELEMENTS // ub.n)
        for start in range(0, ua.n, rows):
            stop = min(ua.n, start + rows)
            lsum = ua.log_size[start:stop, None] + ub.log_size[None, :]
            p = expit(base + alpha * lsum)
            pq = p * (1.0 - p)
            r0 = (p * ub.count).sum(axis=1)
            r1 = (pq * ub.count).sum(axis=1)
            r2 = (pq * lsum * ub.count).sum(axis=1)
            ca, ma = ua.count[start:stop], ua.mass[start:stop]
            if k == l:
                # 去掉同一单元内 i == j 的自配对
                local = np.arange(stop - start)
                idx = start + local
                r0 = r0 - p[local, idx]
                r1 = r1 - pq[local, idx]
                r2 = r2 - pq[local, idx] * lsum[local, idx]
            terms += [(ca * r0).sum(), (ma * r0).sum(), (ca * r1).sum(), (ca * r2).sum(),
                      (ma * r1).sum(), (ma * r2).sum()]
        return terms

    def evaluate(self, u: np.ndarray, target_links: float) -> GravityEvaluation:
        zeta, alpha, kappa = float(u[0]), float(u[1]), float(u[2])
        ell = u[3:]
        blocks = run_ordered(lambda q: self._pair_terms(q, zeta, alpha, kappa, float(ell[q])),
                             range(len(self.pairs)), self.threads)
        terms = np.array(blocks).reshape(-1, 6)
        P, F, D, Da, G, Ga = terms.T

        n_s = self.n_sectors
        links = float(P.sum())
        links_grad = np.concatenate([[D.sum(), Da.sum(), (D * self.log_s).sum()], D])

        inflow = np.bincount(self.pair_l, weights=self.share * F, minlength=n_s)
        jac = np.zeros((n_s, self.n_params))
        jac[:, 0] = np.bincount(self.pair_l, weights=self.share * G, minlength=n_s)
        jac[:, 1] = np.bincount(self.pair_l, weights=self.share * Ga, minlength=n_s)
        jac[:, 2] = np.bincount(self.pair_l, weights=self.share * G * self.log_s, minlength=n_s)
        jac[self.pair_l, 3 + np.arange(len(self.pairs))] = self.share * G

        gap = np.zeros(n_s)
        s = self.sector_sizes
        gap[self.constrained] = (inflow[self.constrained] - s[self.constrained]) / s[self.constrained]

        residual = links - target_links
        return GravityEvaluation(
            objective=residual ** 2,
            sector_violations=np.abs(gap),
            gradient=2.0 * residual * links_grad,
            expected_links=links,
            inflow=inflow,
            relative_gap=gap,
            links_gradient=links_grad,
            inflow_jacobian=jac,
        )

    def box(self, cfg: FitConfig) -> Tuple[np.ndarray, np.ndarray]:
        b = cfg.bounds
        n = len(self.pairs)
        lo = np.concatenate([[np.log(b.z[0]), b.alpha[0], b.kappa[0]], np.full(n, np.log(b.lam[0]))])
        hi = np.concatenate([[np.log(b.z[1]), b.alpha[1], b.kappa[1]], np.full(n, np.log(b.lam[1]))])
        if cfg.fixed_lambda is not None:
            fixed = self.fixed_ell(cfg)
            lo[3:] = fixed
            hi[3:] = fixed
        return lo, hi

    def fixed_ell(self, cfg: FitConfig) -> np.ndarray:
        lam = np.asarray(cfg.fixed_lambda, dtype=np.float64)
        values = lam[self.pair_k, self.pair_l]
        missing = np.flatnonzero(~(values > 0))
        if missing.size:
            k, l = self.pairs[missing[0]]
            raise GravityError('MissingLambda', f"固定 λ 缺少部门对 ({self.io.sectors[k]}, {self.io.sectors[l]})",
                               {'k': self.io.sectors[k], 'l': self.io.sectors[l]})
        return np.log(values)


def objective_and_constraints(params: GravityParams, pop: FirmPopulation, io: IOTable,
                              cfg: FitConfig) -> GravityEvaluation:
    """
    评估目标、部门违背量与梯度

    gradient 是目标对 (ζ, α, κ, ℓ_kl...) 的梯度，ℓ 按 io.active_pairs() 的顺序排列。
    """
    model = GravityModel(pop, io, cfg.bins, cfg.threads)
    return model.evaluate(params.log_vector(model.pairs), cfg.target_links)


def _bisect_zeta(model: GravityModel, u: np.ndarray, target: float, lo: float, hi: float) -> float:
    """在 [lo, hi] 上二分 ζ 使期望连边数等于 target"""
    def excess(zeta: float) -> float:
        v = u.copy()
        v[0] = zeta
        return model.evaluate(v, target).expected_links - target

    f_lo, f_hi = excess(lo), excess(hi)
    if f_lo > 0 or f_hi < 0:
        raise GravityError('BisectionFailed', f"z 的区间内无法达到目标连边数 {target:.6g}",
                           {'links_at_z_min': f_lo + target, 'links_at_z_max': f_hi + target})
    if f_lo == 0:
        return lo
    if f_hi == 0:
        return hi
    return brentq(excess, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)


def warm_start(pop: FirmPopulation, io: IOTable, cfg: FitConfig,
               model: Optional[GravityModel] = None) -> GravityParams:
    """
    热启动：按列调整 λ 使期望流入份额对齐部门规模份额，再二分 z 命中目标连边数

    Raises:
        GravityError: InvalidTarget / BisectionFailed
    """
    model = model or GravityModel(pop, io, cfg.bins, cfg.threads)
    capacity = model.admissible_pairs()
    if not cfg.target_links < capacity:
        raise GravityError('InvalidTarget', f"目标连边数 {cfg.target_links:.6g} 不小于可连边对数 {capacity:.6g}",
                           {'target_links': cfg.target_links, 'admissible_pairs': capacity})

    lo, hi = model.box(cfg)
    u = np.zeros(model.n_params)
    u[1] = np.clip(cfg.initial_alpha, lo[1], hi[1])
    u[2] = np.clip(cfg.initial_kappa, lo[2], hi[2])
    fixed = cfg.fixed_lambda is not None
    if fixed:
        u[3:] = model.fixed_ell(cfg)
    u[0] = _bisect_zeta(model, u, cfg.target_links, lo[0], hi[0])
    if fixed or not model.pairs:
        return GravityParams.from_log_vector(u, model.pairs, model.n_sectors)

    s = model.sector_sizes
    share_s = s / s.sum()
    populated = np.array([model.units[k].n > 0 and model.units[l].n > 0 for k, l in model.pairs])
    for round_ in range(cfg.warm_rounds):
        ev = model.evaluate(u, cfg.target_links)
        total = ev.inflow.sum()
        if total <= 0:
            break
        share_t = ev.inflow / total
        ok = model.constrained & (share_t > 0)
        factor = np.zeros(model.n_sectors)
        factor[ok] = np.log(share_s[ok] / share_t[ok])
        u[3:] += factor[model.pair_l]
        # 几何均值归一到 1，整体尺度交给 z
        if populated.any():
            u[3:] -= u[3:][populated].mean()
        u[3:] = np.clip(u[3:], lo[3:], hi[3:])
        u[0] = _bisect_zeta(model, u, cfg.target_links, lo[0], hi[0])
        drift = float(np.max(np.abs(share_t[ok] - share_s[ok]))) if ok.any() else 0.0
        logger.debug(f"热启动第 {round_ + 1} 轮: 份额偏差 {drift:.3e}")
        if drift < 1e-9:
            break

    return GravityParams.from_log_vector(u, model.pairs, model.n_sectors)


def calibrate_multipliers(pop: FirmPopulation, io: IOTable, z: float, alpha: float, kappa: float,
                          bounds: Optional[ParamBounds] = None, bins: int = 0,
                          threads: int = 1) -> Tuple[GravityParams, float]:
    """
    给定 (z, α, κ)，逐列求 λ_·l（同列取同一值）使期望流入 T_l 恰好等于 s_l

    T_l 只依赖第 l 列的 λ，所以各列可以独立求根。用于生成模型自洽的合成经济体。

    Returns:
        (参数, 对应的期望连边数)
    """
    bounds = bounds or ParamBounds()
    model = GravityModel(pop, io, bins, threads)
    u = np.zeros(model.n_params)
    u[:3] = [np.log(z), alpha, kappa]
    s = model.sector_sizes
    log_lo, log_hi = np.log(bounds.lam[0]), np.log(bounds.lam[1])

    for l in range(model.n_sectors):
        column = np.flatnonzero(model.pair_l == l)
        if column.size == 0 or not model.constrained[l]:
            continue

        def gap(c: float) -> float:
            v = u.copy()
            v[3 + column] = c
            return model.evaluate(v, 1.0).inflow[l] - s[l]

        g_lo, g_hi = gap(log_lo), gap(log_hi)
        if g_lo > 0 or g_hi < 0:
            raise GravityError('BisectionFailed', f"部门 {io.sectors[l]} 的流入无法在 λ 区间内对齐",
                               {'sector': io.sectors[l]})
        u[3 + column] = brentq(gap, log_lo, log_hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)

    links = model.evaluate(u, 1.0).expected_links
    return GravityParams.from_log_vector(u, model.pairs, model.n_sectors), links


@dataclass
class FitReport:
    """拟合报告"""

    status: str
    iterations: int
    outer_iterations: int
    objective: float
    expected_links: float
    target_links: float
    max_violation: float
    worst_sector: Optional[str]
    penalty: float
    wall_time: float = 0.0
    binning_gap: Optional[float] = None

    def to_dict(self, include_timing: bool = False) -> Dict[str, Any]:
        data = {
            'status': self.status,
            'iterations': self.iterations,
            'outer_iterations': self.outer_iterations,
            'objective': self.objective,
            'expected_links': self.expected_links,
            'target_links': self.target_links,
            'max_violation': self.max_violation,
            'worst_sector': self.worst_sector,
            'penalty': self.penalty,
            'binning_gap': self.binning_gap,
        }
        if include_timing:
            data['wall_time'] = self.wall_time
        return data


def _projected_gradient_norm(u: np.ndarray, grad: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> float:
    return float(np.max(np.abs(u - np.clip(u - grad, lo, hi)))) if u.size else 0.0


def fit(pop: FirmPopulation, io: IOTable, cfg: FitConfig,
        initial: Optional[GravityParams] = None) -> Tuple[GravityParams, FitReport]:
    """
    求解引力模型 NLP

    Returns:
        (参数, 拟合报告)；外层迭代用尽时 status='max_iterations'，返回违背量最小的迭代点

    Raises:
        GravityError: Infeasible（惩罚系数封顶后部门带仍无法满足）
    """
    started = time.perf_counter()
    model = GravityModel(pop, io, cfg.bins, cfg.threads)
    params0 = initial if initial is not None else warm_start(pop, io, cfg, model)
    lo, hi = model.box(cfg)
    u = np.clip(params0.log_vector(model.pairs), lo, hi)

    n_d = cfg.target_links
    eps = cfg.sector_tolerance
    mask = model.constrained
    s = model.sector_sizes
    n_s = model.n_sectors
    mu_p = np.zeros(n_s)
    mu_m = np.zeros(n_s)
    rho = _RHO_INIT

    def scaled_parts(ev: GravityEvaluation):
        resid = (ev.expected_links - n_d) / n_d
        grad = 2.0 * resid * ev.links_gradient / n_d
        dh = np.zeros_like(ev.inflow_jacobian)
        dh[mask] = ev.inflow_jacobian[mask] / s[mask, None]
        return resid ** 2, grad, dh

    def excess_of(ev: GravityEvaluation) -> np.ndarray:
        out = np.maximum(0.0, ev.sector_violations - eps)
        out[~mask] = 0.0
        return out

    def lagrangian(v: np.ndarray) -> Tuple[float, np.ndarray]:
        ev = model.evaluate(v, n_d)
        f, grad, dh = scaled_parts(ev)
        h = ev.relative_gap
        ap = np.where(mask, np.maximum(0.0, mu_p + rho * (h - eps)), 0.0)
        am = np.where(mask, np.maximum(0.0, mu_m + rho * (-h - eps)), 0.0)
        value = f + ((ap ** 2 - mu_p ** 2).sum() + (am ** 2 - mu_m ** 2).sum()) / (2.0 * rho)
        return value, grad + (ap - am) @ dh

    ev = model.evaluate(u, n_d)
    f, grad, _ = scaled_parts(ev)
    excess = excess_of(ev)
    best = (float(excess.max()) if excess.size else 0.0, f, u.copy(), ev)

    def finish(status: str, outer: int, inner: int) -> Tuple[GravityParams, FitReport]:
        _, _, u_best, ev_best = best
        params = GravityParams.from_log_vector(u_best, model.pairs, n_s)
        worst = int(np.argmax(np.where(mask, ev_best.sector_violations, -1.0))) if mask.any() else None
        report = FitReport(
            status=status,
            iterations=inner,
            outer_iterations=outer,
            objective=float(ev_best.objective),
            expected_links=ev_best.expected_links,
            target_links=n_d,
            max_violation=float(ev_best.sector_violations[mask].max()) if mask.any() else 0.0,
            worst_sector=io.sectors[worst] if worst is not None else None,
            penalty=rho,
            wall_time=time.perf_counter() - started,
            binning_gap=model.summary.jensen_gap(params.alpha) if model.summary is not None else None,
        )
        logger.info(f"拟合结束 [{status}]: z={params.z:.4g}, α={params.alpha:.4f}, κ={params.kappa:.4f}, "
                    f"期望连边 {report.expected_links:.1f}/{n_d:.1f}, 最大部门偏差 {report.max_violation:.4f}, "
                    f"内层迭代 {inner}, 用时 {report.wall_time:.2f}s")
        return params, report

    # 热启动已是稳定点则直接返回
    if best[0] <= cfg.feas_tol and (_projected_gradient_norm(u, grad, lo, hi) <= cfg.opt_tol
                                    or f <= cfg.opt_tol ** 2):
        return finish('converged', 0, 0)

    inner_total = 0
    prev_excess = np.inf
    stalled = 0
    for outer in range(1, cfg.max_iterations + 1):
        result = minimize(lagrangian, u, jac=True, method='L-BFGS-B', bounds=list(zip(lo, hi)),
                          options={'maxiter': cfg.inner_iterations, 'gtol': cfg.opt_tol * 0.1,
                                   'ftol': 1e-15, 'maxfun': cfg.inner_iterations * 4})
        u = np.clip(result.x, lo, hi)
        inner_total += int(result.nit)

        ev = model.evaluate(u, n_d)
        f, grad, dh = scaled_parts(ev)
        h = ev.relative_gap
        excess = excess_of(ev)
        max_excess = float(excess.max()) if excess.size else 0.0
        if (max_excess, f) < best[:2]:
            best = (max_excess, f, u.copy(), ev)

        mu_p = np.where(mask, np.maximum(0.0, mu_p + rho * (h - eps)), 0.0)
        mu_m = np.where(mask, np.maximum(0.0, mu_m + rho * (-h - eps)), 0.0)
        pg = _projected_gradient_norm(u, grad + (mu_p - mu_m) @ dh, lo, hi)
        logger.debug(f"外层 {outer}: 目标 {f:.3e}, 最大超出 {max_excess:.3e}, 投影梯度 {pg:.3e}, ρ={rho:.1e}")

        if max_excess <= cfg.feas_tol and (pg <= cfg.opt_tol or f <= cfg.opt_tol ** 2):
            best = (max_excess, f, u.copy(), ev)
            return finish('converged', outer, inner_total)

        if max_excess > 0.25 * prev_excess:
            if rho >= _RHO_MAX:
                stalled += 1
            rho = min(rho * 10.0, _RHO_MAX)
        else:
            stalled = 0
        prev_excess = max_excess

        if stalled >= 3 and max_excess > 10 * cfg.feas_tol:
            worst = int(np.argmax(excess))
            raise GravityError('Infeasible', f"部门带无法满足，最差部门 {io.sectors[worst]} 超出 {excess[worst]:.4g}",
                               {'worst_sector': io.sectors[worst], 'violation': float(ev.sector_violations[worst]),
                                'tolerance': eps})

    logger.warning(f"达到外层迭代上限 {cfg.max_iterations}，返回违背量最小的迭代点")
    return finish('max_iterations', cfg.max_iterations, inner_total)


@dataclass
class BootstrapResult:
    """bootstrap 结果：各复制的参数与汇总统计"""

    replicates: List[GravityParams]
    failed: List[Dict[str, Any]]
    sectors: List[str]
    pairs: List[Tuple[int, int]] = field(default_factory=list)

    def _stack(self, name: str) -> np.ndarray:
        return np.array([getattr(p, name) for p in self.replicates])

    def summary(self) -> Dict[str, Any]:
        if not self.replicates:
            return {}
        out: Dict[str, Any] = {}
        ddof = 1 if len(self.replicates) > 1 else 0
        for name in ('z', 'alpha', 'kappa'):
            values = self._stack(name)
            out[name] = {'mean': float(values.mean()), 'std': float(values.std(ddof=ddof))}
        lam = np.array([[p.lam[k, l] for k, l in self.pairs] for p in self.replicates])
        out['lambda'] = [{'k': self.sectors[k], 'l': self.sectors[l], 'mean': float(lam[:, q].mean()),
                          'std': float(lam[:, q].std(ddof=ddof))} for q, (k, l) in enumerate(self.pairs)]
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            'n_replicates': len(self.replicates) + sum(1 for f in self.failed if not f.get('kept')),
            'n_failed': sum(1 for f in self.failed if not f.get('kept')),
            'failed': self.failed,
            'summary': self.summary(),
        }


def bootstrap_fit(pop: FirmPopulation, io: IOTable, cfg: FitConfig, n_replicates: int,
                  subsample: Optional[int] = None, seed: int = 0) -> BootstrapResult:
    """
    bootstrap：每次复制独立抽取企业子集并重新拟合

    子集按最大企业重新归一化规模，目标连边数按企业数等比例缩放（平均度不变）。
    subsample 为 None/0 或不小于总数时使用全体企业。
    """
    if n_replicates < 2:
        raise GravityError('InvalidReplicates', f"bootstrap 至少需要 2 次复制: {n_replicates}", stage='bootstrap')
    n_firms = pop.n_firms
    n_sub = n_firms if not subsample or subsample >= n_firms else int(subsample)
    sub_cfg = cfg.model_copy(update={'target_links': cfg.target_links * n_sub / n_firms, 'threads': 1})

    def replicate(r: int):
        if n_sub == n_firms:
            sample = pop
        else:
            rng = stream(seed, Stage.BOOTSTRAP, r)
            sample = pop.subset(np.sort(rng.choice(n_firms, size=n_sub, replace=False)))
        try:
            params, report = fit(sample, io, sub_cfg)
            return r, params, report, None
        except GravityError as e:
            return r, None, None, e

    logger.info(f"bootstrap 开始: {n_replicates} 次复制, 每次 {n_sub} 家企业")
    outcomes = run_ordered(replicate, range(n_replicates), cfg.threads)

    replicates, failed = [], []
    for r, params, report, err in outcomes:
        if err is not None:
            failed.append({'replicate': r, 'code': err.code, 'message': err.message})
            logger.warning(f"复制 {r} 拟合失败: {err}")
        else:
            replicates.append(params)
            if report.status != 'converged':
                failed.append({'replicate': r, 'code': 'MaxIterations', 'message': report.status, 'kept': True})
    return BootstrapResult(replicates, failed, io.sectors, io.active_pairs())
