#!/usr/bin/env python3
"""
I2N 权重模块

在闭合后的支撑上求最小能量凸 QP：
    min Σ w_ij²
    s.t. 行随机、支撑外为 0、ε₀ ≤ w_ij ≤ 1、
         企业带 |(Wᵀm)_j − m_j| ≤ δ m_j、部门带 |ŝ_ℓ − s_ℓ| ≤ ε_w s_ℓ、
         (1/N)Σw_ii ≤ η₁、(1/N)Σw_ii² ≤ η₂

求解：全局约束上的对偶上升（Nesterov 动量 + 梯度重启，对角预条件步长），
每次迭代逐行精确求解带上下界的单纯形子问题，单次迭代 O(E)。
"""

from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from sampler import SparseDigraph
from utils.errors import I2NError
from utils.logger import get_logger
from utils.rng import Stage, stream

logger = get_logger()

FAMILIES = ('firm_band', 'sector_band', 'self_mean', 'self_square')


class WeightsError(I2NError):
    """权重阶段错误"""
    stage = 'weight'


@dataclass
class WeightProgram:
    """最小能量权重问题"""

    graph: SparseDigraph
    firm_band: float = 0.10
    sector_band: float = 0.10
    self_mean_cap: float = 0.10
    self_sq_cap: float = 0.10
    floor: float = 1e-6
    tol: float = 1e-8
    max_iter: int = 20000

    def __post_init__(self):
        for name in ('firm_band', 'sector_band', 'self_mean_cap', 'self_sq_cap', 'floor', 'tol'):
            if not getattr(self, name) > 0:
                raise WeightsError('InvalidProgram', f"{name} 必须为正: {getattr(self, name)}", {'field': name})
        if self.graph.n_nodes and np.any(self.graph.out_degree() == 0):
            row = int(np.flatnonzero(self.graph.out_degree() == 0)[0])
            raise WeightsError('InvalidProgram', f"企业 {int(self.graph.firm_id[row])} 没有出边，无法行随机",
                               {'row': row})

    @property
    def sizes(self) -> np.ndarray:
        return self.graph.size

    @property
    def sector_sizes(self) -> np.ndarray:
        return np.bincount(self.graph.sector, weights=self.graph.size, minlength=len(self.graph.sector_labels))

    def inflated(self, factor: float) -> 'WeightProgram':
        """所有误差带乘以同一因子"""
        return replace(self, firm_band=self.firm_band * factor, sector_band=self.sector_band * factor,
                       self_mean_cap=self.self_mean_cap * factor, self_sq_cap=self.self_sq_cap * factor)


@dataclass
class WeightedNetwork:
    """行随机加权网络；weights 与 graph 的边一一对应（按 (src, dst) 排序）"""

    graph: SparseDigraph
    weights: np.ndarray
    iterations: int = 0
    duals: Optional[np.ndarray] = None
    max_violation: float = 0.0

    def to_csr(self) -> sparse.csr_matrix:
        return self.graph.to_csr(self.weights)

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.graph.src, weights=self.weights, minlength=self.graph.n_nodes)

    def inflow(self) -> np.ndarray:
        """(Wᵀm)_j"""
        g = self.graph
        return np.bincount(g.dst, weights=g.size[g.src] * self.weights, minlength=g.n_nodes)

    def sector_totals(self) -> np.ndarray:
        """ŝ_ℓ = Σ_i m_i Σ_{j∈ℓ} w_ij"""
        g = self.graph
        return np.bincount(g.sector[g.dst], weights=g.size[g.src] * self.weights,
                           minlength=len(g.sector_labels))

    def self_weights(self) -> np.ndarray:
        g = self.graph
        out = np.zeros(g.n_nodes)
        loop = g.src == g.dst
        out[g.src[loop]] = self.weights[loop]
        return out


def project_capped_simplex(y: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """
    欧氏投影到 {x : Σx = 1, lo ≤ x ≤ hi}，排序求断点，O(d log d)
    """
    y = np.asarray(y, dtype=np.float64)
    d = y.size
    if d == 0 or not (d * lo <= 1.0 + 1e-15 and d * hi >= 1.0 - 1e-15):
        raise WeightsError('InvalidProgram', f"上下界 [{lo}, {hi}] 下 {d} 维单纯形为空")
    # f(τ) = Σ clip(y − τ, lo, hi) 非增分段线性，断点在 y − lo 与 y − hi
    points = np.unique(np.concatenate([y - lo, y - hi]))
    values = np.clip(y[None, :] - points[:, None], lo, hi).sum(axis=1)
    # values 非增；找 values[i] ≥ 1 ≥ values[i+1]
    i = int(np.searchsorted(-values, -1.0, side='right')) - 1
    i = min(max(i, 0), points.size - 1)
    if i + 1 < points.size and values[i] != values[i + 1]:
        tau = points[i] + (values[i] - 1.0) * (points[i + 1] - points[i]) / (values[i] - values[i + 1])
    else:
        tau = points[i]
    x = np.clip(y - tau, lo, hi)
    # 数值收尾：在自由分量上摊平剩余误差
    free = (x > lo) & (x < hi)
    if free.any():
        x[free] += (1.0 - x.sum()) / free.sum()
    return x


class _Structure:
    """对偶上升的固定结构：边数组、约束系数、预条件步长"""

    def __init__(self, prog: WeightProgram):
        g = prog.graph
        self.prog = prog
        self.n = g.n_nodes
        self.src, self.dst = g.src, g.dst
        self.m = g.size
        self.sector = g.sector
        self.n_sectors = len(g.sector_labels)
        self.s = prog.sector_sizes
        self.sector_mask = self.s > 0
        self.diag = g.src == g.dst
        self.starts = np.searchsorted(g.src, np.arange(self.n))
        self.ratio_firm = self.m[self.src] / self.m[self.dst]
        s_dst = self.s[self.sector[self.dst]]
        self.ratio_sector = self.m[self.src] / s_dst

        n, S = self.n, self.n_sectors
        self.slices = {
            'firm_up': slice(0, n), 'firm_lo': slice(n, 2 * n),
            'sector_up': slice(2 * n, 2 * n + S), 'sector_lo': slice(2 * n + S, 2 * n + 2 * S),
            'self_mean': slice(2 * n + 2 * S, 2 * n + 2 * S + 1),
            'self_square': slice(2 * n + 2 * S + 1, 2 * n + 2 * S + 2),
        }
        self.n_dual = 2 * n + 2 * S + 2

        # Gershgorin：|A||A|ᵀ1 的行和
        e = 2.0 * self.ratio_firm + 2.0 * self.ratio_sector + self.diag / max(n, 1)
        h_firm = np.bincount(self.dst, weights=self.ratio_firm * e, minlength=n)
        h_sector = np.bincount(self.sector[self.dst], weights=self.ratio_sector * e, minlength=S)
        h_mean = float(np.sum(e[self.diag])) / max(n, 1)
        step = np.zeros(self.n_dual)
        step[self.slices['firm_up']] = 2.0 / h_firm
        step[self.slices['firm_lo']] = 2.0 / h_firm
        sec_step = np.where(self.sector_mask, 2.0 / np.where(h_sector > 0, h_sector, 1.0), 0.0)
        step[self.slices['sector_up']] = sec_step
        step[self.slices['sector_lo']] = sec_step
        step[self.slices['self_mean']] = 2.0 / h_mean if h_mean > 0 else 0.0
        step[self.slices['self_square']] = 0.5 / h_mean if h_mean > 0 else 0.0
        self.step = step

    def coefficients(self, y: np.ndarray, prog: WeightProgram) -> Tuple[np.ndarray, np.ndarray]:
        """行子问题 min Σ c w² + b w 的 (b, c)"""
        sl = self.slices
        n = max(self.n, 1)
        firm = y[sl['firm_up']] - y[sl['firm_lo']]
        sector = y[sl['sector_up']] - y[sl['sector_lo']]
        b = firm[self.dst] * self.ratio_firm + sector[self.sector[self.dst]] * self.ratio_sector
        b = b + self.diag * (y[sl['self_mean']][0] / n)
        c = 1.0 + self.diag * (y[sl['self_square']][0] / n)
        return b, c

    def constraints(self, w: np.ndarray, prog: WeightProgram) -> np.ndarray:
        """缩放后的约束值 g(w) ≤ 0"""
        sl = self.slices
        out = np.zeros(self.n_dual)
        inflow = np.bincount(self.dst, weights=self.m[self.src] * w, minlength=self.n)
        out[sl['firm_up']] = (inflow - (1.0 + prog.firm_band) * self.m) / self.m
        out[sl['firm_lo']] = ((1.0 - prog.firm_band) * self.m - inflow) / self.m
        totals = np.bincount(self.sector, weights=inflow, minlength=self.n_sectors)
        safe_s = np.where(self.sector_mask, self.s, 1.0)
        out[sl['sector_up']] = np.where(self.sector_mask, (totals - (1.0 + prog.sector_band) * self.s) / safe_s, 0.0)
        out[sl['sector_lo']] = np.where(self.sector_mask, ((1.0 - prog.sector_band) * self.s - totals) / safe_s, 0.0)
        w_ii = w[self.diag]
        out[sl['self_mean']] = w_ii.sum() / max(self.n, 1) - prog.self_mean_cap
        out[sl['self_square']] = (w_ii ** 2).sum() / max(self.n, 1) - prog.self_sq_cap
        return out

    def family_violation(self, g: np.ndarray) -> Dict[str, float]:
        sl = self.slices
        pos = np.maximum(g, 0.0)
        return {
            'firm_band': float(max(pos[sl['firm_up']].max(initial=0.0), pos[sl['firm_lo']].max(initial=0.0))),
            'sector_band': float(max(pos[sl['sector_up']].max(initial=0.0), pos[sl['sector_lo']].max(initial=0.0))),
            'self_mean': float(pos[sl['self_mean']][0]),
            'self_square': float(pos[sl['self_square']][0]),
        }

    def solve_rows(self, b: np.ndarray, c: np.ndarray, tau0: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        """
        每行求 τ 使 Σ_j clip((τ − b_j)/(2c_j), ε₀, 1) = 1

        向量化的带保护 Newton（失败时二分），最后在自由集上精确求 τ。
        """
        floor = self.prog.floor
        starts = self.starts
        row = self.src
        inv = 0.5 / c
        lo = np.minimum.reduceat(b + 2.0 * c * floor, starts)
        hi = np.maximum.reduceat(b + 2.0 * c, starts)
        tau = np.clip(tau0, lo, hi) if tau0 is not None else 0.5 * (lo + hi)

        for _ in range(200):
            raw = (tau[row] - b) * inv
            w = np.clip(raw, floor, 1.0)
            gap = np.add.reduceat(w, starts) - 1.0
            if np.max(np.abs(gap)) <= 1e-12:
                break
            free = (raw > floor) & (raw < 1.0)
            slope = np.add.reduceat(np.where(free, inv, 0.0), starts)
            lo = np.where(gap < 0, tau, lo)
            hi = np.where(gap > 0, tau, hi)
            with np.errstate(divide='ignore', invalid='ignore'):
                newton = tau - gap / slope
            bad = ~np.isfinite(newton) | (newton <= lo) | (newton >= hi)
            tau = np.where(gap == 0, tau, np.where(bad, 0.5 * (lo + hi), newton))

        # 自由集上精确求 τ，保证行和误差在机器精度量级
        raw = (tau[row] - b) * inv
        free = (raw > floor) & (raw < 1.0)
        clipped = np.where(free, 0.0, np.clip(raw, floor, 1.0))
        denom = np.add.reduceat(np.where(free, inv, 0.0), starts)
        numer = 1.0 - np.add.reduceat(clipped, starts) + np.add.reduceat(np.where(free, b * inv, 0.0), starts)
        with np.errstate(divide='ignore', invalid='ignore'):
            exact = np.where(denom > 0, numer / denom, tau)
        raw_exact = (exact[row] - b) * inv
        same_pattern = np.logical_and.reduceat(free == ((raw_exact > floor) & (raw_exact < 1.0)), starts)
        tau = np.where(same_pattern, exact, tau)
        w = np.clip((tau[row] - b) * inv, floor, 1.0)
        return w, tau


@dataclass
class _DualResult:
    weights: np.ndarray
    duals: np.ndarray
    iterations: int
    converged: bool
    violation: float
    families: Dict[str, float] = field(default_factory=dict)


def _dual_ascent(prog: WeightProgram, y0: Optional[np.ndarray] = None,
                 max_iter: Optional[int] = None) -> _DualResult:
    st = _Structure(prog)
    max_iter = prog.max_iter if max_iter is None else max_iter
    y = np.zeros(st.n_dual) if y0 is None else np.maximum(0.0, np.asarray(y0, dtype=np.float64))
    y_prev = y.copy()
    tau = None
    t = 1.0
    w = np.empty(0)
    g = np.zeros(st.n_dual)
    violation = np.inf

    for it in range(max_iter + 1):
        beta = (t - 1.0) / (t + 2.0)
        v = np.maximum(0.0, y + beta * (y - y_prev))
        b, c = st.coefficients(v, prog)
        w, tau = st.solve_rows(b, c, tau)
        g = st.constraints(w, prog)
        violation = float(np.max(g, initial=0.0))
        slack = float(np.max(v * np.abs(g), initial=0.0))
        if violation <= prog.tol and slack <= prog.tol:
            logger.debug(f"对偶上升收敛: 迭代 {it}, 最大违背 {violation:.2e}, 互补松弛 {slack:.2e}")
            return _DualResult(w, v, it, True, violation, st.family_violation(g))
        y_new = np.maximum(0.0, v + st.step * g)
        # 动量方向与梯度相反时重启
        if np.dot(g, y_new - y) < 0:
            t = 1.0
        else:
            t += 1.0
        y_prev, y = y, y_new

    return _DualResult(w, y, max_iter, False, violation, st.family_violation(g))


def _linear_feasible_point(prog: WeightProgram) -> Optional[np.ndarray]:
    """
    线性约束族（行随机、上下界、企业带、部门带、自环均值）的可行点，取 Σw_ii 最小者

    HiGHS 判定不可行时返回 None。
    """
    g = prog.graph
    n, n_edges = g.n_nodes, g.n_edges
    n_sectors = len(g.sector_labels)
    cols = np.arange(n_edges)
    m = g.size
    s = prog.sector_sizes
    diag = (g.src == g.dst).astype(np.float64)

    rows_eq = sparse.csr_matrix((np.ones(n_edges), (g.src, cols)), shape=(n, n_edges))
    inflow = sparse.csr_matrix((m[g.src], (g.dst, cols)), shape=(n, n_edges))
    sector = sparse.csr_matrix((m[g.src], (g.sector[g.dst], cols)), shape=(n_sectors, n_edges))
    mean = sparse.csr_matrix(diag / max(n, 1))
    A_ub = sparse.vstack([inflow, -inflow, sector, -sector, mean], format='csr')
    b_ub = np.concatenate([(1.0 + prog.firm_band) * m, -(1.0 - prog.firm_band) * m,
                           (1.0 + prog.sector_band) * s, -(1.0 - prog.sector_band) * s, [prog.self_mean_cap]])

    res = linprog(diag, A_ub=A_ub, b_ub=b_ub, A_eq=rows_eq, b_eq=np.ones(n),
                  bounds=(prog.floor, 1.0), method='highs')
    if res.status == 2:
        return None
    if not res.success:
        logger.warning(f"可行性 LP 未正常结束: {res.message}")
        return None
    return res.x


def is_feasible(prog: WeightProgram) -> bool:
    """
    线性约束族由 LP 精确判定；自环平方上限在 Σw_ii 最小的可行点上检验
    """
    w = _linear_feasible_point(prog)
    if w is None:
        return False
    w_ii = w[prog.graph.src == prog.graph.dst]
    return float((w_ii ** 2).sum()) / max(prog.graph.n_nodes, 1) <= prog.self_sq_cap * (1.0 + 1e-9)


def _inflation_factor(prog: WeightProgram, rel_tol: float = 1e-6) -> float:
    """使问题可行的最小公共放大因子（倍增后二分）"""
    if is_feasible(prog):
        return 1.0
    lo, hi = 1.0, 2.0
    for _ in range(60):
        if is_feasible(prog.inflated(hi)):
            break
        lo, hi = hi, hi * 2.0
    else:
        return float('inf')
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if is_feasible(prog.inflated(mid)):
            hi = mid
        else:
            lo = mid
    return hi


def solve_weights(prog: WeightProgram, init_seed: Optional[int] = None) -> WeightedNetwork:
    """
    求最小能量权重

    Args:
        init_seed: 不为 None 时用随机初始对偶变量（用于唯一性检查）

    Raises:
        WeightsError: Infeasible（报告违背最严重的约束族和恢复可行所需的最小带宽放大因子）；
            MaxIterations（问题可行但对偶上升在 max_iter 内未收敛）
    """
    y0 = None
    if init_seed is not None:
        y0 = stream(init_seed, Stage.WEIGHTS).uniform(0.0, 1.0, size=_Structure(prog).n_dual)
    result = _dual_ascent(prog, y0)
    if not result.converged:
        family = max(result.families, key=result.families.get)
        factor = _inflation_factor(prog)
        if factor <= 1.0:
            raise WeightsError('MaxIterations', f"对偶上升 {result.iterations} 次未收敛（最大违背 {result.violation:.3e}，"
                                                f"{family}），问题可行，可增大 qp_max_iter",
                               {'family': family, 'violations': result.families, 'violation': result.violation,
                                'iterations': result.iterations})
        raise WeightsError('Infeasible', f"权重问题不可行：{family} 违背 {result.families[family]:.3e}，"
                                         f"带宽需放大到 {factor:.4g} 倍",
                           {'family': family, 'violations': result.families, 'inflation': factor})
    net = WeightedNetwork(prog.graph, result.weights, result.iterations, result.duals, result.violation)
    logger.info(f"权重求解完成: {prog.graph.n_edges} 条边, 迭代 {result.iterations}, "
                f"最大约束违背 {result.violation:.2e}")
    return net


def feasibility_probe(prog: WeightProgram) -> Dict[str, Any]:
    """
    求解前的必要条件检查，每项不通过时给出最小修正建议
    """
    g = prog.graph
    n = max(g.n_nodes, 1)
    outdeg = g.out_degree()
    max_deg = int(outdeg.max(initial=0))
    checks: List[Dict[str, Any]] = []

    def add(name: str, ok: bool, value: float, limit: float, fix: str):
        checks.append({'name': name, 'ok': bool(ok), 'value': float(value), 'limit': float(limit),
                       'fix': None if ok else fix})

    add('floor_vs_degree', prog.floor * max_deg <= 1.0, prog.floor * max_deg, 1.0,
        f"weight_floor <= {1.0 / max(max_deg, 1):.6g}")

    # 只有自环的行 w_ii = 1，其余行 w_ii ≥ ε₀
    loop_only = (outdeg == 1) & np.isin(np.arange(g.n_nodes), g.src[g.src == g.dst])
    forced = int(loop_only.sum())
    has_loop = np.zeros(g.n_nodes, dtype=bool)
    has_loop[g.src[g.src == g.dst]] = True
    others = int((has_loop & ~loop_only).sum())
    min_mean = (forced + others * prog.floor) / n
    min_square = (forced + others * prog.floor ** 2) / n
    add('self_mean_vs_floor', prog.self_mean_cap >= min_mean, min_mean, prog.self_mean_cap,
        f"self_mean_cap >= {min_mean:.6g}")
    add('self_square_vs_floor', prog.self_sq_cap >= min_square, min_square, prog.self_sq_cap,
        f"self_sq_cap >= {min_square:.6g}")

    report = {'feasible': all(c['ok'] for c in checks), 'checks': checks}
    for c in checks:
        if not c['ok']:
            logger.warning(f"可行性检查未通过: {c['name']} (值 {c['value']:.6g}, 界 {c['limit']:.6g})，建议 {c['fix']}")
    return report


@dataclass
class StationaryCheck:
    """平稳分布校验结果"""

    mu: np.ndarray
    nu: np.ndarray
    l1_residual: float
    l1_mu_nu: float
    gamma: float
    delta: float
    gamma_is_lower_bound: bool = False
    gamma_converged: bool = True

    @property
    def bound(self) -> float:
        """δ/γ"""
        return self.delta / self.gamma if self.gamma > 0 else float('inf')

    @property
    def passed(self) -> bool:
        slack = 1.0 + 1e-6
        return self.l1_residual <= self.delta * slack and self.l1_mu_nu <= self.bound * slack

    def to_dict(self) -> Dict[str, Any]:
        return {
            'l1_residual': self.l1_residual,
            'l1_mu_nu': self.l1_mu_nu,
            'gamma': self.gamma,
            'gamma_is_lower_bound': self.gamma_is_lower_bound,
            'gamma_converged': self.gamma_converged,
            'delta': self.delta,
            'bound_delta_over_gamma': self.bound,
            'pass': self.passed,
        }


def _second_modulus(WT: sparse.csr_matrix, nu: np.ndarray, block: int = 50, tol: float = 1e-10,
                    max_blocks: int = 200) -> Tuple[float, bool]:
    """在 1ᵀx = 0 子空间上做幂迭代估计 |λ₂|，每 block 步给一次估计"""
    n = WT.shape[0]
    if n <= 1:
        return 0.0, True
    x = stream(0, Stage.SPECTRAL).standard_normal(n)
    x -= nu * x.sum()
    norm = np.linalg.norm(x)
    if norm == 0:
        return 0.0, True
    x /= norm
    previous = None
    estimate = 0.0
    for _ in range(max_blocks):
        log_growth = 0.0
        for _ in range(block):
            x = WT @ x
            x -= nu * x.sum()
            norm = np.linalg.norm(x)
            if norm == 0:
                return 0.0, True
            log_growth += np.log(norm)
            x /= norm
        estimate = float(np.exp(log_growth / block))
        if previous is not None and abs(estimate - previous) < tol:
            return estimate, True
        previous = estimate
    return estimate, False


def stationary_check(net: WeightedNetwork, m: Optional[np.ndarray] = None, delta: float = 0.10,
                     max_iter: int = 100000, spectral_blocks: int = 200) -> StationaryCheck:
    """
    ‖μ − Wᵀμ‖₁ ≤ δ 与 ‖μ − ν‖₁ ≤ δ/γ 校验

    Raises:
        WeightsError: PowerIterationStalled（ν 的幂迭代未收敛）
    """
    m = net.graph.size if m is None else np.asarray(m, dtype=np.float64)
    mu = m / m.sum()
    WT = net.to_csr().T.tocsr()
    residual = float(np.abs(mu - WT @ mu).sum())

    nu = mu.copy()
    for it in range(max_iter):
        nxt = WT @ nu
        nxt /= nxt.sum()
        change = float(np.abs(nxt - nu).sum())
        nu = nxt
        if change < 1e-12:
            break
    else:
        raise WeightsError('PowerIterationStalled', f"平稳分布幂迭代 {max_iter} 次未收敛（变化 {change:.2e}）",
                           {'last_change': change, 'l1_residual': residual})

    modulus, converged = _second_modulus(WT, nu, max_blocks=spectral_blocks)
    if not converged:
        logger.warning(f"|λ₂| 估计在 {spectral_blocks} 段内未稳定（当前 {modulus:.6f}），基于 γ 的校验结论仅供参考")
    lower_bound = modulus > 1.0 - 1e-8
    gamma = max(0.0, 1.0 - modulus)
    check = StationaryCheck(mu, nu, residual, float(np.abs(mu - nu).sum()), gamma, delta, lower_bound, converged)
    logger.info(f"平稳分布校验: ‖r‖₁={check.l1_residual:.3e}, ‖μ−ν‖₁={check.l1_mu_nu:.3e}, γ={gamma:.4f}, "
                f"界 δ/γ={check.bound:.3e}, {'通过' if check.passed else '未通过'}")
    return check
