#!/usr/bin/env python3
"""
I2N 闭合模块

让骨架图成为正则马尔可夫链的支撑：
Tarjan 强连通分解 → 凝聚图的汇点/源点配对 → 每对加 k_ab 条跨分量边
（在稀疏候选集上最小化部门流入失真的 0-1 二次规划）→ 每个企业加自环。
"""

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from ingest import IOTable
from sampler import CLOSURE, SELFLOOP, SparseDigraph
from utils.errors import I2NError
from utils.logger import get_logger
from utils.rng import Stage, stream

logger = get_logger()

# 浮点误差保护：θ(1−e^{−ηn})n 恰为整数时不多进一位
_CEIL_SLACK = 1e-9


class ClosureError(I2NError):
    """闭合阶段错误"""
    stage = 'close'


class ClosureHyper(BaseModel):
    """k_ab 与候选集规模的超参数"""

    theta: float = Field(default=0.5, gt=0, lt=1)
    eta: float = Field(default=0.05, gt=0)
    gamma_bar: float = Field(default=0.2, gt=0)
    n0: int = Field(default=50, ge=0)
    eta_g: float = Field(default=1.0, gt=0)


def saturation(n: int, theta: float, eta: float) -> float:
    """f_η(n) = θ(1 − e^{−ηn})"""
    return theta * (1.0 - math.exp(-eta * n))


def edges_per_pair(n: int, hyper: ClosureHyper) -> int:
    """k_ab = ⌈f_η(n)·n⌉"""
    return max(1, math.ceil(saturation(n, hyper.theta, hyper.eta) * n - _CEIL_SLACK))


def candidate_count(n: int, k: int, hyper: ClosureHyper) -> int:
    """L_ab = max{k_ab, ⌈g(n)·n⌉}，g(n) = γ̄ (n/(n₀+n))^η_g"""
    g = hyper.gamma_bar * (n / (hyper.n0 + n)) ** hyper.eta_g
    return max(k, math.ceil(g * n - _CEIL_SLACK))


@dataclass
class Condensation:
    """强连通分量凝聚图；分量编号按拓扑序（源点在前）"""

    scc_id: np.ndarray
    components: List[np.ndarray]
    dag_src: np.ndarray
    dag_dst: np.ndarray
    sources: np.ndarray
    sinks: np.ndarray

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def R(self) -> int:
        if self.n_components <= 1:
            return 0
        return max(self.sources.size, self.sinks.size)


def tarjan_scc(g: SparseDigraph) -> Condensation:
    """迭代版 Tarjan，O(N + E)"""
    n = g.n_nodes
    csr = g.to_csr()
    indptr = csr.indptr.tolist()
    indices = csr.indices.tolist()

    index = [-1] * n
    low = [0] * n
    on_stack = [False] * n
    comp = [-1] * n
    stack: List[int] = []
    found = 0
    counter = 0

    for root in range(n):
        if index[root] != -1:
            continue
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack[root] = True
        work = [[root, indptr[root]]]
        while work:
            frame = work[-1]
            v, ptr = frame
            if ptr < indptr[v + 1]:
                frame[1] = ptr + 1
                w = indices[ptr]
                if index[w] == -1:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack[w] = True
                    work.append([w, indptr[w]])
                elif on_stack[w] and index[w] < low[v]:
                    low[v] = index[w]
                continue
            work.pop()
            if work:
                u = work[-1][0]
                if low[v] < low[u]:
                    low[u] = low[v]
            if low[v] == index[v]:
                while True:
                    w = stack.pop()
                    on_stack[w] = False
                    comp[w] = found
                    if w == v:
                        break
                found += 1

    # Tarjan 按逆拓扑序产出分量，翻转后源点在前
    scc_id = (found - 1) - np.asarray(comp, dtype=np.int64) if n else np.empty(0, dtype=np.int64)
    order = np.argsort(scc_id, kind='stable')
    bounds = np.searchsorted(scc_id[order], np.arange(found + 1))
    components = [np.sort(order[bounds[c]:bounds[c + 1]]) for c in range(found)]

    cs, cd = scc_id[g.src], scc_id[g.dst]
    cross = cs != cd
    codes = np.unique(cs[cross] * max(found, 1) + cd[cross])
    dag_src, dag_dst = np.divmod(codes, max(found, 1))
    has_in = np.zeros(found, dtype=bool)
    has_out = np.zeros(found, dtype=bool)
    has_in[dag_dst] = True
    has_out[dag_src] = True
    return Condensation(scc_id, components, dag_src, dag_dst, np.flatnonzero(~has_in), np.flatnonzero(~has_out))


@dataclass
class PairPlan:
    """一个 (汇点分量 a → 源点分量 b) 配对"""

    sink: int
    source: int
    n_ab: int
    k: int
    L: int
    cand_src: np.ndarray
    cand_dst: np.ndarray

    @property
    def n_candidates(self) -> int:
        return int(self.cand_src.size)


@dataclass
class ClosurePlan:
    pairs: List[PairPlan] = field(default_factory=list)

    @property
    def total_k(self) -> int:
        return sum(p.k for p in self.pairs)

    @property
    def total_candidates(self) -> int:
        return sum(p.n_candidates for p in self.pairs)


def _pair_components(cond: Condensation) -> List[Tuple[int, int]]:
    """
    汇点 → 源点配对，加上后凝聚图强连通

    每个源点 t_i 配一个可达汇点 r(t_i)（优先未用过的），连 r(t_i) → t_{i+1}（循环）；
    剩下的汇点都连到 t_1。
    """
    n_comp = cond.n_components
    if n_comp <= 1:
        return []
    succ: List[List[int]] = [[] for _ in range(n_comp)]
    for a, b in zip(cond.dag_src.tolist(), cond.dag_dst.tolist()):
        succ[a].append(b)

    # 拓扑序逆序求每个分量可达的某个汇点
    some_sink = list(range(n_comp))
    for c in range(n_comp - 1, -1, -1):
        if succ[c]:
            some_sink[c] = some_sink[min(succ[c])]

    sink_set = set(cond.sinks.tolist())
    visited = [False] * n_comp
    used = set()
    reach = {}
    for t in sorted(cond.sources.tolist()):
        hit = None
        todo = [t]
        while todo and hit is None:
            c = todo.pop()
            if visited[c]:
                continue
            visited[c] = True
            if c in sink_set and c not in used:
                hit = c
                break
            todo.extend(sorted(succ[c], reverse=True))
        if hit is None:
            hit = some_sink[t]
        used.add(hit)
        reach[t] = hit

    sources = sorted(cond.sources.tolist())
    pairs = [(reach[t], sources[(i + 1) % len(sources)]) for i, t in enumerate(sources)]
    chained = set(reach.values())
    pairs += [(u, sources[0]) for u in sorted(sink_set - chained)]
    return pairs


def _sample_candidates(g: SparseDigraph, rows: np.ndarray, cols: np.ndarray, L: int,
                       rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """从 rows × cols 中不放回抽 L 个不存在的边"""
    total = rows.size * cols.size
    existing = set(zip(g.src[np.isin(g.src, rows)].tolist(), g.dst[np.isin(g.src, rows)].tolist()))
    picked: List[int] = []
    if total <= 1_000_000 or total <= 4 * L:
        pool = np.arange(total)
        if existing:
            r, c = np.divmod(pool, cols.size)
            free = np.array([(int(rows[i]), int(cols[j])) not in existing for i, j in zip(r, c)], dtype=bool)
            pool = pool[free]
        picked = rng.choice(pool, size=min(L, pool.size), replace=False).tolist() if pool.size else []
    else:
        seen = set()
        while len(picked) < L:
            for pos in rng.choice(total, size=min(total, 2 * L + 16), replace=False).tolist():
                if pos in seen:
                    continue
                seen.add(pos)
                i, j = divmod(pos, cols.size)
                if (int(rows[i]), int(cols[j])) not in existing:
                    picked.append(pos)
                    if len(picked) == L:
                        break
    picked_arr = np.sort(np.asarray(picked, dtype=np.int64))
    r, c = np.divmod(picked_arr, cols.size)
    return rows[r], cols[c]


def build_plan(cond: Condensation, g: SparseDigraph, hyper: ClosureHyper, seed: int) -> ClosurePlan:
    """
    配对 + 每对的 k_ab、候选集 Ω_ab

    单个强连通分量时返回空计划。汇点分量没有出边，a × b 块里没有已存在的边，
    所以 |Ω_ab| = min(L_ab, |a|·|b|) ≥ k_ab。
    """
    plan = ClosurePlan()
    for a, b in _pair_components(cond):
        rows, cols = cond.components[a], cond.components[b]
        n_ab = int(min(rows.size, cols.size))
        k = edges_per_pair(n_ab, hyper)
        L = candidate_count(n_ab, k, hyper)
        rng = stream(seed, Stage.CLOSURE, a, b)
        cand_src, cand_dst = _sample_candidates(g, rows, cols, L, rng)
        plan.pairs.append(PairPlan(a, b, n_ab, k, L, cand_src, cand_dst))
    if plan.pairs:
        logger.info(f"闭合计划: {len(plan.pairs)} 个配对, 共需 {plan.total_k} 条边, 候选 {plan.total_candidates}")
    return plan


class SectorInflowState:
    """部门流入基线 B_ℓ、误差 E_ℓ = B_ℓ − s_ℓ 与候选边贡献"""

    def __init__(self, g: SparseDigraph, io: IOTable):
        self.io = io
        self.g = g
        self.sector_sizes = np.bincount(g.sector, weights=g.size, minlength=io.n_sectors)
        off = g.src != g.dst
        contrib = self.contribution(g.src[off], g.dst[off])
        self.baseline = np.bincount(g.sector[g.dst[off]], weights=contrib, minlength=io.n_sectors)
        self.error = self.baseline - self.sector_sizes
        s = self.sector_sizes
        self.weight = np.zeros_like(s)
        self.weight[s > 0] = 1.0 / s[s > 0] ** 2

    def contribution(self, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
        """a_ij = m_i · I_{π(i)π(j)}，计入部门 π(j)"""
        return self.g.size[src] * self.io.row_share[self.g.sector[src], self.g.sector[dst]]

    def candidate_sector(self, dst: np.ndarray) -> np.ndarray:
        return self.g.sector[dst]

    def objective(self, totals: np.ndarray) -> float:
        return float(np.sum(self.weight * totals ** 2))


@dataclass
class ClosureSelection:
    """闭合 QP 的解：每个配对选中的候选下标"""

    chosen: List[np.ndarray]
    objective_before: float
    objective_after: float
    method: str

    def edges(self, plan: ClosurePlan) -> Tuple[np.ndarray, np.ndarray]:
        if not plan.pairs:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        src = np.concatenate([p.cand_src[c] for p, c in zip(plan.pairs, self.chosen)])
        dst = np.concatenate([p.cand_dst[c] for p, c in zip(plan.pairs, self.chosen)])
        return src, dst


def _pair_terms(plan: ClosurePlan, state: SectorInflowState) -> List[Tuple[np.ndarray, np.ndarray]]:
    return [(state.candidate_sector(p.cand_dst), state.contribution(p.cand_src, p.cand_dst)) for p in plan.pairs]


def _check_sizes(plan: ClosurePlan):
    for p in plan.pairs:
        if p.n_candidates < p.k:
            raise ClosureError('InsufficientCandidates',
                               f"配对 ({p.sink}→{p.source}) 候选 {p.n_candidates} 少于 k_ab = {p.k}",
                               {'sink': p.sink, 'source': p.source, 'candidates': p.n_candidates, 'k': p.k})


def _greedy_swap(terms, ks, state: SectorInflowState, max_rounds: int = 10000) -> List[np.ndarray]:
    totals = state.error.copy()
    w = state.weight
    chosen = []
    for (sec, val), k in zip(terms, ks):
        free = np.ones(sec.size, dtype=bool)
        picks = []
        for _ in range(k):
            gain = w[sec] * ((totals[sec] + val) ** 2 - totals[sec] ** 2)
            gain[~free] = np.inf
            j = int(np.argmin(gain))
            picks.append(j)
            free[j] = False
            totals[sec[j]] += val[j]
        chosen.append(np.array(sorted(picks), dtype=np.int64))

    # 单次交换的局部搜索：每轮执行全局最优的改进交换
    settled = False
    for _ in range(max_rounds):
        best = (0.0, -1, -1, -1)
        for p, ((sec, val), picks) in enumerate(zip(terms, chosen)):
            out_mask = np.ones(sec.size, dtype=bool)
            out_mask[picks] = False
            unpicked = np.flatnonzero(out_mask)
            if picks.size == 0 or unpicked.size == 0:
                continue
            ls, vs = sec[picks][:, None], val[picks][:, None]
            lu, vu = sec[unpicked][None, :], val[unpicked][None, :]
            ts, tu = totals[ls], totals[lu]
            same = ls == lu
            delta = np.where(
                same,
                w[ls] * ((ts - vs + vu) ** 2 - ts ** 2),
                w[ls] * ((ts - vs) ** 2 - ts ** 2) + w[lu] * ((tu + vu) ** 2 - tu ** 2),
            )
            i, j = np.unravel_index(int(np.argmin(delta)), delta.shape)
            if delta[i, j] < best[0] - 1e-15 * max(1.0, state.objective(totals)):
                best = (float(delta[i, j]), p, int(picks[i]), int(unpicked[j]))
        if best[1] < 0:
            settled = True
            break
        _, p, s, u = best
        sec, val = terms[p]
        totals[sec[s]] -= val[s]
        totals[sec[u]] += val[u]
        chosen[p] = np.sort(np.append(chosen[p][chosen[p] != s], u))
    if not settled:
        logger.warning(f"交换搜索达到轮数上限 {max_rounds}，结果未必是单次交换局部最优")
    return chosen


def _selection_objective(terms, chosen, state: SectorInflowState) -> float:
    totals = state.error.copy()
    for (sec, val), picks in zip(terms, chosen):
        np.add.at(totals, sec[picks], val[picks])
    return state.objective(totals)


def _branch_and_bound(terms, ks, state: SectorInflowState, incumbent: List[np.ndarray]) -> List[np.ndarray]:
    """逐配对枚举组合；贡献非负，所以 Σ_ℓ w_ℓ max(0, E_ℓ)² 是下界"""
    w = state.weight
    best_value = _selection_objective(terms, incumbent, state)
    best = [c.copy() for c in incumbent]
    combos = [list(itertools.combinations(range(sec.size), k)) for (sec, _), k in zip(terms, ks)]
    current: List[Tuple[int, ...]] = []

    def lower_bound(totals: np.ndarray) -> float:
        return float(np.sum(w * np.maximum(0.0, totals) ** 2))

    def descend(p: int, totals: np.ndarray):
        nonlocal best_value, best
        if p == len(terms):
            value = state.objective(totals)
            if value < best_value - 1e-15:
                best_value = value
                best = [np.array(c, dtype=np.int64) for c in current]
            return
        sec, val = terms[p]
        for combo in combos[p]:
            idx = list(combo)
            nxt = totals.copy()
            np.add.at(nxt, sec[idx], val[idx])
            if lower_bound(nxt) >= best_value:
                continue
            current.append(combo)
            descend(p + 1, nxt)
            current.pop()

    descend(0, state.error.copy())
    return best


def exhaustive_closure(plan: ClosurePlan, state: SectorInflowState) -> Tuple[List[np.ndarray], float]:
    """不剪枝的穷举，返回 (最优选择, 最优目标)，小规模校验用"""
    _check_sizes(plan)
    terms = _pair_terms(plan, state)
    best_value, best = np.inf, None
    spaces = [itertools.combinations(range(p.n_candidates), p.k) for p in plan.pairs]
    for combo in itertools.product(*spaces):
        chosen = [np.array(c, dtype=np.int64) for c in combo]
        value = _selection_objective(terms, chosen, state)
        if value < best_value:
            best_value, best = value, chosen
    return best if best is not None else [], float(best_value if best is not None else state.objective(state.error))


def solve_closure(plan: ClosurePlan, state: SectorInflowState, exact_limit: int = 25,
                  max_swap_rounds: int = 10000) -> ClosureSelection:
    """
    min Σ_ℓ (E_ℓ + Σ a_ij,ℓ x_ij)² / s_ℓ²，s.t. 每个配对恰好选 k_ab 个候选

    |Ω| ≤ exact_limit 时分支定界求精确最优，否则贪心 + 单次交换局部搜索
    （结果对任何配对内的单次交换都是局部最优）。

    Raises:
        ClosureError: InsufficientCandidates
    """
    _check_sizes(plan)
    before = state.objective(state.error)
    if not plan.pairs:
        return ClosureSelection([], before, before, 'empty')

    terms = _pair_terms(plan, state)
    ks = [p.k for p in plan.pairs]
    chosen = _greedy_swap(terms, ks, state, max_swap_rounds)
    method = 'greedy_swap'
    forced = all(p.k == p.n_candidates for p in plan.pairs)
    if forced:
        method = 'forced'
    elif plan.total_candidates <= exact_limit:
        chosen = _branch_and_bound(terms, ks, state, chosen)
        method = 'exact'
    after = _selection_objective(terms, chosen, state)
    logger.debug(f"闭合 QP [{method}]: 目标 {before:.6g} → {after:.6g}")
    return ClosureSelection(chosen, before, after, method)


def add_self_loops(g: SparseDigraph) -> SparseDigraph:
    """给每个节点补上自环（幂等）"""
    has_loop = np.zeros(g.n_nodes, dtype=bool)
    has_loop[g.src[g.src == g.dst]] = True
    missing = np.flatnonzero(~has_loop)
    if missing.size == 0:
        return g
    return g.with_edges(np.concatenate([g.src, missing]), np.concatenate([g.dst, missing]),
                        np.concatenate([g.provenance, np.full(missing.size, SELFLOOP, dtype=np.int8)]))


def is_aperiodic(g: SparseDigraph) -> bool:
    """强连通且每个节点都有自环时周期为 1"""
    return g.n_nodes > 0 and g.self_loop_count() == g.n_nodes


def close_network(g: SparseDigraph, io: IOTable, hyper: Optional[ClosureHyper] = None, seed: int = 0,
                  exact_limit: int = 25) -> Tuple[SparseDigraph, Dict[str, Any]]:
    """
    闭合编排：SCC → 计划 → 流入状态 → 选边 → 强连通校验 → 自环

    Raises:
        ClosureError: InsufficientCandidates / NotStronglyConnected
    """
    hyper = hyper or ClosureHyper()
    cond = tarjan_scc(g)
    logger.info(f"强连通分解: {cond.n_components} 个分量, 源点 {cond.sources.size}, 汇点 {cond.sinks.size}")
    plan = build_plan(cond, g, hyper, seed)
    state = SectorInflowState(g, io)
    selection = solve_closure(plan, state, exact_limit)

    add_src, add_dst = selection.edges(plan)
    closed = g.with_edges(np.concatenate([g.src, add_src]), np.concatenate([g.dst, add_dst]),
                          np.concatenate([g.provenance, np.full(add_src.size, CLOSURE, dtype=np.int8)]))
    after = tarjan_scc(closed)
    if after.n_components != 1:
        raise ClosureError('NotStronglyConnected', f"闭合后仍有 {after.n_components} 个强连通分量",
                           {'components': after.n_components})
    closed = add_self_loops(closed)

    report = {
        'components_before': cond.n_components,
        'components_after': after.n_components,
        'sources': int(cond.sources.size),
        'sinks': int(cond.sinks.size),
        'R': cond.R,
        'K': int(add_src.size),
        'method': selection.method,
        'objective_before': selection.objective_before,
        'objective_after': selection.objective_after,
        'pairs': [{'sink': p.sink, 'source': p.source, 'n_ab': p.n_ab, 'k_ab': p.k, 'L_ab': p.L,
                   'candidates': p.n_candidates} for p in plan.pairs],
        'self_loops_added': int(closed.n_edges - g.n_edges - add_src.size),
    }
    logger.info(f"闭合完成: 新增 {report['K']} 条跨分量边, {report['self_loops_added']} 个自环")
    return closed, report
