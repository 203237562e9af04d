#!/usr/bin/env python3
"""
I2N 验证模块

- synthetic_economy: 生成与真实投入产出表形状相近的合成经济体（部门数、正流量个数、九个对数规模箱）
- scaling_benchmark: 各阶段耗时随企业数的对数斜率
- pipeline_audit: 只读运行目录中的文件，逐项复核各阶段不变量
"""

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from closure import close_network, tarjan_scc
from gravity import FitConfig, GravityModel, warm_start
from ingest import FirmSizeBinTable, IOTable, load_io_table, load_population, sample_firms
from sampler import draw_backbone, load_edges, prune_isolates
from utils.errors import I2NError
from utils.files import read_csv_artifact, read_json, read_provenance, require_file, sha256_file
from utils.logger import get_logger
from utils.rng import Stage, stream
from utils.yaml_utils import load_manifest
from weights import WeightProgram, _dual_ascent

logger = get_logger()

BENCH_STAGES = ('gravity', 'sample', 'close', 'weight')

# 合成数据的真实参数
TRUE_ALPHA = 0.44
TRUE_KAPPA = 0.32

# 运行目录中参与溯源校验的产物
CSV_ARTIFACTS = ('io_table.csv', 'population.csv', 'edges.csv', 'weighted_edges.csv', 'ccdf.csv',
                 'factory_edges.csv')
JSON_ARTIFACTS = ('params.json', 'sample_report.json', 'closure_report.json', 'stationary_report.json',
                  'stats.json', 'bootstrap.json', 'ensemble_report.json', 'factory_report.json')


class AuditError(I2NError):
    """审计未通过"""
    stage = 'audit'


def synthetic_economy(n_sectors: int = 24, n_positive: int = 173, n_firms: int = 10_000,
                      seed: int = 0, n_bins: int = 9, decades: float = 4.0) -> Tuple[IOTable, FirmSizeBinTable]:
    """
    合成经济体：对角线全正、其余正流量随机落位的投入产出表，
    以及每个部门 n_bins 个覆盖 decades 个数量级的对数等宽规模箱（企业数按 Pareto 形状递减）

    Raises:
        ValueError: n_positive 不在 [n_sectors, n_sectors²] 内
    """
    if not n_sectors <= n_positive <= n_sectors ** 2:
        raise ValueError(f"正流量个数必须在 [{n_sectors}, {n_sectors ** 2}] 内: {n_positive}")
    if n_firms < n_sectors:
        raise ValueError(f"企业数不能少于部门数: {n_firms}")
    rng = stream(seed, Stage.SYNTHETIC)

    flows = np.zeros((n_sectors, n_sectors))
    flows[np.diag_indices(n_sectors)] = rng.lognormal(1.0, 1.0, size=n_sectors)
    off = np.flatnonzero(~np.eye(n_sectors, dtype=bool))
    picked = rng.choice(off, size=n_positive - n_sectors, replace=False)
    flows.flat[picked] = rng.lognormal(0.0, 1.5, size=picked.size)
    sectors = [f"S{k + 1:02d}" for k in range(n_sectors)]

    # 每个部门至少 1 家企业，其余按 Dirichlet 份额分配
    share = rng.dirichlet(np.full(n_sectors, 2.0))
    per_sector = 1 + np.floor(share * (n_firms - n_sectors)).astype(np.int64)
    per_sector[: n_firms - int(per_sector.sum())] += 1

    edges = np.logspace(0.0, float(decades), n_bins + 1)
    decay = edges[:-1] ** -1.1
    rows = []
    for k, total in enumerate(per_sector):
        counts = np.floor(total * decay / decay.sum()).astype(np.int64)
        counts[0] += int(total - counts.sum())
        for b in range(n_bins):
            rows.append({'sector': sectors[k], 'bin_low': edges[b], 'bin_high': edges[b + 1],
                         'count': int(counts[b])})
    return IOTable(sectors, flows), FirmSizeBinTable(pd.DataFrame(rows))


@dataclass
class BenchResult:
    """基准测试结果：中位耗时表与对数斜率"""

    table: pd.DataFrame
    slopes: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {'rows': self.table.to_dict(orient='records'), 'slopes': self.slopes}


def _median_seconds(func, repeats: int) -> float:
    samples = []
    for _ in range(repeats):
        started = time.perf_counter()
        func()
        samples.append(time.perf_counter() - started)
    return float(np.median(samples))


def log_log_slope(n_firms: Sequence[float], seconds: Sequence[float]) -> Optional[float]:
    """log t 对 log N 的最小二乘斜率，少于两个有效点时返回 None"""
    n = np.asarray(n_firms, dtype=np.float64)
    t = np.asarray(seconds, dtype=np.float64)
    ok = (n > 0) & (t > 0)
    if np.unique(n[ok]).size < 2:
        return None
    return float(np.polyfit(np.log(n[ok]), np.log(t[ok]), 1)[0])


def scaling_benchmark(sizes: Sequence[int], bins_list: Sequence[int] = (16,), repeats: int = 5, seed: int = 0,
                      threads: int = 1, stages: Sequence[str] = BENCH_STAGES, mean_degree: float = 5.0,
                      sample_bins: int = 32, weight_iterations: int = 50) -> BenchResult:
    """
    逐规模计时

    gravity 阶段对 bins_list 中每个分箱数计一次目标/梯度评估（0 表示精确 O(N²)）；
    sample / close / weight 阶段与拟合分箱无关，每个规模只计一次，bins 列记抽样分箱数。
    参数取 α=0.44、κ=0.32，λ 与 z 由热启动给出，目标平均度为 mean_degree。
    weight 阶段计固定次数的对偶上升迭代。
    """
    unknown = sorted(set(stages) - set(BENCH_STAGES))
    if unknown:
        raise ValueError(f"未知的基准阶段: {unknown}")
    repeats = max(1, int(repeats))
    rows: List[Dict[str, Any]] = []

    for n_firms in sizes:
        io, bin_table = synthetic_economy(n_firms=int(n_firms), seed=seed)
        pop = sample_firms(bin_table, 1.0, seed, io.sectors, threads)
        cfg = FitConfig(target_links=mean_degree * pop.n_firms, bins=max(bins_list) or 16,
                        initial_alpha=TRUE_ALPHA, initial_kappa=TRUE_KAPPA, seed=seed, threads=threads)
        params = warm_start(pop, io, cfg)
        logger.info(f"基准规模 N={pop.n_firms}: z={params.z:.4g}")

        if 'gravity' in stages:
            for bins in bins_list:
                model = GravityModel(pop, io, int(bins), threads)
                u = params.log_vector(model.pairs)
                seconds = _median_seconds(lambda: model.evaluate(u, cfg.target_links), repeats)
                rows.append({'stage': 'gravity', 'n_firms': pop.n_firms, 'bins': int(bins),
                             'median_seconds': seconds})

        if not set(stages) & {'sample', 'close', 'weight'}:
            continue
        backbone = draw_backbone(pop, io, params, seed, sample_bins, threads)
        if 'sample' in stages:
            seconds = _median_seconds(lambda: draw_backbone(pop, io, params, seed, sample_bins, threads), repeats)
            rows.append({'stage': 'sample', 'n_firms': pop.n_firms, 'bins': sample_bins, 'median_seconds': seconds})

        pruned, _ = prune_isolates(backbone)
        closed, _ = close_network(pruned, io, seed=seed)
        if 'close' in stages:
            seconds = _median_seconds(lambda: close_network(pruned, io, seed=seed), repeats)
            rows.append({'stage': 'close', 'n_firms': pop.n_firms, 'bins': sample_bins, 'median_seconds': seconds})
        if 'weight' in stages:
            prog = WeightProgram(closed)
            seconds = _median_seconds(lambda: _dual_ascent(prog, max_iter=weight_iterations), repeats)
            rows.append({'stage': 'weight', 'n_firms': pop.n_firms, 'bins': sample_bins, 'median_seconds': seconds})

    table = pd.DataFrame(rows, columns=['stage', 'n_firms', 'bins', 'median_seconds'])
    slopes: Dict[str, float] = {}
    for (stage, bins), group in table.groupby(['stage', 'bins'], sort=True):
        slope = log_log_slope(group['n_firms'], group['median_seconds'])
        if slope is not None:
            slopes[f"{stage}/bins={int(bins)}"] = slope
    for key, slope in slopes.items():
        logger.info(f"对数斜率 {key}: {slope:.3f}")
    return BenchResult(table, slopes)


class _Checks:
    """审计检查项收集器"""

    def __init__(self):
        self.items: List[Dict[str, Any]] = []

    def add(self, name: str, ok: bool, detail: str = '', location: Optional[Dict[str, Any]] = None):
        entry: Dict[str, Any] = {'name': name, 'ok': bool(ok), 'detail': detail}
        if location:
            entry['location'] = location
        self.items.append(entry)
        if not ok:
            logger.warning(f"审计未通过: {name} {detail}")

    @property
    def passed(self) -> bool:
        return all(c['ok'] for c in self.items)


def _check_provenance(run_dir: Path, manifest: Dict[str, Any], checks: _Checks):
    expected_hash = manifest.get('config_hash')
    expected_seed = manifest.get('seed')
    seen = {}
    for name in CSV_ARTIFACTS:
        path = run_dir / name
        if path.exists():
            seen[name] = read_provenance(path)
    for name in JSON_ARTIFACTS:
        path = run_dir / name
        if path.exists():
            data = read_json(path)
            seen[name] = (data.get('config_hash'), data.get('seed'))

    missing = sorted(name for name, tag in seen.items() if tag is None)
    checks.add('provenance_header', not missing, f"缺少溯源头: {missing}" if missing else '',
               {'files': missing} if missing else None)
    mixed = sorted(name for name, tag in seen.items()
                   if tag is not None and (tag[0] != expected_hash or tag[1] != expected_seed))
    checks.add('provenance_consistent', not mixed,
               f"与清单 (config_hash={expected_hash}, seed={expected_seed}) 不一致: {mixed}" if mixed else '',
               {'files': mixed} if mixed else None)

    recorded = manifest.get('artifacts') or {}
    bad = sorted(name for name, digest in recorded.items()
                 if not (run_dir / name).exists() or sha256_file(run_dir / name) != digest)
    checks.add('manifest_sha256', not bad, f"哈希不符或文件缺失: {bad}" if bad else '',
               {'files': bad} if bad else None)


def pipeline_audit(run_dir: Union[str, Path]) -> Dict[str, Any]:
    """
    只依据运行目录中的文件复核全流程

    检查：溯源一致、清单哈希、加权支撑强连通、每个节点有自环、行和为 1、
    权重下限、企业带、部门带、自环上限、工厂聚合（存在 factory_edges.csv 时）。
    同样的文件给出同样的报告。

    检查项不通过不抛异常，只体现在报告的 passed 与各项 ok 上。

    Raises:
        InputError: MissingInput（缺少清单、投入产出表、企业表或加权边表，stage=audit）
        IngestError: 投入产出表或企业表本身无法解析（NonSquare / NonNumeric / UnknownSector 等）
    """
    run_dir = Path(run_dir)
    manifest_path = require_file(run_dir / 'manifest.yaml', 'audit', '运行清单')
    manifest = load_manifest(manifest_path)
    config = manifest.get('config') or {}
    checks = _Checks()
    _check_provenance(run_dir, manifest, checks)

    io = load_io_table(require_file(run_dir / 'io_table.csv', 'audit', '投入产出表'))
    full = load_population(require_file(run_dir / 'population.csv', 'audit', '企业表'), io.sectors)
    weighted_path = require_file(run_dir / 'weighted_edges.csv', 'audit', '加权边表')
    frame = read_csv_artifact(weighted_path)
    present = np.union1d(frame['src'].to_numpy(), frame['dst'].to_numpy())
    index = pd.Index(full.firm_id).get_indexer(present)
    if np.any(index < 0):
        unknown = present[index < 0]
        checks.add('firms_known', False, f"加权边表引用了企业表之外的企业 {int(unknown[0])}",
                   {'firm_id': int(unknown[0])})
        return {'passed': False, 'checks': checks.items}
    pop = full.subset(np.sort(index), renormalize=False)
    g, w = load_edges(weighted_path, pop, stage='audit')
    if w is None:
        checks.add('weights_present', False, "加权边表缺少 weight 列")
        return {'passed': False, 'checks': checks.items}
    firm_ids = g.firm_id

    cond = tarjan_scc(g)
    checks.add('strongly_connected', cond.n_components == 1, f"强连通分量数 {cond.n_components}",
               None if cond.n_components == 1 else {'components': cond.n_components})

    has_loop = np.zeros(g.n_nodes, dtype=bool)
    has_loop[g.src[g.src == g.dst]] = True
    no_loop = np.flatnonzero(~has_loop)
    checks.add('self_loops', no_loop.size == 0, f"{no_loop.size} 个企业缺少自环",
               {'firm_id': int(firm_ids[no_loop[0]])} if no_loop.size else None)

    row_err = np.abs(np.bincount(g.src, weights=w, minlength=g.n_nodes) - 1.0)
    worst = int(np.argmax(row_err)) if row_err.size else 0
    row_ok = bool(row_err.size == 0 or row_err[worst] <= 1e-9)
    checks.add('row_sums', row_ok, f"最大行和误差 {float(row_err.max(initial=0.0)):.3e}",
               None if row_ok else {'firm_id': int(firm_ids[worst]), 'error': float(row_err[worst])})

    floor = float(config.get('weight_floor', 1e-6))
    tol = float(config.get('qp_tol', 1e-8))
    low = np.flatnonzero((w < floor * (1.0 - 1e-12)) | (w > 1.0 + 1e-12))
    checks.add('weight_bounds', low.size == 0, f"{low.size} 条边超出 [{floor:g}, 1]",
               {'src': int(firm_ids[g.src[low[0]]]), 'dst': int(firm_ids[g.dst[low[0]]])} if low.size else None)

    slack = tol * (1.0 + 1e-6) + 1e-12
    m = g.size
    inflow = np.bincount(g.dst, weights=m[g.src] * w, minlength=g.n_nodes)
    delta = float(config.get('firm_band', 0.10))
    firm_gap = np.abs(inflow - m) / m - delta
    worst = int(np.argmax(firm_gap)) if firm_gap.size else 0
    firm_ok = bool(firm_gap.size == 0 or firm_gap[worst] <= slack)
    checks.add('firm_band', firm_ok, f"企业带 δ={delta:g}",
               None if firm_ok else {'firm_id': int(firm_ids[worst]), 'excess': float(firm_gap[worst])})

    eps = float(config.get('weight_sector_band', 0.10))
    s = pop.sector_sizes
    totals = np.bincount(g.sector, weights=inflow, minlength=len(g.sector_labels))
    active = s > 0
    sector_gap = np.full(s.size, -np.inf)
    sector_gap[active] = np.abs(totals[active] - s[active]) / s[active] - eps
    worst = int(np.argmax(sector_gap)) if active.any() else 0
    sector_ok = bool(not active.any() or sector_gap[worst] <= slack)
    checks.add('sector_band', sector_ok, f"部门带 ε_w={eps:g}",
               None if sector_ok else {'sector': g.sector_labels[worst], 'excess': float(sector_gap[worst])})

    self_w = np.zeros(g.n_nodes)
    self_w[g.src[g.src == g.dst]] = w[g.src == g.dst]
    eta1 = float(config.get('self_mean_cap', 0.10))
    eta2 = float(config.get('self_sq_cap', 0.10))
    mean1, mean2 = float(self_w.mean()), float((self_w ** 2).mean())
    checks.add('self_mean_cap', mean1 <= eta1 + slack, f"自环均值 {mean1:.6g} (上限 {eta1:g})")
    checks.add('self_square_cap', mean2 <= eta2 + slack, f"自环平方均值 {mean2:.6g} (上限 {eta2:g})")

    factory_path = run_dir / 'factory_edges.csv'
    if factory_path.exists():
        _check_factory(factory_path, g, w, checks)

    report = {'passed': checks.passed, 'checks': checks.items}
    logger.info(f"审计{'通过' if report['passed'] else '未通过'}: {sum(c['ok'] for c in checks.items)}"
                f"/{len(checks.items)} 项")
    return report


def _check_factory(path: Path, g, w: np.ndarray, checks: _Checks):
    frame = read_csv_artifact(path)
    off = g.src != g.dst
    expected = pd.DataFrame({'src_firm': g.firm_id[g.src[off]], 'dst_firm': g.firm_id[g.dst[off]],
                             'weight': w[off]})
    got = frame.groupby(['src_firm', 'dst_firm'], sort=True)['weight'].sum().reset_index()
    merged = expected.merge(got, on=['src_firm', 'dst_firm'], how='outer', suffixes=('', '_agg'))
    # 只出现在一侧的企业对记为无穷大误差
    diff = (merged['weight'] - merged['weight_agg']).abs().fillna(np.inf).to_numpy()
    worst = int(np.argmax(diff)) if diff.size else 0
    ok = bool(diff.size == 0 or diff[worst] <= 1e-12)
    checks.add('factory_aggregation', ok, f"最大聚合误差 {float(diff.max(initial=0.0)):.3e}",
               None if ok else {'src_firm': int(merged.at[worst, 'src_firm']),
                                'dst_firm': int(merged.at[worst, 'dst_firm'])})
    intra = frame['src_firm'].to_numpy() == frame['dst_firm'].to_numpy()
    checks.add('factory_no_intra_firm', not intra.any(), f"{int(intra.sum())} 条企业内部工厂边")
