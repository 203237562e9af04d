#!/usr/bin/env python3
"""
I2N 阶段执行服务

每个阶段只从运行目录读上游产物、写本阶段产物，并刷新 manifest.yaml。
运行历史（含时间）写到 <log_dir>/executions.json，运行目录里不出现时间戳。
"""

import json
import time
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from closure import ClosureHyper, close_network, is_aperiodic
from config import I2NConfig, config_hash
from factory import allocate, factory_report
from gravity import FitConfig, GravityParams, ParamBounds, bootstrap_fit, fit
from ingest import (FirmPopulation, IOTable, apply_concordance, load_concordance, load_factories,
                    load_firm_bins, load_io_table, load_population, load_raw_firms, sample_firms,
                    save_io_table, save_population)
from netstats import ccdf_powerlaw_fit, degree_ccdf, summarize
from sampler import (SAMPLED, GravityProbability, SamplerError, SparseDigraph, concentration_report, draw_backbone,
                     ensemble_stats, load_edges, prune_isolates, sample_graph, save_edges)
from utils.files import (atomic_write_text, read_csv_artifact, read_json, read_provenance, require_file,
                         sha256_file, write_csv_artifact, write_json_artifact)
from utils.logger import get_logger
from utils.parallel import resolve_threads
from utils.yaml_utils import dump_manifest, load_manifest
from validation import AuditError, pipeline_audit, scaling_benchmark
from weights import WeightedNetwork, WeightProgram, WeightsError, feasibility_probe, solve_weights, stationary_check

logger = get_logger()

STAGE_ORDER = ('ingest', 'fit', 'sample', 'close', 'weight', 'stats', 'factory', 'bootstrap', 'diagnostics',
               'bench')
PIPELINE_STAGES = ('fit', 'sample', 'close', 'weight', 'stats')
MAX_HISTORY = 100


class PipelineService:
    """阶段执行器：一个方法对应一个子命令"""

    def __init__(self, config: I2NConfig):
        self.config = config
        self.run_dir = Path(config.output_dir)
        self.config_hash = config_hash(config)
        self.seed = config.seed
        self.threads = resolve_threads(config.threads)

    # ------------------------------------------------------------------
    # 产物读写
    # ------------------------------------------------------------------

    def _path(self, name: str) -> Path:
        return self.run_dir / name

    def _write_csv(self, name: str, frame: pd.DataFrame) -> str:
        write_csv_artifact(self._path(name), frame, self.config_hash, self.seed)
        return name

    def _write_json(self, name: str, payload: Dict[str, Any]) -> str:
        write_json_artifact(self._path(name), payload, self.config_hash, self.seed)
        return name

    def _record(self, stage: str, artifacts: List[str]):
        """把阶段与产物哈希写进清单；配置哈希或种子变化时清单重新开始"""
        path = self._path('manifest.yaml')
        manifest = load_manifest(path)
        if manifest and (manifest.get('config_hash') != self.config_hash or manifest.get('seed') != self.seed):
            logger.warning(f"配置已变化（{manifest.get('config_hash')} → {self.config_hash}），清单重新开始")
            manifest = {}
        stages = set(manifest.get('stages') or []) | {stage}
        recorded = dict(manifest.get('artifacts') or {})
        for name in artifacts:
            recorded[name] = sha256_file(self._path(name))
        fresh = {
            'tool': 'io2net',
            'config_hash': self.config_hash,
            'seed': self.seed,
            'config': self.config.reproducible_dump(),
            'stages': [s for s in STAGE_ORDER if s in stages],
            'artifacts': dict(sorted(recorded.items())),
        }
        atomic_write_text(path, dump_manifest(fresh))

    def _log_execution(self, stage: str, success: bool, message: str):
        """记录执行历史（保留最近 100 条）"""
        try:
            log_file = Path(self.config.log_dir) / 'executions.json'
            log_file.parent.mkdir(parents=True, exist_ok=True)

            executions = []
            if log_file.exists():
                with open(log_file, 'r', encoding='utf-8') as f:
                    executions = json.load(f)

            executions.insert(0, {
                'timestamp': datetime.now().isoformat(),
                'stage': stage,
                'success': success,
                'message': message,
                'output_dir': str(self.run_dir),
                'config_hash': self.config_hash,
            })
            executions = executions[:MAX_HISTORY]

            with open(log_file, 'w', encoding='utf-8') as f:
                json.dump(executions, f, indent=2, ensure_ascii=False)
        except (OSError, ValueError) as e:
            logger.error(f"记录执行日志失败: {e}")

    def _run_stage(self, stage: str, body) -> Any:
        """阶段外壳：横幅、计时、执行历史"""
        logger.info("=" * 50)
        logger.info(f"开始执行阶段: {stage}")
        logger.info(f"运行目录: {self.run_dir}, config_hash={self.config_hash}, seed={self.seed}, "
                    f"线程数={self.threads}")
        started = time.perf_counter()
        try:
            result, message = body()
        except Exception as e:
            logger.error(f"阶段 {stage} 失败: {e}")
            self._log_execution(stage, False, str(e))
            raise
        elapsed = time.perf_counter() - started
        logger.info(f"阶段 {stage} 完成: {message}，用时 {elapsed:.2f}s")
        logger.info("=" * 50)
        self._log_execution(stage, True, message)
        return result

    # ------------------------------------------------------------------
    # 上游产物
    # ------------------------------------------------------------------

    def _inputs(self, stage: str) -> Tuple[IOTable, FirmPopulation]:
        io = load_io_table(require_file(self._path('io_table.csv'), stage, '投入产出表产物'))
        pop = load_population(require_file(self._path('population.csv'), stage, '企业表产物'), io.sectors)
        return io, pop

    def _params(self, io: IOTable, stage: str) -> GravityParams:
        data = read_json(require_file(self._path('params.json'), stage, '引力模型参数'))
        return GravityParams.from_dict(data['params'], io)

    def _graph(self, name: str, pop: FirmPopulation, stage: str) -> Tuple[SparseDigraph, Optional[np.ndarray]]:
        """读取边表；节点集为边表中出现的企业（剔除孤立企业后的集合），规模不重新归一化"""
        path = require_file(self._path(name), stage, name)
        frame = read_csv_artifact(path, usecols=['src', 'dst'])
        present = np.union1d(frame['src'].to_numpy(), frame['dst'].to_numpy())
        index = pd.Index(pop.firm_id).get_indexer(present)
        if np.any(index < 0):
            raise SamplerError('UnknownFirm', f"{name} 引用了企业表之外的企业 {int(present[index < 0][0])}",
                               {'path': str(path)}, stage=stage)
        return load_edges(path, pop.subset(np.sort(index), renormalize=False), stage)

    def fit_config(self, pop: FirmPopulation, io: IOTable) -> FitConfig:
        c = self.config
        fixed = None
        if c.lambda_from:
            data = read_json(require_file(c.lambda_from, 'fit', 'λ 参数文件'))
            fixed = GravityParams.from_dict(data['params'], io).lam
            logger.info(f"固定 λ: 读取自 {c.lambda_from}")
        return FitConfig(
            target_links=c.resolve_target_links(pop.n_firms),
            sector_tolerance=c.sector_tol,
            bins=c.bins,
            max_iterations=c.max_iter,
            inner_iterations=c.inner_iter,
            opt_tol=c.opt_tol,
            feas_tol=c.feas_tol,
            seed=c.seed,
            bounds=ParamBounds(z=(c.z_min, c.z_max), alpha=(c.alpha_min, c.alpha_max),
                               kappa=(c.kappa_min, c.kappa_max), lam=(c.lambda_min, c.lambda_max)),
            initial_alpha=c.initial_alpha,
            initial_kappa=c.initial_kappa,
            fixed_lambda=fixed,
            threads=self.threads,
        )

    # ------------------------------------------------------------------
    # 阶段
    # ------------------------------------------------------------------

    def ingest(self) -> FirmPopulation:
        def body():
            c = self.config
            io = load_io_table(c.io_table)
            if c.concordance or c.firms:
                raw = load_raw_firms(require_file(c.firms, 'ingest', '原始企业表'))
                conc = load_concordance(c.concordance, io.sectors)
                pop, dropped = apply_concordance(raw, conc, io.sectors)
            else:
                pop = sample_firms(load_firm_bins(c.firm_bins), c.retain_fraction, self.seed, io.sectors,
                                   self.threads)
                dropped = 0
            save_io_table(io, self._path('io_table.csv'), self.config_hash, self.seed)
            save_population(pop, self._path('population.csv'), self.config_hash, self.seed)
            self._record('ingest', ['io_table.csv', 'population.csv'])
            return pop, f"{io.n_sectors} 个部门, {pop.n_firms} 家企业, 丢弃 {dropped}"
        return self._run_stage('ingest', body)

    def fit(self) -> GravityParams:
        def body():
            io, pop = self._inputs('fit')
            cfg = self.fit_config(pop, io)
            params, report = fit(pop, io, cfg)
            name = self._write_json('params.json', {'params': params.to_dict(io), 'fit_report': report.to_dict()})
            self._record('fit', [name])
            return params, f"{report.status}, 期望连边 {report.expected_links:.1f}"
        return self._run_stage('fit', body)

    def sample(self) -> SparseDigraph:
        def body():
            io, pop = self._inputs('sample')
            params = self._params(io, 'sample')
            backbone = draw_backbone(pop, io, params, self.seed, self.config.sample_bins, self.threads)
            pruned, removed = prune_isolates(backbone)
            if pruned.n_edges == 0:
                raise SamplerError('EmptyBackbone', "骨架图没有边，无法继续闭合",
                                   {'n_firms': pop.n_firms})
            kept = np.zeros(pop.n_firms, dtype=bool)
            kept[np.isin(pop.firm_id, pruned.firm_id)] = True
            edges = save_edges(pruned, self._path('edges.csv'), self.config_hash, self.seed).name
            report = {
                'n_firms': pop.n_firms,
                'n_nodes': pruned.n_nodes,
                'n_edges': pruned.n_edges,
                'isolated_removed': removed,
                'isolated_fraction': removed / pop.n_firms if pop.n_firms else 0.0,
                'isolated_firm_ids': pop.firm_id[~kept].tolist(),
                'mean_out_degree': pruned.n_edges / pruned.n_nodes,
                'sample_bins': self.config.sample_bins,
            }
            name = self._write_json('sample_report.json', report)
            self._record('sample', [edges, name])
            return pruned, f"{pruned.n_edges} 条边, 剔除孤立企业 {removed}"
        return self._run_stage('sample', body)

    def close(self) -> SparseDigraph:
        def body():
            io, pop = self._inputs('close')
            g, _ = self._graph('edges.csv', pop, 'close')
            # 只取抽样边，重复执行闭合得到同样的结果
            sampled = g.provenance == SAMPLED
            g = g.with_edges(g.src[sampled], g.dst[sampled], g.provenance[sampled])
            c = self.config
            hyper = ClosureHyper(theta=c.theta, eta=c.eta, gamma_bar=c.gamma_bar, n0=c.n0, eta_g=c.eta_g)
            closed, report = close_network(g, io, hyper, self.seed, c.exact_limit)
            report['aperiodic'] = is_aperiodic(closed)
            edges = save_edges(closed, self._path('edges.csv'), self.config_hash, self.seed).name
            name = self._write_json('closure_report.json', report)
            self._record('close', [edges, name])
            return closed, f"K={report['K']}, R={report['R']}, 方法 {report['method']}"
        return self._run_stage('close', body)

    def weight_program(self, g: SparseDigraph) -> WeightProgram:
        c = self.config
        return WeightProgram(g, firm_band=c.firm_band, sector_band=c.weight_sector_band,
                             self_mean_cap=c.self_mean_cap, self_sq_cap=c.self_sq_cap, floor=c.weight_floor,
                             tol=c.qp_tol, max_iter=c.qp_max_iter)

    def weight(self) -> WeightedNetwork:
        def body():
            _, pop = self._inputs('weight')
            g, _ = self._graph('edges.csv', pop, 'weight')
            prog = self.weight_program(g)
            probe = feasibility_probe(prog)
            if not probe['feasible']:
                failed = [chk for chk in probe['checks'] if not chk['ok']]
                raise WeightsError('Infeasible', f"必要条件不满足: {failed[0]['name']}，建议 {failed[0]['fix']}",
                                   {'checks': failed})
            net = solve_weights(prog)
            weighted = save_edges(g, self._path('weighted_edges.csv'), self.config_hash, self.seed,
                                  net.weights).name
            check = stationary_check(net, delta=self.config.firm_band)
            report = check.to_dict()
            report.update({
                'iterations': net.iterations,
                'max_violation': net.max_violation,
                'max_row_sum_error': float(np.abs(net.row_sums() - 1.0).max(initial=0.0)),
                'feasibility_probe': probe,
            })
            name = self._write_json('stationary_report.json', report)
            self._record('weight', [weighted, name])
            return net, f"{g.n_edges} 条边, 平稳校验{'通过' if check.passed else '未通过'}"
        return self._run_stage('weight', body)

    def stats(self, which: str = 'total') -> Dict[str, Any]:
        def body():
            _, pop = self._inputs('stats')
            g, _ = self._graph('edges.csv', pop, 'stats')
            loops = self.config.include_self_loops
            summary = summarize(g, loops).to_dict()
            ccdf = degree_ccdf(g, which, loops)
            summary['ccdf_degree'] = which
            summary['ccdf_fit'] = ccdf_powerlaw_fit(ccdf)
            names = [self._write_json('stats.json', summary), self._write_csv('ccdf.csv', ccdf)]
            self._record('stats', names)
            return summary, f"N={summary['n_nodes']}, E={summary['n_edges']}"
        return self._run_stage('stats', body)

    def factory(self) -> Dict[str, Any]:
        def body():
            _, pop = self._inputs('factory')
            g, w = self._graph('weighted_edges.csv', pop, 'factory')
            net = WeightedNetwork(g, w)
            factories = load_factories(self.config.factories)
            fg = allocate(net, factories, self.config.tau_km, self.seed)
            report = factory_report(fg)
            report['tau_km'] = self.config.tau_km
            names = [self._write_csv('factory_edges.csv', fg.to_frame()),
                     self._write_json('factory_report.json', report)]
            self._record('factory', names)
            return report, f"{report['n_factory_edges']} 条工厂边"
        return self._run_stage('factory', body)

    def bootstrap(self) -> Dict[str, Any]:
        def body():
            io, pop = self._inputs('bootstrap')
            cfg = self.fit_config(pop, io)
            result = bootstrap_fit(pop, io, cfg, self.config.bootstrap_replicates, self.config.bootstrap_firms,
                                   self.seed)
            payload = result.to_dict()
            name = self._write_json('bootstrap.json', payload)
            self._record('bootstrap', [name])
            return payload, f"{payload['n_replicates']} 次复制, 失败 {payload['n_failed']}"
        return self._run_stage('bootstrap', body)

    def diagnostics(self) -> Dict[str, Any]:
        def body():
            io, pop = self._inputs('diagnostics')
            params = self._params(io, 'diagnostics')
            provider = GravityProbability(pop, io, params, self.config.sample_bins)
            ensemble = ensemble_stats(provider, seed=self.seed, threads=self.threads)
            draws = [sample_graph(provider, self.seed, d, self.threads) for d in range(self.config.draws)]
            report = concentration_report(draws, ensemble, self.config.confidence)
            name = self._write_json('ensemble_report.json', report)
            self._record('diagnostics', [name])
            return report, (f"{report['n_draws']} 次抽样, 最大违背比例 {report['max_violation_fraction']:.4f}, "
                            f"z 均值 {report['z_mean']:.3f}")
        return self._run_stage('diagnostics', body)

    def bench(self) -> Dict[str, Any]:
        def body():
            c = self.config
            result = scaling_benchmark(c.bench_sizes, c.bench_bins, c.bench_repeats, self.seed, self.threads,
                                       sample_bins=c.sample_bins)
            name = self._write_csv('bench.csv', result.table)
            self._record('bench', [name])
            return result.to_dict(), f"{len(result.table)} 行, 斜率 {result.slopes}"
        return self._run_stage('bench', body)

    def audit(self) -> Dict[str, Any]:
        """审计只读清单与产物，不改写清单；audit.json 沿用清单里的 config_hash 与 seed"""
        def body():
            report = pipeline_audit(self.run_dir)
            manifest = load_manifest(self._path('manifest.yaml'))
            write_json_artifact(self._path('audit.json'), report, manifest.get('config_hash', ''),
                                int(manifest.get('seed', 0)))
            if not report['passed']:
                failed = [chk for chk in report['checks'] if not chk['ok']]
                raise AuditError('AuditFailed', f"{len(failed)} 项检查未通过: {[chk['name'] for chk in failed]}",
                                 {'failed': failed})
            return report, f"{len(report['checks'])} 项检查全部通过"
        return self._run_stage('audit', body)

    def _needs_ingest(self) -> bool:
        for name in ('io_table.csv', 'population.csv'):
            path = self._path(name)
            if not path.exists() or read_provenance(path) != (self.config_hash, self.seed):
                return True
        return False

    def pipeline(self, which: str = 'total') -> Dict[str, Any]:
        """fit → sample → close → weight → stats；企业表缺失或来自其他配置时先执行 ingest"""
        if self._needs_ingest():
            self.ingest()
        for stage in PIPELINE_STAGES[:-1]:
            getattr(self, stage)()
        return self.stats(which)
