#!/usr/bin/env python3
"""
io2net (I2N) 命令行入口

    python i2n.py [--config config/config.toml] [--seed 42] [--threads 4] <subcommand> [options]

子命令: ingest fit sample close weight stats factory bootstrap diagnostics bench audit pipeline
I2NError → 错误 JSON 写到 stderr，退出码 2；其他异常 → InternalError，退出码 1。
"""

import argparse
import json
import os
import sys
from typing import Any, Dict, List, Optional

# 添加项目路径
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import ConfigManager, I2NConfig
from pipeline_service import PipelineService
from utils.errors import I2NError
from utils.files import dumps_json
from utils.logger import setup_logging


def _ingest_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group('ingest')
    g.add_argument('--io-table', dest='io_table', help='投入产出表 CSV')
    g.add_argument('--firm-bins', dest='firm_bins', help='企业规模分箱表 CSV')
    g.add_argument('--concordance', help='行业代码对照表 CSV')
    g.add_argument('--firms', help='原始企业表 CSV（配合 --concordance）')
    g.add_argument('--retain-fraction', dest='retain_fraction', type=float, help='单元格保留比例 r')
    return p


def _fit_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group('fit')
    g.add_argument('--target-links', dest='target_links', type=float, help='目标连边数 n_d')
    g.add_argument('--target-density', dest='target_density', type=float, help='目标密度')
    g.add_argument('--bins', type=int, help='每部门规模分箱数，0 为精确计算')
    g.add_argument('--sector-tol', dest='sector_tol', type=float, help='部门误差带 ε_g')
    g.add_argument('--max-iter', dest='max_iter', type=int, help='外层迭代上限')
    g.add_argument('--lambda-from', dest='lambda_from', help='固定 λ：此前拟合的 params.json')
    return p


def _sample_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group('sample')
    g.add_argument('--sample-bins', dest='sample_bins', type=int, help='抽样分箱数')
    return p


def _close_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group('close')
    g.add_argument('--theta', type=float, help='f_η 饱和水平 θ')
    g.add_argument('--eta', type=float, help='f_η 速率 η')
    g.add_argument('--exact-limit', dest='exact_limit', type=int, help='精确求解的候选数上限')
    return p


def _weight_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group('weight')
    g.add_argument('--firm-band', dest='firm_band', type=float, help='企业带 δ')
    g.add_argument('--sector-band', dest='weight_sector_band', type=float, help='部门带 ε_w')
    g.add_argument('--self-mean-cap', dest='self_mean_cap', type=float, help='自环均值上限 η₁')
    g.add_argument('--self-sq-cap', dest='self_sq_cap', type=float, help='自环平方均值上限 η₂')
    g.add_argument('--weight-floor', dest='weight_floor', type=float, help='边权下限 ε₀')
    return p


def _stats_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group('stats')
    g.add_argument('--include-self-loops', dest='include_self_loops', action='store_true', default=None,
                   help='统计量计入自环')
    g.add_argument('--degree', choices=['in', 'out', 'total'], default='total', help='CCDF 使用的度类型')
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='i2n', description='io2net: 由投入产出表重建企业级生产网络')
    parser.add_argument('--config', '-c', default='config/config.toml', help='配置文件路径 (TOML)')
    parser.add_argument('--seed', type=int, help='全局随机种子')
    parser.add_argument('--threads', type=int, help='线程数，0 表示全部核心')
    parser.add_argument('--output-dir', '-o', dest='output_dir', help='运行目录')
    parser.add_argument('--log-dir', dest='log_dir', help='日志目录')
    parser.add_argument('--log-level', dest='log_level', help='日志级别')

    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True
    ingest, fit, sample = _ingest_options(), _fit_options(), _sample_options()
    close, weight, stats = _close_options(), _weight_options(), _stats_options()

    sub.add_parser('ingest', parents=[ingest], help='读取输入并抽样企业')
    sub.add_parser('fit', parents=[fit], help='拟合引力模型')
    sub.add_parser('sample', parents=[sample], help='抽取骨架图并剔除孤立企业')
    sub.add_parser('close', parents=[close], help='强连通闭合并添加自环')
    sub.add_parser('weight', parents=[weight], help='最小能量赋权与平稳分布校验')
    sub.add_parser('stats', parents=[stats], help='网络统计与度分布 CCDF')

    p = sub.add_parser('factory', help='展开为工厂级网络')
    p.add_argument('--factories', help='工厂坐标表 CSV')
    p.add_argument('--tau-km', dest='tau_km', type=float, help='距离核尺度 τ（公里）')

    p = sub.add_parser('bootstrap', parents=[fit], help='bootstrap 参数不确定性')
    p.add_argument('--replicates', dest='bootstrap_replicates', type=int, help='复制次数')
    p.add_argument('--subsample', dest='bootstrap_firms', type=int, help='每次复制的企业数，0 为全体')

    p = sub.add_parser('diagnostics', parents=[sample], help='系综集中性诊断')
    p.add_argument('--draws', type=int, help='抽样次数')
    p.add_argument('--confidence', type=float, help='Bernstein 带置信水平 δ')

    p = sub.add_parser('bench', parents=[sample], help='规模基准测试')
    p.add_argument('--sizes', dest='bench_sizes', type=int, nargs='+', help='企业数列表')
    p.add_argument('--bench-bins', dest='bench_bins', type=int, nargs='+', help='分箱数列表（0 为精确）')
    p.add_argument('--repeats', dest='bench_repeats', type=int, help='每个规模的重复次数')

    sub.add_parser('audit', help='只依据运行目录中的文件复核全部不变量')
    sub.add_parser('pipeline', parents=[ingest, fit, sample, close, weight, stats],
                   help='fit → sample → close → weight → stats（必要时先 ingest）')
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """命令行中与配置字段同名的参数"""
    return {name: getattr(args, name) for name in I2NConfig.model_fields if hasattr(args, name)}


def run(command: str, service: PipelineService, args: argparse.Namespace) -> Any:
    if command in ('stats', 'pipeline'):
        return getattr(service, command)(args.degree)
    return getattr(service, command)()


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        manager = ConfigManager(args.config)
        config = manager.with_overrides(collect_overrides(args))
        setup_logging(config.log_dir, config.log_level)
        run(args.command, PipelineService(config), args)
        return 0
    except I2NError as e:
        print(dumps_json(e.to_dict()), file=sys.stderr)
        return 2
    except Exception as e:
        error = {'stage': args.command, 'code': 'InternalError', 'message': str(e),
                 'details': {'type': type(e).__name__}}
        print(json.dumps(error, ensure_ascii=False, indent=2), file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
