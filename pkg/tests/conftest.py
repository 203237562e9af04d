#!/usr/bin/env python3
"""
共享测试夹具：小型投入产出表、合成企业群体、模型自洽的“真值”生成器、临时运行目录
"""

from pathlib import Path
from typing import Iterable, Optional, Tuple

import numpy as np
import pytest

from config import I2NConfig
from gravity import GravityParams, calibrate_multipliers
from ingest import FirmPopulation, IOTable, load_firm_bins, load_io_table, sample_firms
from sampler import SparseDigraph

TOY_DIR = Path(__file__).resolve().parent.parent / 'data' / 'toy'

TRUE_ALPHA = 0.44
TRUE_KAPPA = 0.32


def make_io(n_sectors: int = 3, seed: int = 0, density: float = 1.0) -> IOTable:
    """随机投入产出表；对角线总是正的，其余格按 density 保留"""
    rng = np.random.default_rng(seed)
    flows = rng.uniform(1.0, 10.0, size=(n_sectors, n_sectors))
    keep = rng.random((n_sectors, n_sectors)) < density
    np.fill_diagonal(keep, True)
    return IOTable([f"S{k}" for k in range(n_sectors)], flows * keep)


def make_population(n_firms: int, n_sectors: int = 3, seed: int = 0, decades: float = 2.0) -> FirmPopulation:
    """部门轮流分配，规模在 decades 个数量级内对数均匀"""
    rng = np.random.default_rng(seed)
    size = 10.0 ** rng.uniform(-decades, 0.0, size=n_firms)
    size /= size.max()
    return FirmPopulation(np.arange(n_firms), np.arange(n_firms) % n_sectors, size,
                          [f"S{k}" for k in range(n_sectors)])


def make_graph(pop: FirmPopulation, edges: Iterable[Tuple[int, int]]) -> SparseDigraph:
    edges = list(edges)
    src = np.array([e[0] for e in edges], dtype=np.int64)
    dst = np.array([e[1] for e in edges], dtype=np.int64)
    g = SparseDigraph.from_population(pop)
    return g.with_edges(src, dst, np.zeros(src.size, dtype=np.int8))


def complete_graph(pop: FirmPopulation, self_loops: bool = True) -> SparseDigraph:
    n = pop.n_firms
    return make_graph(pop, [(i, j) for i in range(n) for j in range(n) if self_loops or i != j])


def cycle_components(sizes, extra_edges: Iterable[Tuple[int, int]] = (), n_sectors: int = 2,
                     seed: int = 0) -> Tuple[SparseDigraph, list]:
    """每个分量是一个有向环（大小 1 的分量没有边），再加上 extra_edges"""
    n = int(sum(sizes))
    pop = make_population(n, n_sectors, seed)
    members, edges, start = [], [], 0
    for s in sizes:
        nodes = list(range(start, start + s))
        members.append(nodes)
        if s > 1:
            edges += [(nodes[i], nodes[(i + 1) % s]) for i in range(s)]
        start += s
    edges += list(extra_edges)
    return make_graph(pop, sorted(set(edges))), members


def truth_params(pop: FirmPopulation, io: IOTable, z: float = 1.0, alpha: float = TRUE_ALPHA,
                 kappa: float = TRUE_KAPPA) -> Tuple[GravityParams, float]:
    """模型自洽的真值：给定 (z, α, κ)，λ 使期望流入恰好等于部门规模；返回 (参数, 期望连边数)"""
    return calibrate_multipliers(pop, io, z, alpha, kappa)


@pytest.fixture
def io3() -> IOTable:
    return make_io(3, seed=1)


@pytest.fixture
def pop60() -> FirmPopulation:
    return make_population(60, 3, seed=2)


@pytest.fixture
def toy_inputs() -> Tuple[IOTable, FirmPopulation]:
    """data/toy 的投入产出表与按种子 7 抽样的企业"""
    io = load_io_table(TOY_DIR / 'io_table.csv')
    pop = sample_firms(load_firm_bins(TOY_DIR / 'firm_bins.csv'), 1.0, 7, io.sectors)
    return io, pop


@pytest.fixture
def run_config(tmp_path, toy_inputs):
    """
    玩具经济体的运行配置工厂

    目标连边数取真值参数下的期望连边数，权重带放宽到一定可行的程度。
    """
    io, pop = toy_inputs
    _, links = truth_params(pop, io)

    def build(output: str = 'run', threads: int = 1, **overrides) -> I2NConfig:
        values = dict(
            io_table=str(TOY_DIR / 'io_table.csv'),
            firm_bins=str(TOY_DIR / 'firm_bins.csv'),
            factories=str(TOY_DIR / 'factories.csv'),
            output_dir=str(tmp_path / output),
            log_dir=str(tmp_path / 'logs'),
            seed=7,
            threads=threads,
            target_links=float(round(links)),
            firm_band=0.5,
            weight_sector_band=0.5,
            self_mean_cap=0.9,
            self_sq_cap=0.9,
            qp_tol=1e-7,
            qp_max_iter=50000,
        )
        values.update(overrides)
        return I2NConfig(**values)

    return build


def write_text(path: Path, content: str, header: Optional[str] = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text((header or '') + content, encoding='utf-8')
    return path
