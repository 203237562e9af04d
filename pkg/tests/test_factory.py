#!/usr/bin/env python3
"""Haversine、显著度与工厂级展开"""

import numpy as np
import pytest

from conftest import complete_graph, make_graph, make_population
from factory import (EARTH_RADIUS_KM, FactoryError, allocate, factory_report, haversine, kernel,
                     prominence)
from ingest import FactoryTable
from weights import WeightedNetwork


def _random_network(n: int = 6, seed: int = 0) -> WeightedNetwork:
    rng = np.random.default_rng(seed)
    g = complete_graph(make_population(n, 2, seed))
    raw = rng.uniform(0.1, 1.0, size=g.n_edges)
    rows = np.bincount(g.src, weights=raw)
    return WeightedNetwork(g, raw / rows[g.src])


def _random_factories(n_firms: int, seed: int = 0, extra_firms=()) -> FactoryTable:
    rng = np.random.default_rng(seed)
    firm, factory = [], []
    for f in list(range(n_firms)) + list(extra_firms):
        for _ in range(int(rng.integers(1, 4))):
            firm.append(f)
            factory.append(len(factory))
    lat = rng.uniform(20.0, 45.0, size=len(firm))
    lon = rng.uniform(100.0, 125.0, size=len(firm))
    return FactoryTable.from_degrees(firm, factory, lat, lon)


def _three_per_firm(n_firms: int, seed: int = 0) -> FactoryTable:
    rng = np.random.default_rng(seed)
    firm = np.repeat(np.arange(n_firms), 3)
    lat = rng.uniform(20.0, 45.0, size=firm.size)
    lon = rng.uniform(100.0, 125.0, size=firm.size)
    return FactoryTable.from_degrees(firm, np.arange(firm.size), lat, lon)


class TestGeometry:
    def test_haversine(self):
        one_degree = haversine(0.0, 0.0, 0.0, np.radians(1.0))
        assert one_degree == pytest.approx(2 * np.pi * EARTH_RADIUS_KM / 360)
        assert haversine(0.0, 0.0, 0.0, np.pi) == pytest.approx(np.pi * EARTH_RADIUS_KM)
        assert haversine(0.3, 1.2, 0.3, 1.2) == 0.0
        d = haversine(np.zeros(3), np.zeros(3), np.zeros(3), np.radians([0.0, 1.0, 2.0]))
        assert d.shape == (3,)

    def test_kernel(self):
        assert kernel(0.0, 5.0) == 1.0
        assert kernel(5.0, 5.0) == pytest.approx(np.exp(-1.0))
        with pytest.raises(FactoryError) as exc:
            kernel(1.0, 0.0)
        assert exc.value.code == 'InvalidTau'
        assert exc.value.stage == 'factory'

    def test_prominence_sums_to_one_per_firm(self):
        table = _random_factories(5, seed=1)
        psi = prominence(table, 300.0)
        firms = table.frame['firm_id'].to_numpy()
        for f in np.unique(firms):
            assert psi[firms == f].sum() == pytest.approx(1.0)

    def test_prominence_prefers_central_factories(self):
        # 企业 0 的两个工厂：一个靠近企业 1，一个很远
        table = FactoryTable.from_degrees([0, 0, 1], [0, 1, 2], [0.0, 0.0, 0.0], [0.0, 60.0, 0.5])
        psi = prominence(table, 100.0)
        assert psi[0] > 0.99 and psi[2] == pytest.approx(1.0)

    def test_prominence_needs_two_firms(self):
        table = FactoryTable.from_degrees([0, 0], [0, 1], [0.0, 1.0], [0.0, 1.0])
        with pytest.raises(FactoryError) as exc:
            prominence(table, 100.0)
        assert exc.value.code == 'IsolatedGeometry'


class TestAllocate:
    @pytest.mark.parametrize('seed', range(3))
    def test_preserves_firm_weights(self, seed):
        net = _random_network(seed=seed)
        fg = allocate(net, _random_factories(6, seed=seed), tau_km=400.0, seed=seed)
        g = net.graph
        off = g.src != g.dst
        agg = fg.aggregate()
        assert len(agg) == int(off.sum())
        np.testing.assert_allclose(agg['weight'], net.weights[off], atol=1e-12)
        assert np.all(g.firm_id[fg.firm_src] != g.firm_id[fg.firm_dst])
        np.testing.assert_allclose(fg.sector_totals(), net.sector_totals(), atol=1e-12)
        report = factory_report(fg)
        assert report['max_aggregation_error'] <= 1e-12
        assert report['n_factory_edges'] == fg.n_edges

    def test_is_seeded(self):
        net = _random_network(seed=4)
        table = _random_factories(6, seed=4)
        a = allocate(net, table, 400.0, seed=2).to_frame()
        b = allocate(net, table, 400.0, seed=2).to_frame()
        assert a.equals(b)
        assert list(a.columns) == ['src_factory', 'dst_factory', 'src_firm', 'dst_firm', 'weight']

    def test_short_range_kernel_picks_nearest_factory(self):
        pop = make_population(2, 1)
        g = make_graph(pop, [(0, 0), (0, 1), (1, 0), (1, 1)])
        net = WeightedNetwork(g, np.full(4, 0.5))
        table = FactoryTable.from_degrees([0, 1, 1], [0, 1, 2], [0.0, 0.0, 0.0], [0.0, 1.0, 90.0])
        fg = allocate(net, table, tau_km=10.0, seed=0)
        frame = fg.to_frame()
        out_of_zero = frame[frame['src_firm'] == 0]
        assert out_of_zero['dst_factory'].tolist() == [1]
        assert out_of_zero['weight'].tolist() == [0.5]

    def test_firms_without_factories(self):
        net = _random_network(seed=1)
        table = FactoryTable.from_degrees([0, 1, 2], [0, 1, 2], [0.0, 1.0, 2.0], [0.0, 1.0, 2.0])
        with pytest.raises(FactoryError) as exc:
            allocate(net, table)
        assert exc.value.code == 'MissingFactories'
        assert exc.value.details['firm_ids'] == [3, 4, 5]

    def test_factories_of_pruned_firms_are_ignored(self):
        net = _random_network(seed=2)
        table = _random_factories(6, seed=2, extra_firms=[40, 41])
        fg = allocate(net, table, 400.0, seed=0)
        assert set(fg.factories.firms.tolist()) == set(range(6))
        assert fg.aggregate()['weight'].sum() == pytest.approx(net.weights[net.graph.src != net.graph.dst].sum())

    @pytest.mark.parametrize('seed', range(100))
    def test_twenty_firms_sixty_factories(self, seed):
        net = _random_network(20, seed=seed)
        fg = allocate(net, _three_per_firm(20, seed=seed), tau_km=300.0, seed=seed)
        off = net.graph.src != net.graph.dst
        agg = fg.aggregate()
        np.testing.assert_array_equal(agg['src'], net.graph.src[off])
        np.testing.assert_array_equal(agg['dst'], net.graph.dst[off])
        np.testing.assert_allclose(agg['weight'], net.weights[off], rtol=0, atol=1e-12)
        # 出度 19 ≥ 3：每个工厂至少一条出边
        assert set(np.unique(fg.src).tolist()) == set(range(60))

    def test_single_factory_per_firm_is_isomorphic(self):
        net = _random_network(8, seed=5)
        rng = np.random.default_rng(5)
        table = FactoryTable.from_degrees(np.arange(8), 100 + np.arange(8), rng.uniform(20.0, 45.0, 8),
                                          rng.uniform(100.0, 125.0, 8))
        fg = allocate(net, table, tau_km=200.0, seed=1)
        g = net.graph
        off = g.src != g.dst
        assert fg.n_edges == int(off.sum())
        np.testing.assert_array_equal(fg.src, g.src[off])
        np.testing.assert_array_equal(fg.dst, g.dst[off])
        np.testing.assert_array_equal(fg.weight, net.weights[off])
        frame = fg.to_frame()
        np.testing.assert_array_equal(frame['src_factory'], 100 + g.src[off])
        np.testing.assert_array_equal(frame['dst_factory'], 100 + g.dst[off])

    def test_shorter_range_gives_shorter_edges(self):
        net = _random_network(20, seed=9)
        mean = {}
        for tau in (50.0, 200.0, 1000.0):
            mean[tau] = np.mean([allocate(net, _three_per_firm(20, seed=s), tau_km=tau, seed=s).mean_distance()
                                 for s in range(10)])
        assert mean[50.0] < mean[200.0] < mean[1000.0]
