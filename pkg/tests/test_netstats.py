#!/usr/bin/env python3
"""网络统计与度分布，以 networkx 为参照"""

import networkx as nx
import numpy as np
import pandas as pd
import pytest

from conftest import make_graph, make_population
from netstats import ccdf_powerlaw_fit, degree_ccdf, summarize


def _random_graph(n: int, m: int, seed: int, loops: bool = True):
    rng = np.random.default_rng(seed)
    edges = set(zip(rng.integers(0, n, m).tolist(), rng.integers(0, n, m).tolist()))
    if not loops:
        edges = {(i, j) for i, j in edges if i != j}
    return make_graph(make_population(n, 2, seed), sorted(edges))


def _to_nx(g, loops: bool = False) -> nx.DiGraph:
    G = nx.DiGraph()
    G.add_nodes_from(range(g.n_nodes))
    G.add_edges_from((i, j) for i, j in zip(g.src.tolist(), g.dst.tolist()) if loops or i != j)
    return G


@pytest.mark.parametrize('seed', range(4))
def test_matches_networkx(seed):
    g = _random_graph(80, 400, seed)
    summary = summarize(g)
    G = _to_nx(g)
    assert summary.n_edges == G.number_of_edges()
    assert summary.density == pytest.approx(nx.density(G))
    assert summary.reciprocity == pytest.approx(nx.reciprocity(G))
    assert summary.clustering == pytest.approx(nx.average_clustering(G.to_undirected()))
    for x, y in (('in', 'in'), ('in', 'out'), ('out', 'in'), ('out', 'out')):
        expected = nx.degree_pearson_correlation_coefficient(G, x=x, y=y)
        assert summary.assortativity[f"{x}_{y}"] == pytest.approx(expected, abs=1e-10)


def test_self_loops_are_optional():
    pop = make_population(4, 2)
    g = make_graph(pop, [(0, 0), (0, 1), (1, 0), (2, 3)])
    without = summarize(g)
    with_loops = summarize(g, include_self_loops=True)
    assert without.n_edges == 3
    assert with_loops.n_edges == 4
    assert without.density == pytest.approx(3 / 12)
    assert with_loops.density == pytest.approx(4 / 16)
    assert without.reciprocity == pytest.approx(2 / 3)


def test_undefined_values_are_none():
    single = summarize(make_graph(make_population(1, 1), []))
    assert single.density is None
    assert single.reciprocity is None
    assert single.clustering is None
    assert all(v is None for v in single.assortativity.values())

    loops_only = summarize(make_graph(make_population(3, 1), [(0, 0), (1, 1)]))
    assert loops_only.density == 0.0
    assert loops_only.reciprocity is None

    body = summarize(make_graph(make_population(3, 1), [(0, 1)])).to_dict()
    assert body['assortativity']['out_in'] is None
    assert body['include_self_loops'] is False


def test_degree_ccdf():
    pop = make_population(4, 1)
    g = make_graph(pop, [(0, 1), (0, 2), (0, 3), (1, 2)])
    ccdf = degree_ccdf(g, 'out')
    assert ccdf['degree'].tolist() == [0, 1, 3]
    np.testing.assert_allclose(ccdf['ccdf'], [1.0, 0.5, 0.25])
    total = degree_ccdf(g, 'total')
    assert total['ccdf'].iloc[0] == 1.0
    assert np.all(np.diff(total['ccdf']) < 0)
    with pytest.raises(ValueError):
        degree_ccdf(g, 'both')


def test_ccdf_powerlaw_fit():
    degree = np.array([1, 2, 4, 8, 16, 32, 64, 128])
    ccdf = pd.DataFrame({'degree': degree, 'ccdf': degree ** -1.5})
    fit = ccdf_powerlaw_fit(ccdf)
    assert fit['slope'] == pytest.approx(-1.5)
    assert fit['r2'] == pytest.approx(1.0)
    assert fit['decades'] == pytest.approx(np.log10(128))
    window = ccdf_powerlaw_fit(ccdf, d_min=4, d_max=32)
    assert window['n_points'] == 4

    short = ccdf_powerlaw_fit(ccdf, d_min=64)
    assert short['slope'] is None and short['n_points'] == 2
