#!/usr/bin/env python3
"""最小能量权重：单纯形投影、对偶上升、可行性检查、平稳分布校验"""

import numpy as np
import pytest
from scipy.optimize import minimize

from conftest import complete_graph, make_graph
from ingest import FirmPopulation
import weights
from weights import (FAMILIES, WeightedNetwork, WeightProgram, WeightsError, feasibility_probe, is_feasible,
                     project_capped_simplex, solve_weights, stationary_check)


def _population(sizes, sectors=None) -> FirmPopulation:
    n = len(sizes)
    sectors = np.zeros(n, dtype=np.int64) if sectors is None else np.asarray(sectors)
    labels = [f"S{k}" for k in range(int(sectors.max()) + 1)]
    return FirmPopulation(np.arange(n), sectors, np.asarray(sizes, dtype=np.float64), labels)


def _heterogeneous(n: int = 15, seed: int = 0) -> FirmPopulation:
    sizes = np.random.default_rng(seed).uniform(0.4, 1.0, size=n)
    sizes /= sizes.max()
    return _population(sizes, np.arange(n) % 2)


def _reference(n: int = 100, seed: int = 0) -> FirmPopulation:
    """100 家企业、2 个部门、规模在 (0.1, 1] 上均匀"""
    sizes = np.random.default_rng(seed).uniform(0.1, 1.0, size=n)
    sizes /= sizes.max()
    return _population(sizes, np.arange(n) % 2)


def _assert_feasible(net: WeightedNetwork, prog: WeightProgram, slack: float = 1e-6):
    m = net.graph.size
    np.testing.assert_allclose(net.row_sums(), 1.0, atol=1e-9)
    assert np.all(net.weights >= prog.floor - 1e-12)
    assert np.all(net.weights <= 1.0 + 1e-12)
    assert np.all(np.abs(net.inflow() - m) <= prog.firm_band * m + slack)
    s = prog.sector_sizes
    assert np.all(np.abs(net.sector_totals() - s) <= prog.sector_band * s + slack)
    n = net.graph.n_nodes
    assert net.self_weights().sum() / n <= prog.self_mean_cap + slack
    assert (net.self_weights() ** 2).sum() / n <= prog.self_sq_cap + slack


class TestProjection:
    @pytest.mark.parametrize('seed', range(4))
    def test_projection_kkt(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.normal(0.0, 1.0, size=12)
        x = project_capped_simplex(y, 0.01, 0.3)
        assert x.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(x >= 0.01 - 1e-15) and np.all(x <= 0.3 + 1e-15)
        free = (x > 0.01) & (x < 0.3)
        shift = y[free] - x[free]
        np.testing.assert_allclose(shift, shift[0], atol=1e-12)
        # 被截断的分量与自由分量的次序一致
        if free.any():
            assert np.all(y[x <= 0.01] - 0.01 <= shift[0] + 1e-12)
            assert np.all(y[x >= 0.3] - 0.3 >= shift[0] - 1e-12)

    def test_point_inside_is_unchanged(self):
        y = np.array([0.2, 0.3, 0.5])
        np.testing.assert_allclose(project_capped_simplex(y, 0.0, 1.0), y, atol=1e-12)

    def test_empty_simplex(self):
        with pytest.raises(WeightsError) as exc:
            project_capped_simplex(np.zeros(3), 0.5, 1.0)
        assert exc.value.code == 'InvalidProgram'


class TestProgram:
    def test_rows_need_out_edges(self):
        pop = _population([1.0, 0.5, 0.5])
        with pytest.raises(WeightsError) as exc:
            WeightProgram(make_graph(pop, [(0, 1), (1, 0)]))
        assert exc.value.code == 'InvalidProgram'
        assert exc.value.details['row'] == 2

    def test_bands_must_be_positive(self):
        pop = _population([1.0, 0.5])
        with pytest.raises(WeightsError):
            WeightProgram(make_graph(pop, [(0, 1), (1, 0)]), firm_band=0.0)

    def test_inflated(self):
        prog = WeightProgram(complete_graph(_population([1.0, 0.5])), firm_band=0.1, self_sq_cap=0.2)
        wide = prog.inflated(3.0)
        assert wide.firm_band == pytest.approx(0.3)
        assert wide.self_sq_cap == pytest.approx(0.6)
        assert wide.floor == prog.floor


class TestSolve:
    def test_uniform_sizes_give_uniform_weights(self):
        n = 10
        pop = _population(np.ones(n))
        prog = WeightProgram(complete_graph(pop), self_mean_cap=0.2, self_sq_cap=0.2)
        net = solve_weights(prog)
        np.testing.assert_allclose(net.weights, 1.0 / n, atol=1e-12)

    def test_heterogeneous_complete_graph(self):
        prog = WeightProgram(complete_graph(_heterogeneous()), tol=1e-10, max_iter=200000)
        net = solve_weights(prog)
        _assert_feasible(net, prog)
        assert net.max_violation <= 1e-10

    def test_matches_slsqp(self):
        sizes = np.array([1.0, 0.8, 0.6, 0.4])
        sectors = np.array([0, 1, 0, 1])
        pop = _population(sizes, sectors)
        prog = WeightProgram(complete_graph(pop), firm_band=0.1, sector_band=0.1, self_mean_cap=0.5,
                             self_sq_cap=0.5, tol=1e-10, max_iter=200000)
        net = solve_weights(prog)

        n = 4
        s = np.bincount(sectors, weights=sizes)
        onehot = np.eye(2)[sectors]

        def inflow(w):
            return w.reshape(n, n).T @ sizes

        constraints = [
            {'type': 'eq', 'fun': lambda w: w.reshape(n, n).sum(axis=1) - 1.0},
            {'type': 'ineq', 'fun': lambda w: 1.1 * sizes - inflow(w)},
            {'type': 'ineq', 'fun': lambda w: inflow(w) - 0.9 * sizes},
            {'type': 'ineq', 'fun': lambda w: 1.1 * s - inflow(w) @ onehot},
            {'type': 'ineq', 'fun': lambda w: inflow(w) @ onehot - 0.9 * s},
            {'type': 'ineq', 'fun': lambda w: 0.5 - np.trace(w.reshape(n, n)) / n},
            {'type': 'ineq', 'fun': lambda w: 0.5 - np.sum(np.diag(w.reshape(n, n)) ** 2) / n},
        ]
        oracle = minimize(lambda w: np.sum(w ** 2), np.full(n * n, 1.0 / n), jac=lambda w: 2 * w,
                          method='SLSQP', bounds=[(prog.floor, 1.0)] * (n * n), constraints=constraints,
                          options={'ftol': 1e-14, 'maxiter': 1000})
        assert oracle.success
        np.testing.assert_allclose(net.weights, oracle.x, atol=1e-4)
        assert np.sum(net.weights ** 2) == pytest.approx(oracle.fun, rel=1e-6)

    def test_solution_is_unique(self):
        prog = WeightProgram(complete_graph(_heterogeneous(seed=4)), tol=1e-10, max_iter=200000)
        first = solve_weights(prog)
        second = solve_weights(prog, init_seed=3)
        np.testing.assert_allclose(first.weights, second.weights, atol=1e-4)

    def test_infeasible_program(self):
        pop = _population([1.0, 0.01, 0.01])
        prog = WeightProgram(make_graph(pop, [(0, 1), (1, 2), (2, 0)]), max_iter=2000)
        with pytest.raises(WeightsError) as exc:
            solve_weights(prog)
        assert exc.value.code == 'Infeasible'
        assert exc.value.details['family'] in FAMILIES
        # 企业 1 的流入 1 对规模 0.01：0.99 ≤ 0.1·t·0.01 ⇒ t ≥ 990
        assert exc.value.details['inflation'] == pytest.approx(990.0, rel=1e-3)
        assert exc.value.stage == 'weight'

    def test_slow_convergence_is_not_infeasible(self):
        prog = WeightProgram(complete_graph(_heterogeneous()), tol=1e-12, max_iter=1)
        assert is_feasible(prog)
        with pytest.raises(WeightsError) as exc:
            solve_weights(prog)
        assert exc.value.code == 'MaxIterations'
        assert exc.value.details['iterations'] == 1
        assert exc.value.details['violation'] > 1e-12
        assert 'inflation' not in exc.value.details

    def test_feasibility_oracle(self):
        pop = _population([1.0, 0.01, 0.01])
        cycle = WeightProgram(make_graph(pop, [(0, 1), (1, 2), (2, 0)]))
        assert not is_feasible(cycle)
        assert is_feasible(cycle.inflated(1000.0))
        assert not is_feasible(cycle.inflated(980.0))


class TestNecessaryConditions:
    def test_passes_for_reasonable_program(self):
        report = feasibility_probe(WeightProgram(complete_graph(_heterogeneous())))
        assert report['feasible']
        assert {c['name'] for c in report['checks']} == {'floor_vs_degree', 'self_mean_vs_floor',
                                                          'self_square_vs_floor'}

    def test_floor_too_large(self):
        prog = WeightProgram(complete_graph(_population([1.0, 0.5, 0.5])), floor=0.5)
        report = feasibility_probe(prog)
        assert not report['feasible']
        check = next(c for c in report['checks'] if c['name'] == 'floor_vs_degree')
        assert not check['ok'] and check['fix'] is not None

    def test_loop_only_rows_force_self_weight(self):
        pop = _population([1.0, 0.5, 0.5])
        prog = WeightProgram(make_graph(pop, [(0, 0), (1, 1), (2, 0), (2, 1)]))
        report = feasibility_probe(prog)
        mean = next(c for c in report['checks'] if c['name'] == 'self_mean_vs_floor')
        assert mean['value'] == pytest.approx(2 / 3)
        assert not mean['ok']


class TestStationary:
    def test_uniform_chain(self):
        pop = _population(np.ones(6))
        g = complete_graph(pop)
        net = WeightedNetwork(g, np.full(g.n_edges, 1.0 / 6))
        check = stationary_check(net, delta=0.1)
        assert check.l1_residual == pytest.approx(0.0, abs=1e-14)
        assert check.gamma == pytest.approx(1.0, abs=1e-6)
        assert check.passed
        assert check.to_dict()['pass'] is True

    def test_solved_network_passes(self):
        prog = WeightProgram(complete_graph(_heterogeneous(seed=2)), tol=1e-10, max_iter=200000)
        net = solve_weights(prog)
        check = stationary_check(net, delta=prog.firm_band)
        assert check.l1_residual <= prog.firm_band + 1e-8
        assert check.passed
        assert check.nu.sum() == pytest.approx(1.0)

    def test_periodic_chain_stalls(self):
        pop = _population([1.0, 0.5])
        net = WeightedNetwork(make_graph(pop, [(0, 1), (1, 0)]), np.ones(2))
        with pytest.raises(WeightsError) as exc:
            stationary_check(net, max_iter=50)
        assert exc.value.code == 'PowerIterationStalled'

    def test_unsettled_spectral_estimate_is_logged(self, mocker):
        pop = _population([1.0, 0.5])
        net = WeightedNetwork(complete_graph(pop), np.array([0.9, 0.1, 0.2, 0.8]))
        warning = mocker.spy(weights.logger, 'warning')
        check = stationary_check(net, delta=0.1, spectral_blocks=1)
        assert not check.gamma_converged
        assert check.to_dict()['gamma_converged'] is False
        warning.assert_called_once()
        assert check.gamma == pytest.approx(0.3, abs=1e-9)

    @pytest.mark.slow
    def test_tighter_firm_band_shrinks_stationary_gap(self):
        g = complete_graph(_reference())
        gaps = {}
        for delta in (0.1, 0.01):
            prog = WeightProgram(g, firm_band=delta, tol=1e-10, max_iter=500000)
            check = stationary_check(solve_weights(prog), delta=delta)
            assert check.passed
            gaps[delta] = check.l1_mu_nu
        assert gaps[0.01] * 5.0 <= gaps[0.1]


class TestReferenceFixture:
    def test_default_bands_on_hundred_firms(self):
        prog = WeightProgram(complete_graph(_reference()), firm_band=0.10, sector_band=0.10, self_mean_cap=0.10,
                             self_sq_cap=0.10, tol=1e-11, max_iter=500000)
        first = solve_weights(prog)
        _assert_feasible(first, prog, slack=1e-9)
        assert first.weights.shape == (prog.graph.n_edges,)
        assert np.all(first.weights > 0)
        assert first.to_csr().nnz == prog.graph.n_edges
        second = solve_weights(prog, init_seed=11)
        assert np.linalg.norm(first.weights - second.weights) <= 1e-6
        check = stationary_check(first, delta=prog.firm_band)
        assert check.passed
