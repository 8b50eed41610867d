import numpy as np
import pytest

from geoflow import flow, oracle
from geoflow.errors import DisconnectedGraph
from geoflow.graph import build_graph

from conftest import path_graph, random_density, random_graph


class TestGW2TwoNode:
    # (2 / w) * (sqrt(a) - sqrt(b))**2 with a, b the donor's start and end mass
    def test_closed_form_frozen_values(self):
        inst = oracle.TwoNodeInstance(1.0, (0.5, 0.5), (0.9, 0.1))
        assert oracle.gw2_two_node_closed_form(inst) == pytest.approx(0.3055728090000842, rel=1e-14)
        inst = oracle.TwoNodeInstance(2.0, (0.2, 0.8), (0.6, 0.4))
        assert oracle.gw2_two_node_closed_form(inst) == pytest.approx(0.06862915010152394, rel=1e-14)

    def test_numeric_path_matches(self):
        inst = oracle.TwoNodeInstance(1.0, (0.5, 0.5), (0.9, 0.1))
        assert oracle.gw2_two_node_numeric(inst, 1000) == pytest.approx(0.3055728090000842, rel=1e-6)

    def test_zero_distance_and_symmetry(self):
        same = oracle.TwoNodeInstance(1.5, (0.3, 0.7), (0.3, 0.7))
        assert oracle.gw2_two_node_closed_form(same) == 0.0
        a = oracle.TwoNodeInstance(1.5, (0.3, 0.7), (0.6, 0.4))
        b = oracle.TwoNodeInstance(1.5, (0.6, 0.4), (0.3, 0.7))
        assert oracle.gw2_two_node_closed_form(a) != pytest.approx(oracle.gw2_two_node_closed_form(b))

    def test_refinement_decreases_numeric_cost(self):
        inst = oracle.TwoNodeInstance(0.7, (0.1, 0.9), (0.8, 0.2))
        costs = [oracle.gw2_two_node_numeric(inst, k) for k in (10, 100, 1000)]
        assert costs[0] >= costs[1] >= costs[2]
        assert costs[2] == pytest.approx(oracle.gw2_two_node_closed_form(inst), rel=1e-4)

    def test_inverse_weight_scaling(self):
        a = oracle.TwoNodeInstance(1.0, (0.4, 0.6), (0.7, 0.3))
        b = oracle.TwoNodeInstance(4.0, (0.4, 0.6), (0.7, 0.3))
        assert oracle.gw2_two_node_closed_form(a) == pytest.approx(4 * oracle.gw2_two_node_closed_form(b))


class TestTheorems:
    def test_theorem1_single_instance(self):
        res = oracle.check_theorem1_two_node([0.3, 1.1], (0.6, 0.4), beta=0.2, tau=0.3, grid=10_000)
        assert abs(res["lhs_argmax"] - res["rhs_argmax"]) <= 2e-4

    def test_theorem2_trend_shape(self):
        rng = np.random.default_rng(0)
        ratios = oracle.check_theorem2_trend(path_graph(5), rng.uniform(size=5), 0.5,
                                             flow.FlowConfig(beta=0.5, tau=0.02), [0, 10, 100, 1000])
        assert ratios[0] == 0.0
        assert all(b >= a for a, b in zip(ratios, ratios[1:]))
        assert ratios[-1] > 0.99

    def test_theorem2_needs_connected_graph(self):
        g = build_graph(4, [(0, 1), (2, 3)])
        with pytest.raises(DisconnectedGraph):
            oracle.check_theorem2_trend(g, np.arange(4.0), 0.5, flow.FlowConfig(beta=0.5), [0, 1])


class TestReferences:
    def test_dense_derivative_agrees(self, rng):
        g = random_graph(rng, 9, 0.5)
        q = random_density(rng, 9)
        loss = rng.uniform(size=9)
        np.testing.assert_allclose(flow.density_derivative(q, loss, g, 0.3),
                                   oracle.dense_derivative(q, loss, g.adjacency.toarray(), 0.3), atol=1e-15)

    def test_finite_diff_on_quadratic(self):
        grad = oracle.finite_diff_gradient(lambda v: float(v @ v), np.array([1.0, -2.0]))
        np.testing.assert_allclose(grad, [2.0, -4.0], rtol=1e-8)

    def test_fine_reference_equals_flow_at_same_step(self, rng):
        g = path_graph(4)
        loss = rng.uniform(size=4)
        ref = oracle.fine_step_reference(None, loss, g, 0.2, 0.5, 50)
        got = flow.run_flow(None, loss, g, flow.FlowConfig(beta=0.2, tau=0.01, t_in=50)).final
        np.testing.assert_allclose(got, ref, atol=1e-13)

    def test_first_differing_step_on_path(self):
        g = path_graph(6)
        base = np.linspace(0, 1, 6)
        bumped = base.copy()
        bumped[0] += 1
        first = oracle.first_differing_step(g, base, bumped, flow.FlowConfig(beta=0.1, t_in=8))
        np.testing.assert_array_equal(first, [1, 1, 2, 3, 4, 5])


class TestBattery:
    def test_selector_gw2_only(self):
        report = oracle.run_checks("gw2", timings=False)
        assert list(report) == ["gw2_closed_vs_numeric"]
        assert report["gw2_closed_vs_numeric"]["passed"] is True
        assert "seconds" not in report["gw2_closed_vs_numeric"]

    def test_unknown_selector(self):
        with pytest.raises(ValueError):
            oracle.run_checks("everything")

    def test_all_pass(self):
        report = oracle.run_checks("all")
        assert {r["group"] for r in report.values()} == {"flow", "gradients", "theorem1", "theorem2", "gw2"}
        assert all(r["passed"] for r in report.values()), {k: r for k, r in report.items() if not r["passed"]}

    def test_corrupted_velocity_is_caught(self, monkeypatch):
        real = flow._velocity
        monkeypatch.setattr(flow, "_velocity", lambda *a: -real(*a))
        report = oracle.run_checks("flow", timings=False)
        assert not report["monotone_free_energy"]["passed"]
        assert not report["skew_symmetry"]["passed"]
