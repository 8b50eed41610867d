import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn import metrics as skm

from geoflow import model as M
from geoflow.errors import DimensionMismatch, EmptyMask, NoLabeledNodes
from geoflow.graph import build_graph
from geoflow.oracle import finite_diff_gradient

from conftest import path_graph, random_density


def _random_problem(rng, n=12, d=4, c=3, unlabeled=0.3):
    x = rng.standard_normal((n, d))
    y = rng.integers(0, c, n)
    y[rng.random(n) < unlabeled] = M.UNLABELED
    y[0] = 0
    params = M.ClassifierParams(rng.standard_normal((c, d)), rng.standard_normal(c))
    return x, y, params


class TestParams:
    def test_init_shapes_and_seed(self):
        p = M.init_params(5, 3, seed=4)
        assert p.weight.shape == (3, 5) and p.bias.shape == (3,)
        np.testing.assert_array_equal(p.bias, 0.0)
        np.testing.assert_array_equal(p.weight, M.init_params(5, 3, seed=4).weight)
        assert np.abs(p.weight).max() <= np.sqrt(6 / 8)

    def test_flat_round_trip(self, rng):
        p = M.ClassifierParams(rng.standard_normal((2, 3)), rng.standard_normal(2))
        q = M.ClassifierParams.from_flat(p.flat(), 2, 3)
        np.testing.assert_array_equal(q.weight, p.weight)
        np.testing.assert_array_equal(q.bias, p.bias)

    def test_json_round_trip(self, rng):
        p = M.ClassifierParams(rng.standard_normal((2, 3)), rng.standard_normal(2))
        q = M.ClassifierParams.from_json(p.to_json())
        np.testing.assert_array_equal(q.flat(), p.flat())


class TestPropagation:
    def test_zero_hops_is_identity(self, rng):
        x = rng.standard_normal((4, 2))
        np.testing.assert_array_equal(M.propagate_features(x, path_graph(4), M.PropagationConfig(hops=0)), x)

    def test_one_hop_hand_value(self):
        # two nodes, one unit edge, unit self-loops: every degree is 2
        x = np.array([[1.0], [3.0]])
        out = M.propagate_features(x, path_graph(2), M.PropagationConfig(hops=1))
        np.testing.assert_allclose(out, [[2.0], [2.0]])

    def test_matches_dense_formula(self, rng):
        g = build_graph(5, [(0, 1, 2.0), (1, 2, 0.5), (3, 4, 1.0)])
        a = g.adjacency.toarray() + 0.7 * np.eye(5)
        d = np.diag(1 / np.sqrt(a.sum(1)))
        s = d @ a @ d
        x = rng.standard_normal((5, 3))
        out = M.propagate_features(x, g, M.PropagationConfig(hops=3, self_loop_weight=0.7))
        np.testing.assert_allclose(out, s @ s @ s @ x, rtol=1e-12)

    def test_isolated_node_without_self_loop(self):
        g = build_graph(3, [(0, 1)])
        out = M.propagate_features(np.ones((3, 1)), g, M.PropagationConfig(hops=1, self_loop_weight=0.0))
        assert out[2, 0] == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            M.propagate_features(np.ones((3, 2)), path_graph(4), M.PropagationConfig())


class TestLoss:
    def test_per_node_loss_hand_value(self):
        p = M.ClassifierParams(np.zeros((2, 1)), np.array([0.0, np.log(3.0)]))
        loss = M.per_node_loss(p, np.zeros((3, 1)), np.array([0, 1, M.UNLABELED]))
        np.testing.assert_allclose(loss[:2], [np.log(4.0), np.log(4 / 3)])
        assert loss[2] == pytest.approx(loss[:2].mean())

    def test_matches_sklearn_log_loss(self, rng):
        x, y, p = _random_problem(rng, unlabeled=0.0)
        proba = np.exp(M.logits(p, x) - M.logits(p, x).max(1, keepdims=True))
        proba /= proba.sum(1, keepdims=True)
        expected = skm.log_loss(y, proba, labels=[0, 1, 2])
        assert M.per_node_loss(p, x, y).mean() == pytest.approx(expected, rel=1e-10)

    def test_no_labeled(self):
        p = M.init_params(2, 2, 0)
        with pytest.raises(NoLabeledNodes):
            M.per_node_loss(p, np.ones((3, 2)), np.full(3, M.UNLABELED))

    def test_label_out_of_range(self):
        p = M.init_params(2, 2, 0)
        with pytest.raises(DimensionMismatch):
            M.per_node_loss(p, np.ones((2, 2)), np.array([0, 2]))


class TestGradient:
    @pytest.mark.parametrize("impute", [True, False])
    def test_finite_differences(self, rng, impute):
        for _ in range(10):
            x, y, p = _random_problem(rng)
            q = random_density(rng, x.shape[0])
            analytic = M.weighted_loss_gradient(p, x, y, q, impute_grad=impute).flat()
            labeled = y != M.UNLABELED

            def objective(theta):
                pp = M.ClassifierParams.from_flat(theta, 3, 4)
                loss = M.per_node_loss(pp, x, y)
                if not impute:
                    # imputed entries held fixed at their current value
                    loss[~labeled] = M.per_node_loss(p, x, y)[~labeled]
                return float(np.dot(q, loss))

            numeric = finite_diff_gradient(objective, p.flat())
            np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8)

    def test_coefficients(self):
        q = np.array([0.1, 0.2, 0.3, 0.4])
        y = np.array([0, M.UNLABELED, 1, M.UNLABELED])
        np.testing.assert_allclose(M.gradient_coefficients(q, y), [0.4, 0.0, 0.6, 0.0])
        np.testing.assert_allclose(M.gradient_coefficients(q, y, False), [0.1, 0.0, 0.3, 0.0])

    def test_sgd_step(self):
        p = M.ClassifierParams(np.ones((2, 2)), np.zeros(2))
        g = M.ClassifierParams(np.full((2, 2), 2.0), np.ones(2))
        out = M.sgd_step(p, g, 0.25)
        np.testing.assert_array_equal(out.weight, 0.5)
        np.testing.assert_array_equal(out.bias, -0.25)
        np.testing.assert_array_equal(p.weight, 1.0)


class TestMetrics:
    def test_against_sklearn_multiclass(self, rng):
        y_true = rng.integers(0, 4, 200)
        y_pred = np.where(rng.random(200) < 0.6, y_true, rng.integers(0, 4, 200))
        m = M.classification_metrics(y_true, y_pred, 4)
        assert m.acc == pytest.approx(skm.accuracy_score(y_true, y_pred))
        assert m.balanced_acc == pytest.approx(skm.balanced_accuracy_score(y_true, y_pred))
        assert m.macro_f1 == pytest.approx(skm.f1_score(y_true, y_pred, average="macro"))
        assert m.roc_auc is None

    def test_auc_against_sklearn_with_ties(self, rng):
        y = rng.integers(0, 2, 300)
        s = np.round(rng.random(300) + 0.3 * y, 1)
        assert M.roc_auc_score(y, s) == pytest.approx(skm.roc_auc_score(y, s), rel=1e-12)

    def test_auc_single_class(self):
        assert M.roc_auc_score(np.zeros(5), np.arange(5.0)) is None

    def test_perfect_and_hand_values(self):
        m = M.classification_metrics(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]), 2, np.array([0.1, 0.6, 0.7, 0.9]))
        assert m.acc == 0.75
        assert m.balanced_acc == 0.75
        assert m.macro_f1 == pytest.approx((2 / 3 + 0.8) / 2)
        assert m.roc_auc == 1.0

    def test_evaluate(self, rng):
        x, y, p = _random_problem(rng, n=20, c=2, unlabeled=0.0)
        m = M.evaluate(p, x, y, range(10))
        assert m.acc == pytest.approx(np.mean(M.predict(p, x[:10]) == y[:10]))
        assert m.roc_auc is not None
        with pytest.raises(EmptyMask):
            M.evaluate(p, x, y, [])


@pytest.mark.filterwarnings("ignore:y_pred contains classes")
@settings(max_examples=60, deadline=None)
@given(st.integers(2, 5), st.lists(st.integers(0, 4), min_size=3, max_size=40), st.integers(0, 10**6))
def test_metrics_bounds_and_sklearn_agreement(c, labels, seed):
    y_true = np.array([v % c for v in labels])
    y_pred = np.random.default_rng(seed).integers(0, c, y_true.size)
    m = M.classification_metrics(y_true, y_pred, c)
    assert 0 <= m.acc <= 1 and 0 <= m.balanced_acc <= 1 and 0 <= m.macro_f1 <= 1
    assert m.balanced_acc == pytest.approx(skm.balanced_accuracy_score(y_true, y_pred))
    assert m.macro_f1 == pytest.approx(skm.f1_score(y_true, y_pred, average="macro", zero_division=0.0))
