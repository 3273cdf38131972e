import math

import numpy as np
import pytest
from scipy.optimize import minimize

from fusionlab.baselines import (
    DecisionTree,
    KernelSVM,
    LogisticRegression,
    RandomForest,
    StackingClassifier,
    _best_split,
    forest_fit,
    load_estimator,
    logreg_loss_grad,
    platt_fit,
    rbf_kernel,
    save_estimator,
    svm_fit,
)
from fusionlab.dataio import SynthConfig, generate_synthetic
from fusionlab.exceptions import DegenerateDataError, FormatError, ShapeError, StratificationError
from fusionlab.numcore import SeededRng, finite_diff_grad

from oracles import gini_best_split, softmax_list


def blobs(n_per=20, d=2, sep=4.0, seed=0):
    r = SeededRng(seed)
    y = np.repeat([1, 2, 3], n_per)
    X = r.normal((3 * n_per, d))
    angles = 2 * math.pi * (y - 1) / 3
    X[:, 0] += sep * np.cos(angles)
    X[:, 1] += sep * np.sin(angles)
    return X, y


def simplex_ok(p):
    return np.all(p >= -1e-12) and np.allclose(p.sum(axis=1), 1.0, atol=1e-9)


class TestLogReg:
    def test_separable_1d(self):
        X = np.array([[-3.0], [-2.0], [-1.0], [1.0], [2.0], [3.0]])
        y = np.array([1, 1, 1, 2, 2, 2])
        m = LogisticRegression(l2=0.0, max_iter=2000).fit(X, y)
        assert (m.predict(X) == y).all()

    def test_strong_l2_uniform(self):
        X, y = blobs()
        m = LogisticRegression(l2=1e8).fit(X, y)
        assert np.abs(m.coef_).max() < 1e-6
        np.testing.assert_allclose(m.predict_proba(X), 1 / 3, atol=1e-6)

    def test_gradient_at_zero(self):
        X, y = blobs(5, d=3)
        W0, b0 = np.zeros((3, 3)), np.zeros(3)
        _, gW, gb = logreg_loss_grad(W0, b0, X, y, 0.1)
        theta = np.concatenate([W0.ravel(), b0])
        f = lambda t: logreg_loss_grad(t[:9].reshape(3, 3), t[9:], X, y, 0.1)[0]
        np.testing.assert_allclose(np.concatenate([gW.ravel(), gb]), finite_diff_grad(f, theta), atol=1e-5)

    def test_manual_softmax_oracle(self):
        X, y = blobs(8)
        m = LogisticRegression().fit(X, y)
        p = m.predict_proba(X[:5])
        for row, x in zip(p, X[:5]):
            z = [sum(x[i] * m.coef_[i, k] for i in range(2)) + m.intercept_[k] for k in range(3)]
            np.testing.assert_allclose(row, softmax_list(z), atol=1e-12)

    def test_zero_model_uniform(self):
        m = LogisticRegression()
        m.coef_, m.intercept_, m.n_features_in_ = np.zeros((2, 3)), np.zeros(3), 2
        np.testing.assert_allclose(m.predict_proba(np.ones((4, 2))), 1 / 3)

    def test_convex_descent(self):
        X, y = blobs(10, seed=3)
        m = LogisticRegression(l2=0.01).fit(X, y)
        zero = logreg_loss_grad(np.zeros((2, 3)), np.zeros(3), X, y, 0.01)[0]
        assert logreg_loss_grad(m.coef_, m.intercept_, X, y, 0.01)[0] <= zero
        assert np.all(np.isfinite(m.coef_))

    def test_errors(self):
        with pytest.raises(DegenerateDataError):
            LogisticRegression().fit(np.ones((3, 2)), [1, 1, 1])
        m = LogisticRegression().fit(*blobs(5))
        with pytest.raises(ShapeError):
            m.predict_proba(np.ones((2, 3)))
        with pytest.raises(ValueError):
            LogisticRegression().fit(np.ones((2, 2)), [1, 5])


def qp_dual_decision(X, yb, gamma, lam):
    """Exact hinge-loss SVM dual for the kernel K + 1, solved with L-BFGS-B."""
    n = len(yb)
    K = rbf_kernel(X, X, gamma) + 1.0
    Q = (yb[:, None] * yb[None, :]) * K
    upper = 1.0 / (lam * n)

    def neg_dual(a):
        return 0.5 * a @ Q @ a - a.sum(), Q @ a - 1.0

    res = minimize(neg_dual, np.zeros(n), jac=True, method="L-BFGS-B", bounds=[(0, upper)] * n)
    return K @ (res.x * yb)


class TestSVM:
    def test_xor(self):
        X = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
        y = np.array([1, 1, 2, 2])
        m = KernelSVM(gamma=2.0, reg=1e-3, epochs=200).fit(X, y)
        assert (m.predict(X) == y).all()

    def test_separable(self):
        X, y = blobs(15, sep=6.0)
        assert (KernelSVM().fit(X, y).predict(X) == y).all()

    def test_dual_oracle_sign_match(self):
        r = SeededRng(4)
        X = r.normal((20, 2))
        y = np.where(X[:, 0] + 0.5 * X[:, 1] + 0.3 * r.normal(20) > 0, 1, 2)
        m = KernelSVM(gamma=0.5, epochs=300, random_state=1).fit(X, y)
        ours = m.decision_function(X)[:, 0]
        exact = qp_dual_decision(X, np.where(y == 1, 1.0, -1.0), 0.5, m.reg_)
        assert np.mean(np.sign(ours) == np.sign(exact)) >= 0.95

    def test_support_vectors_per_problem(self):
        X, y = blobs(10)
        m = KernelSVM().fit(X, y)
        assert m.gamma_ > 0
        assert np.all(np.any(m.dual_coef_ != 0, axis=0))

    def test_far_point_and_symmetric_point(self):
        X, y = blobs(20, sep=5.0)
        m = KernelSVM().fit(X, y)
        # just beyond each class centre; much further out an RBF decision value decays to the bias
        far = np.array([[6.0 * math.cos(a), 6.0 * math.sin(a)] for a in (0, 2 * math.pi / 3, 4 * math.pi / 3)])
        p = m.predict_proba(far)
        assert p[0, 0] > 0.9 and p[1, 1] > 0.9 and p[2, 2] > 0.9
        # exactly symmetric training set: the centre is equidistant from every class
        base = np.array([[5.0, 0.0], [5.5, 0.3], [5.5, -0.3]])
        pts, labels = [], []
        for k in range(3):
            c, s = math.cos(2 * math.pi * k / 3), math.sin(2 * math.pi * k / 3)
            pts.append(base @ np.array([[c, s], [-s, c]]))
            labels += [k + 1] * 3
        Xs = np.vstack(pts)
        ms = KernelSVM(gamma=0.1, epochs=50).fit(Xs, np.array(labels))
        np.testing.assert_allclose(ms.predict_proba(np.zeros((1, 2))), 1 / 3, atol=0.05)

    def test_platt_monotone(self):
        f = np.linspace(-3, 3, 40)
        A, B = platt_fit(f, f > 0)
        assert A < 0
        p = 1 / (1 + np.exp(A * f + B))
        assert np.all(np.diff(p) > 0)

    def test_deterministic(self):
        X, y = blobs(10)
        a = svm_fit(X, y, seed=3).predict_proba(X)
        assert np.array_equal(a, svm_fit(X, y, seed=3).predict_proba(X))


class TestForest:
    def test_training_accuracy(self):
        r = SeededRng(2)
        X = r.normal((20, 2))
        y = np.where(X[:, 0] > 0, 1, np.where(X[:, 1] > 0, 2, 3))
        assert (RandomForest(n_estimators=30, random_state=0).fit(X, y).predict(X) == y).all()

    def test_same_seed_identical(self):
        X, y = blobs(10)
        a = forest_fit(X, y, n_trees=20, seed=5)
        b = forest_fit(X, y, n_trees=20, seed=5)
        for ta, tb in zip(a.estimators_, b.estimators_):
            assert np.array_equal(ta.threshold_, tb.threshold_) and np.array_equal(ta.feature_, tb.feature_)
        assert np.array_equal(a.predict_proba(X), b.predict_proba(X))

    def test_gini_four_points(self):
        x = np.array([0.0, 1.0, 2.0, 5.0])
        y = np.array([1, 1, 2, 2])
        f, thr = _best_split(x[:, None], y, np.array([0]))
        assert f == 0 and thr == gini_best_split(x.tolist(), y.tolist()) == 1.5
        tree = DecisionTree(max_depth=3, max_features=1).fit(x[:, None], y, SeededRng(0))
        assert tree.threshold_[0] == 1.5

    def test_gini_random_oracle(self):
        for seed in range(20):
            r = SeededRng(seed)
            x = np.round(r.normal(12), 1)
            y = r.integers(3, 12) + 1
            split = _best_split(x[:, None], y, np.array([0]))
            want = gini_best_split(x.tolist(), y.tolist())
            assert (split is None and want is None) or split[1] == pytest.approx(want)

    def test_vote_oracle_and_structure(self):
        X, y = blobs(15, d=3, sep=2.0, seed=1)
        m = RandomForest(n_estimators=25, max_depth=4, random_state=2).fit(X, y)
        votes = np.zeros((len(X), 3))
        for tree in m.estimators_:
            for i, x in enumerate(X):
                node = 0
                while tree.feature_[node] >= 0:
                    node = tree.left_[node] if x[tree.feature_[node]] <= tree.threshold_[node] else tree.right_[node]
                votes[i, int(np.argmax(tree.value_[node]))] += 1
            assert tree.depth_ <= 4
            leaves = tree.feature_ < 0
            internal = ~leaves
            # children partition their parent's counts
            np.testing.assert_array_equal(
                tree.value_[internal], tree.value_[tree.left_[internal]] + tree.value_[tree.right_[internal]]
            )
            assert tree.value_[0].sum() == len(X)
        np.testing.assert_array_equal(m.predict_proba(X), votes / 25)

    def test_unanimous_row(self):
        X = np.array([[0.0], [0.1], [10.0], [10.1]])
        m = RandomForest(n_estimators=10, random_state=0).fit(X, [1, 1, 2, 2])
        p = m.predict_proba(np.array([[-5.0]]))
        assert p.tolist() == [[1.0, 0.0, 0.0]]


class TestStacking:
    def test_meta_width_and_composition(self):
        X, y = blobs(12)
        m = StackingClassifier(n_estimators=15, random_state=1).fit(X, y)
        assert m.meta_.coef_.shape == (3, 3)
        manual = m.meta_.predict_proba(m.base_.predict_proba(X))
        np.testing.assert_array_equal(m.predict_proba(X), manual)
        assert m.oof_proba_.shape == (len(X), 3)

    def test_not_worse_than_forest(self):
        X, y = blobs(20, sep=5.0)
        st = StackingClassifier(n_estimators=20, random_state=0).fit(X, y)
        rf = RandomForest(n_estimators=20, random_state=0).fit(X, y)
        assert np.mean(st.predict(X) == y) >= np.mean(rf.predict(X) == y) - 0.05

    def test_deterministic(self):
        X, y = blobs(10)
        a = StackingClassifier(n_estimators=10, random_state=4).fit(X, y).predict_proba(X)
        b = StackingClassifier(n_estimators=10, random_state=4).fit(X, y).predict_proba(X)
        assert np.array_equal(a, b)

    def test_zero_meta_uniform(self):
        X, y = blobs(10)
        m = StackingClassifier(n_estimators=10).fit(X, y)
        m.meta_.coef_ = np.zeros((3, 3))
        m.meta_.intercept_ = np.zeros(3)
        np.testing.assert_allclose(m.predict_proba(X), 1 / 3)

    def test_small_class(self):
        X, y = blobs(10)
        y = y.copy()
        y[y == 3] = 1
        y[:3] = 3
        with pytest.raises(StratificationError):
            StackingClassifier(n_estimators=5).fit(X, y)


def small_models():
    return [
        LogisticRegression(),
        KernelSVM(epochs=10),
        RandomForest(n_estimators=10, random_state=3),
        StackingClassifier(n_estimators=8, random_state=3),
    ]


@pytest.mark.parametrize("model", small_models(), ids=lambda m: type(m).__name__)
def test_simplex_and_sklearn_api(model):
    X, y = blobs(10, d=3, sep=2.0)
    p = model.fit(X, y).predict_proba(X)
    assert simplex_ok(p)
    assert set(model.predict(X)) <= {1, 2, 3}
    assert model.get_params() == type(model)(**model.get_params()).get_params()


@pytest.mark.parametrize("model", small_models(), ids=lambda m: type(m).__name__)
def test_label_permutation(model):
    X, y = blobs(10, d=2, sep=4.0, seed=6)
    perm = {1: 3, 2: 1, 3: 2}
    y2 = np.array([perm[v] for v in y])
    p1 = model.fit(X, y).predict_proba(X)
    p2 = type(model)(**model.get_params()).fit(X, y2).predict_proba(X)
    cols = [perm[c] - 1 for c in (1, 2, 3)]
    np.testing.assert_allclose(p2[:, cols], p1, atol=1e-9)


@pytest.mark.parametrize("model", small_models(), ids=lambda m: type(m).__name__)
def test_persistence_round_trip(model, tmp_path):
    X, y = blobs(10, d=3)
    model.fit(X, y)
    save_estimator(model, tmp_path / "m.bin")
    back = load_estimator(tmp_path / "m.bin")
    assert np.array_equal(back.predict_proba(X), model.predict_proba(X))
    assert back.get_params() == model.get_params()


def test_persistence_errors(tmp_path):
    p = tmp_path / "m.bin"
    save_estimator(LogisticRegression().fit(*blobs(5)), p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_estimator(p)
    p.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(FormatError):
        load_estimator(p)
    p.write_bytes(raw + b"\x00")
    with pytest.raises(FormatError):
        load_estimator(p)


def test_forest_on_synthetic_text_view():
    c = generate_synthetic(SynthConfig(n_per_class=30, d_T=4, d_I=4, seed=2))
    m = RandomForest(n_estimators=20).fit(c.features("text"), c.labels)
    assert simplex_ok(m.predict_proba(c.features("text")))
