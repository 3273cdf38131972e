"""Classical three-class baselines as scikit-learn style estimators.

All models emit probabilities over the fixed classes ``(1, 2, 3)`` even when a
class is absent from the training labels, so their ``predict_proba`` outputs
can be averaged and compared column by column.
"""

from __future__ import annotations

import math
import struct

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dataio import CLASSES, atomic_write
from .exceptions import ContractError, DegenerateDataError, FormatError, ShapeError, StratificationError
from .metrics import stratified_kfold
from .numcore import SeededRng, log_softmax, softmax

N_CLASSES = len(CLASSES)


def _check_labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    bad = ~np.isin(y, CLASSES)
    if bad.any():
        raise ValueError(f"labels must lie in {{1,2,3}}, got {y[bad][0]}")
    return y


def _onehot(y) -> np.ndarray:
    out = np.zeros((y.size, N_CLASSES))
    out[np.arange(y.size), y - 1] = 1.0
    return out


class _Base(ClassifierMixin, BaseEstimator):
    classes_ = np.array(CLASSES)

    def _validate_fit(self, X, y, min_classes=2):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = _check_labels(y)
        if np.unique(y).size < min_classes:
            raise DegenerateDataError(f"need at least {min_classes} classes, got {np.unique(y).tolist()}")
        self.n_features_in_ = X.shape[1]
        return X, y

    def _validate_predict(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


# logistic regression ------------------------------------------------------------


def logreg_loss_grad(W, b, X, y, l2):
    """Mean multinomial cross-entropy + ``l2/2 * ||W||^2`` and its gradients."""
    Z = X @ W + b
    logp = log_softmax(Z, axis=1)
    n = X.shape[0]
    loss = -logp[np.arange(n), y - 1].mean() + 0.5 * l2 * np.sum(W * W)
    G = (np.exp(logp) - _onehot(y)) / n
    return loss, X.T @ G + l2 * W, G.sum(axis=0)


class LogisticRegression(_Base):
    """Multinomial softmax regression fitted by full-batch gradient descent from zero.

    ``lr=None`` uses ``1 / L`` with ``L = ||[X 1]||_2^2 / (2n) + l2``, an upper
    bound on the curvature of the objective, so every step decreases the loss.
    """

    def __init__(self, l2: float = 1e-3, max_iter: int = 500, lr=None, tol: float = 1e-8):
        self.l2 = l2
        self.max_iter = max_iter
        self.lr = lr
        self.tol = tol

    def fit(self, X, y):
        X, y = self._validate_fit(X, y)
        n, d = X.shape
        W = np.zeros((d, N_CLASSES))
        b = np.zeros(N_CLASSES)
        if self.lr is None:
            Xb = np.hstack([X, np.ones((n, 1))])
            step = 1.0 / (np.linalg.norm(Xb, 2) ** 2 / (2 * n) + self.l2)
        else:
            step = float(self.lr)
        prev = np.inf
        for it in range(self.max_iter):
            loss, gW, gb = logreg_loss_grad(W, b, X, y, self.l2)
            W -= step * gW
            b -= step * gb
            if prev - loss < self.tol * max(1.0, abs(loss)):
                break
            prev = loss
        self.coef_ = W
        self.intercept_ = b
        self.n_iter_ = it + 1
        return self

    def decision_function(self, X):
        X = self._validate_predict(X)
        return X @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        return softmax(self.decision_function(X), axis=1)

    def _state(self):
        return {"coef_": self.coef_, "intercept_": self.intercept_}


# kernel SVM ------------------------------------------------------------------------


def rbf_kernel(A, B, gamma):
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def platt_fit(f, positive, max_iter: int = 100):
    """Sigmoid ``P(y=1|f) = 1 / (1 + exp(A f + B))`` by Newton's method on
    Platt's smoothed targets (Lin, Lin and Weng's stabilised variant)."""
    f = np.asarray(f, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = positive.sum()
    n_neg = positive.size - n_pos
    t = np.where(positive, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
    A, B = 0.0, math.log((n_neg + 1.0) / (n_pos + 1.0))

    def objective(A, B):
        z = A * f + B
        # t*z + log(1+exp(-z)), written stably
        return float(np.sum(t * z + np.logaddexp(0.0, -z)))

    fval = objective(A, B)
    sigma = 1e-12
    for _ in range(max_iter):
        z = A * f + B
        p = np.exp(-np.logaddexp(0.0, z))  # 1/(1+exp(z))
        q = 1.0 - p
        d2 = p * q
        h11 = sigma + np.sum(f * f * d2)
        h22 = sigma + np.sum(d2)
        h21 = np.sum(f * d2)
        d1 = t - p
        g1 = np.sum(f * d1)
        g2 = np.sum(d1)
        if abs(g1) < 1e-5 and abs(g2) < 1e-5:
            break
        det = h11 * h22 - h21 * h21
        dA = -(h22 * g1 - h21 * g2) / det
        dB = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * dA + g2 * dB
        step = 1.0
        while step >= 1e-10:
            nA, nB = A + step * dA, B + step * dB
            nf = objective(nA, nB)
            if nf < fval + 1e-4 * step * gd:
                A, B, fval = nA, nB, nf
                break
            step /= 2.0
        else:
            break
    return A, B


class KernelSVM(_Base):
    """One-vs-rest RBF support vector machine trained with kernelised Pegasos.

    Each binary problem minimises ``reg/2 ||w||^2 + mean(hinge)`` in the RKHS of
    ``K(x, x') + 1`` (the constant absorbs the bias). All three problems replay
    the same sample sequence, so relabeling classes permutes the outputs.
    Decision values are turned into probabilities with one Platt sigmoid per
    class, then renormalised across classes.
    """

    def __init__(self, C: float = 1.0, reg=None, gamma=None, epochs: int = 30, random_state: int = 0):
        self.C = C
        self.reg = reg
        self.gamma = gamma
        self.epochs = epochs
        self.random_state = random_state

    def fit(self, X, y):
        X, y = self._validate_fit(X, y)
        n, d = X.shape
        if self.gamma is None:
            mean_var = float(X.var(axis=0).mean())
            self.gamma_ = 1.0 / (d * mean_var) if mean_var > 0 else 1.0
        else:
            self.gamma_ = float(self.gamma)
        lam = float(self.reg) if self.reg is not None else 1.0 / (self.C * n)
        K = rbf_kernel(X, X, self.gamma_) + 1.0
        Y = np.where(_onehot(y) > 0, 1.0, -1.0)
        T = self.epochs * n
        order = SeededRng(self.random_state).integers(n, T)
        alpha = np.zeros((n, N_CLASSES))
        G = np.zeros((n, N_CLASSES))  # G[:, k] = K @ (alpha[:, k] * Y[:, k])
        for t in range(1, T + 1):
            i = order[t - 1]
            viol = Y[i] * G[i] < lam * t
            if viol.any():
                alpha[i, viol] += 1.0
                G[:, viol] += np.outer(K[:, i], Y[i, viol])
        coef = alpha * Y / (lam * T)
        keep = np.any(alpha > 0, axis=1)
        self.support_vectors_ = X[keep]
        self.dual_coef_ = coef[keep]
        self.intercept_ = coef.sum(axis=0)
        self.reg_ = lam
        f = (K - 1.0)[:, keep] @ self.dual_coef_ + self.intercept_
        self.platt_ = np.array([platt_fit(f[:, k], y == c) for k, c in enumerate(CLASSES)])
        return self

    def decision_function(self, X):
        X = self._validate_predict(X)
        return rbf_kernel(X, self.support_vectors_, self.gamma_) @ self.dual_coef_ + self.intercept_

    def predict_proba(self, X):
        f = self.decision_function(X)
        A, B = self.platt_[:, 0], self.platt_[:, 1]
        p = np.exp(-np.logaddexp(0.0, A * f + B))
        p = np.maximum(p, 1e-300)
        return p / p.sum(axis=1, keepdims=True)

    def _state(self):
        return {
            "support_vectors_": self.support_vectors_,
            "dual_coef_": self.dual_coef_,
            "intercept_": self.intercept_,
            "platt_": self.platt_,
            "gamma_": np.array([self.gamma_]),
        }


# random forest -------------------------------------------------------------------


def _best_split(Xn, yn, feats):
    """Lowest weighted-gini split over ``feats`` (ascending); ties keep the
    lowest feature index, then the lowest threshold. Returns None if no
    candidate feature varies."""
    n = yn.size
    sub = Xn[:, feats]
    order = np.argsort(sub, axis=0, kind="stable")
    xs = np.take_along_axis(sub, order, axis=0)
    onehot = _onehot(yn)[order]  # (n, k, 3)
    left = np.cumsum(onehot, axis=0)[:-1]
    total = left[-1] + onehot[-1] if n > 1 else onehot.sum(axis=0)
    right = total - left
    nl = np.arange(1, n)[:, None]
    nr = n - nl
    gl = nl - (left * left).sum(axis=2) / nl
    gr = nr - (right * right).sum(axis=2) / nr
    score = (gl + gr) / n
    valid = xs[1:] > xs[:-1]
    score = np.where(valid, score, np.inf)
    if not np.isfinite(score).any():
        return None
    best_pos = np.argmin(score, axis=0)
    best_val = score[best_pos, np.arange(len(feats))]
    j = int(np.argmin(best_val))
    pos = best_pos[j]
    thr = 0.5 * (xs[pos, j] + xs[pos + 1, j])
    if not thr < xs[pos + 1, j]:
        thr = xs[pos, j]
    return int(feats[j]), float(thr)


class DecisionTree:
    """Gini tree stored as flat arrays; leaves carry class-count vectors."""

    def __init__(self, max_depth: int = 15, max_features=None):
        self.max_depth = max_depth
        self.max_features = max_features

    def fit(self, X, y, rng: SeededRng):
        n, d = X.shape
        mf = self.max_features or max(1, int(math.sqrt(d)))
        feature, threshold, left, right, value, depth_of = [], [], [], [], [], []

        def new_node(idx, depth):
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(np.bincount(y[idx] - 1, minlength=N_CLASSES).astype(np.float64))
            depth_of.append(depth)
            return len(feature) - 1

        stack = [(new_node(np.arange(n), 0), np.arange(n))]
        while stack:
            node, idx = stack.pop()
            depth = depth_of[node]
            counts = value[node]
            if depth >= self.max_depth or idx.size < 2 or np.count_nonzero(counts) <= 1:
                continue
            feats = np.sort(rng.choice(d, min(mf, d)))
            split = _best_split(X[idx], y[idx], feats)
            if split is None:
                continue
            f, thr = split
            go_left = X[idx, f] <= thr
            li, ri = idx[go_left], idx[~go_left]
            feature[node], threshold[node] = f, thr
            left[node] = new_node(li, depth + 1)
            right[node] = new_node(ri, depth + 1)
            stack.append((right[node], ri))
            stack.append((left[node], li))
        self.feature_ = np.array(feature, dtype=np.int64)
        self.threshold_ = np.array(threshold)
        self.left_ = np.array(left, dtype=np.int64)
        self.right_ = np.array(right, dtype=np.int64)
        self.value_ = np.array(value)
        self.depth_ = int(max(depth_of))
        return self

    def apply(self, X):
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        for _ in range(self.depth_):
            f = self.feature_[node]
            internal = f >= 0
            if not internal.any():
                break
            go_left = X[rows, np.maximum(f, 0)] <= self.threshold_[node]
            node = np.where(internal, np.where(go_left, self.left_[node], self.right_[node]), node)
        return node

    def predict(self, X):
        """Majority class of the reached leaf; ties go to the lowest class."""
        return np.argmax(self.value_[self.apply(X)], axis=1) + 1


class RandomForest(_Base):
    """Bagged gini trees; probability = fraction of trees voting for each class.

    Tree ``t`` draws its bootstrap sample and per-node feature subsets from an
    independent stream derived from ``(random_state, t)``.
    """

    def __init__(self, n_estimators: int = 300, max_depth: int = 15, max_features=None, random_state: int = 0):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.max_features = max_features
        self.random_state = random_state

    def fit(self, X, y):
        X, y = self._validate_fit(X, y, min_classes=1)
        n = X.shape[0]
        root = SeededRng(self.random_state)
        self.estimators_ = []
        for t in range(self.n_estimators):
            rng = root.spawn(t)
            boot = rng.integers(n, n)
            tree = DecisionTree(self.max_depth, self.max_features).fit(X[boot], y[boot], rng)
            self.estimators_.append(tree)
        return self

    def predict_proba(self, X):
        X = self._validate_predict(X)
        votes = np.zeros((X.shape[0], N_CLASSES))
        rows = np.arange(X.shape[0])
        for tree in self.estimators_:
            votes[rows, tree.predict(X) - 1] += 1.0
        return votes / len(self.estimators_)

    def _state(self):
        out = {}
        for t, tree in enumerate(self.estimators_):
            for name in ("feature_", "threshold_", "left_", "right_", "value_"):
                out[f"tree{t}.{name}"] = getattr(tree, name)
        return out


# stacking ----------------------------------------------------------------------------


class StackingClassifier(_Base):
    """Random forest base learner with a logistic-regression meta learner.

    The meta learner sees out-of-fold forest probabilities (``folds``-way
    stratified); the final base forest is refit on all data.
    """

    def __init__(self, n_estimators: int = 300, max_depth: int = 15, folds: int = 5, l2: float = 1e-3, random_state: int = 0):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.folds = folds
        self.l2 = l2
        self.random_state = random_state

    def _forest(self, seed):
        return RandomForest(self.n_estimators, self.max_depth, random_state=seed)

    def fit(self, X, y):
        X, y = self._validate_fit(X, y)
        for c in np.unique(y):
            if np.sum(y == c) < self.folds:
                raise StratificationError(f"class {c} has fewer than {self.folds} samples")
        root = SeededRng(self.random_state)
        split = stratified_kfold(y, self.folds, seed=root.spawn("folds").seed)
        oof = np.zeros((X.shape[0], N_CLASSES))
        for f, (tr, va) in enumerate(split):
            base = self._forest(root.spawn(f"fold{f}").seed).fit(X[tr], y[tr])
            oof[va] = base.predict_proba(X[va])
        self.oof_proba_ = oof
        self.meta_ = LogisticRegression(l2=self.l2).fit(oof, y)
        self.base_ = self._forest(root.spawn("final").seed).fit(X, y)
        return self

    def predict_proba(self, X):
        X = self._validate_predict(X)
        return self.meta_.predict_proba(self.base_.predict_proba(X))


# persistence --------------------------------------------------------------------------

_EST_MAGIC = b"FLABEST\x00"


def save_estimator(est, path):
    """Write a fitted baseline to the tensor container used for model files.

    ``magic[8] | u32 version | u16 len, class name | u32 n_tensors | per tensor:
    u16 name_len, name, u8 ndim, u32 dims[ndim], f64 data``. Constructor
    parameters travel as a JSON tensor named ``__params__`` (uint8 bytes).
    """
    import json

    check_is_fitted(est, "n_features_in_")
    tensors = {}
    if isinstance(est, StackingClassifier):
        for prefix, sub in (("meta.", est.meta_), ("base.", est.base_)):
            tensors.update({prefix + k: v for k, v in sub._state().items()})
    else:
        tensors.update(est._state())
    params = json.dumps(est.get_params(), sort_keys=True).encode()
    tensors["__params__"] = np.frombuffer(params, dtype=np.uint8).astype(np.float64)
    tensors["__n_features__"] = np.array([est.n_features_in_], dtype=np.float64)
    name = type(est).__name__.encode()
    parts = [_EST_MAGIC, struct.pack("<I", 1), struct.pack("<H", len(name)), name, struct.pack("<I", len(tensors))]
    for key, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = key.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    atomic_write(path, b"".join(parts), mode="wb")


def load_estimator(path):
    import json

    data = open(path, "rb").read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("estimator file is truncated")
        out = data[pos : pos + n]
        pos += n
        return out

    if take(8) != _EST_MAGIC:
        raise FormatError("not an estimator file (bad magic)")
    if struct.unpack("<I", take(4))[0] != 1:
        raise FormatError("unsupported estimator file version")
    (nlen,) = struct.unpack("<H", take(2))
    cls_name = take(nlen).decode()
    classes = {c.__name__: c for c in (LogisticRegression, KernelSVM, RandomForest, StackingClassifier)}
    if cls_name not in classes:
        raise FormatError(f"unknown estimator class {cls_name!r}")
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (kl,) = struct.unpack("<H", take(2))
        key = take(kl).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        tensors[key] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise FormatError("trailing bytes in estimator file")
    params = json.loads(tensors.pop("__params__").astype(np.uint8).tobytes())
    est = classes[cls_name](**params)
    est.n_features_in_ = int(tensors.pop("__n_features__")[0])
    if isinstance(est, StackingClassifier):
        est.meta_ = LogisticRegression(l2=est.l2)
        _restore(est.meta_, {k[5:]: v for k, v in tensors.items() if k.startswith("meta.")})
        est.meta_.n_features_in_ = N_CLASSES
        est.base_ = RandomForest(est.n_estimators, est.max_depth)
        _restore(est.base_, {k[5:]: v for k, v in tensors.items() if k.startswith("base.")})
        est.base_.n_features_in_ = est.n_features_in_
    else:
        _restore(est, tensors)
    return est


def _restore(est, tensors):
    if isinstance(est, RandomForest):
        n_trees = len({k.split(".")[0] for k in tensors})
        est.estimators_ = []
        for t in range(n_trees):
            tree = DecisionTree(est.max_depth, est.max_features)
            for name in ("feature_", "threshold_", "left_", "right_", "value_"):
                arr = tensors[f"tree{t}.{name}"]
                setattr(tree, name, arr.astype(np.int64) if name in ("feature_", "left_", "right_") else arr)
            tree.depth_ = _tree_depth(tree)
            est.estimators_.append(tree)
    else:
        for k, v in tensors.items():
            setattr(est, k, float(v[0]) if k == "gamma_" else v)


def _tree_depth(tree) -> int:
    depth = np.zeros(tree.feature_.size, dtype=np.int64)
    for node in range(tree.feature_.size):
        if tree.feature_[node] >= 0:
            depth[tree.left_[node]] = depth[node] + 1
            depth[tree.right_[node]] = depth[node] + 1
    return int(depth.max())


# functional front ends ------------------------------------------------------------


def logreg_fit(X, y, l2: float = 1e-3, iters: int = 500, lr=None) -> LogisticRegression:
    return LogisticRegression(l2=l2, max_iter=iters, lr=lr).fit(X, y)


def logreg_predict_proba(m: LogisticRegression, X) -> np.ndarray:
    return m.predict_proba(X)


def svm_fit(X, y, gamma=None, epochs: int = 30, reg=None, seed: int = 0) -> KernelSVM:
    return KernelSVM(gamma=gamma, epochs=epochs, reg=reg, random_state=seed).fit(X, y)


def svm_predict_proba(m: KernelSVM, X) -> np.ndarray:
    return m.predict_proba(X)


def forest_fit(X, y, n_trees: int = 300, max_depth: int = 15, seed: int = 0) -> RandomForest:
    return RandomForest(n_estimators=n_trees, max_depth=max_depth, random_state=seed).fit(X, y)


def forest_predict_proba(m: RandomForest, X) -> np.ndarray:
    return m.predict_proba(X)


def stacking_fit(X, y, folds: int = 5, seed: int = 0, n_trees: int = 300, max_depth: int = 15) -> StackingClassifier:
    return StackingClassifier(n_estimators=n_trees, max_depth=max_depth, folds=folds, random_state=seed).fit(X, y)


def stacking_predict_proba(m: StackingClassifier, X) -> np.ndarray:
    return m.predict_proba(X)


BASELINES = {"logreg": LogisticRegression, "svm": KernelSVM, "forest": RandomForest, "stacking": StackingClassifier}
