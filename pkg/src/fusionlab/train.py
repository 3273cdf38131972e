"""Losses, optimisers, schedules and the early-stopping training loop.

The loop minimises a labeled cross-entropy plus a ``lam``-weighted
cross-entropy on pseudo-labeled records, each averaged over its own part of
the batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dataio import CLASSES, Corpus
from .exceptions import ConfigError, ContractError, InsufficientDataError, ShapeError, StratificationError
from .fusion import ArchConfig, FusionModel, backward, forward, init_model, labels_to_index, predict_arrays
from .numcore import SeededRng, as_rng, log_softmax

log = logging.getLogger(__name__)

DEFAULT_LR = {"adam": 3e-4, "adagrad": 0.01}
# step decay belongs to the Adagrad recipe; Adam runs at a constant rate with early stopping
DEFAULT_SCHEDULE = {"adam": "constant", "adagrad": "step"}


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: Optional[float] = None
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 10
    schedule: Optional[str] = None
    step_gamma: float = 0.1
    step_every: int = 5
    lam: float = 1.0
    oversample: bool = False
    aug_sigma: float = 0.0
    aug_mask: float = 0.0
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in DEFAULT_LR:
            raise ConfigError(f"optimizer must be adam or adagrad, got {self.optimizer!r}")
        if self.lr is None:
            object.__setattr__(self, "lr", DEFAULT_LR[self.optimizer])
        if self.schedule is None:
            object.__setattr__(self, "schedule", DEFAULT_SCHEDULE[self.optimizer])
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not 0 < self.step_gamma <= 1:
            raise ConfigError("step_gamma must lie in (0, 1]")
        if self.step_every < 1:
            raise ConfigError("step_every must be >= 1")
        if self.schedule not in ("step", "constant"):
            raise ConfigError("schedule must be step or constant")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch-norm)")
        if self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("max_epochs must be >= 1 and patience >= 0")
        if self.aug_sigma < 0 or not 0 <= self.aug_mask < 1:
            raise ConfigError("aug_sigma must be >= 0 and aug_mask in [0, 1)")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")


# losses ---------------------------------------------------------------------------


def cross_entropy(logits, labels) -> float:
    """Mean ``-log softmax(logits)[label]`` over the batch (labels in 1..3)."""
    logits = np.asarray(logits, dtype=np.float64)
    y = labels_to_index(labels)
    if logits.ndim != 2 or logits.shape[0] != y.size:
        raise ShapeError(f"logits {logits.shape} do not match {y.size} labels")
    return float(-np.mean(log_softmax(logits, axis=1)[np.arange(y.size), y]))


def combined_loss(labeled_logits, labeled_y, pseudo_logits, pseudo_y, lam: float = 1.0) -> float:
    n_l = 0 if labeled_logits is None else len(labeled_y)
    n_p = 0 if pseudo_logits is None else len(pseudo_y)
    if n_l == 0 and n_p == 0:
        raise ContractError("combined_loss needs at least one labeled or pseudo-labeled sample")
    loss = cross_entropy(labeled_logits, labeled_y) if n_l else 0.0
    if n_p:
        loss += lam * cross_entropy(pseudo_logits, pseudo_y)
    return loss


# optimisers -----------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    sumsq: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, kind: str, params: dict) -> "OptimizerState":
        if kind == "adam":
            st = cls("adam")
            st.m = {k: np.zeros_like(p) for k, p in params.items()}
            st.v = {k: np.zeros_like(p) for k, p in params.items()}
        elif kind == "adagrad":
            st = cls("adagrad", eps=1e-10)
            st.sumsq = {k: np.zeros_like(p) for k, p in params.items()}
        else:
            raise ConfigError(f"unknown optimizer {kind!r}")
        return st


def _regularised(params, grads, weight_decay):
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        yield k, p, (g + weight_decay * p if weight_decay else g)


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float, weight_decay: float = 0.0):
    """In-place Adam update with bias correction; L2 enters as ``g + wd * p``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, p, g in _regularised(params, grads, weight_decay):
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def adagrad_step(params: dict, grads: dict, state: OptimizerState, lr: float, weight_decay: float = 0.0):
    state.t += 1
    for k, p, g in _regularised(params, grads, weight_decay):
        s = state.sumsq[k]
        s += g * g
        p -= lr * g / (np.sqrt(s) + state.eps)


STEPPERS = {"adam": adam_step, "adagrad": adagrad_step}


def step_decay(lr0: float, epoch: int, gamma: float, every: int) -> float:
    if every < 1:
        raise ConfigError("every must be >= 1")
    return lr0 * gamma ** (epoch // every)


# data-side helpers ---------------------------------------------------------------


def oversample(labeled: Corpus, rng=None) -> Corpus:
    """Upsample every present minority class (with replacement) to the majority count.

    Copies get ids ``"<id>#os<k>"`` so the result keeps unique ids.
    """
    if len(labeled) == 0:
        raise InsufficientDataError("cannot oversample an empty corpus")
    rng = as_rng(rng)
    counts = labeled.class_counts
    target = max(counts.values())
    extra_idx, extra_ids = [], []
    serial = 0
    for c in CLASSES:
        members = np.flatnonzero(labeled.labels == c)
        need = target - members.size
        if members.size == 0 or need <= 0:
            continue
        picks = members[rng.integers(members.size, need)]
        for i in picks:
            extra_idx.append(int(i))
            extra_ids.append(f"{labeled.ids[i]}#os{serial}")
            serial += 1
    if not extra_idx:
        return labeled
    idx = np.asarray(extra_idx, dtype=np.int64)
    extra = Corpus(
        tuple(extra_ids), labeled.labels[idx], labeled.text[idx], labeled.image[idx], labeled.pseudo_round[idx]
    )
    return labeled.concat(extra)


def augment(batch_text, batch_image, aug_sigma: float, dropout_p: float, rng=None):
    """Gaussian jitter then inverted Bernoulli feature masking on both modalities."""
    if aug_sigma < 0 or not 0 <= dropout_p < 1:
        raise ConfigError("aug_sigma must be >= 0 and dropout_p in [0, 1)")
    rng = as_rng(rng)
    out = []
    for x in (batch_text, batch_image):
        x = np.asarray(x, dtype=np.float64)
        if aug_sigma > 0:
            x = x + rng.normal(x.shape, 0.0, aug_sigma)
        if dropout_p > 0:
            x = x * ((rng.uniform(x.shape) >= dropout_p) / (1.0 - dropout_p))
        out.append(x)
    return out[0], out[1]


def stratified_holdout(labels, fraction: float, rng) -> tuple:
    """Split indices into (train, val) holding out ``round(fraction * n_c)`` (>= 1) per class."""
    labels = np.asarray(labels)
    train, val = [], []
    for c in CLASSES:
        members = np.flatnonzero(labels == c)
        if members.size < 2:
            raise StratificationError(
                f"class {c} has {members.size} labeled samples; need at least 2 for a validation split"
            )
        n_val = min(members.size - 1, max(1, int(round(fraction * members.size))))
        order = members[rng.permutation(members.size)]
        val.extend(order[:n_val].tolist())
        train.extend(order[n_val:].tolist())
    return np.sort(np.array(train)), np.sort(np.array(val))


def _batches(n: int, batch_size: int, order: np.ndarray) -> list:
    cuts = list(range(0, n, batch_size))
    batches = [order[s : s + batch_size] for s in cuts]
    if len(batches) > 1 and batches[-1].size == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


# training loop -------------------------------------------------------------------


@dataclass
class FitReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_epoch: int = -1
    initial_train_loss: float = float("nan")
    final_train_loss: float = float("nan")

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch]

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_accuracy": self.val_accuracy,
            "lr": self.lr,
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
            "best_val_loss": self.best_val_loss,
            "initial_train_loss": self.initial_train_loss,
            "final_train_loss": self.final_train_loss,
        }


def _eval_loss(model, text, image, labels):
    probs = predict_arrays(model, text, image)
    y = labels_to_index(labels)
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(y.size), y], 1e-300))))
    acc = float(np.mean(np.argmax(probs, axis=1) == y))
    return loss, acc


def fit(
    model: FusionModel,
    labeled: Corpus,
    pseudo: Optional[Corpus] = None,
    cfg: TrainConfig = TrainConfig(),
    rng=None,
) -> FitReport:
    """Train ``model`` in place and restore the parameters of the best validation epoch.

    A stratified ``val_fraction`` of ``labeled`` is held out to monitor the
    validation loss; pseudo-labeled records only ever enter the training side.
    """
    rng = as_rng(rng if rng is not None else cfg.seed)
    if len(labeled) == 0:
        raise InsufficientDataError("fit needs labeled records")
    if not labeled.is_labeled.all():
        raise ContractError("labeled corpus contains unlabeled records")
    labeled.require_images()
    if pseudo is not None and len(pseudo):
        pseudo.require_images()
        if not pseudo.is_labeled.all():
            raise ContractError("pseudo corpus records must carry assigned labels")
    else:
        pseudo = None
    for c in CLASSES:
        if labeled.class_counts[c] == 0:
            raise StratificationError(f"class {c} is absent from the labeled set")

    tr_idx, va_idx = stratified_holdout(labeled.labels, cfg.val_fraction, rng.spawn("val_split"))
    train = labeled.subset(tr_idx)
    val = labeled.subset(va_idx)
    if cfg.oversample:
        train = oversample(train, rng.spawn("oversample"))

    n_l = len(train)
    text = np.vstack([train.text] + ([pseudo.text] if pseudo else []))
    image = np.vstack([train.image] + ([pseudo.image] if pseudo else []))
    y = np.concatenate([train.labels] + ([pseudo.labels] if pseudo else []))
    is_pseudo = np.arange(len(y)) >= n_l

    batch_rng = rng.spawn("batching")
    drop_rng = rng.spawn("dropout")
    aug_rng = rng.spawn("augment")
    state = OptimizerState.for_params(cfg.optimizer, model.params)
    step = STEPPERS[cfg.optimizer]

    report = FitReport()
    report.initial_train_loss = _eval_loss(model.eval(), train.text, train.image, train.labels)[0]
    best_loss, best_state, wait = np.inf, None, 0
    for epoch in range(cfg.max_epochs):
        lr = step_decay(cfg.lr, epoch, cfg.step_gamma, cfg.step_every) if cfg.schedule == "step" else cfg.lr
        model.train()
        losses, sizes = [], []
        for b in _batches(len(y), cfg.batch_size, batch_rng.permutation(len(y))):
            bt, bi = text[b], image[b]
            if cfg.aug_sigma > 0 or cfg.aug_mask > 0:
                bt, bi = augment(bt, bi, cfg.aug_sigma, cfg.aug_mask, aug_rng)
            pmask = is_pseudo[b]
            n_p = int(pmask.sum())
            n_lb = b.size - n_p
            w = np.where(pmask, cfg.lam / max(n_p, 1), 1.0 / max(n_lb, 1))
            probs, logits, cache = forward(model, bt, bi, drop_rng)
            losses.append(
                combined_loss(logits[~pmask], y[b][~pmask], logits[pmask], y[b][pmask], cfg.lam)
            )
            sizes.append(b.size)
            grads = backward(model, cache, y[b], sample_weight=w)
            step(model.params, grads, state, lr, cfg.weight_decay)
        model.eval()
        vl, va = _eval_loss(model, val.text, val.image, val.labels)
        report.train_loss.append(float(np.average(losses, weights=sizes)))
        report.val_loss.append(vl)
        report.val_accuracy.append(va)
        report.lr.append(lr)
        log.debug("epoch %d lr %.2e train %.4f val %.4f acc %.3f", epoch, lr, report.train_loss[-1], vl, va)
        if vl < best_loss:
            best_loss, wait = vl, 0
            model.epoch = epoch
            best_state = model.state()
            report.best_epoch = epoch
        else:
            wait += 1
            if wait >= cfg.patience:
                report.stopped_epoch = epoch
                break
    if report.stopped_epoch < 0:
        report.stopped_epoch = len(report.val_loss) - 1
    model.load_state(best_state)
    model.eval()
    report.final_train_loss = _eval_loss(model, train.text, train.image, train.labels)[0]
    return report


# estimator ---------------------------------------------------------------------------


class FusionClassifier(ClassifierMixin, BaseEstimator):
    """Scikit-learn wrapper around the cross-modal transformer.

    ``X`` holds the text vector in its first ``text_dim`` columns and the image
    vector in the rest. Defaults are the desk-scale architecture; pass
    ``d=1024, n_layers=4, n_heads=16`` for the full-size model.
    """

    def __init__(
        self,
        text_dim: int = 8,
        d: int = 32,
        n_layers: int = 2,
        n_heads: int = 4,
        ff_mult: int = 4,
        dropout: float = 0.2,
        optimizer: str = "adam",
        lr: Optional[float] = None,
        weight_decay: float = 1e-4,
        batch_size: int = 32,
        max_epochs: int = 50,
        patience: int = 10,
        schedule: Optional[str] = None,
        step_gamma: float = 0.1,
        step_every: int = 5,
        lam: float = 1.0,
        oversample: bool = False,
        aug_sigma: float = 0.0,
        aug_mask: float = 0.0,
        random_state: int = 0,
    ):
        self.text_dim = text_dim
        self.d = d
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.ff_mult = ff_mult
        self.dropout = dropout
        self.optimizer = optimizer
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.schedule = schedule
        self.step_gamma = step_gamma
        self.step_every = step_every
        self.lam = lam
        self.oversample = oversample
        self.aug_sigma = aug_sigma
        self.aug_mask = aug_mask
        self.random_state = random_state

    def arch_config(self, d_T: int, d_I: int) -> ArchConfig:
        return ArchConfig(
            d_T=d_T, d_I=d_I, d=self.d, n_layers=self.n_layers,
            n_heads=self.n_heads, ff_mult=self.ff_mult, dropout=self.dropout,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            optimizer=self.optimizer, lr=self.lr, weight_decay=self.weight_decay,
            batch_size=self.batch_size, max_epochs=self.max_epochs, patience=self.patience,
            schedule=self.schedule, step_gamma=self.step_gamma, step_every=self.step_every,
            lam=self.lam, oversample=self.oversample, aug_sigma=self.aug_sigma,
            aug_mask=self.aug_mask, seed=self.random_state,
        )

    def _split(self, X):
        if not 0 < self.text_dim < X.shape[1]:
            raise ShapeError(f"text_dim={self.text_dim} must split {X.shape[1]} columns into two blocks")
        return X[:, : self.text_dim], X[:, self.text_dim :]

    def fit_corpus(self, labeled: Corpus, pseudo: Optional[Corpus] = None):
        rng = SeededRng(self.random_state)
        cfg = self.arch_config(labeled.d_T, labeled.d_I)
        self.model_ = init_model(cfg, rng.spawn("init"))
        self.report_ = fit(self.model_, labeled, pseudo, self.train_config(), rng.spawn("fit"))
        self.classes_ = np.array(CLASSES)
        self.n_features_in_ = labeled.d_T + labeled.d_I
        return self

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.text_dim = int(self.text_dim)
        t, i = self._split(X)
        ids = tuple(f"r{k}" for k in range(len(y)))
        return self.fit_corpus(Corpus(ids, y.astype(np.int64), t, i))

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        t, i = self._split(X)
        return predict_arrays(self.model_, t, i)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def predict_corpus_proba(self, corpus: Corpus) -> np.ndarray:
        check_is_fitted(self, "model_")
        corpus.require_images()
        return predict_arrays(self.model_, corpus.text, corpus.image)
