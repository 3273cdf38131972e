"""Pseudo-labeling rounds: ensemble consistency filtering and a stacking teacher."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .baselines import KernelSVM, LogisticRegression, RandomForest, StackingClassifier
from .dataio import CLASSES, Corpus, atomic_write
from .exceptions import ConfigError, ContractError, LeakageError, StratificationError
from .numcore import as_rng

STRATEGIES = ("ensemble_consistency", "stacking_teacher")
TEACHERS = ("stacking", "fusion")
DEFAULT_TAU = {"ensemble_consistency": 0.95, "stacking_teacher": 0.9}
ENSEMBLE = ("svm", "logreg", "forest")


@dataclass(frozen=True)
class SelfTrainConfig:
    strategy: str = "ensemble_consistency"
    tau: Optional[float] = None
    rounds: int = 3
    sample_fraction: float = 0.25
    teacher: str = "stacking"
    view: str = "multimodal"
    n_trees: int = 300
    max_depth: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.teacher not in TEACHERS:
            raise ConfigError(f"teacher must be one of {TEACHERS}, got {self.teacher!r}")
        if self.tau is not None and not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        if int(self.rounds) != self.rounds or self.rounds < 1:
            raise ConfigError(f"rounds must be a positive integer, got {self.rounds}")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ConfigError(f"sample_fraction must lie in (0, 1], got {self.sample_fraction}")
        if self.view not in ("text", "image", "fusion", "multimodal"):
            raise ConfigError(f"unknown feature view {self.view!r}")
        if self.n_trees < 1 or self.max_depth < 1:
            raise ConfigError("n_trees and max_depth must be positive")

    @property
    def threshold(self) -> float:
        return DEFAULT_TAU[self.strategy] if self.tau is None else float(self.tau)


@dataclass(frozen=True)
class PseudoLabelDecision:
    id: str
    predictions: tuple
    confidences: tuple
    mean_confidence: float
    unanimous: bool
    accepted: bool
    label: Optional[int]
    round: int

    def __post_init__(self):
        if (self.label is not None) != self.accepted:
            raise ContractError("assigned label must be present exactly when accepted")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RoundLog:
    round: int
    unlabeled_in: int
    consistent: int
    sampled: int
    added: int
    labeled_after: int
    confidence: dict = field(default_factory=dict)
    decisions: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        out = asdict(self)
        del out["decisions"]
        return out


def _require_fitted(model):
    try:
        check_is_fitted(model, "n_features_in_")
    except NotFittedError as exc:
        raise ContractError(f"{type(model).__name__} is not fitted") from exc


def decide(ids, probs_by_model, tau: float, round_index: int = 1) -> list:
    """Consistency filter over per-model probability matrices (same row order).

    A sample is accepted when every model predicts the same class and the mean
    of the models' top probabilities is strictly above ``tau``.
    """
    probs = np.stack([np.asarray(p, dtype=np.float64) for p in probs_by_model])  # (m, n, 3)
    pred = np.argmax(probs, axis=2) + 1
    conf = np.max(probs, axis=2)
    mean = conf.mean(axis=0)
    unanimous = np.all(pred == pred[0], axis=0)
    accepted = unanimous & (mean > tau)
    return [
        PseudoLabelDecision(
            id=str(ids[j]),
            predictions=tuple(int(v) for v in pred[:, j]),
            confidences=tuple(float(v) for v in conf[:, j]),
            mean_confidence=float(mean[j]),
            unanimous=bool(unanimous[j]),
            accepted=bool(accepted[j]),
            label=int(pred[0, j]) if accepted[j] else None,
            round=round_index,
        )
        for j in range(len(ids))
    ]


def ensemble_decide(models: dict, x, tau: float = 0.95, sample_id: str = "", round_index: int = 1) -> PseudoLabelDecision:
    """Decision for a single feature vector ``x`` given fitted ``{name: model}``."""
    for m in models.values():
        _require_fitted(m)
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return decide([sample_id], [m.predict_proba(x) for m in models.values()], tau, round_index)[0]


def _check_inputs(labeled: Corpus, unlabeled: Corpus):
    missing = [c for c in CLASSES if labeled.class_counts.get(c, 0) == 0]
    if missing:
        raise StratificationError(f"labeled set lacks class(es) {missing}")
    if not np.all(labeled.is_labeled):
        raise ContractError("labeled corpus contains unlabeled records")
    overlap = set(labeled.ids) & set(unlabeled.ids)
    if overlap:
        raise LeakageError(f"unlabeled pool shares ids with labeled set, e.g. {sorted(overlap)[0]!r}")


def fit_ensemble(labeled: Corpus, cfg: SelfTrainConfig, seed: int) -> dict:
    """Fresh SVM, logistic regression and forest on the labeled features."""
    X, y = labeled.features(cfg.view), labeled.labels
    return {
        "svm": KernelSVM(random_state=seed).fit(X, y),
        "logreg": LogisticRegression().fit(X, y),
        "forest": RandomForest(cfg.n_trees, cfg.max_depth, random_state=seed).fit(X, y),
    }


def _confidence_summary(decisions, names) -> dict:
    if not decisions:
        return {}
    conf = np.array([d.confidences for d in decisions])
    return {
        name: {"mean": float(conf[:, k].mean()), "min": float(conf[:, k].min()), "max": float(conf[:, k].max())}
        for k, name in enumerate(names)
    }


def _move(labeled: Corpus, unlabeled: Corpus, chosen: np.ndarray, labels: np.ndarray, round_index: int):
    moved = unlabeled.subset(chosen)
    moved = moved.replace(labels=labels, pseudo_round=np.full(len(moved), round_index, dtype=np.int64))
    keep = np.ones(len(unlabeled), dtype=bool)
    keep[chosen] = False
    return labeled.concat(moved), unlabeled.subset(keep)


def n_to_sample(n_accepted: int, fraction: float) -> int:
    """``round(fraction * n)`` (half away from zero), at least one when anything passed."""
    if n_accepted == 0:
        return 0
    return min(n_accepted, max(1, int(math.floor(fraction * n_accepted + 0.5))))


def run_round_ensemble(labeled: Corpus, unlabeled: Corpus, cfg: SelfTrainConfig, rng=None, round_index: int = 1):
    """One consistency-filtered round. Returns ``(labeled', unlabeled', log, decisions)``."""
    rng = as_rng(rng)
    _check_inputs(labeled, unlabeled)
    if len(unlabeled) == 0:
        return labeled, unlabeled, RoundLog(round_index, 0, 0, 0, 0, len(labeled)), []
    models = fit_ensemble(labeled, cfg, rng.spawn("models").seed)
    X = unlabeled.features(cfg.view)
    decisions = decide(unlabeled.ids, [models[k].predict_proba(X) for k in ENSEMBLE], cfg.threshold, round_index)
    accepted = np.flatnonzero([d.accepted for d in decisions])
    k = n_to_sample(accepted.size, cfg.sample_fraction)
    chosen = np.sort(accepted[rng.spawn("sample").choice(accepted.size, k)]) if k else accepted[:0]
    labels = np.array([decisions[j].label for j in chosen], dtype=np.int64)
    new_labeled, new_unlabeled = _move(labeled, unlabeled, chosen, labels, round_index)
    log = RoundLog(
        round_index,
        len(unlabeled),
        int(accepted.size),
        int(k),
        int(chosen.size),
        len(new_labeled),
        _confidence_summary(decisions, ENSEMBLE),
        decisions,
    )
    return new_labeled, new_unlabeled, log, decisions


def fit_teacher(labeled: Corpus, cfg: SelfTrainConfig, seed: int):
    """Fitted teacher plus a ``predict_proba(corpus)`` closure."""
    if cfg.teacher == "fusion":
        from .train import FusionClassifier

        teacher = FusionClassifier(random_state=seed).fit_corpus(labeled)
        return teacher, teacher.predict_corpus_proba
    teacher = StackingClassifier(cfg.n_trees, cfg.max_depth, random_state=seed).fit(labeled.features(cfg.view), labeled.labels)
    return teacher, lambda c: teacher.predict_proba(c.features(cfg.view))


def stacking_teacher_round(labeled: Corpus, unlabeled: Corpus, cfg: SelfTrainConfig = None, rng=None, round_index: int = 1):
    """Teacher round: every unlabeled sample whose top probability exceeds tau is added.

    Returns ``(labeled', unlabeled', log, decisions)``.
    """
    cfg = cfg or SelfTrainConfig(strategy="stacking_teacher")
    rng = as_rng(rng)
    _check_inputs(labeled, unlabeled)
    if len(unlabeled) == 0:
        return labeled, unlabeled, RoundLog(round_index, 0, 0, 0, 0, len(labeled)), []
    _, proba = fit_teacher(labeled, cfg, rng.spawn("teacher").seed)
    decisions = decide(unlabeled.ids, [proba(unlabeled)], cfg.threshold, round_index)
    chosen = np.flatnonzero([d.accepted for d in decisions])
    labels = np.array([decisions[j].label for j in chosen], dtype=np.int64)
    new_labeled, new_unlabeled = _move(labeled, unlabeled, chosen, labels, round_index)
    log = RoundLog(
        round_index,
        len(unlabeled),
        int(chosen.size),
        int(chosen.size),
        int(chosen.size),
        len(new_labeled),
        _confidence_summary(decisions, (cfg.teacher,)),
        decisions,
    )
    return new_labeled, new_unlabeled, log, decisions


def run_self_training(labeled: Corpus, unlabeled: Corpus, cfg: SelfTrainConfig = SelfTrainConfig(), rng=None):
    """``cfg.rounds`` sequential rounds; returns ``(final labeled corpus, logs)``.

    Pseudo-labeled records keep their ids and carry ``pseudo_round >= 1``;
    original labels have ``pseudo_round == 0``.
    """
    rng = as_rng(cfg.seed if rng is None else rng)
    step = run_round_ensemble if cfg.strategy == "ensemble_consistency" else stacking_teacher_round
    logs = []
    for r in range(1, cfg.rounds + 1):
        labeled, unlabeled, log, _ = step(labeled, unlabeled, cfg, rng.spawn(f"round{r}"), r)
        logs.append(log)
    return labeled, logs


def decisions_to_jsonl(logs) -> str:
    lines = [json.dumps(d.to_dict(), sort_keys=True) for log in logs for d in log.decisions]
    return "".join(line + "\n" for line in lines)


def export_decisions(logs, path):
    atomic_write(path, decisions_to_jsonl(logs))


def pseudo_label_purity(final: Corpus, truth_by_id: dict) -> float:
    """Fraction of pseudo-labeled records whose label matches ``truth_by_id``; NaN if none."""
    pseudo = np.flatnonzero(final.pseudo_round > 0)
    if pseudo.size == 0:
        return float("nan")
    hits = sum(int(final.labels[j] == truth_by_id[final.ids[j]]) for j in pseudo)
    return hits / pseudo.size
