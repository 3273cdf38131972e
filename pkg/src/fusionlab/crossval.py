"""Cross-validated evaluation, optional in-fold self-training, image-noise ablation."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .baselines import KernelSVM, LogisticRegression, RandomForest, StackingClassifier
from .dataio import Corpus, Standardizer
from .exceptions import ConfigError, ContractError, LeakageError
from .metrics import MetricsReport, fold_metrics, stratified_kfold
from .numcore import SeededRng, as_rng
from .selftrain import SelfTrainConfig, run_self_training

MODELS = ("svm", "logreg", "forest", "stacking", "fusion")
SETTINGS = ("text", "image", "fusion", "multimodal")


class _ClassicalPredictor:
    def __init__(self, est, view, scaler):
        self.est, self.view, self.scaler = est, view, scaler

    def predict_proba(self, corpus: Corpus) -> np.ndarray:
        X = corpus.features(self.view)
        if self.scaler is not None:
            X = self.scaler.transform(X)
        return self.est.predict_proba(X)


class _FusionPredictor:
    def __init__(self, clf):
        self.clf = clf

    def predict_proba(self, corpus: Corpus) -> np.ndarray:
        return self.clf.predict_corpus_proba(corpus)


def check_combo(model: str, setting: str):
    if model not in MODELS:
        raise ConfigError(f"unknown model {model!r}; choose from {MODELS}")
    if setting not in SETTINGS:
        raise ConfigError(f"unknown setting {setting!r}; choose from {SETTINGS}")
    if model == "fusion" and setting not in ("fusion", "multimodal"):
        raise ConfigError(f"the fusion model needs both modalities; setting {setting!r} is not supported")


def make_fitter(model: str, setting: str, params: Optional[dict] = None, standardize: bool = True) -> Callable:
    """``fit_fn(labeled, pseudo, seed) -> predictor`` for a model family and feature view.

    Classical models see the concatenation of labeled and pseudo-labeled rows,
    standardized with statistics from those rows only. The fusion model
    receives the two sets separately and weights the pseudo part by ``lam``.
    """
    check_combo(model, setting)
    params = dict(params or {})

    def fit_fn(labeled: Corpus, pseudo: Optional[Corpus], seed: int):
        if model == "fusion":
            from .train import FusionClassifier

            clf = FusionClassifier(random_state=seed, **params)
            return _FusionPredictor(clf.fit_corpus(labeled, pseudo if pseudo is not None and len(pseudo) else None))
        data = labeled if pseudo is None or not len(pseudo) else labeled.concat(pseudo)
        X, y = data.features(setting), data.labels
        scaler = Standardizer().fit(X) if standardize else None
        if scaler is not None:
            X = scaler.transform(X)
        if model == "logreg":
            est = LogisticRegression(**params)
        elif model == "svm":
            est = KernelSVM(random_state=seed, **params)
        elif model == "forest":
            est = RandomForest(random_state=seed, **params)
        else:
            est = StackingClassifier(random_state=seed, **params)
        return _ClassicalPredictor(est.fit(X, y), setting, scaler)

    fit_fn.model, fit_fn.setting = model, setting
    return fit_fn


def assert_no_leakage(validation_ids, train_ids, pseudo_ids):
    leaked = set(validation_ids) & (set(train_ids) | set(pseudo_ids))
    if leaked:
        raise LeakageError(f"validation ids reached training, e.g. {sorted(leaked)[0]!r}")


def evaluate_cv(
    fit_fn: Callable,
    corpus: Corpus,
    k: int = 5,
    seed: int = 0,
    selftrain: Optional[SelfTrainConfig] = None,
    unlabeled: Optional[Corpus] = None,
    model: Optional[str] = None,
    setting: Optional[str] = None,
) -> MetricsReport:
    """Stratified ``k``-fold evaluation of ``fit_fn`` on a fully labeled corpus.

    With ``selftrain`` set, each fold runs self-training on that fold's
    training records plus ``unlabeled`` only; validation records are never
    passed to it, and the disjointness is re-checked after every fold.
    """
    if not np.all(corpus.is_labeled):
        raise ContractError("evaluate_cv needs a fully labeled corpus")
    unlabeled = unlabeled if unlabeled is not None else Corpus.empty(corpus.d_T, corpus.d_I)
    if selftrain is not None:
        overlap = set(corpus.ids) & set(unlabeled.ids)
        if overlap:
            raise LeakageError(f"unlabeled pool shares ids with the labeled corpus, e.g. {sorted(overlap)[0]!r}")
    split = stratified_kfold(corpus.labels, k, seed)
    root = SeededRng(seed)
    folds, rounds = [], []
    for f, (tr, va) in enumerate(split):
        train, valid = corpus.subset(tr), corpus.subset(va)
        pseudo = None
        if selftrain is not None:
            grown, logs = run_self_training(train, unlabeled, selftrain, as_rng(selftrain.seed).spawn(f"fold{f}"))
            pseudo = grown.subset(grown.pseudo_round > 0)
            if not set(pseudo.ids) <= set(unlabeled.ids):
                raise LeakageError("pseudo-labeled records must come from the unlabeled pool")
            rounds.append([log.to_dict() for log in logs])
        assert_no_leakage(valid.ids, train.ids, pseudo.ids if pseudo is not None else ())
        predictor = fit_fn(train, pseudo, root.spawn(f"fit{f}").seed)
        folds.append(fold_metrics(valid.labels, predictor.predict_proba(valid)))
    extra = {"k": k, "seed": seed, "leakage_checked": True}
    if selftrain is not None:
        extra["selftrain"] = {
            "strategy": selftrain.strategy,
            "tau": selftrain.threshold,
            "rounds": selftrain.rounds,
            "sample_fraction": selftrain.sample_fraction,
            "round_logs": rounds,
        }
    return MetricsReport(
        model or getattr(fit_fn, "model", "custom"),
        setting or getattr(fit_fn, "setting", "custom"),
        folds,
        extra=extra,
    )


def replace_images_with_noise(corpus: Corpus, rng=None) -> Corpus:
    """Every image vector becomes i.i.d. N(0, 1) of the same width."""
    corpus.require_images()
    rng = as_rng(rng)
    return corpus.replace(image=rng.normal((len(corpus), corpus.d_I)))


def ablate_image_noise(corpus: Corpus, fit_fn: Callable, k: int = 5, seed: int = 0, rng=None, **kwargs) -> MetricsReport:
    noisy = replace_images_with_noise(corpus, rng if rng is not None else SeededRng(seed).spawn("ablate"))
    report = evaluate_cv(fit_fn, noisy, k, seed, **kwargs)
    report.setting = "text+image-noise"
    return report
