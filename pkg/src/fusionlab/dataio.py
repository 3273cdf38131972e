"""Embedding corpora: CSV I/O, standardisation, PCA and the synthetic generator.

A :class:`Corpus` is an immutable columnar container. Text vectors live in an
``(n, d_T)`` array, image vectors in an ``(n, d_I)`` array whose rows are NaN
where the image is absent, and labels in an int array where ``0`` means
unlabeled. Record-level access goes through :class:`EmbeddingRecord`.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import (
    ConfigError,
    FormatError,
    InsufficientDataError,
    ModalityError,
    ShapeError,
)
from .numcore import SeededRng, as_rng

CLASSES = (1, 2, 3)
UNLABELED = 0

DEFAULT_D_T = 768
DEFAULT_D_I = 64


@dataclass(frozen=True)
class EmbeddingRecord:
    id: str
    label: Optional[int]
    text_vec: np.ndarray
    image_vec: Optional[np.ndarray] = None
    pseudo_round: int = 0


@dataclass(frozen=True, eq=False)
class Corpus:
    ids: tuple
    labels: np.ndarray
    text: np.ndarray
    image: np.ndarray
    pseudo_round: np.ndarray = field(default=None)

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        n = len(ids)
        labels = np.array(self.labels, dtype=np.int64).reshape(n)
        text = np.array(self.text, dtype=np.float64)
        image = np.array(self.image, dtype=np.float64)
        if text.ndim != 2 or text.shape[0] != n:
            raise ShapeError(f"text block has shape {text.shape}, expected ({n}, d_T)")
        if image.ndim != 2 or image.shape[0] != n:
            raise ShapeError(f"image block has shape {image.shape}, expected ({n}, d_I)")
        if len(set(ids)) != n:
            seen, dup = set(), None
            for i in ids:
                if i in seen:
                    dup = i
                    break
                seen.add(i)
            raise FormatError(f"duplicate record id {dup!r}")
        bad = ~np.isin(labels, (UNLABELED,) + CLASSES)
        if bad.any():
            raise FormatError(f"label {labels[bad][0]} outside {{1,2,3}}")
        rounds = self.pseudo_round
        rounds = np.zeros(n, dtype=np.int64) if rounds is None else np.array(rounds, dtype=np.int64)
        for arr in (labels, text, image, rounds):
            arr.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "text", text)
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "pseudo_round", rounds)

    # construction ---------------------------------------------------------

    @classmethod
    def empty(cls, d_T: int, d_I: int) -> "Corpus":
        return cls((), np.zeros(0, np.int64), np.zeros((0, d_T)), np.zeros((0, d_I)))

    @classmethod
    def from_records(cls, records: Iterable[EmbeddingRecord], d_T=None, d_I=None) -> "Corpus":
        records = list(records)
        if d_T is None:
            if not records:
                raise ShapeError("d_T is required for an empty record list")
            d_T = len(records[0].text_vec)
        if d_I is None:
            d_I = next((len(r.image_vec) for r in records if r.image_vec is not None), 0)
        n = len(records)
        text = np.zeros((n, d_T))
        image = np.full((n, d_I), np.nan)
        for k, r in enumerate(records):
            if len(r.text_vec) != d_T:
                raise ShapeError(f"record {r.id!r}: text length {len(r.text_vec)} != {d_T}")
            text[k] = r.text_vec
            if r.image_vec is not None:
                if len(r.image_vec) != d_I:
                    raise ShapeError(f"record {r.id!r}: image length {len(r.image_vec)} != {d_I}")
                image[k] = r.image_vec
        labels = [UNLABELED if r.label is None else r.label for r in records]
        rounds = [r.pseudo_round for r in records]
        return cls(tuple(r.id for r in records), labels, text, image, rounds)

    # views ----------------------------------------------------------------

    def __len__(self):
        return len(self.ids)

    @property
    def d_T(self) -> int:
        return self.text.shape[1]

    @property
    def d_I(self) -> int:
        return self.image.shape[1]

    @property
    def has_image(self) -> np.ndarray:
        if self.d_I == 0:
            return np.zeros(len(self), dtype=bool)
        return ~np.isnan(self.image).any(axis=1)

    @property
    def is_labeled(self) -> np.ndarray:
        return self.labels != UNLABELED

    @property
    def class_counts(self) -> dict:
        return {c: int(np.sum(self.labels == c)) for c in CLASSES}

    def record(self, k: int) -> EmbeddingRecord:
        label = int(self.labels[k])
        img = self.image[k].copy() if self.has_image[k] else None
        return EmbeddingRecord(
            self.ids[k], label or None, self.text[k].copy(), img, int(self.pseudo_round[k])
        )

    def records(self) -> Iterator[EmbeddingRecord]:
        for k in range(len(self)):
            yield self.record(k)

    def subset(self, idx) -> "Corpus":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        idx = idx.astype(np.int64)
        return Corpus(
            tuple(self.ids[i] for i in idx),
            self.labels[idx],
            self.text[idx],
            self.image[idx],
            self.pseudo_round[idx],
        )

    def select_ids(self, ids) -> "Corpus":
        pos = {i: k for k, i in enumerate(self.ids)}
        return self.subset([pos[i] for i in ids])

    def concat(self, other: "Corpus") -> "Corpus":
        if (self.d_T, self.d_I) != (other.d_T, other.d_I):
            raise ShapeError(
                f"cannot concatenate corpora with dims {(self.d_T, self.d_I)} and {(other.d_T, other.d_I)}"
            )
        return Corpus(
            self.ids + other.ids,
            np.concatenate([self.labels, other.labels]),
            np.vstack([self.text, other.text]),
            np.vstack([self.image, other.image]),
            np.concatenate([self.pseudo_round, other.pseudo_round]),
        )

    def replace(self, **changes) -> "Corpus":
        fields = dict(
            ids=self.ids,
            labels=self.labels,
            text=self.text,
            image=self.image,
            pseudo_round=self.pseudo_round,
        )
        fields.update(changes)
        return Corpus(**fields)

    def features(self, view: str) -> np.ndarray:
        """Feature matrix for ``view`` in {text, image, fusion, multimodal}.

        ``fusion`` and ``multimodal`` both give the early-fused ``[text | image]``
        concatenation.
        """
        if view == "text":
            return np.array(self.text)
        if view not in ("image", "fusion", "multimodal"):
            raise ConfigError(f"unknown feature view {view!r}")
        self.require_images()
        if view == "image":
            return np.array(self.image)
        return np.hstack([self.text, self.image])

    def require_images(self):
        if len(self) and not self.has_image.all():
            missing = [self.ids[k] for k in np.flatnonzero(~self.has_image)[:3]]
            raise ModalityError(f"records without image vectors, e.g. {missing}")


# CSV -------------------------------------------------------------------------


def _parse_header(header: list, path) -> tuple:
    if header[:2] != ["id", "label"]:
        raise FormatError(f"{path}:1: header must start with 'id,label'")
    d_T = d_I = 0
    for name in header[2:]:
        if name == f"t{d_T}" and d_I == 0:
            d_T += 1
        elif name == f"i{d_I}":
            d_I += 1
        else:
            raise FormatError(f"{path}:1: unexpected column {name!r}")
    return d_T, d_I


def load_corpus(path) -> Corpus:
    """Read a corpus CSV (``id,label,t0..,i0..``)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file, header missing")
    d_T, d_I = _parse_header(rows[0], path)
    width = 2 + d_T + d_I
    ids, labels, text, image = [], [], [], []
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise FormatError(f"{path}:{lineno}: {len(row)} fields, expected {width}")
        rid, lab = row[0], row[1].strip()
        if rid in seen:
            raise FormatError(f"{path}:{lineno}: duplicate id {rid!r}")
        seen.add(rid)
        if lab == "":
            label = UNLABELED
        else:
            try:
                label = int(lab)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad label {lab!r}") from None
            if label not in CLASSES:
                raise FormatError(f"{path}:{lineno}: label {label} outside {{1,2,3}}")
        try:
            tv = [float(x) for x in row[2 : 2 + d_T]]
        except ValueError:
            raise FormatError(f"{path}:{lineno}: malformed text float") from None
        cells = row[2 + d_T :]
        if all(c.strip() == "" for c in cells):
            iv = [np.nan] * d_I
        else:
            try:
                iv = [float(x) for x in cells]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: malformed or partial image vector") from None
            if not np.all(np.isfinite(iv)):
                raise FormatError(f"{path}:{lineno}: non-finite image value")
        if not np.all(np.isfinite(tv)):
            raise FormatError(f"{path}:{lineno}: non-finite text value")
        ids.append(rid)
        labels.append(label)
        text.append(tv)
        image.append(iv)
    n = len(ids)
    return Corpus(
        tuple(ids),
        np.array(labels, dtype=np.int64),
        np.array(text, dtype=np.float64).reshape(n, d_T),
        np.array(image, dtype=np.float64).reshape(n, d_I),
    )


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def corpus_to_csv(c: Corpus) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label"] + [f"t{j}" for j in range(c.d_T)] + [f"i{j}" for j in range(c.d_I)])
    has_img = c.has_image
    for k in range(len(c)):
        lab = "" if c.labels[k] == UNLABELED else str(int(c.labels[k]))
        img = [_fmt(v) for v in c.image[k]] if has_img[k] else [""] * c.d_I
        w.writerow([c.ids[k], lab] + [_fmt(v) for v in c.text[k]] + img)
    return buf.getvalue()


def atomic_write(path, data, mode: str = "w"):
    """Write to a sibling temp file then rename over ``path``."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        kwargs = {"encoding": "utf-8", "newline": ""} if "b" not in mode else {}
        with os.fdopen(fd, mode, **kwargs) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_corpus(c: Corpus, path):
    atomic_write(path, corpus_to_csv(c))


# standardisation ---------------------------------------------------------------


def _blocks(which: str) -> tuple:
    if which == "both":
        return ("text", "image")
    if which in ("text", "image"):
        return (which,)
    raise ConfigError(f"which must be text, image or both, got {which!r}")


class Standardizer(TransformerMixin, BaseEstimator):
    """Column-wise ``(x - mean) / std`` with population statistics.

    Columns whose std is zero are recorded in ``passthrough_`` and left
    untouched by :meth:`transform`.
    """

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[0] < 2:
            raise InsufficientDataError("standardization needs at least 2 records")
        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0)
        self.passthrough_ = self.scale_ == 0.0
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features_in_:
            raise ShapeError(f"expected {self.n_features_in_} columns, got shape {X.shape}")
        out = (X - self.mean_) / np.where(self.passthrough_, 1.0, self.scale_)
        out[:, self.passthrough_] = X[:, self.passthrough_]
        return out


def standardize_fit(c: Corpus, which: str = "both") -> dict:
    """Fit one :class:`Standardizer` per selected modality block."""
    if len(c) < 2:
        raise InsufficientDataError("standardization needs at least 2 records")
    out = {}
    for block in _blocks(which):
        X = c.text if block == "text" else c.image[c.has_image]
        if block == "image" and c.d_I == 0:
            raise ModalityError("corpus has no image columns")
        out[block] = Standardizer().fit(X)
    return out


def standardize_apply(s: dict, c: Corpus) -> Corpus:
    changes = {}
    if "text" in s:
        changes["text"] = s["text"].transform(c.text)
    if "image" in s:
        img = np.array(c.image)
        mask = c.has_image
        if c.d_I != s["image"].n_features_in_:
            raise ShapeError(f"image width {c.d_I} != fitted {s['image'].n_features_in_}")
        if mask.any():
            img[mask] = s["image"].transform(c.image[mask])
        changes["image"] = img
    return c.replace(**changes)


# PCA ---------------------------------------------------------------------------


class PCA(TransformerMixin, BaseEstimator):
    """Principal components from the eigendecomposition of the sample covariance.

    Each component row is sign-fixed so its first nonzero entry is positive.
    """

    def __init__(self, n_components: int = 2):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n, d = X.shape
        k = self.n_components
        if k < 1 or k > d:
            raise ConfigError(f"n_components={k} must lie in [1, {d}]")
        if n < k + 1:
            raise InsufficientDataError(f"PCA with k={k} needs at least {k + 1} records, got {n}")
        self.mean_ = X.mean(axis=0)
        Xc = X - self.mean_
        cov = Xc.T @ Xc / (n - 1)
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(-evals, kind="stable")[:k]
        comps = evecs[:, order].T
        for row in comps:
            nz = np.flatnonzero(np.abs(row) > 1e-12)
            if nz.size and row[nz[0]] < 0:
                row *= -1.0
        self.components_ = comps
        self.explained_variance_ = np.clip(evals[order], 0.0, None)
        self.total_variance_ = float(np.trace(cov))
        self.n_features_in_ = d
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features_in_:
            raise ShapeError(f"expected {self.n_features_in_} columns, got shape {X.shape}")
        return (X - self.mean_) @ self.components_.T

    def inverse_transform(self, Z):
        return self.mean_ + np.asarray(Z) @ self.components_


def pca_fit(c: Corpus, which: str, k: int) -> PCA:
    if which not in ("text", "image"):
        raise ConfigError(f"which must be text or image, got {which!r}")
    X = c.text if which == "text" else c.image[c.has_image]
    model = PCA(k).fit(X)
    model.which_ = which
    return model


def pca_transform(p: PCA, c: Corpus) -> Corpus:
    if p.which_ == "text":
        return c.replace(text=p.transform(c.text))
    img = np.full((len(c), p.n_components), np.nan)
    mask = c.has_image
    if c.d_I != p.n_features_in_:
        raise ShapeError(f"image width {c.d_I} != fitted {p.n_features_in_}")
    if mask.any():
        img[mask] = p.transform(c.image[mask])
    return c.replace(image=img)


# noise, synthetic data, splitting ---------------------------------------------


def perturb_gaussian(c: Corpus, which: str, sigma: float, rng=None) -> Corpus:
    if sigma < 0:
        raise ConfigError("sigma must be nonnegative")
    if which not in ("text", "image"):
        raise ConfigError(f"which must be text or image, got {which!r}")
    if sigma == 0:
        return c
    rng = as_rng(rng)
    block = c.text if which == "text" else c.image
    noisy = block + rng.normal(block.shape, 0.0, sigma)
    return c.replace(**{which: noisy})


@dataclass(frozen=True)
class SynthConfig:
    n_per_class: int = 200
    d_T: int = 8
    d_I: int = 8
    separation: float = 4.0
    sigma: float = 1.0
    labeled_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.separation <= 0:
            raise ConfigError("separation must be > 0")
        if self.sigma <= 0:
            raise ConfigError("sigma must be > 0")
        if self.d_T < 2 or self.d_I < 2:
            raise ConfigError("d_T and d_I must be >= 2")
        if not 0.0 <= self.labeled_fraction <= 1.0:
            raise ConfigError("labeled_fraction must lie in [0, 1]")
        if self.n_per_class < 1:
            raise ConfigError("n_per_class must be >= 1")


def generate_synthetic_with_truth(cfg: SynthConfig) -> tuple:
    """Complementary-modalities corpus plus the full ground-truth label vector.

    Text separates class 1 from {2, 3} along its first axis; image separates
    class 2 from class 3 along its first axis, and class 1 images are drawn
    from the class-2 or class-3 image distribution with equal probability.
    """
    rng = SeededRng(cfg.seed)
    n = 3 * cfg.n_per_class
    truth = np.repeat(np.array(CLASSES, dtype=np.int64), cfg.n_per_class)
    truth = truth[rng.permutation(n)]
    a, s = cfg.separation, cfg.sigma
    text = rng.normal((n, cfg.d_T), 0.0, s)
    text[:, 0] += np.where(truth == 1, a, -a)
    image = rng.normal((n, cfg.d_I), 0.0, s)
    coin = rng.uniform(n) < 0.5
    img_sign = np.where(truth == 2, 1.0, np.where(truth == 3, -1.0, np.where(coin, 1.0, -1.0)))
    image[:, 0] += a * img_sign
    labels = truth.copy()
    for c in CLASSES:
        members = np.flatnonzero(truth == c)
        n_hide = int(round((1.0 - cfg.labeled_fraction) * members.size))
        labels[members[rng.choice(members.size, n_hide)]] = UNLABELED
    width = len(str(n - 1))
    ids = tuple(f"s{k:0{width}d}" for k in range(n))
    return Corpus(ids, labels, text, image), truth


def generate_synthetic(cfg: SynthConfig) -> Corpus:
    return generate_synthetic_with_truth(cfg)[0]


def split_labeled(c: Corpus) -> tuple:
    mask = c.is_labeled
    return c.subset(mask), c.subset(~mask)


def drop_missing_images(c: Corpus, keep: bool = False) -> Corpus:
    """Remove records without an image vector unless ``keep`` (text-only runs)."""
    if keep:
        return c
    return c.subset(c.has_image)
