"""Cross-modal transformer classifier with hand-written backpropagation.

Each modality is projected (linear, batch-norm, GELU, dropout) to a ``d``-wide
token. The two tokens ``[text, image]`` pass through ``n_layers`` post-norm
encoder layers (multi-head self-attention, then a GELU feed-forward block, each
wrapped in dropout + residual + layer-norm). The two output tokens are
flattened in that order and fed to a three-layer head ``2d -> d -> d/4 -> 3``.

Parameters live in an ordered ``dict`` of float64 arrays keyed by dotted names
(``"layers.0.Wq"``); batch-norm running statistics live in ``buffers``.
"""

from __future__ import annotations

import copy
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .exceptions import ConfigError, ContractError, FormatError, ModalityError, ShapeError
from .numcore import (
    BN_EPS,
    SeededRng,
    as_matrix,
    as_rng,
    gelu,
    gelu_grad,
    layer_norm_backward,
    layer_norm_forward,
    softmax,
    xavier_init,
)

BN_MOMENTUM = 0.1
N_CLASSES = 3

MAGIC = b"FUSNLAB\x00"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    d_T: int = 768
    d_I: int = 64
    d: int = 1024
    n_layers: int = 4
    n_heads: int = 16
    ff_mult: int = 4
    dropout: float = 0.2
    n_classes: int = N_CLASSES

    def __post_init__(self):
        for name in ("d_T", "d_I", "d", "n_layers", "n_heads", "ff_mult"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.n_classes != N_CLASSES:
            raise ConfigError("n_classes is fixed at 3")

    @classmethod
    def desk(cls, d_T: int, d_I: int, **overrides) -> "ArchConfig":
        """Small preset (d=32, 2 layers, 4 heads) sharing the full-size code path."""
        base = dict(d_T=d_T, d_I=d_I, d=32, n_layers=2, n_heads=4, ff_mult=4, dropout=0.2)
        base.update(overrides)
        return cls(**base)

    @property
    def d_k(self) -> int:
        return self.d // self.n_heads

    @property
    def d_ff(self) -> int:
        return self.ff_mult * self.d

    @property
    def d_q(self) -> int:
        return max(1, self.d // 4)


def parameter_shapes(cfg: ArchConfig) -> list:
    """Trainable tensors in their fixed declaration (and file) order."""
    d, q = cfg.d, cfg.d_q
    shapes = []
    for name, d_in in (("text_proj", cfg.d_T), ("image_proj", cfg.d_I)):
        shapes += [
            (f"{name}.W", (d_in, d)),
            (f"{name}.b", (d,)),
            (f"{name}.bn_gamma", (d,)),
            (f"{name}.bn_beta", (d,)),
        ]
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        shapes += [(p + w, (d, d)) for w in ("Wq", "Wk", "Wv", "Wo")]
        shapes += [
            (p + "ln1_gamma", (d,)),
            (p + "ln1_beta", (d,)),
            (p + "ff_W1", (d, cfg.d_ff)),
            (p + "ff_b1", (cfg.d_ff,)),
            (p + "ff_W2", (cfg.d_ff, d)),
            (p + "ff_b2", (d,)),
            (p + "ln2_gamma", (d,)),
            (p + "ln2_beta", (d,)),
        ]
    shapes += [
        ("head.W1", (2 * d, d)),
        ("head.b1", (d,)),
        ("head.bn1_gamma", (d,)),
        ("head.bn1_beta", (d,)),
        ("head.W2", (d, q)),
        ("head.b2", (q,)),
        ("head.bn2_gamma", (q,)),
        ("head.bn2_beta", (q,)),
        ("head.W3", (q, N_CLASSES)),
        ("head.b3", (N_CLASSES,)),
    ]
    return shapes


def buffer_shapes(cfg: ArchConfig) -> list:
    out = []
    for prefix, width in (
        ("text_proj.bn", cfg.d),
        ("image_proj.bn", cfg.d),
        ("head.bn1", cfg.d),
        ("head.bn2", cfg.d_q),
    ):
        out += [(f"{prefix}_mean", (width,)), (f"{prefix}_var", (width,))]
    return out


def n_parameters(cfg: ArchConfig) -> int:
    """Closed-form trainable parameter count."""
    d, f, q = cfg.d, cfg.d_ff, cfg.d_q
    proj = (cfg.d_T + cfg.d_I) * d + 2 * 3 * d
    layer = 4 * d * d + 2 * d * f + f + d + 4 * d
    head = 2 * d * d + 3 * d + d * q + 3 * q + q * N_CLASSES + N_CLASSES
    return proj + cfg.n_layers * layer + head


class FusionModel:
    """Parameters, batch-norm buffers and the train/eval switch."""

    def __init__(self, cfg: ArchConfig, params: dict, buffers: dict):
        self.cfg = cfg
        self.params = params
        self.buffers = buffers
        self.training = True
        self.epoch = None

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "FusionModel":
        return copy.deepcopy(self)

    def state(self) -> dict:
        """Snapshot of parameters and buffers (deep copies)."""
        return {
            "params": {k: v.copy() for k, v in self.params.items()},
            "buffers": {k: v.copy() for k, v in self.buffers.items()},
            "epoch": self.epoch,
        }

    def load_state(self, state: dict):
        self.params = {k: v.copy() for k, v in state["params"].items()}
        self.buffers = {k: v.copy() for k, v in state["buffers"].items()}
        self.epoch = state["epoch"]


def init_model(cfg: ArchConfig, rng=None) -> FusionModel:
    """Xavier-uniform weights, zero biases, unit BN/LN scales, running var 1."""
    rng = as_rng(rng)
    params = {}
    for name, shape in parameter_shapes(cfg):
        leaf = name.rsplit(".", 1)[1]
        if len(shape) == 2:
            params[name] = xavier_init(shape[0], shape[1], rng)
        elif leaf.endswith("gamma"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    buffers = {
        name: (np.ones(shape) if name.endswith("_var") else np.zeros(shape))
        for name, shape in buffer_shapes(cfg)
    }
    return FusionModel(cfg, params, buffers)


@dataclass
class ForwardCache:
    batch_size: int
    training: bool
    batch_stats: bool
    proj: dict = field(default_factory=dict)
    layers: list = field(default_factory=list)
    head: dict = field(default_factory=dict)
    probs: Optional[np.ndarray] = None
    consumed: bool = False

    @property
    def attention(self) -> list:
        """Attention weights per layer, each of shape ``(B, heads, 2, 2)``."""
        return [lc["A"] for lc in self.layers]


def _dropout(x, p, rng):
    if p <= 0.0:
        return x, None
    mask = (rng.uniform(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def _bn_forward(m, prefix, z, batch_stats, update):
    gamma = m.params[f"{prefix}_gamma"]
    beta = m.params[f"{prefix}_beta"]
    if batch_stats:
        n = z.shape[0]
        mu = np.add.reduce(z, axis=0) / n
        zc = z - mu
        var = np.add.reduce(zc * zc, axis=0) / n
        if update:
            mk, vk = f"{prefix}_mean", f"{prefix}_var"
            m.buffers[mk] = (1 - BN_MOMENTUM) * m.buffers[mk] + BN_MOMENTUM * mu
            m.buffers[vk] = (1 - BN_MOMENTUM) * m.buffers[vk] + BN_MOMENTUM * var * n / (n - 1)
    else:
        mu = m.buffers[f"{prefix}_mean"]
        var = m.buffers[f"{prefix}_var"]
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (z - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std)


def _bn_backward(m, prefix, dy, bn_cache, batch_stats, grads):
    xhat, inv_std = bn_cache
    gamma = m.params[f"{prefix}_gamma"]
    grads[f"{prefix}_gamma"] = (dy * xhat).sum(axis=0)
    grads[f"{prefix}_beta"] = dy.sum(axis=0)
    dxhat = dy * gamma
    if not batch_stats:
        return dxhat * inv_std
    n = dy.shape[0]
    return inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))


def _split_heads(t, h):
    B, T, d = t.shape
    return t.reshape(B, T, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(t):
    B, h, T, dk = t.shape
    return t.transpose(0, 2, 1, 3).reshape(B, T, h * dk)


def _encoder_forward(P, pre, X, cfg, p_drop, rng):
    h, dk = cfg.n_heads, cfg.d_k
    q = _split_heads(X @ P[pre + "Wq"], h)
    k = _split_heads(X @ P[pre + "Wk"], h)
    v = _split_heads(X @ P[pre + "Wv"], h)
    A = softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dk), axis=-1)
    O = _merge_heads(A @ v)
    att, m1 = _dropout(O @ P[pre + "Wo"], p_drop, rng)
    X1, ln1 = layer_norm_forward(X + att, P[pre + "ln1_gamma"], P[pre + "ln1_beta"])
    H = X1 @ P[pre + "ff_W1"] + P[pre + "ff_b1"]
    G = gelu(H)
    ff, m2 = _dropout(G @ P[pre + "ff_W2"] + P[pre + "ff_b2"], p_drop, rng)
    X2, ln2 = layer_norm_forward(X1 + ff, P[pre + "ln2_gamma"], P[pre + "ln2_beta"])
    cache = dict(X=X, q=q, k=k, v=v, A=A, O=O, m1=m1, X1=X1, ln1=ln1, H=H, G=G, m2=m2, ln2=ln2)
    return X2, cache


def _encoder_backward(P, pre, dX2, c, cfg, grads):
    d, dk = cfg.d, cfg.d_k
    dR2, grads[pre + "ln2_gamma"], grads[pre + "ln2_beta"] = layer_norm_backward(dX2, c["ln2"])
    dff = dR2 if c["m2"] is None else dR2 * c["m2"]
    grads[pre + "ff_W2"] = c["G"].reshape(-1, cfg.d_ff).T @ dff.reshape(-1, d)
    grads[pre + "ff_b2"] = dff.sum(axis=(0, 1))
    dH = (dff @ P[pre + "ff_W2"].T) * gelu_grad(c["H"])
    grads[pre + "ff_W1"] = c["X1"].reshape(-1, d).T @ dH.reshape(-1, cfg.d_ff)
    grads[pre + "ff_b1"] = dH.sum(axis=(0, 1))
    dX1 = dR2 + dH @ P[pre + "ff_W1"].T
    dR1, grads[pre + "ln1_gamma"], grads[pre + "ln1_beta"] = layer_norm_backward(dX1, c["ln1"])
    datt = dR1 if c["m1"] is None else dR1 * c["m1"]
    grads[pre + "Wo"] = c["O"].reshape(-1, d).T @ datt.reshape(-1, d)
    dO = _split_heads(datt @ P[pre + "Wo"].T, cfg.n_heads)
    A, q, k, v = c["A"], c["q"], c["k"], c["v"]
    dA = dO @ v.transpose(0, 1, 3, 2)
    dv = A.transpose(0, 1, 3, 2) @ dO
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) / math.sqrt(dk)
    dq = dS @ k
    dk_ = dS.transpose(0, 1, 3, 2) @ q
    Xf = c["X"].reshape(-1, d)
    dX = dR1
    for w, g in (("Wq", dq), ("Wk", dk_), ("Wv", dv)):
        gm = _merge_heads(g)
        grads[pre + w] = Xf.T @ gm.reshape(-1, d)
        dX = dX + gm @ P[pre + w].T
    return dX


def _check_batch(cfg, batch_text, batch_image):
    xt = as_matrix(batch_text, "text batch")
    xi = as_matrix(batch_image, "image batch")
    if xt.shape[0] == 0:
        raise ShapeError("empty batch")
    if xt.shape[1] != cfg.d_T or xi.shape[1] != cfg.d_I:
        raise ShapeError(
            f"batch widths ({xt.shape[1]}, {xi.shape[1]}) do not match model ({cfg.d_T}, {cfg.d_I})"
        )
    if xi.shape[0] != xt.shape[0]:
        raise ShapeError(f"text batch has {xt.shape[0]} rows but image batch {xi.shape[0]}")
    return xt, xi


def forward(m: FusionModel, batch_text, batch_image, rng=None, *, frozen_bn=False, update_stats=True):
    """Run the model on a batch; returns ``(probs, logits, cache)``.

    In train mode batch-norm uses batch statistics (unless ``frozen_bn``) and
    dropout is active, drawing its masks from ``rng``. Eval mode uses running
    statistics and no dropout, so it also accepts a batch of one.
    """
    cfg, P = m.cfg, m.params
    xt, xi = _check_batch(cfg, batch_text, batch_image)
    B = xt.shape[0]
    batch_stats = m.training and not frozen_bn
    if batch_stats and B < 2:
        raise ShapeError("train-mode batch-norm needs a batch of at least 2 samples")
    p_drop = cfg.dropout if m.training else 0.0
    if p_drop > 0:
        rng = as_rng(rng)
    update = batch_stats and update_stats
    cache = ForwardCache(B, m.training, batch_stats)

    tokens = []
    for name, x in (("text_proj", xt), ("image_proj", xi)):
        z = x @ P[f"{name}.W"] + P[f"{name}.b"]
        zn, bn = _bn_forward(m, f"{name}.bn", z, batch_stats, update)
        a, mask = _dropout(gelu(zn), p_drop, rng)
        cache.proj[name] = dict(x=x, zn=zn, bn=bn, mask=mask)
        tokens.append(a)
    X = np.stack(tokens, axis=1)
    for l in range(cfg.n_layers):
        X, lc = _encoder_forward(P, f"layers.{l}.", X, cfg, p_drop, rng)
        cache.layers.append(lc)

    F = X.reshape(B, 2 * cfg.d)
    hc = cache.head
    hc["F"] = F
    h1 = F @ P["head.W1"] + P["head.b1"]
    n1, hc["bn1"] = _bn_forward(m, "head.bn1", gelu(h1), batch_stats, update)
    a1, hc["m1"] = _dropout(n1, p_drop, rng)
    h2 = a1 @ P["head.W2"] + P["head.b2"]
    n2, hc["bn2"] = _bn_forward(m, "head.bn2", gelu(h2), batch_stats, update)
    a2, hc["m2"] = _dropout(n2, p_drop, rng)
    logits = a2 @ P["head.W3"] + P["head.b3"]
    hc.update(h1=h1, a1=a1, h2=h2, a2=a2)
    probs = softmax(logits, axis=1)
    cache.probs = probs
    return probs, logits, cache


def labels_to_index(labels) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).ravel()
    if y.size and (y.min() < 1 or y.max() > N_CLASSES):
        raise ValueError(f"labels must lie in {{1,2,3}}, got {sorted(set(y.tolist()))}")
    return y - 1


def backward(m: FusionModel, cache: ForwardCache, labels, sample_weight=None) -> dict:
    """Exact gradients of the weighted cross-entropy w.r.t. every parameter.

    With ``sample_weight=None`` the objective is the batch-mean cross-entropy,
    i.e. ``dlogits = (probs - onehot) / B``. The cache is consumed.
    """
    if cache.consumed:
        raise ContractError("forward cache already used by a backward pass")
    if not cache.training:
        raise ContractError("backward needs a cache from a train-mode forward")
    y = labels_to_index(labels)
    B = cache.batch_size
    if y.size != B:
        raise ContractError(f"cache holds a batch of {B} but {y.size} labels were given")
    w = np.full(B, 1.0 / B) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    cache.consumed = True
    cfg, P = m.cfg, m.params
    bs = cache.batch_stats
    grads = {}

    dlogits = cache.probs.copy()
    dlogits[np.arange(B), y] -= 1.0
    dlogits *= w[:, None]

    hc = cache.head
    grads["head.W3"] = hc["a2"].T @ dlogits
    grads["head.b3"] = dlogits.sum(axis=0)
    da2 = dlogits @ P["head.W3"].T
    if hc["m2"] is not None:
        da2 = da2 * hc["m2"]
    dh2 = _bn_backward(m, "head.bn2", da2, hc["bn2"], bs, grads) * gelu_grad(hc["h2"])
    grads["head.W2"] = hc["a1"].T @ dh2
    grads["head.b2"] = dh2.sum(axis=0)
    da1 = dh2 @ P["head.W2"].T
    if hc["m1"] is not None:
        da1 = da1 * hc["m1"]
    dh1 = _bn_backward(m, "head.bn1", da1, hc["bn1"], bs, grads) * gelu_grad(hc["h1"])
    grads["head.W1"] = hc["F"].T @ dh1
    grads["head.b1"] = dh1.sum(axis=0)
    dX = (dh1 @ P["head.W1"].T).reshape(B, 2, cfg.d)

    for l in reversed(range(cfg.n_layers)):
        dX = _encoder_backward(P, f"layers.{l}.", dX, cache.layers[l], cfg, grads)

    for t, name in enumerate(("text_proj", "image_proj")):
        pc = cache.proj[name]
        da = dX[:, t, :]
        if pc["mask"] is not None:
            da = da * pc["mask"]
        dzn = da * gelu_grad(pc["zn"])
        dz = _bn_backward(m, f"{name}.bn", dzn, pc["bn"], bs, grads)
        grads[f"{name}.W"] = pc["x"].T @ dz
        grads[f"{name}.b"] = dz.sum(axis=0)

    return {k: grads[k] for k in P}


def predict_arrays(m: FusionModel, text, image, chunk: int = 512) -> np.ndarray:
    if m.training:
        raise ContractError("predict needs an eval-mode model")
    xt, xi = _check_batch(m.cfg, text, image)
    out = [forward(m, xt[s : s + chunk], xi[s : s + chunk])[0] for s in range(0, xt.shape[0], chunk)]
    return np.vstack(out)


def predict(m: FusionModel, corpus) -> tuple:
    """Class labels (1-based, ties to the lowest class) and probabilities."""
    if not corpus.has_image.all():
        raise ModalityError("fusion prediction needs an image vector for every record")
    if len(corpus) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, N_CLASSES))
    probs = predict_arrays(m, corpus.text, corpus.image)
    return np.argmax(probs, axis=1) + 1, probs


# model file ---------------------------------------------------------------------

_HEADER = struct.Struct("<7Id")


def model_to_bytes(m: FusionModel) -> bytes:
    """Serialise to the little-endian model file layout.

    ``magic[8] | u32 version | u32 d_T d_I d n_layers n_heads ff_mult n_classes |
    f64 dropout | u32 n_tensors | per tensor: u16 name_len, name, u8 ndim,
    u32 dims[ndim], f64 data[...]``. Tensors appear in :func:`parameter_shapes`
    order followed by :func:`buffer_shapes` order.
    """
    c = m.cfg
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts.append(_HEADER.pack(c.d_T, c.d_I, c.d, c.n_layers, c.n_heads, c.ff_mult, c.n_classes, c.dropout))
    tensors = list(m.params.items()) + list(m.buffers.items())
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(data: bytes, expected_cfg: Optional[ArchConfig] = None) -> FusionModel:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("model file is truncated")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise FormatError("not a fusion model file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version}")
    *dims, dropout = _HEADER.unpack(take(_HEADER.size))
    try:
        cfg = ArchConfig(*dims[:6], dropout=dropout, n_classes=dims[6])
    except ConfigError as exc:
        raise FormatError(f"invalid architecture header: {exc}") from None
    if expected_cfg is not None and asdict(expected_cfg) != asdict(cfg):
        raise FormatError(f"architecture in file {cfg} does not match expected {expected_cfg}")
    declared = parameter_shapes(cfg) + buffer_shapes(cfg)
    (count,) = struct.unpack("<I", take(4))
    if count != len(declared):
        raise FormatError(f"file holds {count} tensors, architecture declares {len(declared)}")
    n_params = len(parameter_shapes(cfg))
    params, buffers = {}, {}
    for k, (name, shape) in enumerate(declared):
        (nlen,) = struct.unpack("<H", take(2))
        got = bytes(take(nlen)).decode("utf-8", errors="replace")
        (ndim,) = struct.unpack("<B", take(1))
        got_shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if got != name or tuple(got_shape) != tuple(shape):
            raise FormatError(f"tensor {k}: found {got}{got_shape}, expected {name}{shape}")
        n = int(np.prod(shape))
        arr = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        (params if k < n_params else buffers)[name] = arr
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last tensor")
    model = FusionModel(cfg, params, buffers)
    return model.eval()


def save_model(m: FusionModel, path):
    from .dataio import atomic_write

    atomic_write(path, model_to_bytes(m), mode="wb")


def load_model(path, expected_cfg: Optional[ArchConfig] = None) -> FusionModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read(), expected_cfg)


# gradient check -------------------------------------------------------------------


def batch_loss(m: FusionModel, text, image, labels, *, frozen_bn: bool) -> float:
    """Mean cross-entropy of a deterministic train-mode forward (no stat updates)."""
    _, logits, _ = forward(m, text, image, frozen_bn=frozen_bn, update_stats=False)
    y = labels_to_index(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradient_check(
    cfg: ArchConfig,
    batch_size: int = 4,
    seed: int = 0,
    h: float = 1e-5,
    frozen_bn: bool = True,
    perturb: Optional[str] = None,
) -> dict:
    """Compare :func:`backward` with central differences on every parameter tensor.

    Dropout is switched off. Biases, normalisation parameters and running
    statistics are randomised so no tensor sits at a special point. Returns
    ``{name: max relative error}``; ``perturb`` names a tensor whose analytic
    gradient is deliberately corrupted (used to test the failure path).
    """
    from .numcore import finite_diff_grad

    cfg = replace(cfg, dropout=0.0)
    rng = SeededRng(seed)
    m = init_model(cfg, rng.spawn("init"))
    prng = rng.spawn("perturb")
    for name, arr in m.params.items():
        if arr.ndim == 1:
            base = 1.0 if name.endswith("gamma") else 0.0
            m.params[name] = base + prng.normal(arr.shape, 0.0, 0.1)
    for name, arr in m.buffers.items():
        if name.endswith("_var"):
            m.buffers[name] = prng.uniform(arr.shape, 0.5, 1.5)
        else:
            m.buffers[name] = prng.normal(arr.shape, 0.0, 0.1)
    drng = rng.spawn("data")
    text = drng.normal((batch_size, cfg.d_T))
    image = drng.normal((batch_size, cfg.d_I))
    labels = drng.integers(N_CLASSES, batch_size) + 1

    m.train()
    _, _, cache = forward(m, text, image, frozen_bn=frozen_bn, update_stats=False)
    grads = backward(m, cache, labels)
    if perturb is not None:
        grads[perturb] = grads[perturb].copy()
        grads[perturb].flat[0] += 1e-2

    report = {}
    for name, arr in m.params.items():
        shape = arr.shape

        def f(theta, name=name, shape=shape):
            m.params[name] = theta.reshape(shape)
            return batch_loss(m, text, image, labels, frozen_bn=frozen_bn)

        original = arr.copy()
        numeric = finite_diff_grad(f, original, h)
        m.params[name] = original
        report[name] = float(relative_error(grads[name].ravel(), numeric).max())
    return report
