"""Dense numeric primitives: products, activations, normalisation, RNG, gradient oracle.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The helpers here
validate shapes and raise :class:`~fusionlab.exceptions.ShapeError` instead of
letting numpy broadcast silently.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable

import numpy as np

from .exceptions import EvaluationError, ShapeError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715
_GELU_CA = _GELU_C * _GELU_A

LN_EPS = 1e-5
BN_EPS = 1e-5

# SplitMix64 constants
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x.copy()
    z ^= z >> np.uint64(30)
    z *= _MIX1
    z ^= z >> np.uint64(27)
    z *= _MIX2
    z ^= z >> np.uint64(31)
    return z


class SeededRng:
    """Counter-based SplitMix64 generator.

    Draw ``n`` (0-based, counted across the life of the generator) is::

        z = (seed + (n + 1) * 0x9E3779B97F4A7C15) mod 2**64
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        z =  z ^ (z >> 31)

    which is exactly the SplitMix64 output stream for state ``seed``. Uniforms
    take the top 53 bits, normals use Box-Muller on pairs of uniforms. The
    stream is a pure function of ``(seed, counter)`` so it is identical on
    every platform and numpy version, and blocks of draws are vectorised.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, counter={self.counter})"

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            x = np.uint64(self.seed) + idx * _GAMMA
            return _splitmix64(x)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        shape = () if size is None else size
        n = int(np.prod(shape))
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(shape)

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0):
        shape = () if size is None else size
        n = int(np.prod(shape))
        half = (n + 1) // 2
        u = self.uniform(2 * half)
        u1 = 1.0 - u[:half]  # (0, 1]
        u2 = u[half:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        z = loc + scale * z
        return float(z[0]) if size is None else z.reshape(shape)

    def integers(self, high: int, size=None):
        """Uniform integers in ``[0, high)``."""
        u = self.uniform(size)
        out = np.floor(np.asarray(u) * high).astype(np.int64)
        return int(out) if size is None else np.minimum(out, high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, in draw order."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct items from {n}")
        return self.permutation(n)[:k]

    def spawn(self, key) -> "SeededRng":
        """Independent child stream named by ``key`` (str or int).

        The child seed is the first 8 bytes (little-endian) of
        ``blake2b(f"{seed}:{key}")``; the parent stream is not advanced.
        """
        digest = hashlib.blake2b(f"{self.seed}:{key}".encode(), digest_size=8).digest()
        return SeededRng(int.from_bytes(digest, "little"))


def as_rng(random_state) -> SeededRng:
    """Coerce ``None``, an int or a :class:`SeededRng` into a generator."""
    if isinstance(random_state, SeededRng):
        return random_state
    if random_state is None:
        return SeededRng(0)
    if isinstance(random_state, (int, np.integer)):
        return SeededRng(int(random_state))
    raise TypeError(f"cannot build a SeededRng from {random_state!r}")


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - np.maximum.reduce(x, axis=axis, keepdims=True))
    return e / np.add.reduce(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax_rows(m) -> np.ndarray:
    m = as_matrix(m)
    if m.size == 0:
        raise ShapeError("softmax_rows needs a nonempty matrix")
    return softmax(m, axis=1)


def gelu(x) -> np.ndarray:
    """GELU, tanh approximation: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    x = np.asarray(x, dtype=np.float64)
    x2 = x * x
    return 0.5 * x * (1.0 + np.tanh(x * (_GELU_C + _GELU_CA * x2)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(x * (_GELU_C + _GELU_CA * x2))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * (_GELU_C + 3.0 * _GELU_CA * x2)


def layer_norm(m, gamma, beta, eps: float = LN_EPS) -> np.ndarray:
    """Normalise each row (last axis) to zero mean, unit variance, then scale and shift."""
    m = np.asarray(m, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if gamma.shape != (m.shape[-1],) or beta.shape != (m.shape[-1],):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match width {m.shape[-1]}"
        )
    if eps <= 0:
        raise ValueError("eps must be positive")
    return layer_norm_forward(m, gamma, beta, eps)[0]


def layer_norm_forward(x, gamma, beta, eps=LN_EPS):
    n = x.shape[-1]
    xc = x - np.add.reduce(x, axis=-1, keepdims=True) / n
    inv_std = 1.0 / np.sqrt(np.add.reduce(xc * xc, axis=-1, keepdims=True) / n + eps)
    xhat = xc * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma)


def layer_norm_backward(dy, cache):
    xhat, inv_std, gamma = cache
    n = xhat.shape[-1]
    dxhat = dy * gamma
    dx = inv_std / n * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=axes), dy.sum(axis=axes)


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar function ``f`` at ``theta``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    theta = np.array(theta, dtype=np.float64).ravel()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + h
        fp = f(theta)
        theta[i] = old - h
        fm = f(theta)
        theta[i] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise EvaluationError(f"non-finite objective at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def xavier_init(rows: int, cols: int, rng: SeededRng) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ShapeError(f"xavier_init needs positive dims, got {rows}x{cols}")
    bound = math.sqrt(6.0 / (rows + cols))
    return rng.uniform((rows, cols), -bound, bound)
