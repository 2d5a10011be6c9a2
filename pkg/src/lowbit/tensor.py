"""Dense float32 tensor primitives and a deterministic PRNG.

"Full precision" throughout this package means 32-bit float, row-major
numpy arrays. The handful of primitives here (matmul, layer_norm, gelu,
softmax) are the building blocks of the transformer forward pass; every
float GeMM in the package goes through :func:`matmul` so results are
reproducible bit-for-bit run to run.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from lowbit.errors import ShapeError

F32 = np.float32

_INV_SQRT2 = 1.0 / math.sqrt(2.0)


def as_f32(data, shape=None) -> np.ndarray:
    """Coerce to a C-contiguous float32 array, optionally reshaped."""
    arr = np.ascontiguousarray(data, dtype=F32)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def check_finite(x: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Float32 matrix product with a fixed left-to-right accumulation order.

    c[i][j] = sum_p a[i][p] * b[p][j], every product and partial sum rounded
    to float32, accumulated in increasing p, matching a naive triple-loop
    float32 oracle bit for bit. einsum with optimize=False runs a sequential
    sum-of-products kernel with exactly these semantics; BLAS is deliberately
    not used because its blocked accumulation order is platform-dependent.
    The oracle-equality test in the suite guards this assumption.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    # Contiguous operands are required for the order guarantee: einsum picks
    # a different (still deterministic, but not left-to-right) loop nesting
    # for strided views.
    a = np.ascontiguousarray(a, dtype=F32)
    b = np.ascontiguousarray(b, dtype=F32)
    return np.einsum("ip,pj->ij", a, b, optimize=False)


def layer_norm(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Row-wise layer normalization with population variance."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be > 0, got {eps}")
    x = as_f32(x)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm params {gamma.shape}/{beta.shape} do not match row width {x.shape[-1]}"
        )
    mean = x.mean(axis=-1, keepdims=True, dtype=F32)
    var = np.square(x - mean).mean(axis=-1, keepdims=True, dtype=F32)
    norm = (x - mean) / np.sqrt(var + F32(eps))
    return as_f32(norm * as_f32(gamma) + as_f32(beta))


def gelu(x: np.ndarray) -> np.ndarray:
    """Elementwise x * Phi(x) using the exact Gaussian CDF (erf form).

    The tanh approximation is deliberately not used; erf is evaluated in
    64-bit and the result rounded once to float32.
    """
    x64 = np.asarray(x, dtype=np.float64)
    return as_f32(x64 * 0.5 * (1.0 + erf(x64 * _INV_SQRT2)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx of gelu: Phi(x) + x * phi(x), evaluated in 64-bit."""
    x64 = np.asarray(x, dtype=np.float64)
    cdf = 0.5 * (1.0 + erf(x64 * _INV_SQRT2))
    pdf = np.exp(-0.5 * x64 * x64) / math.sqrt(2.0 * math.pi)
    return as_f32(cdf + x64 * pdf)


def softmax(x: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax along the last axis."""
    x = np.asarray(x, dtype=F32)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted, dtype=F32)
    return as_f32(e / e.sum(axis=-1, keepdims=True, dtype=F32))


def log_softmax_f64(x: np.ndarray) -> np.ndarray:
    """Float64 log-softmax along the last axis (used by perplexity)."""
    x64 = np.asarray(x, dtype=np.float64)
    shifted = x64 - x64.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# Deterministic PRNG
# ---------------------------------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = 1.0 / float(1 << 53)


class Rng:
    """Counter-based splitmix64 generator.

    Output i of a generator seeded with s is mix(s + (i+1)*GAMMA) where mix
    is the splitmix64 finalizer. Pure 64-bit integer arithmetic, so the
    sequence is identical on every platform for a given seed. The counter
    form lets whole blocks of outputs be produced vectorized.
    """

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def _raw_block(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
            z = self._seed + idx * _GAMMA
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            z = z ^ (z >> np.uint64(31))
        self._counter += n
        return z

    def next_u64(self) -> int:
        return int(self._raw_block(1)[0])

    def uniform(self, n: int) -> np.ndarray:
        """n float64 samples in [0, 1), 53-bit resolution."""
        return (self._raw_block(n) >> np.uint64(11)).astype(np.float64) * _U53

    def gaussian(self, shape, std: float = 1.0) -> np.ndarray:
        """Float32 N(0, std^2) samples via Box-Muller (computed in 64-bit)."""
        n = int(np.prod(shape)) if not isinstance(shape, int) else shape
        pairs = (n + 1) // 2
        u1 = 1.0 - self.uniform(pairs)  # (0, 1], keeps log finite
        u2 = self.uniform(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return as_f32(z * std).reshape(shape)

    def integers(self, upper: int, n: int) -> np.ndarray:
        """n uniform ints in [0, upper). Modulo bias is < 2^-40 for desk-scale upper."""
        if upper < 1:
            raise ValueError(f"upper bound must be >= 1, got {upper}")
        return (self._raw_block(n) % np.uint64(upper)).astype(np.int64)
