"""Integer GeMM with exact INT32 accumulation and a fused dequant epilogue.

CPU model of the fused low-precision pipeline: activations and weights enter
as int8 payloads, the accumulator is exact 32-bit integer, and one epilogue
pass scales each accumulator entry by activation-scale x weight-group-scale
(plus bias) to produce the float32 output directly. No float matrix of the
quantized operands is ever materialized on this path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lowbit import quant, tensor
from lowbit.errors import ShapeError, UsageError
from lowbit.quant import QuantizedActivation, QuantizedMatrix, qmax
from lowbit.tensor import F32, as_f32

INT32_LIMIT = 1 << 31


# Activation handling for one GeMM. Full bypasses activation quantization
# entirely (weight-only quantization: dequantize the weight, run float matmul).
@dataclass(frozen=True)
class DynamicAct:
    bits: int = 8


@dataclass(frozen=True)
class StaticAct:
    scale: float
    bits: int = 8


@dataclass(frozen=True)
class FullAct:
    pass


ActMode = DynamicAct | StaticAct | FullAct


@dataclass
class IntAccumulator:
    """Exact int32 accumulator of an int8 x int8 GeMM."""

    acc: np.ndarray  # (tokens x out) int32


def check_overflow_guard(inner_dim: int, act_bits: int, weight_bits: int) -> None:
    """Reject shapes whose worst-case dot product could exceed INT32.

    d * (2^(ba-1)-1) * (2^(bw-1)-1) must stay below 2^31; for 8x8-bit this
    caps the inner dimension around 133k, far above desk scale.
    """
    worst = inner_dim * qmax(act_bits) * qmax(weight_bits)
    if worst >= INT32_LIMIT:
        raise UsageError(
            f"igemm overflow guard: inner dim {inner_dim} with {act_bits}x{weight_bits}-bit "
            f"operands can reach {worst} >= 2^31"
        )


def igemm(xq: QuantizedActivation, wq: QuantizedMatrix) -> IntAccumulator:
    """acc[i][j] = sum_p xq[i][p] * wq[j][p], exact integer arithmetic.

    The weight is stored output-major (n x d), so output channel j reads
    weight row j. Integer addition is associative, making the result
    bit-identical regardless of evaluation order.
    """
    if xq.values.shape[1] != wq.cols:
        raise ShapeError(
            f"igemm inner dimensions differ: activation {xq.values.shape} vs weight "
            f"{wq.values.shape}"
        )
    check_overflow_guard(wq.cols, xq.bits, wq.bits)
    acc64 = xq.values.astype(np.int64) @ wq.values.astype(np.int64).T
    return IntAccumulator(acc=acc64.astype(np.int32))


def dequant_epilogue(
    acc: IntAccumulator,
    act_scales: np.ndarray | float,
    w: QuantizedMatrix,
    bias: np.ndarray | None = None,
) -> np.ndarray:
    """Scale the int32 accumulator into float32 output in one pass.

    out[i][j] = acc[i][j] * act_scale(i) * group_scale(group_of(j)) + bias[j].
    """
    a = acc.acc
    n = a.shape[1]
    if w.rows != n:
        raise ShapeError(f"epilogue weight rows {w.rows} != accumulator cols {n}")
    col_scales = w.row_scales()  # per output channel
    if np.isscalar(act_scales):
        row_scales = np.full(a.shape[0], F32(act_scales), dtype=F32)
    else:
        row_scales = np.asarray(act_scales, dtype=F32)
        if row_scales.shape != (a.shape[0],):
            raise UsageError(
                f"epilogue needs one activation scale per token: got {row_scales.shape} "
                f"for {a.shape[0]} tokens"
            )
    out = a.astype(F32)
    out *= row_scales[:, None]
    out *= col_scales[None, :]
    if bias is not None:
        out += as_f32(bias)[None, :]
    return out


def quantized_linear(
    x: np.ndarray,
    w: QuantizedMatrix,
    bias: np.ndarray | None,
    act_mode: ActMode,
) -> np.ndarray:
    """x @ dequant(w).T + bias, computed through the fused integer path.

    Dynamic: token-wise quantize x, then igemm + epilogue.
    Static:  quantize x with the calibrated scale, then igemm + epilogue.
    Full:    weight-only quantization; dequantize w and run the float GeMM.
    """
    if isinstance(act_mode, FullAct):
        return tensor.matmul(as_f32(x), w.dequantize().T) + (
            as_f32(bias)[None, :] if bias is not None else F32(0.0)
        )
    if isinstance(act_mode, DynamicAct):
        xq = quant.quantize_activation_tokenwise(x, act_mode.bits)
        acc = igemm(xq, w)
        return dequant_epilogue(acc, xq.token_scales, w, bias)
    if isinstance(act_mode, StaticAct):
        xq = quant.quantize_activation_static(x, act_mode.scale, act_mode.bits)
        acc = igemm(xq, w)
        return dequant_epilogue(acc, float(xq.static_scale), w, bias)
    raise UsageError(f"unknown activation mode {act_mode!r}")


# ---------------------------------------------------------------------------
# Quantize-on-write variants
# ---------------------------------------------------------------------------
# Kernel fusion of the activation quantizer with its producer is modeled as
# API composition: these produce a QuantizedActivation directly and must be
# value-identical to running the producer and the quantizer separately.


def layer_norm_quantize(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    bits: int,
    eps: float = 1e-5,
) -> QuantizedActivation:
    return quant.quantize_activation_tokenwise(tensor.layer_norm(x, gamma, beta, eps), bits)


def gelu_quantize(x: np.ndarray, bits: int) -> QuantizedActivation:
    return quant.quantize_activation_tokenwise(tensor.gelu(x), bits)
