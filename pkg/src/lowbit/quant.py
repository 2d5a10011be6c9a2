"""Uniform symmetric quantization primitives.

Weights are quantized group-wise (contiguous row groups, one scale each),
activations either token-wise (one scale per row, computed on the fly) or
with a single static scale obtained from momentum calibration. The integer
range is restricted to [-(2^(b-1)-1), 2^(b-1)-1] so that negation symmetry
is exact; rounding is half-away-from-zero for the same reason.

Scales are stored as float32 (one rounding at scale computation) so that
in-memory values and the on-disk checkpoint format agree bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from lowbit.errors import UsageError
from lowbit.tensor import F32, as_f32

SUPPORTED_BITS = (4, 8)


def qmax(bits: int) -> int:
    """Largest representable magnitude: 2^(bits-1) - 1 (127 for INT8, 7 for INT4)."""
    return (1 << (bits - 1)) - 1


def _check_bits(bits: int) -> None:
    if bits not in SUPPORTED_BITS:
        raise UsageError(f"unsupported bit width {bits}, expected one of {SUPPORTED_BITS}")


# ---------------------------------------------------------------------------
# Granularity / mode descriptors
# ---------------------------------------------------------------------------


class Granularity(Enum):
    PER_TENSOR = "per_tensor"
    PER_GROUP = "per_group"  # weights only
    PER_TOKEN = "per_token"  # activations only


class Mode(Enum):
    DYNAMIC = "dynamic"
    STATIC = "static"


@dataclass(frozen=True)
class QuantSpec:
    """Bit width plus granularity/mode for one tensor site."""

    bits: int
    granularity: Granularity = Granularity.PER_TENSOR
    mode: Mode = Mode.DYNAMIC
    group_count: int = 1
    for_weights: bool = True

    def __post_init__(self):
        _check_bits(self.bits)
        if self.granularity is Granularity.PER_GROUP:
            if not self.for_weights:
                raise UsageError("per-group quantization is only valid for weights")
            if self.group_count < 1:
                raise UsageError(f"group count must be >= 1, got {self.group_count}")
        if self.granularity is Granularity.PER_TOKEN and self.for_weights:
            raise UsageError("per-token quantization is only valid for activations")
        if self.mode is Mode.STATIC and self.granularity is not Granularity.PER_TENSOR:
            raise UsageError("static mode uses a single calibrated per-tensor scale")


# ---------------------------------------------------------------------------
# Scalar / array primitives
# ---------------------------------------------------------------------------


def compute_scale(values: np.ndarray, bits: int) -> float:
    """Symmetric scale S = max(abs(values)) / (2^(bits-1) - 1).

    Returns 1.0 for an all-zero slice so dequantization stays exact there.
    The result carries one float32 rounding, matching how scales are stored.
    """
    _check_bits(bits)
    values = np.asarray(values)
    if values.size == 0:
        raise UsageError("compute_scale called on an empty slice")
    if not np.all(np.isfinite(values)):
        raise ValueError("compute_scale called on non-finite values")
    maxabs = float(np.max(np.abs(values.astype(np.float64))))
    if maxabs == 0.0:
        return 1.0
    return float(F32(maxabs / qmax(bits)))


def _round_half_away(v: np.ndarray) -> np.ndarray:
    # np.round would round ties to even, breaking negation symmetry
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize_array(x: np.ndarray, scale: float, bits: int) -> np.ndarray:
    """Round-half-away-from-zero of x/scale, clamped to the restricted range."""
    _check_bits(bits)
    if not scale > 0:
        raise UsageError(f"quantization scale must be > 0, got {scale}")
    x64 = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x64)):
        raise ValueError("cannot quantize non-finite values")
    m = qmax(bits)
    q = _round_half_away(x64 / float(scale))
    return np.clip(q, -m, m).astype(np.int8)


def quantize_value(x: float, scale: float, bits: int) -> int:
    """Scalar form of :func:`quantize_array`."""
    return int(quantize_array(np.asarray([x]), scale, bits)[0])


def dequantize_array(q: np.ndarray, scale: float) -> np.ndarray:
    return as_f32(np.asarray(q, dtype=F32) * F32(scale))


def dequantize_value(q: int, scale: float) -> float:
    return float(dequantize_array(np.asarray([q]), scale)[0])


# ---------------------------------------------------------------------------
# Quantized containers
# ---------------------------------------------------------------------------


@dataclass
class QuantizedMatrix:
    """Integer weight payload with per-group scales.

    values is (rows x cols) int8 storage (INT4 payloads are range-restricted
    but stored one per byte; footprint accounting uses logical_bits, not the
    buffer size). group_layout lists contiguous (start_row, row_count) pairs
    partitioning [0, rows).
    """

    values: np.ndarray
    bits: int
    group_scales: np.ndarray  # float32, one per group
    group_layout: list[tuple[int, int]]

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def num_groups(self) -> int:
        return len(self.group_layout)

    def logical_bits(self) -> int:
        """Payload bits plus 32 bits per stored scale."""
        return self.rows * self.cols * self.bits + 32 * self.num_groups

    def row_scales(self) -> np.ndarray:
        """Expand group scales to one float32 scale per row."""
        out = np.empty(self.rows, dtype=F32)
        for (start, count), s in zip(self.group_layout, self.group_scales):
            out[start : start + count] = s
        return out

    def dequantize(self) -> np.ndarray:
        """Materialize the float32 weight matrix (reference/Full path only)."""
        return as_f32(self.values.astype(F32) * self.row_scales()[:, None])

    def group_of_row(self, row: int) -> int:
        for gi, (start, count) in enumerate(self.group_layout):
            if start <= row < start + count:
                return gi
        raise UsageError(f"row {row} outside group layout of {self.rows} rows")


@dataclass
class QuantizedActivation:
    """Integer activation payload with per-token or single static scale."""

    values: np.ndarray  # (tokens x dim) int8
    bits: int
    token_scales: np.ndarray | None = None  # float32, one per token
    static_scale: float | None = None

    def __post_init__(self):
        if (self.token_scales is None) == (self.static_scale is None):
            raise UsageError(
                "exactly one of token_scales / static_scale must be populated"
            )

    @property
    def tokens(self) -> int:
        return self.values.shape[0]

    def scales_per_token(self) -> np.ndarray:
        if self.token_scales is not None:
            return self.token_scales
        return np.full(self.tokens, F32(self.static_scale), dtype=F32)

    def dequantize(self) -> np.ndarray:
        return as_f32(self.values.astype(F32) * self.scales_per_token()[:, None])


def group_layout_for(rows: int, groups: int) -> list[tuple[int, int]]:
    """Contiguous partition of rows into groups; remainder rows join the last."""
    if groups < 1 or groups > rows:
        raise UsageError(f"group count {groups} invalid for {rows} rows")
    base = rows // groups
    layout = [(g * base, base) for g in range(groups)]
    start, count = layout[-1]
    layout[-1] = (start, count + rows - groups * base)
    return layout


def _rowwise_scales(maxabs: np.ndarray, bits: int) -> np.ndarray:
    """Float32 symmetric scales from per-slice max magnitudes (zero -> 1.0)."""
    scales = (maxabs / qmax(bits)).astype(F32)
    scales[maxabs == 0.0] = F32(1.0)
    return scales


def _quantize_rows(x64: np.ndarray, row_scales: np.ndarray, bits: int) -> np.ndarray:
    # Same arithmetic as quantize_array, with one float32 scale per row.
    m = qmax(bits)
    q = _round_half_away(x64 / row_scales.astype(np.float64)[:, None])
    return np.clip(q, -m, m).astype(np.int8)


def quantize_weight_groupwise(w: np.ndarray, groups: int, bits: int) -> QuantizedMatrix:
    """Quantize each contiguous row group with its own symmetric scale.

    groups == 1 degenerates to plain per-tensor quantization.
    """
    _check_bits(bits)
    w = as_f32(w)
    if w.ndim != 2:
        raise UsageError(f"weight matrix must be 2-d, got shape {w.shape}")
    layout = group_layout_for(w.shape[0], groups)
    w64 = w.astype(np.float64)
    if not np.all(np.isfinite(w64)):
        raise ValueError("cannot quantize non-finite weights")
    row_maxabs = np.abs(w64).max(axis=1)
    starts = np.asarray([start for start, _ in layout])
    group_maxabs = np.maximum.reduceat(row_maxabs, starts)
    scales = _rowwise_scales(group_maxabs, bits)
    counts = np.asarray([count for _, count in layout])
    values = _quantize_rows(w64, np.repeat(scales, counts), bits)
    return QuantizedMatrix(values=values, bits=bits, group_scales=scales, group_layout=layout)


def quantize_activation_tokenwise(x: np.ndarray, bits: int) -> QuantizedActivation:
    """One scale per token (row), computed dynamically from that row."""
    _check_bits(bits)
    x = as_f32(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise UsageError(f"activations must be (tokens x dim), got shape {x.shape}")
    x64 = x.astype(np.float64)
    if not np.all(np.isfinite(x64)):
        raise ValueError("cannot quantize non-finite activations")
    scales = _rowwise_scales(np.abs(x64).max(axis=1), bits)
    values = _quantize_rows(x64, scales, bits)
    return QuantizedActivation(values=values, bits=bits, token_scales=scales)


def quantize_activation_static(
    x: np.ndarray, calibrated_scale: float, bits: int
) -> QuantizedActivation:
    """Quantize all elements with one calibrated scale; out-of-range values clamp."""
    _check_bits(bits)
    if not calibrated_scale > 0:
        raise UsageError(f"calibrated scale must be > 0, got {calibrated_scale}")
    x = as_f32(x)
    values = quantize_array(x, calibrated_scale, bits)
    return QuantizedActivation(values=values, bits=bits, static_scale=float(calibrated_scale))


# ---------------------------------------------------------------------------
# Static calibration
# ---------------------------------------------------------------------------


@dataclass
class Calibrator:
    """Running min/max tracker with momentum, one per GeMM-input site.

    First observation initializes the range to the batch extrema; later
    observations apply new = m*old + (1-m)*batch_extreme. Order-sensitive
    but deterministic for a fixed batch sequence.
    """

    momentum: float = 0.95
    x_max: float = field(default=0.0, init=False)
    x_min: float = field(default=0.0, init=False)
    observed_batches: int = field(default=0, init=False)

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise UsageError(f"momentum must be in (0, 1), got {self.momentum}")

    def observe(self, x: np.ndarray) -> None:
        x = np.asarray(x)
        if not np.all(np.isfinite(x)):
            raise ValueError("calibrator observed non-finite values")
        bmax = float(x.max())
        bmin = float(x.min())
        if self.observed_batches == 0:
            self.x_max = bmax
            self.x_min = bmin
        else:
            m = self.momentum
            self.x_max = m * self.x_max + (1.0 - m) * bmax
            self.x_min = m * self.x_min + (1.0 - m) * bmin
        self.observed_batches += 1

    def finalize(self, bits: int) -> float:
        """Symmetric scale from the calibrated range."""
        _check_bits(bits)
        if self.observed_batches == 0:
            raise UsageError("calibrator finalized before any observation")
        reach = max(abs(self.x_max), abs(self.x_min))
        if reach == 0.0:
            return 1.0
        return float(F32(reach / qmax(bits)))
