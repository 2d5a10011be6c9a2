"""Desk-scale measurement: error reports, perplexity, footprint, micro-bench.

Footprint numbers are logical: payload bits per weight element plus 32 bits
per stored scale, against a 2-byte-per-element baseline (the half-precision
deployment format the headline ratios are quoted against). The full-precision
scheme therefore reports ratio 1.0 by convention even though this simulator
computes in 4-byte floats. Only the transformer blocks' weight matrices
count: embeddings, biases and layer-norm parameters never quantize and are
excluded from both sides of the ratio.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from lowbit import igemm, quant, tensor, transformer
from lowbit.errors import UsageError
from lowbit.quant import Calibrator, QuantizedMatrix
from lowbit.tensor import Rng, as_f32
from lowbit.transformer import (
    GEMM_SITES,
    WEIGHT_NAMES,
    Block,
    BlockWeights,
    PrecisionConfig,
    QuantizedBlock,
    ToyModel,
    quantize_model,
)

BASELINE_BYTES_PER_ELEMENT = 2


# ---------------------------------------------------------------------------
# Perplexity
# ---------------------------------------------------------------------------


def nll_from_logits(logits: np.ndarray, targets: np.ndarray) -> float:
    """Total negative log-likelihood (natural log) of targets under logits."""
    logp = tensor.log_softmax_f64(logits)
    return float(-logp[np.arange(targets.size), targets].sum())


def perplexity(
    model: ToyModel,
    token_stream: np.ndarray,
    precision: PrecisionConfig,
    static_scales=None,
    window: int = 33,
) -> float:
    """exp(mean next-token NLL) under teacher forcing, natural log.

    The stream is scored in consecutive windows of at most `window` tokens;
    within a window the first token is context only.
    """
    ids = np.asarray(token_stream, dtype=np.int64).ravel()
    if ids.size < 2:
        raise UsageError(f"perplexity needs a stream of >= 2 tokens, got {ids.size}")
    if window < 2:
        raise UsageError(f"window must be >= 2, got {window}")
    total = 0.0
    count = 0
    start = 0
    while start < ids.size - 1:
        chunk = ids[start : start + window]
        logits = transformer.model_forward(chunk[:-1], model, precision, static_scales)
        total += nll_from_logits(logits, chunk[1:])
        count += chunk.size - 1
        start += window - 1
    return float(np.exp(total / count))


def sample_stream(
    model: ToyModel,
    length: int,
    rng: Rng,
    precision: PrecisionConfig | None = None,
    context: int = 32,
) -> np.ndarray:
    """Ancestral-sample a token stream from the model (sliding context).

    Streams sampled from the float model are the natural held-out data for
    quantization comparisons: the sampling model minimizes expected NLL on
    its own output, so any quantization perturbation raises perplexity in
    expectation.
    """
    if length < 2:
        raise UsageError(f"stream length must be >= 2, got {length}")
    precision = precision or PrecisionConfig.full()
    out = np.empty(length, dtype=np.int64)
    out[0] = rng.integers(model.vocab, 1)[0]
    for i in range(1, length):
        ctx = out[max(0, i - context) : i]
        logits = transformer.model_forward(ctx, model, precision)
        probs = np.exp(tensor.log_softmax_f64(logits[-1]))
        cdf = np.cumsum(probs)
        u = rng.uniform(1)[0] * cdf[-1]
        out[i] = int(np.searchsorted(cdf, u, side="right").clip(0, model.vocab - 1))
    return out


# ---------------------------------------------------------------------------
# Footprint
# ---------------------------------------------------------------------------


def _block_weight_elements(block: Block) -> int:
    total = 0
    for name in WEIGHT_NAMES:
        w = getattr(block, name)
        total += w.rows * w.cols if isinstance(w, QuantizedMatrix) else w.size
    return total


def footprint(obj: ToyModel | Block, precision: PrecisionConfig) -> int:
    """Logical bytes of the quantizable weight payload under a precision.

    Quantized matrices count payload bits plus 32 bits per scale; full
    precision counts the 2-byte baseline format per element.
    """
    if isinstance(obj, ToyModel):
        return sum(footprint(b, precision) for b in obj.blocks)
    bits_total = 0
    for name in WEIGHT_NAMES:
        w = getattr(obj, name)
        if isinstance(w, QuantizedMatrix):
            bits_total += w.logical_bits()
        elif precision.quantizes_weights:
            bits = (
                precision.mhsa_weight_bits
                if name in transformer.MHSA_WEIGHTS
                else precision.ffc_weight_bits
            )
            groups = min(precision.group_count, w.shape[0])
            bits_total += w.size * bits + 32 * groups
        else:
            bits_total += w.size * BASELINE_BYTES_PER_ELEMENT * 8
    return bits_total // 8


def baseline_footprint(obj: ToyModel | Block) -> int:
    """Bytes of the same payload in the 2-byte baseline format."""
    if isinstance(obj, ToyModel):
        return sum(baseline_footprint(b) for b in obj.blocks)
    return _block_weight_elements(obj) * BASELINE_BYTES_PER_ELEMENT


def footprint_ratio(obj: ToyModel | Block, precision: PrecisionConfig) -> float:
    return baseline_footprint(obj) / footprint(obj, precision)


# ---------------------------------------------------------------------------
# Calibration harness
# ---------------------------------------------------------------------------


@dataclass
class SiteCalibration:
    x_max: float
    x_min: float
    scale: float


def calibrate_model(
    model: ToyModel,
    batches,
    momentum: float = 0.95,
    bits: int = 8,
) -> dict[str, SiteCalibration]:
    """Run calibration batches through the float model, one Calibrator per
    GeMM-input site. batches is an iterable of 1-d token-id arrays; they are
    consumed in order (the result is order-sensitive but deterministic).
    """
    calibrators: dict[str, Calibrator] = {}

    def tap(site, layer, x):
        key = f"layer{layer}.{site}"
        if key not in calibrators:
            calibrators[key] = Calibrator(momentum=momentum)
        calibrators[key].observe(x)

    consumed = 0
    for ids in batches:
        transformer.model_forward(np.asarray(ids, dtype=np.int64), model,
                                  PrecisionConfig.full(), tap=tap)
        consumed += 1
    if consumed == 0:
        raise UsageError("calibration needs at least one batch")
    return {
        key: SiteCalibration(c.x_max, c.x_min, c.finalize(bits))
        for key, c in sorted(calibrators.items())
    }


def static_scales_from(calibration: dict[str, SiteCalibration]) -> dict[str, float]:
    return {key: sc.scale for key, sc in calibration.items()}


# ---------------------------------------------------------------------------
# Scheme comparison
# ---------------------------------------------------------------------------


@dataclass
class SchemeReport:
    scheme: str
    static_activations: bool
    group_count: int
    per_layer_recon_mse: list[float]
    end_to_end_mse: float
    argmax_agreement: float
    footprint_bytes: int
    footprint_ratio: float
    perplexity: float


def _block_recon_mse(float_block: BlockWeights, qblock: Block) -> float:
    if isinstance(qblock, BlockWeights):
        return 0.0
    se = 0.0
    n = 0
    for name in WEIGHT_NAMES:
        w = getattr(float_block, name).astype(np.float64)
        wq = getattr(qblock, name).dequantize().astype(np.float64)
        se += float(np.square(w - wq).sum())
        n += w.size
    return se / n


def _stream_windows(ids: np.ndarray, window: int = 32):
    ids = np.asarray(ids, dtype=np.int64).ravel()
    for start in range(0, ids.size, window):
        chunk = ids[start : start + window]
        if chunk.size >= 2:
            yield chunk


def scheme_compare(
    model: ToyModel,
    schemes: list[PrecisionConfig],
    eval_stream: np.ndarray,
    calib_batches=None,
) -> list[SchemeReport]:
    """One report per scheme, all against the same frozen float model/stream.

    Schemes with static activations are calibrated from calib_batches
    (defaulting to the eval stream's windows).
    """
    if not schemes:
        raise UsageError("scheme list must be non-empty")
    static_scales = None
    if any(p.activation_static for p in schemes):
        batches = list(calib_batches) if calib_batches is not None else list(
            _stream_windows(eval_stream)
        )
        static_scales = static_scales_from(calibrate_model(model, batches))

    full = PrecisionConfig.full()
    windows = list(_stream_windows(eval_stream))
    ref_logits = [transformer.model_forward(w, model, full) for w in windows]

    reports = []
    for precision in schemes:
        qmodel = quantize_model(model, precision) if precision.quantizes_weights else model
        scales = static_scales if precision.activation_static else None
        se = 0.0
        n = 0
        agree = 0
        total = 0
        for w, ref in zip(windows, ref_logits):
            logits = transformer.model_forward(w, qmodel, precision, scales)
            se += float(np.square(logits.astype(np.float64) - ref.astype(np.float64)).sum())
            n += logits.size
            agree += int((logits.argmax(axis=-1) == ref.argmax(axis=-1)).sum())
            total += logits.shape[0]
        reports.append(
            SchemeReport(
                scheme=precision.label(),
                static_activations=precision.activation_static,
                group_count=precision.group_count,
                per_layer_recon_mse=[
                    _block_recon_mse(fb, qb)
                    for fb, qb in zip(model.blocks, qmodel.blocks)
                ],
                end_to_end_mse=se / n,
                argmax_agreement=agree / total,
                footprint_bytes=footprint(qmodel, precision),
                footprint_ratio=footprint_ratio(qmodel, precision),
                perplexity=perplexity(qmodel, eval_stream, precision, scales),
            )
        )
    return reports


# ---------------------------------------------------------------------------
# Micro-benchmark (informational only)
# ---------------------------------------------------------------------------


@dataclass
class BenchRow:
    tokens: int
    inner: int
    out: int
    int8_ms: float
    float_ms: float


def bench(shape_set: list[tuple[int, int, int]], repeats: int = 20) -> list[BenchRow]:
    """Median igemm vs float-matmul wall time per shape. CPU-only, not a
    latency claim of any kind; the CLI labels the output informational."""
    if repeats < 1:
        raise UsageError("repeats must be >= 1")
    rows = []
    rng = Rng(0)
    for t, d, n in shape_set:
        x = rng.gaussian((t, d))
        w = rng.gaussian((n, d))
        xq = quant.quantize_activation_tokenwise(x, 8)
        wq = quant.quantize_weight_groupwise(w, min(16, n), 8)
        int_times = []
        float_times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            igemm.igemm(xq, wq)
            int_times.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            tensor.matmul(x, w.T)
            float_times.append(time.perf_counter() - t0)
        rows.append(
            BenchRow(
                tokens=t,
                inner=d,
                out=n,
                int8_ms=float(np.median(int_times)) * 1e3,
                float_ms=float(np.median(float_times)) * 1e3,
            )
        )
    return rows
