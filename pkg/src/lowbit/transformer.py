"""Toy transformer whose every weight GeMM can run in float or integer form.

Blocks use the post-LN residual structure: h = LN1(x + MHSA(x)) followed by
y = LN2(h + FFC(h)). The six weight GeMMs (q/k/v/o projections and the two
feed-forward matrices) dispatch through the fused integer path according to
a PrecisionConfig; the two batched attention matmuls (QK^T and attn x V)
always run in float, as do layer norms, biases, softmax and GeLU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from lowbit import igemm, quant, tensor
from lowbit.errors import ShapeError, UsageError
from lowbit.igemm import DynamicAct, FullAct, StaticAct
from lowbit.quant import QuantizedMatrix
from lowbit.tensor import F32, Rng, as_f32

# GeMM-input sites of one block, in forward order. q/k/v share one site
# because they consume the same tensor.
GEMM_SITES = ("attn_in", "attn_proj_in", "ffc_in", "ffc_mid")

WEIGHT_NAMES = ("w_q", "w_k", "w_v", "w_o", "w_h4h", "w_4hh")
BIAS_NAMES = ("b_q", "b_k", "b_v", "b_o", "b_h4h", "b_4hh")
MHSA_WEIGHTS = ("w_q", "w_k", "w_v", "w_o")
FFC_WEIGHTS = ("w_h4h", "w_4hh")

LN_EPS = 1e-5
INIT_STD = 0.02  # GPT-2 convention


class ActivationMode(Enum):
    FULL = "full"  # A16: no activation quantization
    INT8 = "int8"  # A8: every GeMM input token-wise INT8
    INT8_ATTN_FULL = "int8_attn_full"  # A8/16: q/k/v GeMM input stays full


@dataclass(frozen=True)
class PrecisionConfig:
    """Per-sublayer weight bits plus activation handling for one run.

    Weight bits of None mean full precision. Weight-full GeMMs always run
    the float path; activation quantization attaches only to integer GeMMs.
    """

    mhsa_weight_bits: int | None
    ffc_weight_bits: int | None
    activation_mode: ActivationMode = ActivationMode.FULL
    activation_static: bool = False
    group_count: int = 16

    def __post_init__(self):
        for bits in (self.mhsa_weight_bits, self.ffc_weight_bits):
            if bits is not None and bits not in quant.SUPPORTED_BITS:
                raise UsageError(f"weight bits must be 4, 8 or full, got {bits}")
        if (self.mhsa_weight_bits is None) != (self.ffc_weight_bits is None):
            raise UsageError(
                "mixed full/quantized sublayers are not supported: quantize both or neither"
            )
        if self.activation_static and self.activation_mode is ActivationMode.FULL:
            raise UsageError("static activation quantization requires an A8-style mode")

    @property
    def quantizes_weights(self) -> bool:
        return self.mhsa_weight_bits is not None

    @classmethod
    def full(cls) -> "PrecisionConfig":
        return cls(mhsa_weight_bits=None, ffc_weight_bits=None)

    @classmethod
    def from_scheme(
        cls,
        scheme: str,
        group_count: int | None = None,
        activation_static: bool = False,
        hidden_dim: int | None = None,
    ) -> "PrecisionConfig":
        """Parse a WxAy label: W8A8, W4/8A16, W4/8A8, W8A16, W16A16, W8A8/16...

        W4/8 means INT8 MHSA weights with INT4 FFC weights; A8/16 keeps the
        q/k/v GeMM input full precision and quantizes the rest to INT8.
        """
        label = scheme.strip().upper()
        if not label.startswith("W") or "A" not in label:
            raise UsageError(f"malformed scheme {scheme!r}; expected WxAy like W8A8 or W4/8A16")
        w_part, a_part = label[1:].split("A", 1)
        weight_map = {"16": (None, None), "8": (8, 8), "4/8": (8, 4)}
        act_map = {
            "16": ActivationMode.FULL,
            "8": ActivationMode.INT8,
            "8/16": ActivationMode.INT8_ATTN_FULL,
        }
        if w_part not in weight_map or a_part not in act_map:
            raise UsageError(
                f"malformed scheme {scheme!r}; valid schemes: "
                "W16A16, W8A16, W8A8, W8A8/16, W4/8A16, W4/8A8, W4/8A8/16"
            )
        mhsa, ffc = weight_map[w_part]
        mode = act_map[a_part]
        if activation_static and mode is ActivationMode.FULL:
            raise UsageError(f"scheme {scheme!r} has no activations to calibrate")
        g = group_count if group_count is not None else default_group_count(hidden_dim or 0)
        return cls(
            mhsa_weight_bits=mhsa,
            ffc_weight_bits=ffc,
            activation_mode=mode,
            activation_static=activation_static,
            group_count=g,
        )

    def label(self) -> str:
        w = {(None, None): "16", (8, 8): "8", (8, 4): "4/8"}[
            (self.mhsa_weight_bits, self.ffc_weight_bits)
        ]
        a = {
            ActivationMode.FULL: "16",
            ActivationMode.INT8: "8",
            ActivationMode.INT8_ATTN_FULL: "8/16",
        }[self.activation_mode]
        return f"W{w}A{a}"


def default_group_count(hidden_dim: int) -> int:
    """Group-count defaults keyed by hidden size (16 rows per group)."""
    if hidden_dim >= 2048:
        return 128
    if hidden_dim >= 1024:
        return 64
    if hidden_dim >= 512:
        return 48
    return 16


def hw_aligned(rows: int, groups: int) -> bool:
    """True when every group has a multiple of 16 rows (WMMA-tile friendly)."""
    layout = quant.group_layout_for(rows, groups)
    return all(count % 16 == 0 for _, count in layout)


# ---------------------------------------------------------------------------
# Blocks and models
# ---------------------------------------------------------------------------


@dataclass
class BlockWeights:
    """Full-precision parameters of one transformer block."""

    w_q: np.ndarray  # (d x d), output-major like all weights here
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_h4h: np.ndarray  # (4d x d)
    w_4hh: np.ndarray  # (d x 4d)
    b_q: np.ndarray
    b_k: np.ndarray
    b_v: np.ndarray
    b_o: np.ndarray
    b_h4h: np.ndarray
    b_4hh: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    num_heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.num_heads != 0:
            raise UsageError(f"hidden dim {d} not divisible by {self.num_heads} heads")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]


@dataclass
class QuantizedBlock:
    """Block with quantized weight matrices; biases and LN stay full precision."""

    w_q: QuantizedMatrix
    w_k: QuantizedMatrix
    w_v: QuantizedMatrix
    w_o: QuantizedMatrix
    w_h4h: QuantizedMatrix
    w_4hh: QuantizedMatrix
    b_q: np.ndarray
    b_k: np.ndarray
    b_v: np.ndarray
    b_o: np.ndarray
    b_h4h: np.ndarray
    b_4hh: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    num_heads: int

    def __post_init__(self):
        mhsa_bits = {getattr(self, n).bits for n in MHSA_WEIGHTS}
        ffc_bits = {getattr(self, n).bits for n in FFC_WEIGHTS}
        if len(mhsa_bits) != 1 or len(ffc_bits) != 1:
            raise UsageError("MHSA matrices must share one bit width, FFC another")

    @property
    def dim(self) -> int:
        return self.w_q.rows


Block = BlockWeights | QuantizedBlock


@dataclass
class ToyModel:
    """Embedding + blocks + final LN, with the LM head tied to the embedding."""

    embedding: np.ndarray  # (V x d) float32
    blocks: list[Block]
    final_gamma: np.ndarray
    final_beta: np.ndarray
    num_heads: int
    causal: bool = True

    def __post_init__(self):
        if not self.blocks:
            raise UsageError("model must have at least one block")

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def vocab(self) -> int:
        return self.embedding.shape[0]

    @property
    def num_layers(self) -> int:
        return len(self.blocks)

    def quantized_prefix_len(self) -> int:
        """Number of leading quantized blocks; raises if not a clean prefix."""
        k = 0
        while k < len(self.blocks) and isinstance(self.blocks[k], QuantizedBlock):
            k += 1
        if any(isinstance(b, QuantizedBlock) for b in self.blocks[k:]):
            raise UsageError("quantized blocks must form a prefix")
        return k


# ---------------------------------------------------------------------------
# Synthetic model generation
# ---------------------------------------------------------------------------


def generate_block(dim: int, num_heads: int, rng: Rng, hetero_knob: bool = False) -> BlockWeights:
    """Gaussian(0, 0.02) weights, zero biases, identity layer norms.

    hetero_knob multiplies a random 25% of the attention-output rows by 10,
    recreating the wide row-range regime that motivates group-wise scales.
    """

    def w(rows, cols):
        return rng.gaussian((rows, cols), std=INIT_STD)

    w_o = w(dim, dim)
    if hetero_knob:
        n_hot = max(1, dim // 4)
        keys = rng.uniform(dim)
        hot = np.argsort(keys, kind="stable")[:n_hot]
        w_o[hot] *= F32(10.0)
    zeros = lambda n: np.zeros(n, dtype=F32)
    ones = lambda n: np.ones(n, dtype=F32)
    return BlockWeights(
        w_q=w(dim, dim),
        w_k=w(dim, dim),
        w_v=w(dim, dim),
        w_o=w_o,
        w_h4h=w(4 * dim, dim),
        w_4hh=w(dim, 4 * dim),
        b_q=zeros(dim),
        b_k=zeros(dim),
        b_v=zeros(dim),
        b_o=zeros(dim),
        b_h4h=zeros(4 * dim),
        b_4hh=zeros(dim),
        ln1_gamma=ones(dim),
        ln1_beta=zeros(dim),
        ln2_gamma=ones(dim),
        ln2_beta=zeros(dim),
        num_heads=num_heads,
    )


def generate_toy_model(
    dim: int = 64,
    num_heads: int = 4,
    num_layers: int = 4,
    vocab: int = 512,
    seed: int = 0,
    hetero_knob: bool = False,
    causal: bool = True,
) -> ToyModel:
    if dim < 1 or num_heads < 1 or num_layers < 1 or vocab < 2:
        raise UsageError(
            f"invalid geometry dim={dim} heads={num_heads} layers={num_layers} vocab={vocab}"
        )
    if dim % num_heads != 0:
        raise UsageError(f"hidden dim {dim} not divisible by {num_heads} heads")
    rng = Rng(seed)
    embedding = rng.gaussian((vocab, dim), std=INIT_STD)
    blocks = [generate_block(dim, num_heads, rng, hetero_knob) for _ in range(num_layers)]
    return ToyModel(
        embedding=embedding,
        blocks=blocks,
        final_gamma=np.ones(dim, dtype=F32),
        final_beta=np.zeros(dim, dtype=F32),
        num_heads=num_heads,
        causal=causal,
    )


# ---------------------------------------------------------------------------
# Quantization of blocks
# ---------------------------------------------------------------------------


def quantize_block(block: BlockWeights, precision: PrecisionConfig) -> Block:
    """Quantize the six weight matrices group-wise; identity for full precision."""
    if not precision.quantizes_weights:
        return block
    g = precision.group_count

    def qm(w, bits):
        groups = min(g, w.shape[0])
        return quant.quantize_weight_groupwise(w, groups, bits)

    return QuantizedBlock(
        w_q=qm(block.w_q, precision.mhsa_weight_bits),
        w_k=qm(block.w_k, precision.mhsa_weight_bits),
        w_v=qm(block.w_v, precision.mhsa_weight_bits),
        w_o=qm(block.w_o, precision.mhsa_weight_bits),
        w_h4h=qm(block.w_h4h, precision.ffc_weight_bits),
        w_4hh=qm(block.w_4hh, precision.ffc_weight_bits),
        b_q=block.b_q.copy(),
        b_k=block.b_k.copy(),
        b_v=block.b_v.copy(),
        b_o=block.b_o.copy(),
        b_h4h=block.b_h4h.copy(),
        b_4hh=block.b_4hh.copy(),
        ln1_gamma=block.ln1_gamma.copy(),
        ln1_beta=block.ln1_beta.copy(),
        ln2_gamma=block.ln2_gamma.copy(),
        ln2_beta=block.ln2_beta.copy(),
        num_heads=block.num_heads,
    )


def quantize_model(model: ToyModel, precision: PrecisionConfig) -> ToyModel:
    """Plain post-training quantization of every block (no distillation)."""
    blocks = []
    for b in model.blocks:
        if isinstance(b, QuantizedBlock):
            raise UsageError("model already contains quantized blocks")
        blocks.append(quantize_block(b, precision))
    return ToyModel(
        embedding=model.embedding,
        blocks=blocks,
        final_gamma=model.final_gamma,
        final_beta=model.final_beta,
        num_heads=model.num_heads,
        causal=model.causal,
    )


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _act_mode_for(
    precision: PrecisionConfig,
    site: str,
    layer: int,
    static_scales: dict[str, float] | None,
):
    mode = precision.activation_mode
    if mode is ActivationMode.FULL:
        return FullAct()
    if mode is ActivationMode.INT8_ATTN_FULL and site == "attn_in":
        return FullAct()
    if precision.activation_static:
        key = f"layer{layer}.{site}"
        if static_scales is None or key not in static_scales:
            raise UsageError(f"static activation quantization needs a calibrated scale for {key}")
        return StaticAct(scale=static_scales[key], bits=8)
    return DynamicAct(bits=8)


def _linear(x, w, bias, act_mode):
    if isinstance(w, QuantizedMatrix):
        return igemm.quantized_linear(x, w, bias, act_mode)
    out = tensor.matmul(x, as_f32(w).T)
    out += as_f32(bias)[None, :]
    return out


def attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    num_heads: int,
    causal: bool,
    probs_out: list | None = None,
) -> np.ndarray:
    """Per-head scaled dot-product attention; always float.

    probs_out, when a list, receives the per-head softmax matrices (used by
    the hand-written backward pass). Passing it does not change the result.
    """
    t, d = q.shape
    dh = d // num_heads
    inv = F32(1.0 / math.sqrt(dh))
    out = np.empty((t, d), dtype=F32)
    for h in range(num_heads):
        cols = slice(h * dh, (h + 1) * dh)
        scores = tensor.matmul(q[:, cols], k[:, cols].T)
        scores *= inv
        if causal:
            scores[np.triu_indices(t, k=1)] = -np.inf
        probs = tensor.softmax(scores)
        out[:, cols] = tensor.matmul(probs, v[:, cols])
        if probs_out is not None:
            probs_out.append(probs)
    return out


def block_forward(
    x: np.ndarray,
    block: Block,
    precision: PrecisionConfig,
    causal: bool,
    layer: int = 0,
    static_scales: dict[str, float] | None = None,
    tap=None,
) -> np.ndarray:
    """One post-LN block: LN2(h + FFC(h)) with h = LN1(x + MHSA(x)).

    tap, when given, is called as tap(site, layer, gemm_input) with the
    float tensor entering each weight GeMM (used by calibration and the
    range report).
    """
    x = as_f32(x)
    if x.ndim != 2 or x.shape[1] != block.dim:
        raise ShapeError(f"block input {x.shape} does not match hidden dim {block.dim}")

    def mode(site):
        if isinstance(block, QuantizedBlock):
            return _act_mode_for(precision, site, layer, static_scales)
        return FullAct()  # float weights always take the float GeMM

    if tap is not None:
        tap("attn_in", layer, x)
    am = mode("attn_in")
    q = _linear(x, block.w_q, block.b_q, am)
    k = _linear(x, block.w_k, block.b_k, am)
    v = _linear(x, block.w_v, block.b_v, am)
    ctx = attention(q, k, v, block.num_heads, causal)
    if tap is not None:
        tap("attn_proj_in", layer, ctx)
    attn_out = _linear(ctx, block.w_o, block.b_o, mode("attn_proj_in"))
    h = tensor.layer_norm(x + attn_out, block.ln1_gamma, block.ln1_beta, LN_EPS)

    if tap is not None:
        tap("ffc_in", layer, h)
    u = _linear(h, block.w_h4h, block.b_h4h, mode("ffc_in"))
    z = tensor.gelu(u)
    if tap is not None:
        tap("ffc_mid", layer, z)
    f = _linear(z, block.w_4hh, block.b_4hh, mode("ffc_mid"))
    return tensor.layer_norm(h + f, block.ln2_gamma, block.ln2_beta, LN_EPS)


def embed(token_ids: np.ndarray, model: ToyModel) -> np.ndarray:
    """Plain embedding lookup. Tokens carry no positional signal; position
    enters the model only through the causal attention mask."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1:
        raise UsageError(f"token ids must be 1-d, got shape {ids.shape}")
    if ids.size == 0:
        raise UsageError("empty token sequence")
    if ids.min() < 0 or ids.max() >= model.vocab:
        raise UsageError(f"token id out of range [0, {model.vocab})")
    return model.embedding[ids].copy()


def run_to_layer(
    token_ids: np.ndarray,
    model: ToyModel,
    k: int,
    precision: PrecisionConfig,
    static_scales: dict[str, float] | None = None,
    tap=None,
) -> np.ndarray:
    """Hidden states after the first k blocks (k=0 returns the embeddings)."""
    if k < 0 or k > model.num_layers:
        raise UsageError(f"layer index {k} outside [0, {model.num_layers}]")
    h = embed(token_ids, model)
    for i in range(k):
        h = block_forward(
            h, model.blocks[i], precision, model.causal, layer=i,
            static_scales=static_scales, tap=tap,
        )
    return h


def model_forward(
    token_ids: np.ndarray,
    model: ToyModel,
    precision: PrecisionConfig,
    static_scales: dict[str, float] | None = None,
    tap=None,
) -> np.ndarray:
    """Logits (t x V) through embed -> blocks -> final LN -> tied head."""
    h = run_to_layer(token_ids, model, model.num_layers, precision, static_scales, tap=tap)
    h = tensor.layer_norm(h, model.final_gamma, model.final_beta, LN_EPS)
    return tensor.matmul(h, model.embedding.T)


# ---------------------------------------------------------------------------
# Range diagnostics
# ---------------------------------------------------------------------------


@dataclass
class ActivationRangeRow:
    layer: int
    token: int
    ranges: dict[str, tuple[float, float]]  # site -> (min, max)


@dataclass
class WeightRangeRow:
    layer: int
    row: int
    max_abs: float


@dataclass
class RangeReport:
    activation_rows: list[ActivationRangeRow] = field(default_factory=list)
    weight_rows: list[WeightRangeRow] = field(default_factory=list)


def range_report(model: ToyModel, sample_ids: np.ndarray) -> RangeReport:
    """Token-wise activation ranges at every GeMM input plus w_o row ranges.

    One activation row per (layer, token); one weight row per (layer,
    attention-output row).
    """
    collected: dict[tuple[int, str], np.ndarray] = {}

    def tap(site, layer, x):
        collected[(layer, site)] = x

    model_forward(sample_ids, model, PrecisionConfig.full(), tap=tap)
    report = RangeReport()
    t = np.asarray(sample_ids).size
    for layer in range(model.num_layers):
        for token in range(t):
            ranges = {}
            for site in GEMM_SITES:
                row = collected[(layer, site)][token]
                ranges[site] = (float(row.min()), float(row.max()))
            report.activation_rows.append(ActivationRangeRow(layer, token, ranges))
        w_o = model.blocks[layer].w_o
        w = w_o.dequantize() if isinstance(w_o, QuantizedMatrix) else w_o
        for r in range(w.shape[0]):
            report.weight_rows.append(WeightRangeRow(layer, r, float(np.abs(w[r]).max())))
    return report
