"""Layer-by-layer knowledge distillation of quantized transformer blocks.

One block at a time, the quantized candidate (student) is trained to match
the block's own full-precision form (teacher) on shared input activations:

    loss_k = MSE( L_k(h) - L_hat_k(h) ),   h = hidden states after blocks 1..k-1

No separate teacher model is held, no labels are read, and optimizer state
exists only for the single block being distilled. Gradients are hand-written
(matmul, softmax attention, layer norm, GeLU backward rules) with the
straight-through estimator across the quantizers. Distillation batches can
come from a token file or be drawn uniformly at random from the vocabulary.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from lowbit import quant, tensor, transformer
from lowbit.errors import UsageError
from lowbit.tensor import F32, Rng, as_f32
from lowbit.transformer import (
    BIAS_NAMES,
    FFC_WEIGHTS,
    GEMM_SITES,
    LN_EPS,
    MHSA_WEIGHTS,
    WEIGHT_NAMES,
    ActivationMode,
    BlockWeights,
    PrecisionConfig,
    QuantizedBlock,
    ToyModel,
    quantize_block,
)

PARAM_NAMES = WEIGHT_NAMES + BIAS_NAMES + ("ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# Configuration and data sources
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RandomTokens:
    """Draw token ids uniformly at random (data-free distillation)."""

    seed: int | None = None  # defaults to the run seed


@dataclass(frozen=True)
class OriginalData:
    """Newline-delimited integer token-id sequences from the training corpus."""

    path: str


@dataclass(frozen=True)
class AltCorpus:
    """Same file format as OriginalData, sourced from a substitute corpus."""

    path: str


DataSource = RandomTokens | OriginalData | AltCorpus


@dataclass(frozen=True)
class LKDConfig:
    learning_rate: float = 5e-6
    iterations: int = 100
    batch_size: int = 32
    seq_len: int = 128
    data_source: DataSource = RandomTokens()
    optimizer: str = "adam"  # "adam" or "sgd"
    loss: str = "mse"  # "mse" or "kl"
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise UsageError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.iterations < 0:
            raise UsageError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1 or self.seq_len < 1:
            raise UsageError("batch size and sequence length must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise UsageError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("mse", "kl"):
            raise UsageError(f"unknown loss {self.loss!r}")


def random_token_batch(vocab: int, batch: int, seq_len: int, rng: Rng) -> np.ndarray:
    """(batch x seq_len) uniform token ids in [0, vocab)."""
    if vocab < 2:
        raise UsageError(f"vocabulary must have >= 2 tokens, got {vocab}")
    return rng.integers(vocab, batch * seq_len).reshape(batch, seq_len)


def load_token_stream(path: str) -> np.ndarray:
    """Flat int64 token stream from a newline-delimited id-sequence file."""
    if not os.path.isfile(path):
        raise UsageError(f"token data file not found: {path}")
    ids: list[int] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                ids.extend(int(tok) for tok in line.split())
            except ValueError:
                raise UsageError(f"{path}:{lineno}: token ids must be integers") from None
    if not ids:
        raise UsageError(f"token data file is empty: {path}")
    arr = np.asarray(ids, dtype=np.int64)
    if arr.min() < 0:
        raise UsageError(f"{path}: negative token id")
    return arr


def make_sampler(source: DataSource, vocab: int, batch: int, seq_len: int):
    """Returns draw(rng) -> (batch x seq_len) token ids. Fails fast on bad files."""
    if isinstance(source, RandomTokens):
        return lambda rng: random_token_batch(vocab, batch, seq_len, rng)
    if isinstance(source, (OriginalData, AltCorpus)):
        stream = load_token_stream(source.path)
        if stream.max() >= vocab:
            raise UsageError(
                f"{source.path}: token id {int(stream.max())} outside vocab {vocab}"
            )
        n = stream.size

        def draw(rng: Rng) -> np.ndarray:
            starts = rng.integers(n, batch)
            offs = (starts[:, None] + np.arange(seq_len)[None, :]) % n  # wraparound windows
            return stream[offs]

        return draw
    raise UsageError(f"unknown data source {source!r}")


# ---------------------------------------------------------------------------
# Master weights and optimizer state
# ---------------------------------------------------------------------------


class MasterWeights:
    """Full-precision shadow of one block plus its optimizer state.

    A class-level live counter backs the structural invariant that during
    whole-model distillation at most one block ever holds master/optimizer
    state (released when the block is sealed).
    """

    _live = 0

    def __init__(self, params: dict[str, np.ndarray], num_heads: int):
        self.params = {k: v.copy() for k, v in params.items()}
        self.num_heads = num_heads
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.step = 0
        self._released = False
        MasterWeights._live += 1

    @classmethod
    def from_block(cls, block: BlockWeights) -> "MasterWeights":
        return cls(block_params(block), block.num_heads)

    @classmethod
    def live_count(cls) -> int:
        return cls._live

    def release(self) -> None:
        if not self._released:
            self._released = True
            self.m = {}
            self.v = {}
            MasterWeights._live -= 1

    def to_block(self) -> BlockWeights:
        return params_to_block(self.params, self.num_heads)

    def update(self, grads: dict[str, np.ndarray], config: LKDConfig) -> None:
        if self._released:
            raise UsageError("master weights already released")
        lr = F32(config.learning_rate)
        if config.optimizer == "sgd":
            for k in self.params:
                self.params[k] -= lr * grads[k]
            return
        self.step += 1
        b1 = F32(ADAM_BETA1)
        b2 = F32(ADAM_BETA2)
        c1 = F32(1.0 - ADAM_BETA1**self.step)
        c2 = F32(1.0 - ADAM_BETA2**self.step)
        for k in self.params:
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (F32(1.0) - b1) * g
            self.v[k] = b2 * self.v[k] + (F32(1.0) - b2) * np.square(g)
            mhat = self.m[k] / c1
            vhat = self.v[k] / c2
            self.params[k] -= lr * mhat / (np.sqrt(vhat) + F32(ADAM_EPS))


def block_params(block: BlockWeights) -> dict[str, np.ndarray]:
    return {name: getattr(block, name) for name in PARAM_NAMES}


def params_to_block(params: dict[str, np.ndarray], num_heads: int) -> BlockWeights:
    return BlockWeights(**{name: params[name] for name in PARAM_NAMES}, num_heads=num_heads)


# ---------------------------------------------------------------------------
# Simulated-quantization forward with cache, and its backward
# ---------------------------------------------------------------------------
# Training runs the student with fake-quantized weights/activations (the
# float value each quantizer would reconstruct) so the loss is differentiable
# under the straight-through estimator. Sealed blocks still run the true
# integer path at inference; the two agree up to float rounding.


def fake_quant_weights(
    params: dict[str, np.ndarray], precision: PrecisionConfig
) -> dict[str, np.ndarray]:
    """w -> dequant(quant(w)) per sublayer bit width; identity when full."""
    out = {}
    for name in WEIGHT_NAMES:
        w = params[name]
        bits = (
            precision.mhsa_weight_bits if name in MHSA_WEIGHTS else precision.ffc_weight_bits
        )
        if bits is None:
            out[name] = w
        else:
            groups = min(precision.group_count, w.shape[0])
            out[name] = quant.quantize_weight_groupwise(w, groups, bits).dequantize()
    return out


def make_act_fq(precision: PrecisionConfig, static_scales=None, layer: int = 0):
    """Per-site activation fake-quantizer matching the PrecisionConfig."""
    mode = precision.activation_mode

    def fq(site: str, x: np.ndarray) -> np.ndarray:
        if not precision.quantizes_weights or mode is ActivationMode.FULL:
            return x
        if mode is ActivationMode.INT8_ATTN_FULL and site == "attn_in":
            return x
        if precision.activation_static:
            key = f"layer{layer}.{site}"
            if static_scales is None or key not in static_scales:
                raise UsageError(f"static activation quantization needs a scale for {key}")
            return quant.quantize_activation_static(x, static_scales[key], 8).dequantize()
        return quant.quantize_activation_tokenwise(x, 8).dequantize()

    return fq


def _identity_fq(site: str, x: np.ndarray) -> np.ndarray:
    return x


def _ln_cached(x, gamma, beta):
    # Same operation order as tensor.layer_norm so the float path matches it
    # bit for bit; additionally returns what the backward pass needs.
    mean = x.mean(axis=-1, keepdims=True, dtype=F32)
    xc = x - mean
    var = np.square(xc).mean(axis=-1, keepdims=True, dtype=F32)
    std = np.sqrt(var + F32(LN_EPS))
    xhat = xc / std
    return as_f32(xhat * gamma + beta), xhat, std


def block_forward_cached(
    params: dict[str, np.ndarray],
    w_hat: dict[str, np.ndarray],
    x: np.ndarray,
    seq_len: int,
    num_heads: int,
    causal: bool,
    act_fq=_identity_fq,
):
    """Post-LN block forward on stacked sequences, caching for backward.

    x is (batch*seq_len x d): attention runs per sequence, everything else is
    row-wise and runs on the stacked matrix. With identity fake-quantizers
    this reproduces the float transformer block exactly.
    """
    rows, d = x.shape
    if rows % seq_len != 0:
        raise UsageError(f"{rows} stacked rows not divisible by seq_len {seq_len}")
    bsz = rows // seq_len
    dh = d // num_heads
    inv = F32(1.0 / math.sqrt(dh))

    def lin(inp, wname, bname):
        return tensor.matmul(inp, w_hat[wname].T) + params[bname][None, :]

    x_eff = act_fq("attn_in", x)
    q = lin(x_eff, "w_q", "b_q")
    k = lin(x_eff, "w_k", "b_k")
    v = lin(x_eff, "w_v", "b_v")

    ctx = np.empty((rows, d), dtype=F32)
    probs = []  # probs[s][h] is the (t x t) softmax of sequence s, head h
    for s in range(bsz):
        rs = slice(s * seq_len, (s + 1) * seq_len)
        head_probs = []
        ctx[rs] = transformer.attention(
            q[rs], k[rs], v[rs], num_heads, causal, probs_out=head_probs
        )
        probs.append(head_probs)

    ctx_eff = act_fq("attn_proj_in", ctx)
    attn_out = lin(ctx_eff, "w_o", "b_o")
    h, xhat1, std1 = _ln_cached(x + attn_out, params["ln1_gamma"], params["ln1_beta"])

    h_eff = act_fq("ffc_in", h)
    u = lin(h_eff, "w_h4h", "b_h4h")
    z = tensor.gelu(u)
    z_eff = act_fq("ffc_mid", z)
    f = lin(z_eff, "w_4hh", "b_4hh")
    y, xhat2, std2 = _ln_cached(h + f, params["ln2_gamma"], params["ln2_beta"])

    cache = {
        "x_eff": x_eff,
        "q": q,
        "k": k,
        "v": v,
        "probs": probs,
        "ctx_eff": ctx_eff,
        "xhat1": xhat1,
        "std1": std1,
        "h_eff": h_eff,
        "u": u,
        "z_eff": z_eff,
        "xhat2": xhat2,
        "std2": std2,
        "w_hat": w_hat,
        "params": params,
        "seq_len": seq_len,
        "num_heads": num_heads,
        "inv": inv,
    }
    return y, cache


def _ln_backward(dy, gamma, xhat, std):
    dxhat = dy * gamma
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    m1 = dxhat.mean(axis=-1, keepdims=True, dtype=F32)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True, dtype=F32)
    dr = (dxhat - m1 - xhat * m2) / std
    return as_f32(dr), as_f32(dgamma), as_f32(dbeta)


def _softmax_backward(dp, p):
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True, dtype=F32))


def block_backward(cache, dy: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the cached forward w.r.t. every block parameter.

    Quantizers are straight-through: gradients apply to the master weights
    and pass unchanged through the activation fake-quantizers. The input
    gradient is not returned; distillation never propagates past the block.
    """
    params = cache["params"]
    w_hat = cache["w_hat"]
    seq_len = cache["seq_len"]
    num_heads = cache["num_heads"]
    inv = cache["inv"]
    grads: dict[str, np.ndarray] = {}

    dy = as_f32(dy)
    dr2, grads["ln2_gamma"], grads["ln2_beta"] = _ln_backward(
        dy, params["ln2_gamma"], cache["xhat2"], cache["std2"]
    )
    dh = dr2.copy()  # residual branch
    df = dr2

    grads["w_4hh"] = tensor.matmul(df.T, cache["z_eff"])
    grads["b_4hh"] = as_f32(df.sum(axis=0))
    dz = tensor.matmul(df, w_hat["w_4hh"])
    du = dz * tensor.gelu_grad(cache["u"])
    grads["w_h4h"] = tensor.matmul(du.T, cache["h_eff"])
    grads["b_h4h"] = as_f32(du.sum(axis=0))
    dh += tensor.matmul(du, w_hat["w_h4h"])

    dr1, grads["ln1_gamma"], grads["ln1_beta"] = _ln_backward(
        dh, params["ln1_gamma"], cache["xhat1"], cache["std1"]
    )
    da = dr1  # attention branch; the residual-to-input branch ends at the block input

    grads["w_o"] = tensor.matmul(da.T, cache["ctx_eff"])
    grads["b_o"] = as_f32(da.sum(axis=0))
    dctx = tensor.matmul(da, w_hat["w_o"])

    q, k, v = cache["q"], cache["k"], cache["v"]
    rows, d = q.shape
    dh_head = d // num_heads
    dq = np.zeros((rows, d), dtype=F32)
    dk = np.zeros((rows, d), dtype=F32)
    dv = np.zeros((rows, d), dtype=F32)
    bsz = rows // seq_len
    for s in range(bsz):
        rs = slice(s * seq_len, (s + 1) * seq_len)
        for hd in range(num_heads):
            cols = slice(hd * dh_head, (hd + 1) * dh_head)
            p = cache["probs"][s][hd]
            dctx_h = dctx[rs, cols]
            dp = tensor.matmul(dctx_h, v[rs, cols].T)
            dv[rs, cols] = tensor.matmul(p.T, dctx_h)
            ds = _softmax_backward(dp, p)
            ds *= inv
            dq[rs, cols] = tensor.matmul(ds, k[rs, cols])
            dk[rs, cols] = tensor.matmul(ds.T, q[rs, cols])

    x_eff = cache["x_eff"]
    grads["w_q"] = tensor.matmul(dq.T, x_eff)
    grads["b_q"] = as_f32(dq.sum(axis=0))
    grads["w_k"] = tensor.matmul(dk.T, x_eff)
    grads["b_k"] = as_f32(dk.sum(axis=0))
    grads["w_v"] = tensor.matmul(dv.T, x_eff)
    grads["b_v"] = as_f32(dv.sum(axis=0))
    return grads


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def mse_loss_and_grad(student_y: np.ndarray, teacher_y: np.ndarray):
    diff = student_y.astype(np.float64) - teacher_y.astype(np.float64)
    loss = float(np.mean(diff * diff))
    grad = as_f32(2.0 * diff / diff.size)
    return loss, grad


def kl_loss_and_grad(student_y: np.ndarray, teacher_y: np.ndarray):
    """KL(teacher || student) over softmaxed hidden rows, temperature 1."""
    log_pt = tensor.log_softmax_f64(teacher_y)
    log_ps = tensor.log_softmax_f64(student_y)
    pt = np.exp(log_pt)
    rows = student_y.shape[0]
    loss = float((pt * (log_pt - log_ps)).sum() / rows)
    grad = as_f32((np.exp(log_ps) - pt) / rows)
    return loss, grad


def loss_and_grad(student_y, teacher_y, kind: str):
    if kind == "mse":
        return mse_loss_and_grad(student_y, teacher_y)
    if kind == "kl":
        return kl_loss_and_grad(student_y, teacher_y)
    raise UsageError(f"unknown loss {kind!r}")


# ---------------------------------------------------------------------------
# Eq. 1 loss and the distillation loops
# ---------------------------------------------------------------------------


def _stack_prefix_hidden(
    batch_ids: np.ndarray,
    model: ToyModel,
    k: int,
    precision: PrecisionConfig,
    static_scales=None,
) -> np.ndarray:
    """Hidden states after blocks 1..k-1 for every sequence, stacked row-wise."""
    batch_ids = np.atleast_2d(np.asarray(batch_ids, dtype=np.int64))
    parts = [
        transformer.run_to_layer(seq, model, k - 1, precision, static_scales)
        for seq in batch_ids
    ]
    return np.concatenate(parts, axis=0)


def lkd_layer_loss(
    model: ToyModel,
    k: int,
    batch_ids: np.ndarray,
    precision: PrecisionConfig,
    static_scales=None,
    student_block=None,
    loss_kind: str = "mse",
) -> float:
    """Distillation loss of block k: teacher and student share the prefix output.

    The teacher is the block's full-precision form; the student defaults to
    its plain quantization under the given precision and runs the true
    integer inference path.
    """
    if not 1 <= k <= model.num_layers:
        raise UsageError(f"layer index {k} outside [1, {model.num_layers}]")
    teacher = model.blocks[k - 1]
    if not isinstance(teacher, BlockWeights):
        raise UsageError(f"block {k} is already sealed; no full-precision teacher available")
    if student_block is None:
        student_block = quantize_block(teacher, precision)
    batch_ids = np.atleast_2d(np.asarray(batch_ids, dtype=np.int64))
    seq_len = batch_ids.shape[1]
    h = _stack_prefix_hidden(batch_ids, model, k, precision, static_scales)
    total = 0.0
    for s in range(batch_ids.shape[0]):
        rs = slice(s * seq_len, (s + 1) * seq_len)
        t_out = transformer.block_forward(
            h[rs], teacher, PrecisionConfig.full(), model.causal, layer=k - 1
        )
        s_out = transformer.block_forward(
            h[rs], student_block, precision, model.causal, layer=k - 1,
            static_scales=static_scales,
        )
        loss, _ = loss_and_grad(s_out, t_out, loss_kind)
        total += loss
    return total / batch_ids.shape[0]


def lkd_backward(
    master: MasterWeights,
    h: np.ndarray,
    teacher_out: np.ndarray,
    precision: PrecisionConfig,
    causal: bool,
    seq_len: int | None = None,
    static_scales=None,
    layer: int = 0,
    loss_kind: str = "mse",
):
    """One student forward/backward against fixed teacher output.

    Returns (loss, grads) where grads maps every parameter name of the block
    to its gradient under the straight-through estimator.
    """
    seq_len = seq_len or h.shape[0]
    w_hat = fake_quant_weights(master.params, precision)
    act_fq = make_act_fq(precision, static_scales, layer)
    y, cache = block_forward_cached(
        master.params, w_hat, as_f32(h), seq_len, master.num_heads, causal, act_fq
    )
    loss, dy = loss_and_grad(y, teacher_out, loss_kind)
    return loss, block_backward(cache, dy)


def _derived_rng(seed: int, k: int) -> Rng:
    return Rng((seed * 0x100000001B3 + k) & 0xFFFFFFFFFFFFFFFF)


def lkd_quantize_layer(
    model: ToyModel,
    k: int,
    config: LKDConfig,
    precision: PrecisionConfig,
    static_scales=None,
    rng: Rng | None = None,
    probe=None,
):
    """Distill block k against its float form and seal it.

    Blocks 1..k-1 must already be sealed; the prefix (already quantized) is
    shared by teacher and student. With iterations=0 the loop is never
    entered and the sealed block is the plain quantization of the original
    weights. Returns (sealed_block, per_iteration_loss_history).
    """
    if not 1 <= k <= model.num_layers:
        raise UsageError(f"layer index {k} outside [1, {model.num_layers}]")
    if model.quantized_prefix_len() < k - 1:
        raise UsageError(f"blocks before {k} must be sealed before distilling it")
    teacher = model.blocks[k - 1]
    if not isinstance(teacher, BlockWeights):
        raise UsageError(f"block {k} is already quantized")
    if not precision.quantizes_weights:
        raise UsageError("distillation needs a weight-quantizing precision config")
    sampler = make_sampler(
        config.data_source, model.vocab, config.batch_size, config.seq_len
    )
    if rng is None:
        seed = config.seed
        if isinstance(config.data_source, RandomTokens) and config.data_source.seed is not None:
            seed = config.data_source.seed
        rng = _derived_rng(seed, k)

    teacher_params = block_params(teacher)
    teacher_w = {name: teacher_params[name] for name in WEIGHT_NAMES}
    master = MasterWeights.from_block(teacher)
    history: list[float] = []
    try:
        for it in range(config.iterations):
            assert MasterWeights.live_count() == 1, "more than one block holds master state"
            ids = sampler(rng)
            h = _stack_prefix_hidden(ids, model, k, precision, static_scales)
            t_out, _ = block_forward_cached(
                teacher_params, teacher_w, h, config.seq_len, teacher.num_heads, model.causal
            )
            loss, grads = lkd_backward(
                master, h, t_out, precision, model.causal,
                seq_len=config.seq_len, static_scales=static_scales, layer=k - 1,
                loss_kind=config.loss,
            )
            history.append(loss)
            master.update(grads, config)
            if probe is not None:
                probe(k, it, MasterWeights.live_count())
        sealed = quantize_block(master.to_block(), precision)
    finally:
        master.release()
    return sealed, history


def lkd_quantize_model(
    model: ToyModel,
    config: LKDConfig,
    precision: PrecisionConfig,
    static_scales=None,
    probe=None,
):
    """Distill and seal every block in order (Eq. 1 applied layer by layer).

    At any instant at most one block holds master weights/optimizer state;
    this is asserted throughout. Returns (quantized_model, loss_histories)
    with one history list per layer.
    """
    if model.quantized_prefix_len() != 0:
        raise UsageError("model must be fully full-precision before distillation")
    work = ToyModel(
        embedding=model.embedding,
        blocks=list(model.blocks),
        final_gamma=model.final_gamma,
        final_beta=model.final_beta,
        num_heads=model.num_heads,
        causal=model.causal,
    )
    rng = Rng(config.seed)
    histories: list[list[float]] = []
    for k in range(1, model.num_layers + 1):
        assert MasterWeights.live_count() == 0, "master state leaked across layers"
        sealed, hist = lkd_quantize_layer(
            work, k, config, precision, static_scales, rng=rng, probe=probe
        )
        work.blocks[k - 1] = sealed
        histories.append(hist)
    assert MasterWeights.live_count() == 0, "master state leaked after distillation"
    return work, histories
