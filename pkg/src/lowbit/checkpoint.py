"""Binary model checkpoints, calibration CSV, and run-config files.

Checkpoint layout (all little-endian):

    magic "ZQCK" | version u32 | vocab u32 | dim u32 | heads u32 |
    layers u32 | causal u8
    embedding f32[vocab*dim]
    final_gamma f32[dim] | final_beta f32[dim]
    per block:
      kind u8 (0 = float weights, 1 = quantized weights)
      six weight sections in q,k,v,o,h4h,4hh order:
        float:     f32 values, row-major
        quantized: bits u8 | num_groups u32 | group_layout (start u32,
                   count u32 per group) | scales f32 | values i8 row-major
      twelve f32 arrays: the six biases then ln1_gamma, ln1_beta,
      ln2_gamma, ln2_beta

Tensor shapes are implied by the header, so sections carry no dims. Loading
rejects bad magic, unknown versions, and trailing bytes; save/load round-trips
bit-exactly for both float and quantized models.
"""

from __future__ import annotations

import struct

import numpy as np

from lowbit.errors import UsageError
from lowbit.quant import QuantizedMatrix
from lowbit.tensor import F32
from lowbit.transformer import (
    BIAS_NAMES,
    WEIGHT_NAMES,
    BlockWeights,
    QuantizedBlock,
    ToyModel,
)

MAGIC = b"ZQCK"
VERSION = 1

_LN_NAMES = ("ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta")


def _weight_shapes(dim: int) -> list[tuple[int, int]]:
    return [(dim, dim)] * 4 + [(4 * dim, dim), (dim, 4 * dim)]


def _bias_shapes(dim: int) -> list[int]:
    return [dim] * 4 + [4 * dim, dim] + [dim] * 4


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def u8(self, v: int):
        self.parts.append(struct.pack("<B", v))

    def u32(self, v: int):
        self.parts.append(struct.pack("<I", v))

    def f32_array(self, a: np.ndarray):
        self.parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())

    def i8_array(self, a: np.ndarray):
        self.parts.append(np.ascontiguousarray(a, dtype=np.int8).tobytes())

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise UsageError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def f32_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self._take(4 * n), dtype="<f4").astype(F32).reshape(shape)

    def i8_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self._take(n), dtype=np.int8).reshape(shape).copy()

    def done(self):
        if self.pos != len(self.data):
            raise UsageError(f"checkpoint has {len(self.data) - self.pos} trailing bytes")


def _write_quant_section(w: _Writer, qm: QuantizedMatrix):
    w.u8(qm.bits)
    w.u32(qm.num_groups)
    for start, count in qm.group_layout:
        w.u32(start)
        w.u32(count)
    w.f32_array(qm.group_scales)
    w.i8_array(qm.values)


def _read_quant_section(r: _Reader, shape: tuple[int, int]) -> QuantizedMatrix:
    bits = r.u8()
    num_groups = r.u32()
    layout = [(r.u32(), r.u32()) for _ in range(num_groups)]
    scales = r.f32_array((num_groups,))
    values = r.i8_array(shape)
    return QuantizedMatrix(values=values, bits=bits, group_scales=scales, group_layout=layout)


def save_model(model: ToyModel, path: str) -> None:
    w = _Writer()
    w.parts.append(MAGIC)
    w.u32(VERSION)
    w.u32(model.vocab)
    w.u32(model.dim)
    w.u32(model.num_heads)
    w.u32(model.num_layers)
    w.u8(1 if model.causal else 0)
    w.f32_array(model.embedding)
    w.f32_array(model.final_gamma)
    w.f32_array(model.final_beta)
    for block in model.blocks:
        quantized = isinstance(block, QuantizedBlock)
        w.u8(1 if quantized else 0)
        for name in WEIGHT_NAMES:
            mat = getattr(block, name)
            if quantized:
                _write_quant_section(w, mat)
            else:
                w.f32_array(mat)
        for name in BIAS_NAMES + _LN_NAMES:
            w.f32_array(getattr(block, name))
    with open(path, "wb") as f:
        f.write(w.bytes())


def load_model(path: str) -> ToyModel:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r._take(4) != MAGIC:
        raise UsageError(f"{path}: not a model checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise UsageError(f"{path}: unsupported checkpoint version {version}")
    vocab = r.u32()
    dim = r.u32()
    heads = r.u32()
    layers = r.u32()
    causal = bool(r.u8())
    embedding = r.f32_array((vocab, dim))
    final_gamma = r.f32_array((dim,))
    final_beta = r.f32_array((dim,))
    blocks = []
    for _ in range(layers):
        quantized = bool(r.u8())
        weights = {}
        for name, shape in zip(WEIGHT_NAMES, _weight_shapes(dim)):
            weights[name] = (
                _read_quant_section(r, shape) if quantized else r.f32_array(shape)
            )
        floats = {}
        for name, n in zip(BIAS_NAMES + _LN_NAMES, _bias_shapes(dim)):
            floats[name] = r.f32_array((n,))
        cls = QuantizedBlock if quantized else BlockWeights
        blocks.append(cls(**weights, **floats, num_heads=heads))
    r.done()
    return ToyModel(
        embedding=embedding,
        blocks=blocks,
        final_gamma=final_gamma,
        final_beta=final_beta,
        num_heads=heads,
        causal=causal,
    )


def models_equal(a: ToyModel, b: ToyModel) -> bool:
    """Bit-exact structural equality (used by round-trip tests)."""
    if (
        a.vocab != b.vocab
        or a.dim != b.dim
        or a.num_heads != b.num_heads
        or a.num_layers != b.num_layers
        or a.causal != b.causal
    ):
        return False
    if not (
        np.array_equal(a.embedding, b.embedding)
        and np.array_equal(a.final_gamma, b.final_gamma)
        and np.array_equal(a.final_beta, b.final_beta)
    ):
        return False
    for ba, bb in zip(a.blocks, b.blocks):
        if type(ba) is not type(bb):
            return False
        for name in WEIGHT_NAMES:
            wa, wb = getattr(ba, name), getattr(bb, name)
            if isinstance(wa, QuantizedMatrix):
                if (
                    wa.bits != wb.bits
                    or wa.group_layout != wb.group_layout
                    or not np.array_equal(wa.group_scales, wb.group_scales)
                    or not np.array_equal(wa.values, wb.values)
                ):
                    return False
            elif not np.array_equal(wa, wb):
                return False
        for name in BIAS_NAMES + _LN_NAMES:
            if not np.array_equal(getattr(ba, name), getattr(bb, name)):
                return False
    return True


# ---------------------------------------------------------------------------
# Calibration CSV
# ---------------------------------------------------------------------------


def save_calibration(calibration: dict, path: str) -> None:
    """site,x_max,x_min,scale rows; floats at full round-trip precision."""
    lines = ["site,x_max,x_min,scale"]
    for site, sc in sorted(calibration.items()):
        lines.append(f"{site},{sc.x_max!r},{sc.x_min!r},{sc.scale!r}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_static_scales(path: str) -> dict[str, float]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read calibration file: {exc}") from None
    if not lines or lines[0].strip() != "site,x_max,x_min,scale":
        raise UsageError(f"{path}: not a calibration CSV")
    scales = {}
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise UsageError(f"{path}:{lineno}: expected 4 comma-separated fields")
        try:
            scales[parts[0]] = float(parts[3])
        except ValueError:
            raise UsageError(f"{path}:{lineno}: malformed scale value") from None
    if not scales:
        raise UsageError(f"{path}: calibration CSV has no rows")
    return scales


# ---------------------------------------------------------------------------
# Run configuration (key = value lines)
# ---------------------------------------------------------------------------

_RUNCONFIG_KEYS = {
    "scheme": str,
    "groups": int,
    "static_act": bool,
    "calib": str,
    "learning_rate": float,
    "iterations": int,
    "batch_size": int,
    "seq_len": int,
    "data_source": str,  # random | original | alt
    "data_path": str,
    "optimizer": str,
    "loss": str,
    "seed": int,
}

_BOOL_VALUES = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_runconfig(path: str) -> dict:
    """Parse key = value lines; '#' starts a comment; unknown keys rejected
    with their line number."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read run config: {exc}") from None
    config: dict = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _RUNCONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        if key in config:
            raise UsageError(f"{path}:{lineno}: duplicate key {key!r}")
        kind = _RUNCONFIG_KEYS[key]
        try:
            if kind is bool:
                config[key] = _BOOL_VALUES[value.lower()]
            else:
                config[key] = kind(value)
        except (ValueError, KeyError):
            raise UsageError(
                f"{path}:{lineno}: cannot parse {value!r} as {kind.__name__}"
            ) from None
    return config
