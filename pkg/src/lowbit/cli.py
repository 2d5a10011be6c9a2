"""Command-line front end: generate, calibrate, quantize, distill, evaluate.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags, malformed
configs or files). All commands are deterministic given their flags, input
files, and seeds; only `bench` output varies (wall-clock timings, labeled
informational).
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from lowbit import checkpoint, evaluate, lkd, transformer
from lowbit.errors import UsageError
from lowbit.tensor import Rng
from lowbit.transformer import PrecisionConfig


def _fmt_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([line(headers)] + [line(r) for r in rows])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_model(args) -> int:
    model = transformer.generate_toy_model(
        dim=args.dim,
        num_heads=args.heads,
        num_layers=args.layers,
        vocab=args.vocab,
        seed=args.seed,
        hetero_knob=args.hetero_knob,
        causal=not args.no_causal,
    )
    checkpoint.save_model(model, args.out)
    print(
        f"wrote {args.out}: dim={args.dim} heads={args.heads} layers={args.layers} "
        f"vocab={args.vocab} seed={args.seed} hetero_knob={args.hetero_knob}"
    )
    return 0


def cmd_gen_data(args) -> int:
    rng = Rng(args.seed)
    lines = []
    for _ in range(args.sequences):
        ids = rng.integers(args.vocab, args.seq_len)
        lines.append(" ".join(str(int(i)) for i in ids))
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    print(f"wrote {args.out}: {args.sequences} sequences of {args.seq_len} tokens")
    return 0


def _sequential_batches(stream: np.ndarray, iterations: int, batch: int, seq_len: int):
    """Deterministic sequential windows over the stream, wrapping around."""
    n = stream.size
    pos = 0
    for _ in range(iterations):
        idx = (pos + np.arange(batch * seq_len)) % n
        pos = (pos + batch * seq_len) % n
        block = stream[idx].reshape(batch, seq_len)
        for row in block:
            yield row


def cmd_calibrate(args) -> int:
    model = checkpoint.load_model(args.model)
    stream = lkd.load_token_stream(args.data)
    if stream.max() >= model.vocab:
        raise UsageError(f"{args.data}: token id outside model vocabulary {model.vocab}")
    batches = _sequential_batches(stream, args.iterations, args.batch_size, args.seq_len)
    calibration = evaluate.calibrate_model(model, batches, momentum=args.momentum)
    checkpoint.save_calibration(calibration, args.out)
    print(f"wrote {args.out}: {len(calibration)} sites, "
          f"{args.iterations} iterations, momentum {args.momentum}")
    return 0


def _precision_from_args(args, dim: int) -> PrecisionConfig:
    scheme = args.scheme
    if getattr(args, "attn_input_full", False):
        if scheme.upper().endswith("A8"):
            scheme = scheme + "/16"
        else:
            raise UsageError("--attn-input-full only applies to A8 schemes")
    return PrecisionConfig.from_scheme(
        scheme,
        group_count=args.groups,
        activation_static=getattr(args, "static_act", False),
        hidden_dim=dim,
    )


def cmd_quantize(args) -> int:
    model = checkpoint.load_model(args.model)
    precision = _precision_from_args(args, model.dim)
    if precision.activation_static:
        if not args.calib:
            raise UsageError("--static-act requires --calib")
        checkpoint.load_static_scales(args.calib)  # validate early
    if not precision.quantizes_weights:
        raise UsageError(f"scheme {precision.label()} quantizes no weights; nothing to write")
    for name in transformer.WEIGHT_NAMES:
        rows = getattr(model.blocks[0], name).shape[0]
        groups = min(precision.group_count, rows)
        if not transformer.hw_aligned(rows, groups):
            msg = (f"group layout for {name} ({rows} rows / {groups} groups) "
                   f"is not a multiple of 16 rows per group")
            if args.hw_aligned:
                raise UsageError(msg)
            print(f"warning: {msg}", file=sys.stderr)
    qmodel = transformer.quantize_model(model, precision)
    checkpoint.save_model(qmodel, args.out)
    ratio = evaluate.footprint_ratio(qmodel, precision)
    print(f"wrote {args.out}: scheme {precision.label()} groups {precision.group_count}")
    print(f"footprint {evaluate.footprint(qmodel, precision)} bytes, "
          f"ratio {ratio:.3f}x vs 2-byte baseline")
    return 0


def _lkd_config_from_runconfig(cfg: dict) -> lkd.LKDConfig:
    source_kind = cfg.get("data_source", "random")
    if source_kind == "random":
        source = lkd.RandomTokens()
    elif source_kind in ("original", "alt"):
        if "data_path" not in cfg:
            raise UsageError(f"data_source = {source_kind} requires data_path")
        cls = lkd.OriginalData if source_kind == "original" else lkd.AltCorpus
        source = cls(cfg["data_path"])
    else:
        raise UsageError(f"unknown data_source {source_kind!r} (random | original | alt)")
    return lkd.LKDConfig(
        learning_rate=cfg.get("learning_rate", 5e-6),
        iterations=cfg.get("iterations", 100),
        batch_size=cfg.get("batch_size", 32),
        seq_len=cfg.get("seq_len", 128),
        data_source=source,
        optimizer=cfg.get("optimizer", "adam"),
        loss=cfg.get("loss", "mse"),
        seed=cfg.get("seed", 0),
    )


def cmd_distill(args) -> int:
    model = checkpoint.load_model(args.model)
    cfg = checkpoint.parse_runconfig(args.config)
    if "scheme" not in cfg:
        raise UsageError(f"{args.config}: missing required key 'scheme'")
    precision = PrecisionConfig.from_scheme(
        cfg["scheme"],
        group_count=cfg.get("groups"),
        activation_static=cfg.get("static_act", False),
        hidden_dim=model.dim,
    )
    config = _lkd_config_from_runconfig(cfg)
    static_scales = None
    if precision.activation_static:
        if "calib" not in cfg:
            raise UsageError(f"{args.config}: static_act = true requires a calib path")
        static_scales = checkpoint.load_static_scales(cfg["calib"])
    qmodel, histories = lkd.lkd_quantize_model(model, config, precision, static_scales)
    checkpoint.save_model(qmodel, args.out)
    lines = ["iteration,layer,loss"]
    for layer, history in enumerate(histories, 1):
        for it, loss in enumerate(history):
            lines.append(f"{it},{layer},{loss!r}")
    with open(args.loss_csv, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    print(f"wrote {args.out} and {args.loss_csv}: scheme {precision.label()}, "
          f"{config.iterations} iterations/layer")
    return 0


def _parse_schemes(spec: str) -> list[str]:
    labels = [s.strip() for s in spec.split(",") if s.strip()]
    if not labels:
        raise UsageError("no schemes given")
    return labels


def cmd_eval(args) -> int:
    model = checkpoint.load_model(args.model)
    if model.quantized_prefix_len() != 0:
        raise UsageError("eval expects a full-precision checkpoint; schemes are applied here")
    stream = lkd.load_token_stream(args.data)
    schemes = [
        PrecisionConfig.from_scheme(
            label, group_count=args.groups, activation_static=args.static_act,
            hidden_dim=model.dim,
        )
        for label in _parse_schemes(args.schemes)
    ]
    calib_batches = None
    if args.calib_data:
        calib_batches = list(
            _sequential_batches(lkd.load_token_stream(args.calib_data), 16, 4, 32)
        )
    reports = evaluate.scheme_compare(model, schemes, stream, calib_batches)
    headers = ["scheme", "static", "groups", "recon_mse", "e2e_mse",
               "agreement", "bytes", "ratio", "ppl"]
    rows = []
    csv_lines = [",".join(headers)]
    for r in reports:
        recon = float(np.mean(r.per_layer_recon_mse))
        cells = [r.scheme, str(r.static_activations).lower(), str(r.group_count),
                 f"{recon:.3e}", f"{r.end_to_end_mse:.3e}", f"{r.argmax_agreement:.4f}",
                 str(r.footprint_bytes), f"{r.footprint_ratio:.3f}", f"{r.perplexity:.4f}"]
        rows.append(cells)
        csv_lines.append(",".join(cells))
    print(_fmt_table(headers, rows))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write("\n".join(csv_lines) + "\n")
        print(f"wrote {args.out}")
    return 0


def cmd_report(args) -> int:
    model = checkpoint.load_model(args.model)
    stream = lkd.load_token_stream(args.data)
    ids = stream[: args.tokens]
    report = transformer.range_report(model, ids)
    headers = ["layer", "token"]
    for site in transformer.GEMM_SITES:
        headers += [f"{site}_min", f"{site}_max"]
    rows = []
    for row in report.activation_rows:
        cells = [str(row.layer), str(row.token)]
        for site in transformer.GEMM_SITES:
            lo, hi = row.ranges[site]
            cells += [f"{lo:.5f}", f"{hi:.5f}"]
        rows.append(cells)
    print("# token-wise activation ranges per GeMM input")
    print(_fmt_table(headers, rows))
    spreads = {}
    for wr in report.weight_rows:
        spreads.setdefault(wr.layer, []).append(wr.max_abs)
    print("\n# attention-output weight row ranges (max|row| spread per layer)")
    w_rows = [
        [str(layer), f"{min(v):.5f}", f"{max(v):.5f}", f"{max(v) / max(min(v), 1e-30):.2f}x"]
        for layer, v in sorted(spreads.items())
    ]
    print(_fmt_table(["layer", "row_min", "row_max", "spread"], w_rows))
    if args.out:
        lines = [",".join(headers)]
        lines += [",".join(r) for r in rows]
        lines.append("layer,row,max_abs")
        for wr in report.weight_rows:
            lines.append(f"{wr.layer},{wr.row},{wr.max_abs!r}")
        with open(args.out, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
        print(f"wrote {args.out}")
    return 0


def cmd_bench(args) -> int:
    shapes = []
    for part in args.shapes.split(";"):
        dims = [int(x) for x in part.split(",")]
        if len(dims) != 3:
            raise UsageError(f"bad shape {part!r}; expected tokens,inner,out")
        shapes.append(tuple(dims))
    rows = evaluate.bench(shapes, repeats=args.repeats)
    print("# informational CPU timings only; not a latency claim")
    table = [
        [f"{r.tokens}x{r.inner}x{r.out}", f"{r.int8_ms:.3f}", f"{r.float_ms:.3f}"]
        for r in rows
    ]
    print(_fmt_table(["shape", "int8_gemm_ms", "float_gemm_ms"], table))
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lowbit",
        description="Post-training quantization toolkit for toy transformers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="generate a seeded toy model checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--vocab", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hetero-knob", action="store_true",
                   help="scale 25%% of attention-output rows by 10x")
    p.add_argument("--no-causal", action="store_true")
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("gen-data", help="generate a random token-id data file")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", type=int, default=512)
    p.add_argument("--sequences", type=int, default=64)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("calibrate", help="calibrate static activation scales")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--momentum", type=float, default=0.95)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=32)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("quantize", help="post-training quantize a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scheme", required=True,
                   help="W8A8 | W8A16 | W4/8A16 | W4/8A8 | ...")
    p.add_argument("--groups", type=int, default=None)
    p.add_argument("--calib", default=None)
    p.add_argument("--static-act", action="store_true")
    p.add_argument("--attn-input-full", action="store_true",
                   help="keep the q/k/v GeMM input full precision (A8/16)")
    p.add_argument("--hw-aligned", action="store_true",
                   help="fail unless every group is a multiple of 16 rows")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("distill", help="layer-by-layer distillation to a quantized model")
    p.add_argument("--model", required=True)
    p.add_argument("--config", required=True, help="run-config file (key = value lines)")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="compare quantization schemes on a float model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--schemes", required=True, help="comma-separated WxAy labels")
    p.add_argument("--groups", type=int, default=None)
    p.add_argument("--static-act", action="store_true")
    p.add_argument("--calib-data", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="activation/weight range diagnostics")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tokens", type=int, default=32)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench", help="informational CPU GeMM timings")
    p.add_argument("--shapes", default="32,64,64;64,256,256")
    p.add_argument("--repeats", type=int, default=20)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
