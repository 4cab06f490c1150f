"""Command-line entry point.

Exit codes: 0 ok, 2 usage (bad flags, group size not dividing the model),
3 unreadable artifact, 4 bad calibration/text input, 5 write or internal failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats
from .corpus import synthetic_text
from .evaluate import perplexity, reconstruction_table
from .model import ModelConfig, init_random, toy_model
from .parallel import single_threaded_blas
from .pipeline import (
    AblationGrid,
    CalibrationSet,
    PipelineConfig,
    ablation_matrix,
    diagnose_snr,
    run_d2quant,
)
from .quant import (
    PER_CHANNEL,
    SUPPORTED_BITS,
    QuantConfig,
    QuantConfigError,
    compression_ratio,
    theoretical_bits_per_weight,
)

EXIT_OK, EXIT_USAGE, EXIT_ARTIFACT, EXIT_CALIB, EXIT_INTERNAL = 0, 2, 3, 4, 5

log = logging.getLogger("d2quant")


class UsageError(Exception):
    pass


def _auto_group(cfg: ModelConfig, preferred: int = 128) -> int:
    """Largest power of two <= ``preferred`` dividing both d_model and d_ffn."""
    g = preferred
    while g > 1 and (cfg.d_model % g or cfg.d_ffn % g):
        g //= 2
    return g


def _quant_config(args, mcfg: ModelConfig) -> QuantConfig:
    group = args.group
    if group is None:
        group = _auto_group(mcfg)
    elif group == 0:
        group = PER_CHANNEL
    try:
        q = QuantConfig(bits=args.bits, group_size=group)
        q.groups_for(mcfg.d_model)
        q.groups_for(mcfg.d_ffn)
    except QuantConfigError as exc:
        raise UsageError(str(exc)) from exc
    return q


def _check_out(args, out: Path):
    if Path(out).resolve() == Path(args.model).resolve():
        raise UsageError("refusing to overwrite the input artifact")


def _calibration(args, mcfg: ModelConfig, seed):
    seq_len = args.seq_len or mcfg.max_seq
    if seq_len > mcfg.max_seq:
        raise UsageError(f"--seq-len {seq_len} exceeds model max_seq {mcfg.max_seq}")
    return formats.load_calibration(args.calib, args.calib_samples, seq_len, seed=seed), seq_len


def cmd_init(args) -> int:
    cfg = ModelConfig(n_layers=args.layers, d_model=args.d_model, n_heads=args.heads,
                      d_ffn=args.d_ffn, max_seq=args.max_seq, rope=not args.no_rope)
    if args.no_fit:
        m = init_random(cfg, args.seed)
    else:
        if args.fit_text:
            text = Path(args.fit_text).read_bytes()
        else:
            text = synthetic_text(cfg.max_seq * args.fit_windows, args.seed)
        m = toy_model(args.seed, text, cfg, n_fit=args.fit_windows)
    formats.save_model(m, args.out)
    print(f"wrote {args.out}: {cfg.n_layers} blocks, d_model={cfg.d_model}, d_ffn={cfg.d_ffn}")
    return EXIT_OK


def cmd_corpus(args) -> int:
    Path(args.out).write_bytes(synthetic_text(args.bytes, args.seed))
    print(f"wrote {args.bytes} bytes to {args.out}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    _check_out(args, args.out)
    m = formats.load_model(args.model)
    qcfg = _quant_config(args, m.config)
    calib, seq_len = _calibration(args, m.config, args.seed)
    pcfg = PipelineConfig(
        quant=qcfg,
        dsq_iters=args.dsq_iters,
        dsq_enabled=not (args.no_dsq or args.static_smooth),
        dac_enabled=not args.no_dac,
        static_smooth_enabled=args.static_smooth,
        calib_samples=len(calib),
        calib_seq_len=seq_len,
    )
    qm, report = run_d2quant(m, calib, pcfg)
    doc = formats.quantize_report(report, m.config, args.seed)
    report_path = args.report or str(args.out) + ".report.json"
    formats.save_model(qm, args.out)
    formats.write_report(doc, report_path)
    s = doc["summary"]
    print(f"quantized {len(qm.blocks)} blocks at {qcfg.bits} bits (group {qcfg.groups_for(m.config.d_model)}): "
          f"mean reduction {s['mean_realized_reduction']:.4f}, mean rel. error {s['mean_relative_error']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    m = formats.load_model(args.model)
    ids = formats.read_bytes(args.text)
    seq_len = args.seq_len or m.config.max_seq
    if seq_len > m.config.max_seq:
        raise UsageError(f"--seq-len {seq_len} exceeds model max_seq {m.config.max_seq}")
    if len(ids) < 2:
        raise formats.CalibrationError("text must contain at least two bytes")
    res = perplexity(m, ids, seq_len)
    if args.reference:
        res.reconstruction = reconstruction_table(formats.load_model(args.reference), m)
    doc = res.to_dict()
    print(f"perplexity {res.perplexity:.6f}  mean_nll {res.mean_nll:.6f} nats  tokens {res.token_count}")
    if args.json:
        formats.write_report(doc, args.json)
    else:
        print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    m = formats.load_model(args.model)
    qcfg = None if args.identity else _quant_config(args, m.config)
    calib, seq_len = _calibration(args, m.config, args.seed)
    sites = diagnose_snr(m, calib, qcfg)
    pipeline = {"bits": qcfg.bits if qcfg else None,
                "group_size": qcfg.group_size if qcfg else None,
                "identity": args.identity, "calib_samples": len(calib), "calib_seq_len": seq_len}
    doc = formats.snr_report(sites, m.config, pipeline, args.seed)
    if args.out:
        formats.write_report(doc, args.out)
    s = doc["summary"]
    print(f"mean SNR post-attn {s['mean_snr_post_attn']:.4f}  pre-norm {s['mean_snr_pre_norm']:.4f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    manifest = formats.load_manifest(args.model)
    cfg = manifest["config"]
    total = quant_weights = 0
    nominal_bits = 0.0
    groups = set()
    for name, entry in sorted(manifest["tensors"].items()):
        n = int(np.prod(entry["shape"]))
        total += n
        if entry["dtype"] == "quantized":
            quant_weights += n
            groups.add((entry["bits"], entry["group_size"]))
            nominal_bits += n * theoretical_bits_per_weight(entry["bits"], entry["group_size"])
        if args.tensors:
            extra = f" bits={entry['bits']} group={entry['group_size']}" if entry["dtype"] == "quantized" else ""
            print(f"  {name:28s} {entry['dtype']:9s} {entry['shape']}{extra}")
    print(f"format {manifest['format']} v{manifest['version']}  byte order {manifest['byte_order']}")
    print(f"config: {json.dumps(cfg, sort_keys=True)}")
    print(f"tensors: {len(manifest['tensors'])}  parameters: {total}  quantized weights: {quant_weights}")
    if quant_weights:
        bpw = nominal_bits / quant_weights
        print(f"weight payload: {bpw:.4f} nominal bits/weight, theoretical ratio vs fp16 {16 / bpw:.4f}")
        for bits, group in sorted(groups):
            print(f"  bits={bits} group={group}: ratio {compression_ratio(bits, group):.4f}")
    else:
        print("weight payload: full precision")
    return EXIT_OK


def cmd_ablate(args) -> int:
    m = formats.load_model(args.model)
    qcfg = _quant_config(args, m.config)
    seq_len = args.seq_len or m.config.max_seq
    grid = AblationGrid()
    need = max(max(grid.calib_sizes), args.calib_samples)
    ids = formats.read_bytes(args.calib)
    chunks = formats.chunk_ids(ids, seq_len)
    if args.heldout:
        heldout = formats.chunk_ids(formats.read_bytes(args.heldout), seq_len)
        pool = chunks
    else:
        n_held = max(1, len(chunks) // 4)
        heldout, pool = chunks[-n_held:], chunks[:-n_held]
    if not pool or not heldout:
        raise formats.CalibrationError("not enough text for calibration and held-out windows")
    rng = np.random.default_rng(args.seed)
    if len(pool) > need:
        pool = [pool[i] for i in np.sort(rng.choice(len(pool), need, replace=False))]
    calib = CalibrationSet(pool)
    base = PipelineConfig(quant=qcfg, dsq_iters=args.dsq_iters,
                          calib_samples=min(args.calib_samples, len(calib)), calib_seq_len=seq_len)
    result = ablation_matrix(m, calib, base, heldout, grid)
    formats.write_report(formats.ablation_report(result, args.seed), args.out)
    print(f"full precision perplexity {result['full_precision_perplexity']:.4f}")
    for row in result["rows"]:
        print(f"  {row['group']:11s} {row['label']:24s} ppl {row['perplexity']:10.4f}  "
              f"down err {row['mean_down_error']:.4f}  reduction {row['mean_realized_reduction']:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    a = formats.read_report(args.report)
    if not args.other:
        print(json.dumps(a.get("summary", {}), indent=2, sort_keys=True))
        return EXIT_OK
    b = formats.read_report(args.other)
    sa, sb = a.get("summary", {}), b.get("summary", {})
    for key in sorted(set(sa) | set(sb)):
        va, vb = sa.get(key), sb.get(key)
        if isinstance(va, (int, float)) and isinstance(vb, (int, float)):
            print(f"{key:28s} {va:12.6f} {vb:12.6f} {vb - va:+12.6f}")
    return EXIT_OK


def _add_quant_flags(p):
    p.add_argument("--bits", type=int, default=2, choices=SUPPORTED_BITS)
    p.add_argument("--group", type=int, default=None,
                   help="group size along input columns; 0 = per-channel; default: largest "
                        "power of two <= 128 dividing the model dims")
    p.add_argument("--calib-samples", type=int, default=128)
    p.add_argument("--seq-len", type=int, default=None, help="default: model max_seq")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="d2quant", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="create a toy model artifact")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-ffn", type=int, default=128)
    p.add_argument("--max-seq", type=int, default=128)
    p.add_argument("--no-rope", action="store_true")
    p.add_argument("--fit-text", help="text used to fit the output head (default: synthetic)")
    p.add_argument("--fit-windows", type=int, default=64)
    p.add_argument("--no-fit", action="store_true", help="keep the random output head")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("corpus", help="write seeded synthetic text")
    p.add_argument("--out", required=True)
    p.add_argument("--bytes", type=int, default=65536)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("quantize", help="run the block-wise quantization pipeline")
    p.add_argument("model")
    p.add_argument("calib")
    _add_quant_flags(p)
    p.add_argument("--dsq-iters", type=int, default=15)
    p.add_argument("--no-dsq", action="store_true")
    p.add_argument("--no-dac", action="store_true")
    p.add_argument("--static-smooth", action="store_true", help="static smoothing instead of DSQ")
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None, help="default: <out>.report.json")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="byte-level perplexity on a text file")
    p.add_argument("model")
    p.add_argument("text")
    p.add_argument("--seq-len", type=int, default=None, help="window length (default: model max_seq)")
    p.add_argument("--reference", help="full-precision artifact for the reconstruction table")
    p.add_argument("--json", help="write the result here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="deviation SNR at post-attention and pre-norm sites")
    p.add_argument("model")
    p.add_argument("calib")
    _add_quant_flags(p)
    p.add_argument("--identity", action="store_true", help="use the no-op quantizer")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("inspect", help="summarise an artifact manifest")
    p.add_argument("model")
    p.add_argument("--tensors", action="store_true", help="list every tensor")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("ablate", help="component / iteration / calibration-size ablation grid")
    p.add_argument("model")
    p.add_argument("calib")
    _add_quant_flags(p)
    p.add_argument("--dsq-iters", type=int, default=15)
    p.add_argument("--heldout", help="held-out text (default: last quarter of the calibration file)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="print a report summary, or diff two reports")
    p.add_argument("report")
    p.add_argument("other", nargs="?")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with single_threaded_blas():
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"d2quant: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except formats.ArtifactError as exc:
        print(f"d2quant: artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except formats.CalibrationError as exc:
        print(f"d2quant: input error: {exc}", file=sys.stderr)
        return EXIT_CALIB
    except (formats.ReportError, OSError) as exc:
        print(f"d2quant: write failure: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"d2quant: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
