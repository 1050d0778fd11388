"""``lhvnet`` command line entry point.

Exit codes: 0 success (a ``not_learned`` verdict is still a success),
2 validation error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from lhvnet import __version__
from lhvnet import io
from lhvnet.exceptions import ValidationError
from lhvnet.quantum import target_distribution

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 2, 3


def cmd_target(args) -> int:
    cfg = io.read_config(args.config)
    errors = io.check_known_keys(cfg, ("source.", "meas.", "network."), ("sources", "meas"))
    if errors:
        raise ValidationError("; ".join(errors))
    p = target_distribution(io.network_from_config(cfg, Path(args.config).parent))
    io.write_distribution(args.out, p)
    print(f"wrote {args.out}; normalization residual {abs(p.sum() - 1):.3e}")
    return EXIT_OK


def cmd_train(args) -> int:
    from lhvnet.training import ModelSpec, TrainConfig, train

    target = io.read_distribution(args.target)
    errors: list[str] = []
    if args.config:
        cfg = io.read_config(args.config)
        errors += io.check_known_keys(cfg, ("model.", "train."), ("seed",))
        spec = io.model_spec_from_config(cfg, errors)
        tcfg = io.train_config_from_config(cfg, errors)
    else:
        spec, tcfg = ModelSpec(), TrainConfig()
    if errors:
        raise ValidationError("; ".join(errors))
    out = Path(args.out)
    result = train(target, spec, tcfg)
    if result.best_model is not None:
        ckpt = out / "checkpoint.npz"
        io.save_checkpoint(ckpt, result.best_model)
        result.checkpoint = ckpt.name
    io.write_train_result(out / "result.json", result)
    print(f"verdict {result.verdict}; best distance {result.best_distance:.6g}; best KL {result.best_kl:.6g}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from lhvnet.experiments import run_sweep

    spec = io.sweep_spec_from_config(io.read_config(args.spec))
    result = run_sweep(spec, args.out)
    csv_path = Path(args.out) / f"{spec.kind}.csv"
    if args.svg:
        io.atomic_write_text(csv_path.with_suffix(".svg"), io.sweep_svg(result, spec.train.delta_local))
    for row in result.rows:
        params = ", ".join(f"{k}={v:g}" for k, v in row["params"].items())
        print(f"{params}: {row['verdict']} (distance {row['best_distance']:.5f})")
    for row in result.skipped:
        print(f"skipped {row['params']}: {row['reason']}")
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_extract(args) -> int:
    from lhvnet.model import model_distribution_batched
    from lhvnet.training import euclidean_distance, extract_response_functions, reconstruct_from_tables

    model = io.load_checkpoint(args.checkpoint)
    table = extract_response_functions(model, args.grid)
    out = Path(args.out)
    io.write_response_tables(out / "tables.csv", table)
    p_rec = reconstruct_from_tables(table)
    p_model = model_distribution_batched(model, args.samples, args.seed)
    report = {"grid": args.grid, "samples": args.samples, "l2_vs_model": euclidean_distance(p_rec, p_model)}
    if args.target:
        report["l2_vs_target"] = euclidean_distance(p_rec, io.read_distribution(args.target))
    io.write_distribution(out / "reconstruction.txt", p_rec)
    io.atomic_write_text(out / "report.json", json.dumps(report, indent=1) + "\n")
    print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in report.items()))
    return EXIT_OK


def cmd_plot(args) -> int:
    from lhvnet.experiments import read_sweep_csv

    result = read_sweep_csv(args.csv)
    out = args.out or str(Path(args.csv).with_suffix(".svg"))
    io.atomic_write_text(out, io.sweep_svg(result, args.delta))
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lhvnet", description="Triangle network targets and LHV model training.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("target", help="compute an exact target distribution")
    p.add_argument("config")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_target)

    p = sub.add_parser("train", help="fit an LHV model to a distribution file")
    p.add_argument("target")
    p.add_argument("-c", "--config")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run a parameter sweep")
    p.add_argument("spec")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("extract", help="tabulate response functions of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("-G", "--grid", type=int, default=64)
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--target")
    p.add_argument("--samples", type=int, default=2**20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("plot", help="SVG plot of a sweep CSV")
    p.add_argument("csv")
    p.add_argument("-o", "--out")
    p.add_argument("--delta", type=float, default=0.015)
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
