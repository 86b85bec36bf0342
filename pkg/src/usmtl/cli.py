"""Command-line entry point: gen-data, train, eval, score, grad-check."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, desk_profile
from .data import (
    DataError,
    DatasetManifest,
    atomic_write_text,
    default_recipes,
    dump_json,
    gen_data,
    read_recipes,
)
from .gradcheck import TOLERANCE, run_gradcheck
from .inference import load_model, run_eval, score
from .metrics import MetricNorm, Normalizer
from .training import NumericalError, family_loss_trace, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_THRESHOLD = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="usmtl", description="Unified multi-task ultrasound model toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="write a synthetic multi-task dataset")
    g.add_argument("--recipes", help="recipe JSON; the built-in four-task suite when omitted")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=42)

    t = sub.add_parser("train", help="train and write checkpoint, config and log")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="run-config JSON; defaults when omitted")
    t.add_argument("--steps", type=int)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="predict every manifest sample")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)

    s = sub.add_parser("score", help="compute metrics and normalized scores")
    s.add_argument("--data", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--norm", required=True)
    s.add_argument("--out", required=True)

    c = sub.add_parser("grad-check", help="finite-difference gradient verification")
    c.add_argument("--config", help='JSON with optional "instances", "seed", "composites"')
    return p


def _read(reader, path, what):
    try:
        return reader(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: cannot read {what} ({exc})") from None


def example_normalizer(recipes) -> Normalizer:
    """HD against the image diagonal, MRE against a tenth of it; other metrics use defaults."""
    norm = Normalizer()
    diag = max((w * w + h * h) ** 0.5 for w, h in (r.size for r in recipes)) if recipes else 1.0
    norm.metrics["HD"] = MetricNorm("lower", 0.0, round(diag, 3))
    norm.metrics["MRE"] = MetricNorm("lower", 0.0, round(diag / 10, 3))
    return norm


def _cmd_gen_data(args) -> int:
    recipes = _read(read_recipes, args.recipes, "recipes") if args.recipes else default_recipes()
    manifest = gen_data(recipes, args.out, seed=args.seed)
    out = Path(args.out)
    atomic_write_text(out / "run_config.json", desk_profile().dumps())
    atomic_write_text(out / "normalizer.json", dump_json(example_normalizer(recipes).to_dict()))
    n = sum(len(t.samples) for t in manifest.tasks)
    print(f"wrote {n} samples over {len(manifest.tasks)} tasks to {out / 'manifest.json'}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .plotting import plot_loss_curves

    manifest = DatasetManifest.read(args.data)
    config = _read(RunConfig.read, args.config, "run config") if args.config else RunConfig()
    if args.steps is not None:
        if args.steps < 1:
            raise UsageError("--steps must be positive")
        config.optimizer.total_steps = args.steps
    result = train(manifest, config, out_dir=args.out, progress=True)
    trace = family_loss_trace(result.records, {s.task_id: s.family for s in manifest.specs})
    plot_loss_curves(trace, Path(args.out) / "loss_curves.png")
    for fam, pts in sorted(trace.items(), key=lambda kv: kv[0].value):
        print(f"{fam.value:<15} first {pts[0][1]:.4f}  last {pts[-1][1]:.4f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    manifest = DatasetManifest.read(args.data)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise DataError(f"{ckpt}: checkpoint not found")
    model, config = load_model(manifest, ckpt)
    doc = run_eval(model, manifest, config, args.out)
    print(f"wrote {len(doc['predictions'])} predictions to {args.out}")
    return EXIT_OK


def report_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task_id", "family", "metric", "raw", "norm", "task_score"])
    for st in sorted(report.subtasks, key=lambda s: s.task_id):
        for m, v in st.raw.items():
            w.writerow([st.task_id, st.family.value, m, repr(v), repr(st.norm.get(m)), repr(st.task_score)])
    for cat, v in report.categories.items():
        w.writerow(["", cat, "category", "", "", repr(v)])
    w.writerow(["", "", "overall", "", "", repr(report.overall)])
    return buf.getvalue()


def _cmd_score(args) -> int:
    from .plotting import plot_report

    manifest = DatasetManifest.read(args.data)
    norm = _read(Normalizer.read, args.norm, "normalizer")
    try:
        report = score(manifest, args.pred, norm)
    except KeyError as exc:
        raise DataError(str(exc.args[0])) from None
    out = Path(args.out)
    atomic_write_text(out, report.dumps())
    atomic_write_text(out.with_suffix(".csv"), report_csv(report))
    plot_report(report, out.with_suffix(".png"))
    sys.stdout.write(report_csv(report))
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    opts = {}
    if args.config:
        try:
            opts = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise DataError(f"{args.config}: cannot read grad-check config ({exc})") from None
        unknown = set(opts) - {"instances", "seed", "composites"}
        if unknown:
            raise UsageError(f"grad-check config: unknown keys {sorted(unknown)}")
    report = run_gradcheck(instances=int(opts.get("instances", 20)), seed=int(opts.get("seed", 0)),
                           include_composites=bool(opts.get("composites", True)))
    for line in report.lines():
        print(line)
    return EXIT_OK if report.max_rel_error < TOLERANCE else EXIT_THRESHOLD


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "score": _cmd_score,
    "grad-check": _cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
