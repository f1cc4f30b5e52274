"""Command line entry point: generate-synthetic, train, evaluate, experiment, report.

Exit codes: 0 success, 2 usage, 3 I/O or data problem, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics, report
from .data import (
    CATEGORIES,
    DataError,
    SyntheticSpec,
    class_distribution,
    format_distribution,
    generate_synthetic,
    load_dataset,
    scaled_counts,
)
from .model import CheckpointError
from .training import (
    METRICS_HEADER,
    NumericDivergence,
    RunConfig,
    atomic_write,
    csv_text,
    dump_json,
    evaluate_run,
    read_run_config,
    train_run,
    write_run_directory,
)

log = logging.getLogger("dbvae")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

# flag name -> RunConfig field
OVERRIDES = {
    "epochs": "epochs", "batch_size": "batch_size", "lr": "lr", "latent_dim": "latent_dim",
    "filters": "filters", "dense_width": "dense_width", "bins": "bins", "alpha": "alpha",
    "resample_mode": "resample_mode", "resample_every": "resample_every",
    "kl_weight": "kl_weight", "vae_weight": "vae_weight",
    "reconstruction_weight": "reconstruction_weight", "classification_weight": "classification_weight",
}


class UsageError(Exception):
    pass


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' config file; flags override it")
    for flag in OVERRIDES:
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def build_config(args, **fixed) -> RunConfig:
    values: dict = {}
    try:
        if args.config:
            values.update(RunConfig.parse_text(Path(args.config).read_text()))
        for flag, key in OVERRIDES.items():
            raw = getattr(args, flag, None)
            if raw is not None:
                values[key] = RunConfig.parse_value(key, raw)
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            values[k.strip()] = RunConfig.parse_value(k.strip(), v)
        values.update(fixed)
        return RunConfig(**values)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_generate_synthetic(args) -> int:
    if args.counts:
        try:
            counts = tuple(int(c) for c in args.counts.split(","))
        except ValueError:
            raise UsageError(f"--counts must be comma-separated integers, got {args.counts!r}") from None
    else:
        counts = scaled_counts(args.scale)
    try:
        spec = SyntheticSpec(counts=counts, noise=args.noise, jitter=args.jitter, seed=args.seed)
    except DataError as exc:
        raise UsageError(str(exc)) from exc
    generate_synthetic(spec, args.out)
    print(format_distribution(class_distribution(np.array(spec.counts))))
    print(f"total {sum(spec.counts)} images written to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args, mode=args.model, seed=args.seed, data=args.data, out=args.out)
    dataset = load_dataset(cfg.data)
    result = train_run(cfg, dataset, on_epoch=log.info)
    write_run_directory(result, args.out, run_id=str(args.seed))
    ev = result.evaluation
    print(f"{cfg.mode} seed={cfg.seed}: standard={ev.standard:.4f} balanced={ev.balanced:.4f} -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    run = Path(args.run)
    if not (run / "checkpoint.dbvw").is_file():
        raise DataError("no checkpoint in run directory", run)
    dataset = load_dataset(args.data)
    ev = evaluate_run(run, dataset, args.split)
    doc = {"run": run.name, "split": args.split, **ev.to_dict()}
    atomic_write(run / f"evaluation_{args.split}.json", dump_json(doc))
    cfg = read_run_config(run)
    atomic_write(run / f"evaluation_{args.split}.csv",
                 csv_text(METRICS_HEADER, ev.csv_rows(str(cfg.seed), cfg.mode)))
    sys.stdout.write(dump_json(doc))
    return 0


def run_experiment(cfg_template: RunConfig, dataset, out: Path, runs: int, models, seed_base: int,
                   ddof: int = 0) -> dict[str, metrics.ExperimentSummary]:
    """Paired runs: run r of every model uses seed ``seed_base + r`` and thus the same split."""
    out.mkdir(parents=True, exist_ok=True)
    rows, per_model = [], {m: {"cat": [], "std": [], "n_train": []} for m in models}
    for r in range(runs):
        for m in models:
            cfg = RunConfig(**{**cfg_template.__dict__, "mode": m, "seed": seed_base + r, "out": ""})
            log.info("run %d/%d model=%s seed=%d", r + 1, runs, m, cfg.seed)
            try:
                result = train_run(cfg, dataset, on_epoch=log.debug)
            except NumericDivergence as exc:
                raise NumericDivergence(f"run {r} ({m}): {exc}") from exc
            write_run_directory(result, out / "runs" / f"run{r:02d}_{m}", run_id=str(r))
            ev = result.evaluation
            rows += ev.csv_rows(str(r), m)
            per_model[m]["cat"].append(ev.per_category)
            per_model[m]["std"].append(ev.standard)
            per_model[m]["n_train"].append(ev.n_train)

    summaries = {}
    for m in models:
        s = metrics.aggregate_runs(per_model[m]["cat"], per_model[m]["std"], m, CATEGORIES, ddof)
        summaries[m] = s
        atomic_write(out / f"summary_{m}.json", dump_json(s.to_dict()))
    n_train = np.mean(per_model[models[0]]["n_train"], axis=0)
    atomic_write(out / "per_run.csv", csv_text(METRICS_HEADER, rows))
    atomic_write(out / "summary.csv", csv_text(report.SUMMARY_HEADER, report.summary_rows(list(summaries.values()))))
    meta = {
        "runs": runs, "models": list(models), "seed_base": seed_base,
        "variance_divisor": "R" if ddof == 0 else "R-1",
        "pairing": "run r of every model shares seed seed_base+r and therefore the same split",
        "train_counts": [float(c) for c in n_train],
        "config": cfg_template.to_text(),
    }
    atomic_write(out / "experiment.json", dump_json(meta))
    return summaries


def cmd_experiment(args) -> int:
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    if not models or any(m not in ("cnn", "dbvae") for m in models):
        raise UsageError(f"--models must list cnn and/or dbvae, got {args.models!r}")
    if args.runs < 2:
        raise UsageError("--runs must be >= 2")
    cfg = build_config(args, data=args.data)
    dataset = load_dataset(args.data)
    summaries = run_experiment(cfg, dataset, Path(args.out), args.runs, models, args.seed_base,
                               ddof=1 if args.sample_variance else 0)
    for s in summaries.values():
        print(f"{s.model}: standard {s.samples_bias:.4f} (var {s.samples_var:.4f}) "
              f"balanced {s.categories_bias:.4f} (var {s.categories_var:.4f})")
    return 0


def load_experiment(path: Path):
    meta_path = path / "experiment.json"
    if not meta_path.is_file():
        raise DataError("incomplete experiment: experiment.json missing", path)
    meta = json.loads(meta_path.read_text())
    summaries = []
    for m in meta["models"]:
        p = path / f"summary_{m}.json"
        if not p.is_file():
            raise DataError(f"incomplete experiment: summary for {m} missing", path)
        summaries.append(metrics.ExperimentSummary.from_dict(json.loads(p.read_text())))
    return meta, summaries


def write_report(summaries, counts, out: Path, fmt: str, header: dict | None = None) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    doc = report.report_document(summaries, counts, header)
    written = []
    if fmt == "json":
        written.append(out / "report.json")
        atomic_write(written[-1], dump_json(doc))
    elif fmt == "csv":
        written.append(out / "tables.csv")
        atomic_write(written[-1], csv_text(report.SUMMARY_HEADER, report.summary_rows(summaries)))
        written.append(out / "relative_change.csv")
        keys = ("baseline", "model", "scope", "statistic", "before", "after", "percent_change")
        atomic_write(written[-1], csv_text(keys, [[c[k] for k in keys] for c in doc["relative_change"]]))
        written.append(out / "regression.csv")
        atomic_write(written[-1], csv_text(("model", "slope", "intercept"),
                                           [(m, repr(r["slope"]), repr(r["intercept"]))
                                            for m, r in doc["regression"].items()]))
    else:
        lines = report.regressions(summaries, counts)
        for s in summaries:
            written.append(out / f"{s.model}_accuracy_vs_count.svg")
            atomic_write(written[-1], report.scatter_svg(s, counts, lines[s.model]))
    return written


def cmd_report(args) -> int:
    exp = Path(args.experiment)
    meta, summaries = load_experiment(exp)
    header = {"runs": meta["runs"], "variance_divisor": meta["variance_divisor"], "pairing": meta["pairing"]}
    written = write_report(summaries, meta["train_counts"], exp / "report", args.format, header)
    for line in report.change_lines(report.report_document(summaries, meta["train_counts"])["relative_change"]):
        print(line)
    for p in written:
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dbvae", description="Train and compare a CNN and a debiasing VAE on imbalanced facial-expression data.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-synthetic", help="write a synthetic imbalanced glyph-face corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=float, default=0.1, help="fraction of the reference per-emotion counts")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--counts", help="explicit comma-separated per-category counts")
    p.add_argument("--noise", type=float, default=SyntheticSpec.noise)
    p.add_argument("--jitter", type=int, default=SyntheticSpec.jitter)
    p.set_defaults(func=cmd_generate_synthetic)

    p = sub.add_parser("train", help="train one model and write a run directory")
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=("cnn", "dbvae"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a trained run on its train or validation split")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="repeated paired runs with bias-variance summaries")
    p.add_argument("--data", required=True)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--models", default="cnn,dbvae")
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--sample-variance", action="store_true", help="divide variances by R-1 instead of R")
    _add_config_flags(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="tables, relative changes and scatter plots for an experiment")
    p.add_argument("--experiment", required=True)
    p.add_argument("--format", choices=("csv", "json", "svg"), default="csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dbvae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"dbvae: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericDivergence as exc:
        print(f"dbvae: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
