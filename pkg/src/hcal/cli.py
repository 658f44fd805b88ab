"""Command-line front end: train calibrators, evaluate metric suites,
compare calibrators, and emit reliability diagrams.

Commands: ``train``, ``eval``, ``diagram``, ``compare``.  Option precedence
is built-in defaults < config file (``--config``, flat ``key = value``
lines) < command-line flags.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .dataset import LogitDataset, load_dataset, softmax_rows
from .diagram import render_reliability_svg
from .loss import HCalConfig
from .maps import STANDARD_HYPER_GRID, EnsembleTempMap, load_map, save_map
from .metrics import METRICS, MetricReport, evaluate, get_metric, reliability_data
from .optim import TrainConfig, standard_grid, select_model, train_one


@dataclass
class RunConfig:
    """Merged options for one CLI invocation."""

    seed: int = 0
    # loss
    loss: str = "hcal"
    epsilon: float = 1e-20
    window: int = 200
    multiplier: float = 1e5
    clusters: int = 15
    norm: str = "abs"
    weighting: str = "adaptive"
    # trainer
    lr: float = 0.005
    max_epochs: int = 2000
    scheduler_patience: int = 20
    scheduler_factor: float = 0.5
    early_stop_patience: int = 160
    batch_size: int | None = None
    monitor_metric: str = "ece_ew"
    selector_metric: str | None = None  # None = dece, or nll for the NLL loss
    # family grid
    family: str | None = None
    m: int | None = None
    z: int | None = None
    groups: int | None = None
    units: int | None = None
    # evaluation
    bins: int | None = None  # None = each metric's documented default
    metrics: str | None = None  # comma-separated ids; None = full suite

    def loss_spec(self):
        if self.loss == "hcal":
            return HCalConfig(
                epsilon=self.epsilon,
                window=self.window,
                multiplier=self.multiplier,
                clusters=self.clusters,
                norm=self.norm,
                weighting=self.weighting,
            )
        if self.loss in ("nll", "brier"):
            return self.loss
        raise ValueError(f"unknown loss {self.loss!r} (choose hcal, nll, or brier)")

    def train_config(self) -> TrainConfig:
        selector = self.selector_metric
        if selector is None:
            selector = "nll" if self.loss == "nll" else "dece"
        return TrainConfig(
            max_epochs=self.max_epochs,
            lr=self.lr,
            scheduler_patience=self.scheduler_patience,
            scheduler_factor=self.scheduler_factor,
            early_stop_patience=self.early_stop_patience,
            batch_size=self.batch_size,
            monitor_metric=self.monitor_metric,
            selector_metric=selector,
            seed=self.seed,
        )

    def family_grid(self) -> list[tuple]:
        if self.family is None:
            return standard_grid()
        if self.family == "ensemble_temp":
            sizes = [self.m] if self.m is not None else list(STANDARD_HYPER_GRID[self.family])
            return [("ensemble_temp", s) for s in sizes]
        if self.family == "piecewise_linear":
            sizes = [self.z] if self.z is not None else list(STANDARD_HYPER_GRID[self.family])
            return [("piecewise_linear", s) for s in sizes]
        if self.family == "monotonic_net":
            if self.groups is not None or self.units is not None:
                g = self.groups if self.groups is not None else self.units
                u = self.units if self.units is not None else self.groups
                return [("monotonic_net", (g, u))]
            return [("monotonic_net", h) for h in STANDARD_HYPER_GRID[self.family]]
        raise ValueError(f"unknown family {self.family!r}")

    def metric_ids(self) -> list[str] | None:
        if self.metrics is None:
            return None
        ids = [m.strip() for m in self.metrics.split(",") if m.strip()]
        for mid in ids:
            get_metric(mid)  # raises with the offending key
        return ids


_INT_KEYS = {"seed", "window", "clusters", "max_epochs", "scheduler_patience",
             "early_stop_patience", "batch_size", "m", "z", "groups", "units", "bins"}
_FLOAT_KEYS = {"epsilon", "multiplier", "lr", "scheduler_factor"}


def read_config_file(path: str | Path) -> dict:
    """Parse a flat ``key = value`` config file; '#' starts a comment."""
    known = {f.name for f in fields(RunConfig)}
    out: dict = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in _INT_KEYS:
            out[key] = int(value)
        elif key in _FLOAT_KEYS:
            out[key] = float(value)
        else:
            out[key] = value
    return out


def merge_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        for key, value in read_config_file(args.config).items():
            setattr(cfg, key, value)
    for f in fields(RunConfig):
        flag_val = getattr(args, f.name, None)
        if flag_val is not None:
            setattr(cfg, f.name, flag_val)
    return cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output path for CSV results")


def _add_loss_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--loss", choices=["hcal", "nll", "brier"])
    p.add_argument("--epsilon", type=float, help="calibration error bound")
    p.add_argument("--window", type=int, help="events per constraint window")
    p.add_argument("--multiplier", type=float, help="loss scale factor")
    p.add_argument("--clusters", type=int, help="k-means clusters for window weighting")
    p.add_argument("--norm", choices=["abs", "squared"])
    p.add_argument("--weighting", choices=["adaptive", "uniform"])


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--monitor-metric", dest="monitor_metric")
    p.add_argument("--selector-metric", dest="selector_metric")
    p.add_argument("--family", choices=sorted(STANDARD_HYPER_GRID))
    p.add_argument("--m", type=int, help="ensemble_temp component count")
    p.add_argument("--z", type=int, help="piecewise_linear segment count")
    p.add_argument("--groups", type=int, help="monotonic_net group count")
    p.add_argument("--units", type=int, help="monotonic_net units per group")
    p.add_argument("--verbose", action="store_true", help="log one line per epoch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hcal", description="post-hoc classifier recalibration toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a calibrator and save the best model")
    p_train.add_argument("train_path", help="training dataset (csv or binary)")
    p_train.add_argument("model_path", help="output model file")
    _add_common(p_train)
    _add_loss_flags(p_train)
    _add_train_flags(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a model (or 'uncal') on a dataset")
    p_eval.add_argument("model_path", help="model file, or 'uncal' for plain softmax")
    p_eval.add_argument("test_path")
    _add_common(p_eval)
    p_eval.add_argument("--metrics", help="comma-separated metric ids (default: full suite)")
    p_eval.add_argument("--bins", type=int, help="override the bin count of binned metrics")

    p_diag = sub.add_parser("diagram", help="write an SVG reliability diagram")
    p_diag.add_argument("model_path", help="model file, or 'uncal' for plain softmax")
    p_diag.add_argument("test_path")
    p_diag.add_argument("out_svg")
    _add_common(p_diag)
    p_diag.add_argument("--bins", type=int)

    p_cmp = sub.add_parser("compare", help="train several calibrators and tabulate metrics")
    p_cmp.add_argument("train_path")
    p_cmp.add_argument("test_path")
    _add_common(p_cmp)
    _add_loss_flags(p_cmp)
    _add_train_flags(p_cmp)
    p_cmp.add_argument("--metrics", help="comma-separated metric ids")
    p_cmp.add_argument(
        "--calibrators",
        default="uncal,hcal,nll_ts,brier_ts",
        help="comma-separated subset of uncal,hcal,nll_ts,brier_ts",
    )
    return parser


def _apply_model(model_path: str, ds: LogitDataset) -> np.ndarray:
    if model_path == "uncal":
        return softmax_rows(ds.logits)
    cal_map = load_map(model_path)
    if cal_map.n_classes and cal_map.n_classes != ds.n_classes:
        raise ValueError(
            f"class-count mismatch: model {model_path} was trained with "
            f"{cal_map.n_classes} classes, dataset has {ds.n_classes}"
        )
    return cal_map.forward(ds.logits).probs


def cmd_train(args: argparse.Namespace) -> int:
    cfg = merge_config(args)
    train_ds = load_dataset(args.train_path)
    log_fn = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    best, history, reports = select_model(
        train_ds, cfg.family_grid(), cfg.loss_spec(), cfg.train_config(), log_fn=log_fn
    )
    save_map(best, args.model_path)
    history_path = Path(args.model_path).with_name(Path(args.model_path).name + ".history.csv")
    history.to_csv(history_path)
    print(f"trained {len(reports)} candidate(s) on {train_ds.name} "
          f"(N={train_ds.n_samples}, L={train_ds.n_classes})")
    for rep in reports:
        status = "FAILED" if rep.failed else f"{rep.selector_value:.6g}"
        hyper = "x".join(str(h) for h in rep.hyper)
        print(f"  {rep.family} {hyper}: selector = {status}, epochs = {rep.epochs_run}")
    print(f"best: {best.describe()} -> {args.model_path}")
    print(f"history: {history_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = merge_config(args)
    test_ds = load_dataset(args.test_path)
    probs = _apply_model(args.model_path, test_ds)
    report = evaluate(
        probs, test_ds.labels, cfg.metric_ids(),
        metadata={"dataset": test_ds.name, "calibrator": args.model_path},
        bins=cfg.bins,
    )
    print(report.to_table())
    if args.out:
        report.to_csv(args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_diagram(args: argparse.Namespace) -> int:
    cfg = merge_config(args)
    test_ds = load_dataset(args.test_path)
    probs = _apply_model(args.model_path, test_ds)
    stats = reliability_data(probs, test_ds.labels, bins=cfg.bins or 15)
    title = f"{test_ds.name} / {Path(args.model_path).name}"
    Path(args.out_svg).write_bytes(render_reliability_svg(stats, title=title).encode("utf-8"))
    print(f"wrote {args.out_svg}")
    if args.out:
        stats.to_csv(args.out)
        print(f"wrote {args.out}")
    return 0


_COMPARE_CALIBRATORS = ("uncal", "hcal", "nll_ts", "brier_ts")


def _train_compare_calibrator(name: str, cfg: RunConfig, train_ds: LogitDataset):
    """Fit one named calibrator; returns a probs-producing callable."""
    if name == "uncal":
        return lambda ds: softmax_rows(ds.logits)
    if name == "hcal":
        best, _, _ = select_model(
            train_ds, cfg.family_grid(), cfg.loss_spec(), cfg.train_config()
        )
        return lambda ds: best.forward(ds.logits).probs
    if name in ("nll_ts", "brier_ts"):
        loss = "nll" if name == "nll_ts" else "brier"
        tc = cfg.train_config()
        trained, _ = train_one(EnsembleTempMap(1, seed=tc.seed), train_ds, loss, tc)
        return lambda ds: trained.forward(ds.logits).probs
    raise ValueError(f"unknown calibrator {name!r} (choose from {', '.join(_COMPARE_CALIBRATORS)})")


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = merge_config(args)
    names = [c.strip() for c in args.calibrators.split(",") if c.strip()]
    if not names:
        raise ValueError("need at least one calibrator")
    for name in names:
        if name not in _COMPARE_CALIBRATORS:
            raise ValueError(
                f"unknown calibrator {name!r} (choose from {', '.join(_COMPARE_CALIBRATORS)})"
            )
    train_ds = load_dataset(args.train_path)
    test_ds = load_dataset(args.test_path)
    metric_ids = cfg.metric_ids() or list(METRICS)

    reports: dict[str, MetricReport] = {}
    uncal_report = evaluate(softmax_rows(test_ds.logits), test_ds.labels, metric_ids)
    for name in names:
        if name == "uncal":
            reports[name] = uncal_report
            continue
        apply_fn = _train_compare_calibrator(name, cfg, train_ds)
        reports[name] = evaluate(apply_fn(test_ds), test_ds.labels, metric_ids)

    rows = []
    for name in names:
        for mid in metric_ids:
            value = reports[name].values[mid]
            base = uncal_report.values[mid]
            rel = value / base if base != 0 else float("nan")
            rows.append((name, mid, value, rel))

    name_w = max(len(n) for n in names + ["calibrator"])
    mid_w = max(len(m) for m in metric_ids + ["metric"])
    print(f"{'calibrator'.ljust(name_w)}  {'metric'.ljust(mid_w)}  {'value':>14}  {'rel_to_uncal':>12}")
    for name, mid, value, rel in rows:
        print(f"{name.ljust(name_w)}  {mid.ljust(mid_w)}  {value:14.8f}  {rel:12.6f}")

    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["calibrator", "metric", "value", "rel_to_uncal"])
            for name, mid, value, rel in rows:
                writer.writerow([name, mid, repr(value), repr(rel)])
        print(f"wrote {args.out}")
    return 0


def read_compare_csv(path: str | Path) -> list[tuple[str, str, float, float]]:
    """Parse the CSV written by ``compare`` back into rows."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["calibrator", "metric", "value", "rel_to_uncal"]:
            raise ValueError(f"{path}: not a compare CSV")
        return [(name, mid, float(v), float(r)) for name, mid, v, r in reader]


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "train": cmd_train,
        "eval": cmd_eval,
        "diagram": cmd_diagram,
        "compare": cmd_compare,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
