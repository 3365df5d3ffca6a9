"""Command-line interface: ``gen-data``, ``train``, ``sweep``, ``analyze``.

Exit codes: 0 success, 1 usage or configuration problem, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import ast
import csv
import io
import itertools
import math
import shutil
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from bamlab.auxvar import dump_aux_csv
from bamlab.config import KEYS, ConfigError, RunConfig, load_config, parse_pairs
from bamlab.data import CSVFormatError, SplitDataset, load_csv, make_dataset, save_csv
from bamlab.metrics import spearman
from bamlab.model import save_checkpoint
from bamlab.numkit import InvalidInputError, NumericError
from bamlab.pipeline import StageError, records_csv, run_bam, run_experiment

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
DEFAULT_MAX_POINTS = 1000
AGGREGATE_COLUMNS = ["lambda", "T", "mu", "mode", "seed", "selected_epoch",
                     "worst_group_test_acc", "avg_test_acc"]


class UsageError(Exception):
    """Bad arguments, config or input files (exit 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _load_data(path) -> SplitDataset:
    if path is None:
        raise UsageError("--data is required")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return load_csv(path)
    except (CSVFormatError, FileNotFoundError, InvalidInputError) as exc:
        raise UsageError(f"cannot read data: {exc}") from None


def _apply_overrides(run: RunConfig, args) -> RunConfig:
    changes = {}
    if getattr(args, "criterion", None):
        changes["criterion"] = args.criterion
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    return run.replace(**changes) if changes else run


# ---------------------------------------------------------------------------
# gen-data

def cmd_gen_data(args) -> int:
    exp = load_config(args.config)
    out = Path(args.out)
    _prepare_out(out, args.force)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ds = make_dataset(exp.data, exp.fractions)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    save_csv(ds, out)
    (out / "config.txt").write_text(exp.dumps())
    print(f"wrote {len(ds.train)}/{len(ds.validation)}/{len(ds.test)} examples to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

def write_run(art, ds: SplitDataset, out: Path, dump_aux: bool) -> None:
    s = art.summary
    (out / "summary.txt").write_text(s.dumps())
    (out / "epochs.csv").write_text(records_csv(s.records))
    save_checkpoint(art.biased_model, out / "stage1.ckpt")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "example_index"])
    for i in art.error_set.indices:
        w.writerow([int(i), int(ds.train.index[i])])
    (out / "error_set.csv").write_text(buf.getvalue())
    if dump_aux and art.aux is not None:
        dump_aux_csv(art.aux, ds.train, out / "aux.csv")


def cmd_train(args) -> int:
    exp = load_config(args.config)
    run = _apply_overrides(exp.run, args)
    ds = _load_data(args.data)
    out = Path(args.out)
    _prepare_out(out, args.force)
    art = run_bam(run, ds)
    write_run(art, ds, out, args.aux)
    for flag in art.summary.flags:
        print(f"note: {flag}", file=sys.stderr)
    print(f"selected epoch {art.summary.selected_epoch}: worst-group test accuracy "
          f"{art.summary.test_worst_group_accuracy:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep

@dataclass
class SweepSpec:
    base: Path
    grid: dict[str, list]
    seeds: list[int]
    max_points: int = DEFAULT_MAX_POINTS

    def points(self) -> list[dict]:
        keys = list(self.grid)
        return [dict(zip(keys, combo), seed=seed)
                for combo in itertools.product(*self.grid.values()) for seed in self.seeds]


def load_sweep(path) -> SweepSpec:
    p = Path(path)
    pairs = parse_pairs(p.read_text(), str(p))
    if pairs.pop("config_version", None) != "1":
        raise ConfigError(f"{p}: missing or unsupported config_version")
    if "base_config" not in pairs:
        raise ConfigError(f"{p}: missing required key 'base_config'")
    base = (p.parent / pairs.pop("base_config")).resolve()
    seeds = [int(v) for v in pairs.pop("seeds", "0").split(",") if v.strip()]
    cap = int(pairs.pop("max_points", DEFAULT_MAX_POINTS))
    grid = {}
    for key, value in pairs.items():
        name = key[5:] if key.startswith("grid.") else None
        if name is None or name not in KEYS or KEYS[name][0] != "run":
            raise ConfigError(f"{p}: unknown sweep key {key!r}")
        parse = KEYS[name][2]
        try:
            # ';' separates values whose own syntax uses commas (hidden_dims)
            sep = ";" if ";" in value or name == "hidden_dims" else ","
            grid[name] = [parse(v.strip()) for v in value.split(sep) if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"{p}: bad value for {key!r}: {exc}") from None
    if not seeds:
        raise ConfigError(f"{p}: empty seed list")
    return SweepSpec(base, grid, seeds, cap)


def point_name(point: dict) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return "-".join(str(x) for x in v)
        return f"{v:g}" if isinstance(v, float) else str(v)
    return "_".join(f"{k}={fmt(v)}" for k, v in point.items())


def _point_config(base: RunConfig, point: dict) -> RunConfig:
    return base.replace(**{KEYS[k][1] if k in KEYS else k: v for k, v in point.items()})


def _run_point(run: RunConfig, data_dir: str, out: str) -> Optional[str]:
    """Worker: run one grid point and write its summary. Returns an error message or None."""
    try:
        ds = _load_data(data_dir)
        summary = run_experiment(run, ds)
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        (d / "epochs.csv").write_text(records_csv(summary.records))
        # summary last: its presence marks the point as complete
        (d / "summary.txt").write_text(summary.dumps())
        return None
    except Exception as exc:  # recorded per point; the sweep goes on
        return f"{type(exc).__name__}: {exc}"


def cmd_sweep(args) -> int:
    spec = load_sweep(args.config)
    base = _apply_overrides(load_config(spec.base).run, args)
    points = spec.points()
    print(f"sweep: {len(points)} runs ({len(points) // len(spec.seeds)} grid points x "
          f"{len(spec.seeds)} seeds)", file=sys.stderr)
    if len(points) > spec.max_points:
        raise UsageError(f"sweep has {len(points)} runs, above max_points={spec.max_points}")
    _load_data(args.data)  # fail fast on unreadable data
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    todo, runs = [], []
    for point in points:
        run = _point_config(base, point)
        d = out / "runs" / point_name(point)
        runs.append((run, d))
        if args.force or not (d / "summary.txt").exists():
            todo.append((run, d))
    print(f"sweep: {len(points) - len(todo)} already done, {len(todo)} to run", file=sys.stderr)
    if args.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            errors = list(pool.map(_run_point, [r for r, _ in todo],
                                   [str(args.data)] * len(todo), [str(d) for _, d in todo]))
    else:
        errors = [_run_point(r, str(args.data), str(d)) for r, d in todo]
    failed = {str(d): e for (_, d), e in zip(todo, errors) if e is not None}
    for d, e in failed.items():
        (Path(d)).mkdir(parents=True, exist_ok=True)
        (Path(d) / "error.txt").write_text(e + "\n")
        print(f"failed: {d}: {e}", file=sys.stderr)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGGREGATE_COLUMNS)
    for run, d in runs:
        if str(d) in failed or not (d / "summary.txt").exists():
            continue
        head = read_summary(d / "summary.txt")
        w.writerow([repr(float(run.lam)), run.T, run.mu, run.mode, run.seed,
                    head["selected_epoch"], repr(head["test_worst_group_accuracy"]),
                    repr(head["test_average_accuracy"])])
    (out / "aggregate.csv").write_text(buf.getvalue())
    return EXIT_RUNTIME if failed else EXIT_OK


# ---------------------------------------------------------------------------
# analyze

def read_summary(path) -> dict:
    """Values from the ``[summary]`` and ``[config]`` sections of summary.txt."""
    out, section = {}, None
    for line in Path(path).read_text().splitlines():
        if line.startswith("["):
            section = line.strip("[]")
            if section == "epochs":
                break
            continue
        key, _, value = line.partition(" = ")
        if section == "config" or key not in ("criterion", "flags"):
            try:
                out[key] = ast.literal_eval(value)
                continue
            except (ValueError, SyntaxError):
                pass
        out[key] = value
    return out


def _read_epochs(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def analyze_classdiff(run_dirs: list[Path], out: Path) -> None:
    bad = [str(d) for d in run_dirs if not (d / "epochs.csv").exists()]
    if bad:
        raise UsageError("runs without epochs.csv: " + ", ".join(bad))
    pairs = io.StringIO()
    pw = csv.writer(pairs, lineterminator="\n")
    pw.writerow(["run", "epoch", "class_diff", "worst_group_val_acc"])
    coef = io.StringIO()
    cw = csv.writer(coef, lineterminator="\n")
    cw.writerow(["run", "n_epochs", "spearman"])
    missing = []
    for d in run_dirs:
        rows = [r for r in _read_epochs(d / "epochs.csv") if r["split"] == "validation"]
        trained = [r for r in rows if int(r["epoch"]) > 0] or rows
        if any(r["worst_group_acc"] == "" for r in trained):
            missing.append(str(d))
            continue
        cd = [float(r["class_diff"]) for r in trained]
        wg = [float(r["worst_group_acc"]) for r in trained]
        for r, a, b in zip(trained, cd, wg):
            pw.writerow([d.name, r["epoch"], repr(a), repr(b)])
        rho = spearman(cd, wg) if len(cd) >= 3 else float("nan")
        cw.writerow([d.name, len(cd), repr(rho)])
    if missing:
        raise UsageError("runs without group-annotated validation records: " + ", ".join(missing))
    (out / "classdiff_pairs.csv").write_text(pairs.getvalue())
    (out / "classdiff_spearman.csv").write_text(coef.getvalue())


def analyze_aux(run_dirs: list[Path], out: Path) -> None:
    bad = [str(d) for d in run_dirs if not (d / "aux.csv").exists()]
    if bad:
        raise UsageError("runs without aux.csv (train with --aux): " + ", ".join(bad))
    headers = {}
    for d in run_dirs:
        with open(d / "aux.csv", newline="") as fh:
            headers[str(d)] = next(csv.reader(fh))
    if len({tuple(h) for h in headers.values()}) > 1:
        raise UsageError("aux tables disagree on class count: " + ", ".join(headers))
    for d in run_dirs:
        with open(d / "aux.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["example_index", "group"] + rows[0][2:])
        w.writerows(rows[1:])
        (out / f"aux_{d.name}.csv").write_text(buf.getvalue())


def analyze_ablation(run_dirs: list[Path], out: Path) -> None:
    bad = [str(d) for d in run_dirs if not (d / "summary.txt").exists()]
    if bad:
        raise UsageError("runs without summary.txt: " + ", ".join(bad))
    cells: dict[tuple[int, str], dict[int, float]] = {}
    for d in run_dirs:
        s = read_summary(d / "summary.txt")
        cells.setdefault((s["T"], s["mode"]), {})[s["seed"]] = s["test_worst_group_accuracy"]
    ts = sorted({t for t, _ in cells})
    modes = sorted({m for _, m in cells})
    problems = []
    for t in ts:
        seeds = {m: set(cells.get((t, m), {})) for m in modes}
        if len(modes) < 2 or len({frozenset(v) for v in seeds.values()}) != 1:
            problems.append(f"T={t}: seeds per mode {({m: sorted(v) for m, v in seeds.items()})}")
    if problems:
        raise UsageError("ablation needs both modes with matching seeds; " + "; ".join(problems))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["T", "mode", "n_seeds", "mean_worst_group_test_acc", "sd_worst_group_test_acc"])
    for t in ts:
        for m in modes:
            v = np.array([cells[(t, m)][k] for k in sorted(cells[(t, m)])])
            sd = float(np.std(v, ddof=1)) if len(v) > 1 else math.nan
            w.writerow([t, m, len(v), repr(float(np.mean(v))), repr(sd)])
    (out / "ablation.csv").write_text(buf.getvalue())


ANALYSES = {"classdiff": analyze_classdiff, "aux": analyze_aux, "ablation": analyze_ablation}


def cmd_analyze(args) -> int:
    run_dirs = [Path(d) for d in args.runs]
    missing = [str(d) for d in run_dirs if not d.is_dir()]
    if missing:
        raise UsageError("not a run directory: " + ", ".join(missing))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ANALYSES[args.kind](run_dirs, out)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bamlab", description="Bias-amplification training lab")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", required=True)
        if data:
            sp.add_argument("--data")
        sp.add_argument("--out", required=True)
        sp.add_argument("--force", action="store_true")

    def overrides(sp):
        sp.add_argument("--criterion", choices=["worst-group-val", "class-diff"])
        sp.add_argument("--mode", choices=["one-m", "two-m"])

    g = sub.add_parser("gen-data", help="generate a synthetic dataset as split CSVs")
    common(g, data=False)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one two-stage experiment")
    common(t)
    overrides(t)
    t.add_argument("--aux", action="store_true", help="also write the Stage-1 aux bank")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run a grid of experiments")
    common(s)
    overrides(s)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analyze", help="extract plot data from run directories")
    a.add_argument("kind", choices=sorted(ANALYSES))
    a.add_argument("runs", nargs="+")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StageError, NumericError, InvalidInputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
