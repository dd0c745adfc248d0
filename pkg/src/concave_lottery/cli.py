"""Command-line front end.

Subcommands: sweep, lottery, verify-bounds, mask-view, fetch-mnist. Every
CSV has a fixed header and a body that depends only on the configuration and
the seeds; wall-clock details go to a ``.meta.json`` sidecar.

Exit codes: 0 success, 1 usage error, 2 run failure, 3 bound verification failed.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import json
import logging
import os
import platform
import sys
import time
import urllib.request
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import IdxFormatError, load_idx_arrays, resize_images
from .experiments import (
    AGG_HEADER,
    BOUND_HEADER,
    BUNDLED_MNIST,
    LOTTERY_SUMMARY_HEADER,
    SWEEP_HEADER,
    BoundSettings,
    LotterySettings,
    SweepSettings,
    aggregate,
    find_mnist,
    load_mnist,
    log_beats_l1,
    parse_grid,
    run_bound_trials,
    run_lottery_experiment,
    run_sweep,
)
from .lottery import RoundFailed, RoundReport
from .models import RelaxedMask
from .regularizers import KINDS, RegularizerSpec

log = logging.getLogger("concave_lottery")

EXIT_OK, EXIT_USAGE, EXIT_RUN, EXIT_BOUNDS = 0, 1, 2, 3

MNIST_FILES = {
    "train-images-idx3-ubyte.gz": 9912422,
    "train-labels-idx1-ubyte.gz": 28881,
    "t10k-images-idx3-ubyte.gz": 1648877,
    "t10k-labels-idx1-ubyte.gz": 4542,
}
MNIST_URL = "https://ossci-datasets.s3.amazonaws.com/mnist/"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _ints(text):
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    return None if str(text).strip().lower() in ("", "none") else int(text)


def _opt_float(text):
    return None if str(text).strip().lower() in ("", "none") else float(text)


def parse_seeds(text) -> tuple:
    """'3', '0,1,2' or '0-19' (inclusive range)."""
    out = []
    for part in str(text).replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part[1:]:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    if not out:
        raise ValueError("empty seed list")
    return tuple(out)


SCHEMA = {
    "run": {"seeds": parse_seeds, "out_dir": str, "workers": int, "mnist_dir": str},
    "data": {"digits": _ints, "per_class": int, "train_per_class": int, "val_per_class": int, "side": int,
             "intercept": _bool},
    "model": {"hidden": _ints},
    "regularizer": {"kind": str, "lambda_grid": parse_grid, "epsilon": float},
    "optim": {"lr": float, "momentum": float, "weight_decay": float, "epochs": int, "batch_size": _opt_int,
              "milestones": _ints, "lr_decay": float, "mask_lr_scale": float},
    "lottery": {"rounds": int, "alpha": float, "rewind_epoch": _opt_int, "allow_regrowth": _bool,
                "hard_prune_p": _opt_float, "beta_final": float, "ablation": _bool},
    "sweep": {"methods": lambda t: tuple(v.strip() for v in t.split(",") if v.strip()), "alpha": float,
              "fit_lr": float, "fit_momentum": float, "fit_epochs": int, "fit_l2": float, "pgd_epochs": int,
              "pgd_tol": float, "train_bias": _bool},
    "bounds": {"trials": int, "d_min": int, "d_max": int, "gamma_min": float, "gamma_max": float,
               "lambda_min": float, "lambda_max": float, "grid_step": float},
}


def read_config(path) -> dict:
    """Parse a sectioned key=value file against SCHEMA; unknown sections or keys are usage errors."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise UsageError(f"{path}: unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise UsageError(f"{path}: unknown key {key!r} in [{section}]")
            try:
                out[(section, key)] = SCHEMA[section][key](raw)
            except ValueError as exc:
                raise UsageError(f"{path}: bad value for {section}.{key}: {exc}") from exc
    return out


@dataclass
class ExperimentConfig:
    """Fully resolved run plan for one subcommand."""

    kind: str
    seeds: tuple
    out_dir: Path
    workers: int
    mnist_dir: Path | None
    settings: object
    lambdas: tuple = ()
    record_golden: Path | None = None
    values: dict = field(default_factory=dict)

    def describe(self) -> dict:
        def plain(v):
            if dataclasses.is_dataclass(v):
                return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
            if isinstance(v, (tuple, list)):
                return [plain(x) for x in v]
            if isinstance(v, Path):
                return str(v)
            return v

        return {"kind": self.kind, "seeds": list(self.seeds), "lambdas": list(self.lambdas),
                "mnist_dir": plain(self.mnist_dir), "settings": plain(self.settings)}


def _flag_values(args) -> dict:
    """Map command-line flags onto SCHEMA keys; flags win over the config file."""
    v = {}
    pairs = {
        "seed": ("run", "seeds"), "out_dir": ("run", "out_dir"), "workers": ("run", "workers"),
        "mnist_dir": ("run", "mnist_dir"), "regularizer": ("regularizer", "kind"),
        "lambda_grid": ("regularizer", "lambda_grid"), "epsilon": ("regularizer", "epsilon"),
        "rounds": ("lottery", "rounds"), "rewind_epoch": ("lottery", "rewind_epoch"),
        "hard_prune_p": ("lottery", "hard_prune_p"), "trials": ("bounds", "trials"),
        "epochs": ("optim", "epochs"),
    }
    for attr, key in pairs.items():
        val = getattr(args, attr, None)
        if val is not None:
            v[key] = val
    if getattr(args, "alpha", None) is not None:
        v[("lottery", "alpha")] = v[("sweep", "alpha")] = args.alpha
    if getattr(args, "allow_regrowth", False):
        v[("lottery", "allow_regrowth")] = True
    if getattr(args, "ablation", False):
        v[("lottery", "ablation")] = True
    return v


def _pick(values, section, fields, base):
    kw = {k: values[(section, k)] for k in fields if (section, k) in values}
    return dataclasses.replace(base, **kw) if kw else base


def resolve_config(kind: str, args) -> ExperimentConfig:
    values = read_config(args.config) if getattr(args, "config", None) else {}
    values.update(_flag_values(args))
    kinds_reg = values.get(("regularizer", "kind"))
    if kinds_reg is not None and kinds_reg not in KINDS:
        raise UsageError(f"regularizer must be one of {KINDS}, got {kinds_reg!r}")
    seeds = values.get(("run", "seeds"), (0,))
    out_dir = Path(values.get(("run", "out_dir"), "out"))
    workers = values.get(("run", "workers"), 0) or os.cpu_count() or 1
    if workers < 1:
        raise UsageError("workers must be positive")
    mnist_dir = values.get(("run", "mnist_dir"))
    mnist_dir = Path(mnist_dir) if mnist_dir else None
    eps = values.get(("regularizer", "epsilon"), 0.1)
    data_keys = ("digits", "per_class", "train_per_class", "val_per_class", "side", "intercept")
    lambdas = values.get(("regularizer", "lambda_grid"))
    try:
        if kind == "sweep":
            base = SweepSettings(epsilon=eps)
            s = _pick(values, "sweep", SCHEMA["sweep"], base)
            if kinds_reg is not None and ("sweep", "methods") not in values:
                s = dataclasses.replace(s, methods=("plain", "weight-subgradient-l1", f"mask-{kinds_reg}"))
            if lambdas is not None:
                s = dataclasses.replace(s, lambdas=tuple(lambdas))
            s = dataclasses.replace(s, subset=_pick(values, "data", data_keys, s.subset))
            if any(lam < 0 for lam in s.lambdas):
                raise UsageError("lambda grid values must be nonnegative")
            lambdas = s.lambdas
        elif kind == "lottery":
            d = LotterySettings()
            kw = {k: values[("lottery", k)] for k in SCHEMA["lottery"] if ("lottery", k) in values}
            kw["subset"] = _pick(values, "data", data_keys, d.subset)
            kw["optim"] = _pick(values, "optim", SCHEMA["optim"], d.optim)
            kw["hidden"] = values.get(("model", "hidden"), d.hidden)
            kw["reg"] = RegularizerSpec(kinds_reg or d.reg.kind, d.reg.lam, eps)
            s = LotterySettings(**kw)
            lambdas = tuple(lambdas) if lambdas is not None else (s.reg.lam,)
            if any(lam < 0 for lam in lambdas):
                raise UsageError("lambda grid values must be nonnegative")
        elif kind == "verify-bounds":
            s = _pick(values, "bounds", SCHEMA["bounds"], BoundSettings(regularizer=kinds_reg or "l1", epsilon=eps))
            lambdas = tuple(lambdas) if lambdas is not None else ()
            if any(lam <= 0 for lam in lambdas):
                raise UsageError("bound verification needs positive lambda values")
        else:
            raise UsageError(f"no run plan for {kind}")
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    golden = getattr(args, "record_golden", None)
    return ExperimentConfig(kind, tuple(seeds), out_dir, int(workers), mnist_dir, s, tuple(lambdas),
                            Path(golden) if golden else None, values)


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(header, rows))
    return path


def write_meta(path: Path, cfg: ExperimentConfig | None, started: float, extra=None) -> None:
    meta = {
        "version": __version__,
        "argv": sys.argv[1:],
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "elapsed_seconds": round(time.time() - started, 3),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    if cfg is not None:
        meta["config"] = cfg.describe()
    meta.update(extra or {})
    path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, default=str) + "\n")


def save_mask(path: Path, mask: RelaxedMask) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{v:.8g}\n" for v in mask.values))


def load_mask(path) -> np.ndarray:
    text = Path(path).read_text().replace(",", " ")
    try:
        vals = np.array([float(t) for t in text.split()], dtype=np.float64)
    except ValueError as exc:
        raise UsageError(f"{path}: not a list of numbers ({exc})") from exc
    if vals.size == 0:
        raise UsageError(f"{path}: empty mask file")
    if not np.all(np.isfinite(vals)) or vals.min() < 0 or vals.max() > 1:
        raise UsageError(f"{path}: mask values must lie in [0, 1]")
    return vals


def graymap(values: np.ndarray, side: int) -> str:
    """Plain P2 graymap with maxval 255, one image row per text line."""
    values = np.asarray(values, dtype=np.float64)
    if values.size != side * side:
        raise UsageError(f"mask has {values.size} entries, side {side} needs {side * side}")
    px = np.rint(np.clip(values, 0.0, 1.0) * 255).astype(int).reshape(side, side)
    lines = ["P2", f"{side} {side}", "255"] + [" ".join(str(p) for p in row) for row in px]
    return "\n".join(lines) + "\n"


def _pool_map(fn, jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_sweep(cfg: ExperimentConfig) -> int:
    started = time.time()
    s = dataclasses.replace(cfg.settings, seeds=cfg.seeds)
    rows = run_sweep(s, cfg.mnist_dir, cfg.workers)
    out = cfg.out_dir
    path = write_csv(out / "sweep.csv", SWEEP_HEADER, [r.row() for r in rows])
    write_csv(out / "sweep_summary.csv", AGG_HEADER, aggregate(rows))
    failed = sum(r.status != "ok" for r in rows)
    table = []
    if {"plain", "mask-l1", "mask-log"} <= set(s.methods):
        for seed in s.seeds:
            win, l1, lg = log_beats_l1(rows, seed)
            table.append([str(seed), str(l1[0]), f"{l1[1]:.6f}", str(lg[0]), f"{lg[1]:.6f}", str(int(win))])
        write_csv(out / "sweep_log_vs_l1.csv",
                  ("seed", "l1_survivors", "l1_val_accuracy", "log_survivors", "log_val_accuracy", "log_wins"), table)
        wins = sum(int(t[-1]) for t in table)
        print(f"log matches or beats l1 on {wins}/{len(table)} seeds")
    for lam_row in aggregate(rows):
        print(",".join(lam_row))
    write_meta(path, cfg, started, {"failed_runs": failed})
    if cfg.record_golden:
        _write_golden(cfg.record_golden, "sweep", cfg, {
            "rows": [[r.lam, r.seed, r.method, r.nonzeros, r.val_accuracy] for r in rows],
            "log_vs_l1": [[int(t[0]), int(t[-1])] for t in table],
        })
    return EXIT_OK


def _lottery_job(args):
    settings, seed, mnist_dir = args
    return run_lottery_experiment(settings, load_mnist(mnist_dir), seed)


def cmd_lottery(cfg: ExperimentConfig) -> int:
    started = time.time()
    base: LotterySettings = cfg.settings
    jobs, tags = [], []
    for i, lam in enumerate(cfg.lambdas):
        s = dataclasses.replace(base, reg=dataclasses.replace(base.reg, lam=lam))
        for seed in cfg.seeds:
            jobs.append((s, seed, cfg.mnist_dir))
            tags.append((i, lam, seed))
    outcomes = _pool_map(_lottery_job, jobs, cfg.workers)
    out = cfg.out_dir
    summary, golden = [], []
    multi = len(cfg.lambdas) > 1
    for (i, lam, seed), oc in zip(tags, outcomes):
        suffix = f"_lam{i:02d}" if multi else ""
        for name, (res, acc) in oc.variants.items():
            write_csv(out / f"rounds_{name}_seed{seed}{suffix}.csv", RoundReport.CSV_HEADER,
                      [r.row() for r in res.reports])
            save_mask(out / f"mask_{name}_seed{seed}{suffix}.txt", res.mask)
            golden.append([lam, seed, name, res.mask.n_survivors, acc, oc.dense_accuracy])
        for row in oc.summary_rows():
            summary.append([repr(lam)] + row)
            print(f"lambda={lam:g} seed={row[0]} variant={row[1]} survivors={row[3]} sparsity={row[4]} "
                  f"ticket={row[5]} dense={row[6]}")
    path = write_csv(out / "lottery_summary.csv", ("lambda",) + LOTTERY_SUMMARY_HEADER, summary)
    write_meta(path, cfg, started)
    if cfg.record_golden:
        _write_golden(cfg.record_golden, "lottery", cfg, {"rows": golden})
    return EXIT_OK


def cmd_verify_bounds(cfg: ExperimentConfig) -> int:
    started = time.time()
    s: BoundSettings = cfg.settings
    rows, failures, reduced_viol, reduced_n, recovery_n = [], 0, 0, 0, 0
    for seed in cfg.seeds:
        if cfg.lambdas:
            results = []
            per = -(-s.trials // len(cfg.lambdas))
            for j, lam in enumerate(cfg.lambdas):
                sub = dataclasses.replace(s, trials=per, lambda_min=lam, lambda_max=lam)
                results += [(j * per + t, d, c) for t, d, c in run_bound_trials(sub, seed * 1000 + j)][: s.trials - j * per]
        else:
            results = run_bound_trials(s, seed)
        for trial, d, c in results:
            rows.append([str(seed), str(trial), str(d)] + c.row())
            failures += (not c.bound_holds) + (c.recovery_holds is False)
            if c.reduced_holds is not None:
                reduced_n += 1
                reduced_viol += not c.reduced_holds
            recovery_n += c.recovery_applicable
    path = write_csv(cfg.out_dir / "bounds.csv", ("seed",) + BOUND_HEADER, rows)
    verdict = "PASS" if failures == 0 else "FAIL"
    print(f"{verdict}: {len(rows)} instances, {failures} bound or recovery failures, "
          f"exact recovery applicable on {recovery_n}")
    if reduced_n:
        print(f"reduced bound violated on {reduced_viol}/{reduced_n} instances (reported, not enforced)")
    write_meta(path, cfg, started, {"failures": failures, "reduced_bound_violations": reduced_viol})
    if cfg.record_golden:
        _write_golden(cfg.record_golden, "verify-bounds", cfg,
                      {"instances": len(rows), "failures": failures, "reduced_bound_violations": reduced_viol,
                       "recovery_applicable": recovery_n})
    return EXIT_OK if failures == 0 else EXIT_BOUNDS


def cmd_mask_view(args) -> int:
    vals = load_mask(args.mask)
    side = args.side or int(round(np.sqrt(vals.size)))
    if args.overlay is not None:
        images, _ = load_idx_arrays(*find_mnist(args.mnist_dir or BUNDLED_MNIST))
        if not 0 <= args.overlay < images.shape[0]:
            raise UsageError(f"overlay index {args.overlay} outside 0..{images.shape[0] - 1}")
        img = resize_images(images[args.overlay][None] / 255.0, side)[0].ravel()
        if img.size != vals.size:
            raise UsageError(f"mask has {vals.size} entries, side {side} needs {side * side}")
        vals = vals * img
    else:
        vals = (vals > 0).astype(np.float64)
    text = graymap(vals, side)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def fetch_mnist(base_url: str, dest, files=None) -> list[Path]:
    """Download the IDX archives and check each against its published byte size."""
    files = MNIST_FILES if files is None else files
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    got = []
    for name, size in files.items():
        target = dest / name
        if target.exists() and target.stat().st_size == size:
            log.info("%s already present", name)
            got.append(target)
            continue
        url = base_url.rstrip("/") + "/" + name
        log.info("downloading %s", url)
        with urllib.request.urlopen(url, timeout=60) as resp:
            blob = resp.read()
        if len(blob) != size:
            raise OSError(f"{name}: received {len(blob)} bytes, published size is {size}")
        tmp = target.with_suffix(".part")
        tmp.write_bytes(blob)
        tmp.replace(target)
        got.append(target)
    return got


def _write_golden(path: Path, kind: str, cfg: ExperimentConfig, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    data = json.loads(path.read_text()) if path.exists() else {}
    data[kind] = {"config": cfg.describe(), **payload}
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
    log.info("recorded golden values for %s in %s", kind, path)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="concave-lottery", description="Relaxed-mask training with concave sparsity penalties.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, regularizer=True):
        sp.add_argument("--config", help="sectioned key=value file; flags override it")
        sp.add_argument("--seed", type=parse_seeds, help="seed, list '0,1,2' or range '0-19'")
        sp.add_argument("--out-dir", dest="out_dir")
        sp.add_argument("--lambda-grid", dest="lambda_grid", type=parse_grid,
                        help="comma list or geom:START:STOP:COUNT")
        if regularizer:
            sp.add_argument("--regularizer", choices=KINDS)
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--workers", type=int, help="process pool size (default: all cores)")
        sp.add_argument("--record-golden", dest="record_golden", help="write key results to this JSON file")

    sw = sub.add_parser("sweep", help="accuracy and sparsity against lambda on two-digit MNIST")
    common(sw)
    sw.add_argument("--alpha", type=float)
    sw.add_argument("--mnist-dir", dest="mnist_dir")

    lo = sub.add_parser("lottery", help="rounds of rewind, train and prune on a small MLP")
    common(lo)
    lo.add_argument("--alpha", type=float)
    lo.add_argument("--rounds", type=int)
    lo.add_argument("--epochs", type=int)
    lo.add_argument("--rewind-epoch", dest="rewind_epoch", type=int)
    lo.add_argument("--allow-regrowth", dest="allow_regrowth", action="store_true")
    lo.add_argument("--hard-prune-p", dest="hard_prune_p", type=float)
    lo.add_argument("--ablation", action="store_true",
                    help="also run hard, sigmoid and magnitude pruning at the matched per-round fraction")
    lo.add_argument("--mnist-dir", dest="mnist_dir")

    vb = sub.add_parser("verify-bounds", help="certify the error bounds on random planted instances")
    common(vb)
    vb.add_argument("--trials", type=int)

    mv = sub.add_parser("mask-view", help="render a mask file as a plain graymap")
    mv.add_argument("mask")
    mv.add_argument("--side", type=int)
    mv.add_argument("--overlay", type=int, metavar="INDEX", help="multiply by this MNIST image")
    mv.add_argument("--mnist-dir", dest="mnist_dir")
    mv.add_argument("-o", "--output")

    fm = sub.add_parser("fetch-mnist", help="download MNIST and verify the published file sizes")
    fm.add_argument("--base-url", default=MNIST_URL)
    fm.add_argument("--dest", default="data/mnist")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "mask-view":
            return cmd_mask_view(args)
        if args.command == "fetch-mnist":
            for path in fetch_mnist(args.base_url, args.dest):
                print(path)
            return EXIT_OK
        cfg = resolve_config(args.command, args)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "lottery":
            return cmd_lottery(cfg)
        return cmd_verify_bounds(cfg)
    except UsageError as exc:
        print(f"concave-lottery: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, IdxFormatError, RoundFailed, FloatingPointError, ValueError) as exc:
        print(f"concave-lottery: run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
