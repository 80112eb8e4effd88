"""Command-line entry point: ``ncgmm {gen-data,train,eval,run-all}``.

Exit codes: 0 success, 2 user/config error, 3 IO error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, evaluation, kernels
from . import policy as pol
from . import scenarios as sc
from ._io import atomic_write, fmt
from .config import Config, load_config
from .errors import ConfigError, DataFileError, NumericalError, ShapeError
from .trainer import save_history, train

log = logging.getLogger("ncgmm")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

TRAIN_FILE = "train.csv"
DEV_FILE = "dev.csv"
DATA_META = "data_meta.json"
CHECKPOINT = "policy.ckpt"
HISTORY = "history.csv"
TRAJ_CSV = "trajectory.csv"
TRAJ_SVG = "trajectory.svg"

# spawn key reserved for evaluation draws; 0 and 1 are the train/dev streams
_EVAL_STREAM = 2


class UsageError(Exception):
    """Bad flag or incompatible inputs (exit 2)."""


def resolve_seed(flag, cfg: Config) -> int:
    """``--seed`` wins, then ``NCGMM_SEED``, then the config file."""
    if flag is not None:
        seed = flag
    else:
        env = os.environ.get("NCGMM_SEED", "").strip()
        if env:
            try:
                seed = int(env)
            except ValueError:
                raise UsageError(f"NCGMM_SEED: expected an integer, got {env!r}") from None
        else:
            seed = cfg.seed
    if seed < 0:
        raise UsageError(f"seed must be >= 0, got {seed}")
    return seed


def _setup(args):
    cfg = load_config(args.config)
    seed = resolve_seed(getattr(args, "seed", None), cfg)
    threads = getattr(args, "threads", 1)
    if threads < 1:
        raise UsageError(f"--threads must be >= 1, got {threads}")
    return cfg.with_seed(seed)


def _backend(args):
    name = getattr(args, "backend", "auto")
    if name == "auto":
        return None
    if name not in kernels.available_backends():
        raise UsageError(f"--backend {name}: not available (have {', '.join(kernels.available_backends())})")
    return name


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------ commands ----

def do_gen_data(cfg: Config, out: Path) -> tuple:
    model = cfg.model()
    train_set, dev_set = sc.generate(cfg.scenarios, cfg.seed, model.nx, model.ny, model.nd)
    sc.save(train_set, out / TRAIN_FILE)
    sc.save(dev_set, out / DEV_FILE)
    meta = {"seed": cfg.seed, "N": train_set.N, "n_train": len(train_set), "n_dev": len(dev_set),
            "nx": model.nx, "ny": model.ny, "nd": model.nd, "format": sc.FORMAT_TAG}
    atomic_write(out / DATA_META, json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(train_set)} train / {len(dev_set)} dev scenarios (N={train_set.N}) to {out}")
    return train_set, dev_set


def _check_dataset(ds, model, path):
    if len(ds) == 0:
        raise UsageError(f"{path}: dataset is empty")
    if ds.dims != (model.nx, model.ny, model.nd):
        raise ShapeError(f"{path}: dataset dims (nx, ny, nd)={ds.dims} do not match the plant "
                         f"({model.nx}, {model.ny}, {model.nd})")


def do_train(cfg: Config, data_dir: Path, out: Path, threads=1, backend=None, train_set=None, dev_set=None):
    model = cfg.model()
    if train_set is None:
        train_set = sc.load(data_dir / TRAIN_FILE)
        dev_set = sc.load(data_dir / DEV_FILE)
    _check_dataset(train_set, model, data_dir / TRAIN_FILE)
    _check_dataset(dev_set, model, data_dir / DEV_FILE)
    if train_set.N != dev_set.N:
        raise ShapeError(f"train N={train_set.N} and dev N={dev_set.N} differ")
    p = cfg.policy
    policy = pol.init_policy(cfg.seed, 3 * model.ny + model.nd, p.hidden, p.depth, model.nu,
                             model.u_min, model.u_max)

    def progress(rec):
        log.info("epoch %3d  train %.6g  dev %.6g", rec.epoch, rec.train_loss, rec.dev_loss)

    ckpt, history = train(model, policy, train_set, dev_set, cfg.train_config(), threads=threads,
                          backend=backend, progress=progress)
    pol.save_checkpoint(ckpt, out / CHECKPOINT)
    save_history(history, out / HISTORY)
    dev = ckpt.meta.get("dev_loss")
    print(f"final dev loss: {fmt(dev) if dev is not None else 'n/a'} "
          f"(best epoch {ckpt.meta.get('epoch')}, {len(history)} epochs, {history.stop_reason})")
    return ckpt, history


def _load_compatible(path, cfg: Config, model):
    p = cfg.policy
    shapes = pol.expected_shapes(3 * model.ny + model.nd, p.hidden, p.depth, model.nu)
    try:
        ckpt = pol.load_checkpoint(path, expect_shapes=shapes)
    except (DataFileError, OSError) as exc:
        raise UsageError(f"{path}: unusable checkpoint ({exc})") from None
    q = ckpt.policy
    if not (np.array_equal(q.u_min, model.u_min) and np.array_equal(q.u_max, model.u_max)):
        raise UsageError(f"{path}: checkpoint control bounds [{q.u_min}, {q.u_max}] differ from the plant's "
                         f"[{model.u_min}, {model.u_max}]")
    return ckpt


def do_eval(cfg: Config, checkpoint: Path, out: Path, steps=None, scenarios=None, transient=None,
            band_dwell=None, policy=None):
    model = cfg.model()
    ec = cfg.eval
    steps = ec.steps if steps is None else steps
    runs = ec.scenarios if scenarios is None else scenarios
    transient = ec.transient if transient is None else transient
    band_dwell = ec.band_dwell if band_dwell is None else band_dwell
    if steps < 1 or runs < 1 or band_dwell < 1 or transient < 0:
        raise UsageError("--steps, --scenarios and --band-dwell must be >= 1, --transient >= 0")
    if policy is None:
        policy = _load_compatible(checkpoint, cfg, model).policy
    # with fewer steps than the transient, score everything
    scored = transient if steps > transient else 0
    root = np.random.SeedSequence(cfg.seed, spawn_key=(_EVAL_STREAM,))
    seeds = [root] if runs == 1 else root.spawn(runs)
    results = []
    first = None
    for i, s in enumerate(seeds):
        traj = evaluation.simulate(model, policy, steps, s, band_dwell, cfg.scenarios)
        if first is None:
            first = traj
        results.append(evaluation.metrics(traj, scored, model.u_min, model.u_max))
    m = evaluation.aggregate(results) if runs > 1 else results[0]
    evaluation.export_csv(first, out / TRAJ_CSV)
    evaluation.render_svg(first, out / TRAJ_SVG)
    extra = {"seed": cfg.seed, "scenarios": runs, "band_dwell": band_dwell, "steps_per_run": steps}
    if runs > 1:
        extra["per_run_time_in_band"] = [r.time_in_band_fraction for r in results]
    evaluation.write_metrics(m, out, extra)
    sys.stdout.write(m.as_text())
    return m, first


# ------------------------------------------------------------- parser ----

def _common(p, seed=True, threads=False):
    p.add_argument("--config", type=Path, default=None,
                   help="TOML config file (default: built-in defaults)")
    p.add_argument("--out", type=Path, required=True, help="output directory (created if missing)")
    if seed:
        p.add_argument("--seed", type=int, default=None,
                       help="global seed; overrides NCGMM_SEED and the config file")
    if threads:
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for batch rollouts (results do not depend on it; default 1)")
        p.add_argument("--backend", choices=["auto", "compiled", "python"], default="auto",
                       help="loss/gradient kernel (default: compiled if built)")


def _eval_flags(p):
    p.add_argument("--steps", type=int, default=None, help="simulation length (default from config: 3000)")
    p.add_argument("--scenarios", type=int, default=None,
                   help="number of independent runs; metrics are averaged (default 1)")
    p.add_argument("--transient", type=int, default=None, help="steps excluded from scoring (default 200)")
    p.add_argument("--band-dwell", type=int, default=None, help="steps between band redraws (default 500)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ncgmm", description="Train and evaluate a neural glucose control policy "
                                 "by differentiating through a closed-loop plant model.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-data", help="generate train/dev scenario files",
                       description=f"Write {TRAIN_FILE}, {DEV_FILE} and {DATA_META} to --out.")
    _common(p)

    p = sub.add_parser("train", help="train a policy on generated data",
                       description=f"Write {CHECKPOINT} (best dev epoch) and {HISTORY} to --out.")
    _common(p, threads=True)
    p.add_argument("--data", type=Path, required=True, help="directory written by gen-data")

    p = sub.add_parser("eval", help="simulate a trained policy and export the trajectory",
                       description=f"Write {TRAJ_CSV}, {TRAJ_SVG}, metrics.txt and metrics.json to --out.")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="policy checkpoint from train")
    _eval_flags(p)

    p = sub.add_parser("run-all", help="gen-data, train and eval into one directory",
                       description="Run the full pipeline with one seed; all artifacts land in --out.")
    _common(p, threads=True)
    _eval_flags(p)
    return ap


def _run(args) -> int:
    cfg = _setup(args)
    out = _outdir(args.out)
    if args.command == "gen-data":
        do_gen_data(cfg, out)
    elif args.command == "train":
        do_train(cfg, args.data, out, args.threads, _backend(args))
    elif args.command == "eval":
        do_eval(cfg, args.checkpoint, out, args.steps, args.scenarios, args.transient, args.band_dwell)
    elif args.command == "run-all":
        backend = _backend(args)
        train_set, dev_set = do_gen_data(cfg, out)
        ckpt, _ = do_train(cfg, out, out, args.threads, backend, train_set, dev_set)
        do_eval(cfg, out / CHECKPOINT, out, args.steps, args.scenarios, args.transient, args.band_dwell,
                policy=ckpt.policy)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return _run(args)
    except (UsageError, ConfigError, ShapeError) as exc:
        print(f"ncgmm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"ncgmm: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFileError, OSError) as exc:
        print(f"ncgmm: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"ncgmm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
