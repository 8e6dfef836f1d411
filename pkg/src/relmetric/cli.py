"""``relmetric`` command line: dataset generation, training, retrieval, pose generalization, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every run writes
``run_config.txt`` with the resolved options next to its outputs; the output
directory itself is left out so repeated runs into different directories
produce identical files.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import CLASSES, generate_dataset, make_splits, read_dataset, write_dataset
from .errors import ConfigError, OptimizationAborted, RelMetricError, TrainingAborted
from .evaluation import cross_validate, knn_retrieval
from .geometry import read_scene, write_scene
from .network import PRESETS, ArchitectureConfig, NetworkParams, embed_many
from .tensor import LrSchedule
from .tensor import checkpoint

log = logging.getLogger("relmetric")

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


# -- config resolution ---------------------------------------------------------

GLOBAL_DEFAULTS = {"seed": 0, "preset": "desk"}

SUBCOMMAND_DEFAULTS = {
    "gen-data": {"scenes": None, "classes": ",".join(CLASSES), "splits": 5, "test_fraction": 0.2,
                 "points": 256},
    "train": {"data": None, "split": None, "iters": None, "lr": None, "batch": None,
              "pool_per_class": None, "dropout": None, "overfit_one_batch": False, "log_every": 0},
    "retrieve": {"data": None, "checkpoint": None, "embeddings": None, "split": 0, "k": 5,
                 "cross_validate": None, "iters": None, "no_exclude_self": False},
    "generalize": {"checkpoint": None, "reference": None, "test": None, "steps": 300, "lr": 0.1,
                   "kernel": 5, "threshold": 1e-3, "dump_pgm": False},
    "gradcheck": {"instances": 20, "inject_fault": None},
}

REQUIRED = {
    "gen-data": ("scenes",),
    "train": ("data",),
    "retrieve": ("data",),
    "generalize": ("checkpoint", "reference", "test"),
    "gradcheck": (),
}


def read_config_file(path):
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


NONE_DEFAULT_TYPES = {"scenes": int, "split": int, "iters": int, "lr": float, "batch": int,
                      "pool_per_class": int, "dropout": float, "cross_validate": int}


def _coerce(key, value, default):
    if not isinstance(value, str):
        return value
    if default is None:
        cast = NONE_DEFAULT_TYPES.get(key, str)
        try:
            return cast(value)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {value!r}") from exc
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean for {key}, got {value!r}")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {value!r}") from exc
    return value


def resolve(args):
    """Merge defaults, the config file and explicit flags (flags win)."""
    defaults = dict(GLOBAL_DEFAULTS, **SUBCOMMAND_DEFAULTS[args.command])
    resolved = dict(defaults)
    if args.config:
        try:
            from_file = read_config_file(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        unknown = sorted(set(from_file) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        for k, v in from_file.items():
            resolved[k] = _coerce(k, v, defaults[k])
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None and v is not False:
            resolved[k] = v
    if resolved["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {resolved['preset']!r}")
    missing = [k for k in REQUIRED[args.command] if resolved.get(k) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s): "
                         + ", ".join("--" + m.replace("_", "-") for m in missing))
    return resolved


def effective_config(command, resolved):
    """Fill options left to the preset with the values the run will use."""
    out = dict(resolved)
    if command in ("train", "retrieve"):
        cfg = _train_config(resolved)
        out.update(iters=cfg.iterations, lr=cfg.schedule.initial_lr, lr_period=cfg.schedule.period,
                   lr_period_multiplier=cfg.schedule.period_multiplier, momentum=cfg.momentum,
                   noise_t=cfg.noise_t, noise_deg=cfg.noise_deg)
        if command == "train":
            out.update(batch=cfg.batch_triplets, pool_per_class=cfg.pool_per_class, dropout=cfg.dropout)
    if command in ("gen-data", "train", "retrieve"):
        arch = PRESETS[resolved["preset"]]
        out.update({f"arch_{k}": v for k, v in arch.to_dict().items()})
    return out


def write_run_config(out_dir, command, resolved):
    resolved = effective_config(command, resolved)
    lines = [f"command={command}", f"version={__version__}"]
    lines += [f"{k}={resolved[k]}" for k in sorted(resolved)]
    (out_dir / "run_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- helpers -------------------------------------------------------------------

def _train_config(resolved):
    from .training import TRAIN_PRESETS, with_overrides
    base = TRAIN_PRESETS[resolved["preset"]]
    schedule = base.schedule
    if resolved.get("lr") is not None:
        schedule = LrSchedule(float(resolved["lr"]), schedule.period, schedule.period_multiplier)
    return with_overrides(base, iterations=resolved.get("iters"), batch_triplets=resolved.get("batch"),
                          pool_per_class=resolved.get("pool_per_class"),
                          dropout=resolved.get("dropout"), seed=resolved["seed"], schedule=schedule)


def load_checkpoint(path):
    arrays, opt, meta = checkpoint.load(path)
    try:
        arch = ArchitectureConfig.from_dict(meta)
    except (KeyError, ValueError) as exc:
        raise RelMetricError(f"{path}: checkpoint metadata lacks an architecture ({exc})") from exc
    return NetworkParams.from_arrays(arch, arrays), opt, meta


def save_checkpoint(path, params, state=None, extra=None):
    meta = dict(params.config.to_dict())
    meta.update(extra or {})
    opt = {}
    if state is not None and state.velocity:
        opt = {f"velocity.{name}": v for name, v in zip(params.tensors, state.velocity)}
    checkpoint.save(path, params.arrays(), opt, meta)


def read_embeddings_csv(path):
    """``scene_id,e0,e1,...`` rows (header optional) -> dict."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0] == "scene_id":
                continue
            out[row[0]] = np.array([float(v) for v in row[1:]])
    return out


def write_embeddings_csv(path, ids, emb):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene_id"] + [f"e{i}" for i in range(emb.shape[1])])
        for sid, row in zip(ids, emb):
            w.writerow([sid] + [repr(float(v)) for v in row])


def _write_retrieval_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "acc3of5", "acc5of5", "n_evaluated", "excluded"])
        for i, r in rows:
            w.writerow([i, repr(r.acc_3of5), repr(r.acc_5of5), r.n_evaluated, " ".join(r.excluded)])


# -- subcommands -----------------------------------------------------------------

def cmd_gen_data(resolved, out_dir):
    classes = tuple(c for c in resolved["classes"].split(",") if c)
    if resolved["scenes"] < 10 * len(classes):
        raise UsageError(f"--scenes must be at least {10 * len(classes)} for {len(classes)} classes")
    from .dataset import default_templates
    templates = default_templates(n_points=resolved["points"], seed=resolved["seed"])
    scenes, labels = generate_dataset(resolved["scenes"], classes, templates, seed=resolved["seed"])
    splits = make_splits(labels, resolved["splits"], resolved["test_fraction"], seed=0) \
        if resolved["splits"] > 0 else []
    info = {"scenes": len(scenes), "classes": ",".join(classes), "seed": resolved["seed"],
            "resolution": PRESETS[resolved["preset"]].resolution, "points": resolved["points"]}
    write_dataset(out_dir, scenes, labels, splits, info)
    for c in classes:
        print(f"{c}: {sum(t == c for t in labels.tags)}")
    print(f"wrote {len(scenes)} scenes to {out_dir}")
    return 0


def cmd_train(resolved, out_dir):
    from .plotting import plot_loss_curve
    from .training import train
    ds = read_dataset(resolved["data"])
    scenes, labels = ds.scenes, ds.labels
    if resolved["split"] is not None:
        split = ds.splits[resolved["split"]]
        by_id = ds.by_id()
        scenes = [by_id[i] for i in split.train]
        labels = labels.subset(split.train)
    arch = PRESETS[resolved["preset"]]
    config = _train_config(resolved)
    try:
        params, history, state = train(scenes, labels, config, arch=arch,
                                       log_every=resolved["log_every"],
                                       overfit_one_batch=resolved["overfit_one_batch"])
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    save_checkpoint(out_dir / "checkpoint.bin", params, state,
                    {"preset": resolved["preset"], "seed": resolved["seed"],
                     "iterations": config.iterations})
    history.write_csv(out_dir / "train_log.csv")
    (out_dir / "model_summary.txt").write_text(params.summary(), encoding="utf-8")
    if len(history):
        plot_loss_curve(history, out_dir / "loss.png")
        print(f"first loss {history.losses[0]:.6g} final loss {history.losses[-1]:.6g}")
    print(f"wrote checkpoint after {config.iterations} iterations to {out_dir / 'checkpoint.bin'}")
    return 0


def cmd_retrieve(resolved, out_dir):
    from .plotting import plot_retrieval
    ds = read_dataset(resolved["data"])
    if not ds.splits:
        raise RelMetricError(f"dataset {resolved['data']} has no splits")
    k = resolved["k"]
    rows = []
    if resolved["cross_validate"]:
        n = resolved["cross_validate"]
        if n > len(ds.splits):
            raise UsageError(f"--cross-validate {n} exceeds the {len(ds.splits)} dataset splits")
        config = _train_config(resolved)
        cv = cross_validate(ds.scenes, ds.labels, ds.splits[:n], config, PRESETS[resolved["preset"]], k,
                            callback=lambda i, r: print(f"split {i}: acc3of5={r.acc_3of5:.4f} "
                                                        f"acc5of5={r.acc_5of5:.4f}"))
        rows = list(enumerate(cv.per_split))
        (m3, s3), (m5, s5) = cv.acc_3of5, cv.acc_5of5
        print(f"acc3of5={m3:.4f} acc5of5={m5:.4f} std3of5={s3:.4f} std5of5={s5:.4f}")
    else:
        split_id = resolved["split"]
        if not 0 <= split_id < len(ds.splits):
            raise UsageError(f"--split {split_id} out of range (dataset has {len(ds.splits)})")
        split = ds.splits[split_id]
        if resolved["embeddings"]:
            emb = read_embeddings_csv(resolved["embeddings"])
        elif resolved["checkpoint"]:
            params, _, _ = load_checkpoint(resolved["checkpoint"])
            res = ds.info.get("resolution")
            if res is not None and int(res) != params.config.resolution:
                raise RelMetricError(f"checkpoint resolution {params.config.resolution} does not match "
                                     f"dataset resolution {res}")
            arr = embed_many(ds.scenes, params)
            write_embeddings_csv(out_dir / "embeddings.csv", ds.labels.scene_ids, arr)
            emb = dict(zip(ds.labels.scene_ids, arr))
        else:
            raise UsageError("retrieve needs --checkpoint, --embeddings or --cross-validate")
        r = knn_retrieval(emb, ds.labels, split, k=k, exclude_self=not resolved["no_exclude_self"])
        rows = [(split_id, r)]
        if r.excluded:
            print(f"excluded: {' '.join(r.excluded)}")
        print(f"acc3of5={r.acc_3of5:.4f} acc5of5={r.acc_5of5:.4f}")
    _write_retrieval_csv(out_dir / "retrieval.csv", rows)
    plot_retrieval([r for _, r in rows], out_dir / "retrieval.png")
    return 0


def cmd_generalize(resolved, out_dir):
    from .plotting import plot_distance_trace
    from .poseopt import SUCCESS_DISTANCE, GeneralizationConfig, generalize
    params, _, _ = load_checkpoint(resolved["checkpoint"])
    reference = read_scene(resolved["reference"])
    test = read_scene(resolved["test"])
    try:
        config = GeneralizationConfig(lr=resolved["lr"], max_steps=resolved["steps"],
                                      kernel_size=resolved["kernel"], threshold=resolved["threshold"],
                                      seed=resolved["seed"])
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    dump = out_dir / "pgm" if resolved["dump_pgm"] else None
    try:
        final, trace = generalize(reference, test, params, config, dump_dir=dump)
    except OptimizationAborted as exc:
        if exc.trace is not None and len(exc.trace):
            exc.trace.write_csv(out_dir / "trace.csv")
        print(f"optimization aborted: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    write_scene(out_dir / "final.scene", final)
    trace.write_csv(out_dir / "trace.csv")
    plot_distance_trace(trace, out_dir / "distance.png", success=SUCCESS_DISTANCE)
    print(f"d_init={trace.initial_distance:.6g} d_final={trace.best_distance:.6g} "
          f"steps={trace.steps[-1]}")
    return 0


def cmd_gradcheck(resolved, out_dir):
    from .gradcheck import format_report, inject_fault, run_gradcheck, write_report_csv
    fault = resolved["inject_fault"]
    if fault not in (None, "elu"):
        raise UsageError(f"--inject-fault supports only 'elu', got {fault!r}")
    if resolved["instances"] < 1:
        raise UsageError("--instances must be positive")
    if fault:
        with inject_fault(fault):
            results = run_gradcheck(seed=resolved["seed"], n_instances=resolved["instances"])
    else:
        results = run_gradcheck(seed=resolved["seed"], n_instances=resolved["instances"])
    report = format_report(results)
    (out_dir / "gradcheck.txt").write_text(report, encoding="utf-8")
    write_report_csv(out_dir / "gradcheck.csv", results)
    print(report, end="")
    return 0 if all(r.passed for r in results) else RUNTIME_ERROR


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "retrieve": cmd_retrieve,
    "generalize": cmd_generalize,
    "gradcheck": cmd_gradcheck,
}


# -- parser ---------------------------------------------------------------------

def build_parser():
    common = _Parser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, help="random seed (default 0)")
    g.add_argument("--out-dir", default=".", help="directory for all outputs (default: current)")
    g.add_argument("--preset", choices=sorted(PRESETS), help="architecture and training preset (default desk)")
    g.add_argument("--config", help="key=value file; explicit flags override it")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="relmetric", description="Learned metric for spatial relations between objects.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--scenes", type=int, help="number of scenes (required)")
    p.add_argument("--classes", help="comma-separated relation classes")
    p.add_argument("--splits", type=int, help="number of seeded 80/20 splits (default 5)")
    p.add_argument("--test-fraction", type=float, help="test share per class (default 0.2)")
    p.add_argument("--points", type=int, help="points per object template (default 256)")

    p = sub.add_parser("train", parents=[common], help="train the metric network")
    p.add_argument("--data", help="dataset directory (required)")
    p.add_argument("--split", type=int, help="train only on this split's train scenes")
    p.add_argument("--iters", type=int, help="training iterations")
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--batch", type=int, help="triplets per batch")
    p.add_argument("--pool-per-class", type=int, help="scenes per class embedded per batch")
    p.add_argument("--dropout", type=float, help="dropout probability")
    p.add_argument("--overfit-one-batch", action="store_true", help="reuse one frozen batch every step")
    p.add_argument("--log-every", type=int, help="log every N steps to stderr")

    p = sub.add_parser("retrieve", parents=[common], help="nearest-neighbor retrieval accuracy")
    p.add_argument("--data", help="dataset directory (required)")
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--embeddings", help="CSV scene_id,e0,e1,... instead of a checkpoint")
    p.add_argument("--split", type=int, help="split index (default 0)")
    p.add_argument("--k", type=int, help="neighbors (default 5)")
    p.add_argument("--cross-validate", type=int, metavar="N", help="train and evaluate the first N splits")
    p.add_argument("--iters", type=int, help="training iterations for --cross-validate")
    p.add_argument("--no-exclude-self", action="store_true", help="let a query match its own id")

    p = sub.add_parser("generalize", parents=[common], help="optimize test poses toward a reference")
    p.add_argument("--checkpoint", help="trained checkpoint (required)")
    p.add_argument("--reference", help="reference .scene file (required)")
    p.add_argument("--test", help="test .scene file (required)")
    p.add_argument("--steps", type=int, help="maximum Adam steps (default 300)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 0.1)")
    p.add_argument("--kernel", type=int, help="Sobel kernel size 3, 5 or 7 (default 5)")
    p.add_argument("--threshold", type=float, help="stop once d falls below this (default 1e-3)")
    p.add_argument("--dump-pgm", action="store_true", help="write per-step PGM projections")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--instances", type=int, help="random instances per check (default 20)")
    p.add_argument("--inject-fault", help="break an op's backward pass (test hook; only 'elu')")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        resolved = resolve(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return USAGE_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out_dir = Path(args.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_run_config(out_dir, args.command, resolved)
        return COMMANDS[args.command](resolved, out_dir)
    except UsageError as exc:
        print(f"relmetric {args.command}: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (RelMetricError, OSError, ValueError) as exc:
        print(f"relmetric {args.command}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
