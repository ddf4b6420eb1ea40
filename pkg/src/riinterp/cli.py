"""``riinterp`` command line: projection, reconstruction, interpolation, evaluation, training.

Exit codes:

    0  success
    1  usage error (bad flags, t outside [0, 1])
    2  I/O failure (missing or unreadable file)
    3  malformed data (bad magic, truncated file, empty cloud)
    4  model or shape mismatch (checkpoint does not fit the inputs)
    5  training phase precondition violated

Config files (``--config``) hold ``key = value`` lines; ``#`` starts a comment and
keys use the long flag names with dashes or underscores. Flags given on the
command line override the file. ``--show-config`` prints the resolved settings
and exits.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

from .checkpoint import load_checkpoint
from .dataset import (DEFAULT_SPLIT, load_triplet, read_split_file, read_velodyne_bin, sequence_dirs,
                      split_triplets, write_manifest, write_velodyne_bin)
from .metrics import snnrmse
from .projection import (MalformedFileError, PointCloud, ProjectionConfig, export_pgm, project, read_rimg,
                         reconstruct, write_rimg)
from .trainer import PHASES, PhaseError, TrainConfig, build_trainer, model_from_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_MALFORMED, EXIT_MODEL, EXIT_PHASE = range(6)

log = logging.getLogger("riinterp")


class UsageError(Exception):
    pass


class ModelError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config overlay ------------------------------------------------------------------

def read_config_file(path) -> Dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise MalformedFileError(f"{path}:{n}: expected 'key = value'")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Defaults, then the config file, then flags that were given explicitly."""
    out = dict(defaults)
    if getattr(args, "config", None):
        for key, raw in read_config_file(args.config).items():
            if key not in defaults:
                raise UsageError(f"unknown config key {key!r}")
            out[key] = _coerce(raw, defaults[key], key)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def _coerce(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {raw!r}") from exc
    if raw.lower() in ("", "none"):
        return None
    # keys whose default is None are optional counts or paths
    return int(raw) if like is None and raw.isdigit() else raw


def show(cfg: dict) -> None:
    for key in sorted(cfg):
        print(f"{key} = {cfg[key]}")


# -- commands -------------------------------------------------------------------

PROJECT_DEFAULTS = dict(height=64, width=2048, theta_up=3.0, theta_down=25.0)


def _projection(cfg: dict) -> ProjectionConfig:
    return ProjectionConfig(int(cfg["height"]), int(cfg["width"]), math.radians(cfg["theta_up"]),
                            math.radians(cfg["theta_down"]))


def cmd_project(args) -> int:
    cfg = resolve(args, PROJECT_DEFAULTS)
    if args.show_config:
        show(cfg)
        return EXIT_OK
    cloud = read_velodyne_bin(args.input)
    if len(cloud) == 0:
        raise MalformedFileError(f"{args.input}: point cloud is empty")
    ri = project(cloud, _projection(cfg))
    write_rimg(args.output, ri)
    print(f"valid pixels: {ri.valid_count}")
    print(f"dropped points: {cloud.dropped}")
    print(f"out of field of view: {ri.out_of_fov}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    ri = read_rimg(args.input)
    if ri.valid_count == 0:
        raise MalformedFileError(f"{args.input}: range image has no valid pixels")
    cloud = reconstruct(ri)
    write_velodyne_bin(args.output, PointCloud.from_xyz(cloud.xyz))
    print(f"points: {len(cloud)}")
    return EXIT_OK


INTERP_DEFAULTS = dict(t=0.5, checkpoint=None)


def cmd_interpolate(args) -> int:
    cfg = resolve(args, INTERP_DEFAULTS)
    if args.show_config:
        show(cfg)
        return EXIT_OK
    t = float(cfg["t"])
    if not 0.0 <= t <= 1.0:
        raise UsageError(f"--t must lie in [0, 1], got {t}")
    if not cfg["checkpoint"]:
        raise UsageError("--checkpoint is required")
    ckpt = load_checkpoint(cfg["checkpoint"])
    c0, c1 = read_velodyne_bin(args.frame0), read_velodyne_bin(args.frame1)
    try:
        model = model_from_checkpoint(ckpt)
        proj = ckpt.meta.get("projection", {})
        pcfg = ProjectionConfig(int(proj.get("h", 64)), int(proj.get("w", 2048)))
        start = time.monotonic()
        r0, r1 = project(c0, pcfg), project(c1, pcfg)
        out = model.interpolate(r0, r1, t)
        elapsed = time.monotonic() - start
    except (KeyError, ValueError) as exc:
        raise ModelError(str(exc)) from exc
    cloud = reconstruct(out)
    write_velodyne_bin(args.output, PointCloud.from_xyz(cloud.xyz))
    print(f"points: {len(cloud)}")
    print(f"inference time: {elapsed:.4f} s")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred, gt = read_velodyne_bin(args.pred), read_velodyne_bin(args.gt)
    for name, c in (("prediction", pred), ("ground truth", gt)):
        if len(c) == 0:
            raise MalformedFileError(f"{name} cloud is empty")
    print(f"SNNRMSE: {snnrmse(pred.xyz, gt.xyz):.4f} m")
    return EXIT_OK


def _train_defaults() -> dict:
    base = TrainConfig()
    d = {k: getattr(base, k) for k in ("epochs", "iters_per_epoch", "lr0", "plateau_factor", "plateau_patience",
                                       "seed", "max_triplets", "height", "width", "clip_norm", "t",
                                       "model_divisor")}
    d.update(phase="flow", data_root=None, split_file=None, init=None, resume=None, out="checkpoint.rnck",
             log=None, stride=3)
    return d


def _split(cfg: dict):
    return read_split_file(cfg["split_file"]) if cfg.get("split_file") else DEFAULT_SPLIT


def cmd_train(args) -> int:
    cfg = resolve(args, _train_defaults())
    if cfg["phase"] not in PHASES:
        raise UsageError(f"--phase must be one of {', '.join(PHASES)}")
    phase_defaults = TrainConfig.for_phase(cfg["phase"])
    explicit = {k for k, v in vars(args).items() if v is not None}
    file_keys = set(read_config_file(args.config)) if args.config else set()
    for key in ("epochs", "lr0", "plateau_factor", "plateau_patience"):
        if key not in explicit and key not in file_keys:
            cfg[key] = getattr(phase_defaults, key)
    if args.show_config:
        show(cfg)
        return EXIT_OK
    if not cfg["data_root"]:
        raise UsageError("--data-root is required")
    tcfg = TrainConfig(phase=cfg["phase"], **{k: cfg[k] for k in (
        "epochs", "iters_per_epoch", "lr0", "plateau_factor", "plateau_patience", "seed", "max_triplets",
        "height", "width", "clip_norm", "t", "model_divisor")})
    init = load_checkpoint(cfg["init"]) if cfg["init"] else None
    resume = load_checkpoint(cfg["resume"]) if cfg["resume"] else None
    try:
        trainer = build_trainer(tcfg, init=init, resume=resume, log_path=cfg["log"])
    except (KeyError, ValueError) as exc:
        raise ModelError(str(exc)) from exc

    split = _split(cfg)
    print(f"split: {split.describe()}")
    sets = split_triplets(cfg["data_root"], split, stride=int(cfg["stride"]), max_triplets=tcfg.max_triplets)
    pcfg = ProjectionConfig(tcfg.height, tcfg.width)
    train = [load_triplet(t, pcfg) for t in sets["train"]]
    val = [load_triplet(t, pcfg) for t in sets["val"]]
    if not train:
        raise MalformedFileError("no training triplets found under the data root")
    print(f"triplets: train {len(train)} val {len(val)}")
    trainer.run(train, val, ckpt_path=cfg["out"])
    for rec in trainer.records:
        print(f"epoch {rec['epoch']} lr {rec['lr']:.3g} train {rec['train_loss']:.6f} val {rec['val_loss']:.6f}")
    print(f"checkpoint: {cfg['out']}")
    return EXIT_OK


def cmd_make_triplets(args) -> int:
    split = read_split_file(args.split_file) if args.split_file else DEFAULT_SPLIT
    seqs = sequence_dirs(args.data_root)
    split = split.restrict(list(seqs))
    sets = split_triplets(args.data_root, split, stride=args.stride)
    total = sum(len(v) for v in sets.values())
    if total == 0:
        raise MalformedFileError(f"{args.data_root}: no triplets (sequences are empty or missing)")
    write_manifest(args.output, sets)
    print(f"split: {split.describe()}")
    for name in ("train", "val", "test"):
        print(f"{name}: {len(sets[name])} triplets")
    return EXIT_OK


def cmd_export_pgm(args) -> int:
    r_max = export_pgm(args.output, read_rimg(args.input))
    print(f"r_max: {r_max:.4f}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="riinterp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="key = value overlay file")
        sp.add_argument("--show-config", action="store_true", help="print resolved settings and exit")

    sp = sub.add_parser("project", help="point cloud .bin -> range image .rimg")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--height", type=int)
    sp.add_argument("--width", type=int)
    sp.add_argument("--theta-up", type=float, help="degrees above the horizon")
    sp.add_argument("--theta-down", type=float, help="degrees below the horizon")
    with_config(sp)
    sp.set_defaults(func=cmd_project)

    sp = sub.add_parser("reconstruct", help="range image .rimg -> point cloud .bin")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("interpolate", help="synthesize the frame at time t between two scans")
    sp.add_argument("frame0")
    sp.add_argument("frame1")
    sp.add_argument("output")
    sp.add_argument("--t", type=float)
    sp.add_argument("--checkpoint")
    with_config(sp)
    sp.set_defaults(func=cmd_interpolate)

    sp = sub.add_parser("eval", help="SNNRMSE between two point clouds")
    sp.add_argument("pred")
    sp.add_argument("gt")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("train", help="run one training phase")
    sp.add_argument("--phase", choices=PHASES)
    sp.add_argument("--data-root")
    sp.add_argument("--split-file")
    sp.add_argument("--init", help="checkpoint of the previous phase")
    sp.add_argument("--resume", help="checkpoint of an interrupted run of this phase")
    sp.add_argument("--out")
    sp.add_argument("--log")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--iters-per-epoch", type=int)
    sp.add_argument("--lr0", type=float)
    sp.add_argument("--plateau-factor", type=float)
    sp.add_argument("--plateau-patience", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--max-triplets", type=int)
    sp.add_argument("--height", type=int)
    sp.add_argument("--width", type=int)
    sp.add_argument("--clip-norm", type=float)
    sp.add_argument("--t", type=float)
    sp.add_argument("--model-divisor", type=int)
    sp.add_argument("--stride", type=int)
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("make-triplets", help="write the triplet manifest for a data root")
    sp.add_argument("--data-root", required=True)
    sp.add_argument("--split-file")
    sp.add_argument("--stride", type=int, default=3)
    sp.add_argument("--output", "-o", default="triplets.txt")
    sp.set_defaults(func=cmd_make_triplets)

    sp = sub.add_parser("export-pgm", help="range channel as a 16-bit PGM")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.set_defaults(func=cmd_export_pgm)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MalformedFileError as exc:
        print(f"malformed input: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except PhaseError as exc:
        print(f"phase error: {exc}", file=sys.stderr)
        return EXIT_PHASE
    except ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
