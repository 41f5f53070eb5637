"""``sdl`` command line: data generation, training, evaluation and export.

Exit codes: 0 ok, 2 bad configuration or arguments, 3 I/O failure,
4 corrupt checkpoint. Every command writes ``run_manifest.json`` next to
its outputs; ``sdl replay`` re-executes one.
"""

from __future__ import annotations

import os

# thread caps must be in place before numpy loads its BLAS
_THREADS = os.environ.get("SDL_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from sdl import __version__
from sdl.errors import CheckpointCorrupt, ConfigError, SDLError

log = logging.getLogger("sdl")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CORRUPT = 4

RUN_MANIFEST = "run_manifest.json"


class UsageError(Exception):
    """Bad argument value detected after parsing (maps to exit 2)."""


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path}: expected a JSON object")
    return data


def _write_manifest(out_dir: Path, command: str, argv: list[str], config: dict, seed, paths: dict, started: float) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "cwd": os.getcwd(),
        "config": config,
        "seed": seed,
        "paths": paths,
        "version": __version__,
        "duration_s": round(time.monotonic() - started, 3),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RUN_MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ------------------------------------------------------------------ commands


def cmd_gen_data(args, argv: list[str]) -> int:
    from sdl import synthdata as sd
    from sdl.temporal import write_pnm

    started = time.monotonic()
    cfg = sd.SynthConfig.from_dict(_read_json(args.config))
    out = Path(args.out)
    if args.regen_index is not None:
        n = cfg.n_train if args.split == "train" else cfg.n_test
        if not 0 <= args.regen_index < n:
            raise UsageError(f"--regen-index {args.regen_index} outside [0, {n}) for split {args.split}")
        sample = sd.regenerate(cfg, args.split, args.regen_index)
        out.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(sample.video):
            write_pnm(out / f"{args.split}_{args.regen_index:05d}_f{t:02d}.ppm", frame)
        (out / f"{args.split}_{args.regen_index:05d}_labels.json").write_text(
            json.dumps({"labels": sample.frame_labels.tolist(), "boundary": sample.boundary_flags.astype(int).tolist()}) + "\n"
        )
        paths = {"out": str(out)}
    else:
        sd.generate_dataset(cfg, out)
        paths = {"out": str(out), "train": str(out / "train.bin"), "test": str(out / "test.bin")}
    _write_manifest(out, "gen-data", argv, cfg.to_dict(), cfg.seed, paths, started)
    return EXIT_OK


def cmd_train(args, argv: list[str]) -> int:
    from sdl.synthdata import load_dataset
    from sdl.trainer import TrainConfig, save_checkpoint, train, write_config

    started = time.monotonic()
    raw = _read_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.epochs is not None:
        raw["epochs"] = args.epochs
    if args.no_td:
        raw["temporal_discovery"] = False
    if args.no_sd:
        raw["sample_discovery"] = False
    cfg = TrainConfig.from_dict(raw)
    data = load_dataset(args.data)
    crop = data.config.crop
    if (cfg.model.height, cfg.model.width) != (crop, crop) or cfg.model.frames != data.config.frames:
        raise ConfigError("model", f"model expects {cfg.model.frames}x{cfg.model.height}x{cfg.model.width}, data is {data.config.frames}x{crop}x{crop}")
    result = train(cfg, data.train, crop=crop)
    out = Path(args.out)
    save_checkpoint(out, result)
    write_config(out / "config.json", cfg)
    paths = {"data": str(args.data), "checkpoint": str(out), "metrics": str(out / "metrics.csv")}
    _write_manifest(out, "train", argv, cfg.to_dict(), cfg.seed, paths, started)
    return EXIT_OK


def cmd_eval(args, argv: list[str]) -> int:
    from sdl.evalkit import evaluate
    from sdl.synthdata import load_dataset
    from sdl.trainer import load_checkpoint

    started = time.monotonic()
    result = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    report = evaluate(result.model, data.test, crop=data.config.crop, include_background=args.include_background)
    report.config = result.config.to_dict()
    out = Path(args.out)
    report.write(out)
    print(json.dumps({"map": report.map, "per_class_ap": report.per_class_ap}, sort_keys=True))
    paths = {"checkpoint": str(args.checkpoint), "data": str(args.data), "report": str(out / "report.json")}
    _write_manifest(out, "eval", argv, report.config, result.config.seed, paths, started)
    return EXIT_OK


def cmd_export(args, argv: list[str]) -> int:
    from sdl.evalkit import export_features, uncertainty_curve, write_svg
    from sdl.synthdata import load_batch, load_dataset
    from sdl.trainer import load_checkpoint

    started = time.monotonic()
    result = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    crop = data.config.crop
    if args.features is not None:
        if args.alpha is not None and result.model.dictionary is None:
            raise UsageError("--alpha needs a checkpoint trained with sample discovery")
        if args.alpha is not None and not 0.0 <= args.alpha <= 1.0:
            raise UsageError(f"--alpha {args.alpha} outside [0, 1]")
        table = export_features(result.model, data.test, alpha=args.alpha, crop=crop)
        target = Path(args.features)
        target.parent.mkdir(parents=True, exist_ok=True)
        table.write_csv(target)
        paths = {"features": str(target)}
    else:
        seq_raw, target = args.uncertainty
        try:
            seq = int(seq_raw)
        except ValueError:
            raise UsageError(f"sequence id {seq_raw!r} is not an integer") from None
        if not 0 <= seq < len(data.test):
            raise UsageError(f"unknown sequence id {seq}; test split has {len(data.test)} sequences")
        batch = load_batch(data.test, [seq], augment=False, seed=0, crop=crop)
        curve = uncertainty_curve(result.model, batch.videos[0], batch.labels[0], batch.boundary[0])
        target = Path(target)
        target.parent.mkdir(parents=True, exist_ok=True)
        curve.write_csv(target)
        paths = {"uncertainty": str(target)}
        if args.svg:
            svg = target.with_suffix(".svg") if args.svg is True else Path(args.svg)
            write_svg(svg, curve)
            paths["svg"] = str(svg)
    _write_manifest(target.parent, "export", argv, result.config.to_dict(), result.config.seed, paths, started)
    return EXIT_OK


def cmd_replay(args, argv: list[str]) -> int:
    manifest = _read_json(args.manifest)
    replay_argv = manifest.get("argv")
    if not isinstance(replay_argv, list) or not replay_argv:
        raise ConfigError("argv", f"{args.manifest}: manifest has no argv to replay")
    if replay_argv[0] == "replay":
        raise ConfigError("argv", "refusing to replay a replay")
    # relative paths in argv are resolved against the original working directory
    cwd = manifest.get("cwd")
    if cwd:
        prev = os.getcwd()
        os.chdir(cwd)
        try:
            return main(replay_argv)
        finally:
            os.chdir(prev)
    return main(replay_argv)


# ------------------------------------------------------------------ parser


def _defaults_epilog(obj) -> str:
    return "config defaults:\n" + json.dumps(obj.to_dict(), indent=2, sort_keys=True)


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def build_parser() -> argparse.ArgumentParser:
    from sdl.synthdata import SynthConfig
    from sdl.trainer import TrainConfig

    p = argparse.ArgumentParser(prog="sdl", description="Self-discovery training on synthetic driving clips.", formatter_class=_Formatter)
    p.add_argument("--version", action="version", version=f"sdl {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset", formatter_class=_Formatter, epilog=_defaults_epilog(SynthConfig()))
    g.add_argument("--config", default=None, help="JSON SynthConfig overrides (omitted fields keep their defaults)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--regen-index", type=int, default=None, help="only dump this sequence as PPM frames")
    g.add_argument("--split", choices=("train", "test"), default="train", help="split used by --regen-index")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model", formatter_class=_Formatter, epilog=_defaults_epilog(TrainConfig()))
    t.add_argument("--config", default=None, help="JSON TrainConfig overrides (omitted fields keep their defaults)")
    t.add_argument("--data", required=True, help="dataset directory from gen-data")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--no-td", action="store_true", default=False, help="disable temporal discovery (decoder + reconstruction loss)")
    t.add_argument("--no-sd", action="store_true", default=False, help="disable sample discovery (dictionary + weighting)")
    t.add_argument("--seed", type=int, default=None, help="override config seed (config default: 0)")
    t.add_argument("--epochs", type=int, default=None, help="override config epochs (config default: 40)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="frame-level AP / mAP on the test split", formatter_class=_Formatter)
    e.add_argument("--checkpoint", required=True, help="checkpoint directory")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--out", required=True, help="report directory (report.json, frames.csv)")
    e.add_argument("--include-background", action="store_true", default=False, help="count the background class in mAP")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="feature or uncertainty-curve export", formatter_class=_Formatter)
    x.add_argument("--checkpoint", required=True, help="checkpoint directory")
    x.add_argument("--data", required=True, help="dataset directory")
    mode = x.add_mutually_exclusive_group(required=True)
    mode.add_argument("--features", metavar="OUT_CSV", default=None, help="write per-slice test features")
    mode.add_argument("--uncertainty", nargs=2, metavar=("SEQ_ID", "OUT_CSV"), default=None, help="write the per-frame mu/w curve of one test sequence")
    x.add_argument("--alpha", type=float, default=None, help="feature update mixing weight applied before --features export")
    x.add_argument("--svg", nargs="?", const=True, default=None, help="with --uncertainty, also draw an SVG (optional path)")
    x.set_defaults(func=cmd_export)

    r = sub.add_parser("replay", help="re-run the command recorded in a run manifest", formatter_class=_Formatter)
    r.add_argument("manifest", help=f"path to a {RUN_MANIFEST}")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args, argv)
    except ConfigError as exc:
        print(f"sdl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"sdl: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointCorrupt as exc:
        print(f"sdl: CheckpointCorrupt: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (OSError, SDLError) as exc:
        print(f"sdl: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
