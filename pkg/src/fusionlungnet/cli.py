"""Command-line front end: ``fusionlung {preprocess,train,eval,predict,sweep}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Run directories live under ``$FUSIONLUNG_RUNS_DIR`` (default ``./runs``).
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
import warnings
from dataclasses import asdict, dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import (
    DatasetError,
    image_files,
    load_image,
    load_mask,
    read_split_manifest,
    save_image,
    save_mask,
    scan_dataset,
    split_dataset,
    write_split_manifest,
)
from .loader import prepare_image, resize_mask
from .metrics import (
    compute_metrics,
    format_table,
    macro_average,
    per_image_reports,
    write_metrics_json,
    write_per_image_csv,
)
from .network import as_model_input, canonical_json, config_hash, load_model, read_checkpoint
from .preprocessing import DegenerateImage, PreprocessConfig, check_raw_image, preprocess, resize
from .training import (
    SWEEP_COLUMNS,
    ConfigError,
    TrainConfig,
    ablate,
    format_sweep,
    sweep_input_size,
    sweep_lambda,
    sweep_losses,
    sweep_optimizer,
    train,
    write_sweep,
)

log = logging.getLogger("fusionlungnet")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
RUNS_ENV = "FUSIONLUNG_RUNS_DIR"
SWEEPS = {
    "ablation": ablate,
    "lambda": sweep_lambda,
    "input-size": sweep_input_size,
    "optimizer": sweep_optimizer,
    "losses": sweep_losses,
}


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 2."""


class RunLocked(RuntimeError):
    pass


@dataclass
class RunManifest:
    """Provenance record; ``config_hash`` is the sha256 of the stored ``config.json``."""

    command: str
    config_path: str
    config_hash: str
    seed: int | None
    git_or_version: str
    started: str
    finished: str | None = None

    @classmethod
    def for_config(cls, command: str, config: dict, seed=None) -> "RunManifest":
        return cls(command, "config.json", config_hash(config), seed, __version__, _now())

    def write(self, run_dir: Path) -> None:
        (run_dir / "manifest.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def runs_root(override=None) -> Path:
    return Path(override or os.environ.get(RUNS_ENV) or "runs")


@contextlib.contextmanager
def run_directory(run_dir: Path, manifest: RunManifest, config: dict):
    """Create and lock ``run_dir``, store config + manifest, stamp it finished on success."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(f"{run_dir} is in use by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        (run_dir / manifest.config_path).write_text(canonical_json(config))
        manifest.write(run_dir)
        yield run_dir
        manifest.finished = _now()
        manifest.write(run_dir)
    finally:
        lock.unlink(missing_ok=True)


# ---- config handling ------------------------------------------------------------

def _read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path} must hold a JSON object")
    return data


_OVERRIDES = {
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "learning_rate",
    "optimizer": "optimizer",
    "seed": "seed",
    "data_root": "data_root",
    "name": "name",
    "test_count": "test_count",
}


def load_train_config(args) -> TrainConfig:
    """JSON file (optional) with command-line flags layered on top."""
    raw = _read_json(args.config) if args.config else {}
    for flag, key in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            raw[key] = value
    if getattr(args, "input_size", None):
        raw["input_size"] = list(args.input_size)
    if getattr(args, "backbone", None):
        raw["backbone"] = {**raw.get("backbone", {}), "variant": args.backbone}
    cfg = TrainConfig.from_dict(raw)
    if not cfg.data_root:
        raise ConfigError("config needs a dataset path (data_root or --data-root)")
    if not Path(cfg.data_root).is_dir():
        raise ConfigError(f"data_root {cfg.data_root} is not a directory")
    return cfg


def dataset_splits(cfg: TrainConfig, base: Path | None = None):
    """Train/test indices from explicit manifests or a seeded split of ``data_root``."""
    base = base or Path(".")
    if cfg.train_split:
        train_idx = read_split_manifest(cfg.data_root, base / cfg.train_split, "train")
        test_idx = read_split_manifest(cfg.data_root, base / cfg.test_split, "test") if cfg.test_split else None
        return train_idx, test_idx
    index = scan_dataset(cfg.data_root)
    try:
        return split_dataset(index, cfg.test_count, cfg.seed)
    except DatasetError as exc:
        raise ConfigError(str(exc)) from exc


# ---- commands ----------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    in_dir, out_dir = Path(args.in_dir), Path(args.out_dir)
    if not (in_dir / "images").is_dir():
        raise UsageError(f"{in_dir} has no images/ directory")
    try:
        cfg = PreprocessConfig(**(_read_json(args.config) if args.config else {}))
        if args.size:
            cfg = replace(cfg, target_size=tuple(args.size))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad preprocessing config: {exc}") from exc

    config = asdict(cfg)
    failures, degenerate, processed = [], [], 0
    files = image_files(in_dir)
    with run_directory(out_dir, RunManifest.for_config("preprocess", config), config):
        (out_dir / "images").mkdir(exist_ok=True)
        (out_dir / "masks").mkdir(exist_ok=True)
        if args.dump_stages:
            (out_dir / "stages").mkdir(exist_ok=True)
        for sid, path in files.items():
            try:
                mask_path = in_dir / "masks" / f"{sid}.png"
                if not mask_path.is_file():
                    raise DatasetError(f"no mask for {sid}")
                stages = {} if args.dump_stages else None
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always", DegenerateImage)
                    out = preprocess(load_image(path), cfg, stages)
                if any(issubclass(w.category, DegenerateImage) for w in caught):
                    degenerate.append(sid)
                mask = resize_mask(load_mask(mask_path), cfg.target_size)
            except (DatasetError, ValueError) as exc:
                failures.append({"id": sid, "error": str(exc)})
                log.error("%s: %s", sid, exc)
                continue
            save_image(out, out_dir / "images" / f"{sid}.png")
            save_mask(mask, out_dir / "masks" / f"{sid}.png")
            for stage, img in (stages or {}).items():
                save_image(img, out_dir / "stages" / f"{sid}.{stage}.png")
            processed += 1
        report = {"count": len(files), "processed": processed, "failures": failures, "degenerate": degenerate}
        (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"processed {processed}/{len(files)} images, {len(failures)} failures, {len(degenerate)} degenerate")
    return EXIT_FAILURE if failures else EXIT_OK


def cmd_train(args) -> int:
    cfg = load_train_config(args)
    if args.resume and not Path(args.resume).is_file():
        raise UsageError(f"checkpoint {args.resume} does not exist")
    train_idx, test_idx = dataset_splits(cfg, Path(args.config).parent if args.config else None)
    run_dir = runs_root(args.runs_dir) / cfg.name
    config = cfg.to_dict()
    with run_directory(run_dir, RunManifest.for_config("train", config, cfg.seed), config):
        write_split_manifest(train_idx, run_dir / "train.txt")
        if test_idx is not None:
            write_split_manifest(test_idx, run_dir / "test.txt")
        state = train(cfg, train_idx, run_dir=run_dir, resume=args.resume)
    print(f"trained {state.epoch} epochs ({state.step} steps); run directory {run_dir}")
    return EXIT_OK


def _checkpoint_config(payload) -> TrainConfig | None:
    try:
        return TrainConfig.from_dict(payload["config"])
    except (ConfigError, KeyError):
        return None  # checkpoint not written by the training loop


def cmd_eval(args) -> int:
    ckpt, split = Path(args.checkpoint), Path(args.split)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} does not exist")
    if not split.is_file():
        raise UsageError(f"split manifest {split} does not exist")
    payload = read_checkpoint(ckpt)
    model, _ = load_model(payload)
    cfg = _checkpoint_config(payload)
    data_root = args.data_root or (cfg.data_root if cfg else None)
    if not data_root:
        raise UsageError("no dataset root: pass --data-root")
    size = tuple(args.input_size) if args.input_size else (cfg.input_size if cfg else (320, 320))
    index = read_split_manifest(data_root, split)

    out_dir = Path(args.out) if args.out else ckpt.parent / f"eval-{split.stem}"
    config = {"checkpoint": str(ckpt), "checkpoint_hash": _sha256_file(ckpt), "split": str(split),
              "split_hash": _sha256_file(split), "data_root": str(data_root), "input_size": list(size),
              "threshold": args.threshold, "averaging": "macro" if args.macro else "micro"}
    with run_directory(out_dir, RunManifest.for_config("eval", config, payload["manifest"].get("seed")), config):
        rows = per_image_reports(model, index, args.threshold, input_size=size,
                                 preprocess_cfg=cfg.preprocess if cfg else None)
        reports = [r for _, r in rows]
        if args.macro:
            report = macro_average(reports, args.threshold)
        else:
            report = compute_metrics(sum((r.counts for r in reports[1:]), reports[0].counts), args.threshold)
        write_metrics_json(report, out_dir / "metrics.json", checkpoint_hash=config["checkpoint_hash"],
                           split_hash=config["split_hash"], averaging=config["averaging"], images=len(rows))
        write_per_image_csv(rows, out_dir / "per_image.csv")
    print(format_table([(split.stem, report)], label=None))
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} does not exist")
    payload = read_checkpoint(ckpt)
    model, _ = load_model(payload)
    cfg = _checkpoint_config(payload)
    size = cfg.input_size if cfg else (320, 320)

    pixels = load_image(args.image)
    check_raw_image(pixels)
    image = prepare_image(pixels, size, cfg.preprocess if cfg else None)
    x = as_model_input(torch.from_numpy(image)[None])
    with torch.no_grad():
        prob = model(x, supervision=False).primary[0, 0].double().numpy()
    prob = np.clip(resize(prob, pixels.shape[:2]), 0.0, 1.0)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.prob:
        save_image(prob, out)
    else:
        save_mask((prob >= args.threshold).astype(np.uint8), out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_train_config(args)
    train_idx, test_idx = dataset_splits(cfg, Path(args.config).parent if args.config else None)
    if test_idx is None:
        raise ConfigError("sweeps need a test split (test_split or a seeded split)")
    run_dir = runs_root(args.runs_dir) / f"{cfg.name}-sweep-{args.kind}"
    config = cfg.to_dict()
    with run_directory(run_dir, RunManifest.for_config(f"sweep {args.kind}", config, cfg.seed), config):
        rows = SWEEPS[args.kind](cfg, train_idx=train_idx, test_idx=test_idx, runs_dir=run_dir)
        write_sweep(rows, run_dir, args.kind, SWEEP_COLUMNS[args.kind])
    print(format_sweep(rows, SWEEP_COLUMNS[args.kind]))
    return EXIT_FAILURE if any(r.report is None for r in rows) else EXIT_OK


# ---- argument parsing ----------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--data-root", help="processed dataset directory (images/, masks/)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer")
    p.add_argument("--seed", type=int)
    p.add_argument("--input-size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--backbone", choices=("resnet50", "tiny"))
    p.add_argument("--test-count", type=int)
    p.add_argument("--name", help="run name (directory under the runs root)")
    p.add_argument("--runs-dir", help=f"runs root (default ${RUNS_ENV} or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusionlung", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="run the preprocessing pipeline over a dataset")
    p.add_argument("in_dir")
    p.add_argument("out_dir")
    p.add_argument("--config", help="JSON preprocessing config")
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--dump-stages", action="store_true", help="write every intermediate stage as PNG")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model")
    _add_train_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("checkpoint")
    p.add_argument("--split", required=True, help="split manifest (one id per line)")
    p.add_argument("--data-root")
    p.add_argument("--input-size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--macro", action="store_true", help="average per-image metrics instead of pooling counts")
    p.add_argument("--out", help="output directory (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("out")
    p.add_argument("--prob", action="store_true", help="write the probability map instead of the binary mask")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep", help="run one of the experiment sweeps")
    p.add_argument("kind", choices=tuple(SWEEPS))
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, RunLocked, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
