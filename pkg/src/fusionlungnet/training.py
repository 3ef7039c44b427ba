"""Training loop, checkpointing and the experiment sweeps."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .data import DatasetIndex, make_batches, split_dataset
from .loader import load_tensors, stack_batch
from .losses import LossWeights, total_loss
from .metrics import COLUMNS, MetricReport, evaluate_dataset, format_table
from .network import (
    AblationFlags,
    BackboneConfig,
    FusionLungNet,
    canonical_json,
    config_hash,
    load_model,
    save_checkpoint,
)
from .network.model import ABLATION_GRID
from .preprocessing import PreprocessConfig

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "adamax", "rmsprop", "sgd")
STEP_LOG_FIELDS = ("step", "focal", "ssim", "iou", "primary", "sup1", "sup2", "sup3", "sup4", "total")
# loss-function ablation rows expressed as lambda masks (focal, ssim, iou)
LOSS_PRESETS = {
    "focal": (1.0, 0.0, 0.0),
    "iou": (0.0, 0.0, 1.0),
    "focal+iou": (0.5, 0.0, 0.5),
    "focal+ssim+iou": (0.3, 0.4, 0.3),
}
LAMBDA_ROWS = ((0.3, 0.4, 0.3), (0.4, 0.3, 0.3), (0.3, 0.3, 0.4))
INPUT_SIZES = (160, 320, 640)


class Diverged(RuntimeError):
    def __init__(self, step, last_checkpoint):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {last_checkpoint}")
        self.step = step
        self.last_checkpoint = last_checkpoint


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    input_size: tuple[int, int] = (320, 320)
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    checkpoint_every: int = 1
    val_fraction: float = 0.1
    threshold: float = 0.5
    momentum: float = 0.9  # sgd / rmsprop only
    preprocess: PreprocessConfig | None = None
    # dataset location; used by the command-line front end
    data_root: str | None = None
    train_split: str | None = None
    test_split: str | None = None
    test_count: int = 150
    name: str = "run"

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and checkpoint_every >= 1 required")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if len(self.input_size) != 2 or any(s % 32 for s in self.input_size):
            raise ConfigError(f"input_size must be two multiples of 32, got {self.input_size}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            if "loss_weights" in d:
                d["loss_weights"] = LossWeights(**d["loss_weights"])
            if "backbone" in d:
                d["backbone"] = BackboneConfig(**d["backbone"])
            if "ablation" in d:
                d["ablation"] = AblationFlags(**d["ablation"])
            if d.get("preprocess") is not None:
                d["preprocess"] = PreprocessConfig(**d["preprocess"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def digest(self) -> str:
        return config_hash(self.to_dict())


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_val_iou: float = -1.0
    rng_state: torch.Tensor | None = None
    model: FusionLungNet | None = None
    run_dir: Path | None = None
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)

    def checkpoints(self) -> list[Path]:
        if self.run_dir is None:
            return []
        return sorted(self.run_dir.glob("ckpt-*.pt"), key=lambda p: int(p.stem.split("-")[1]))


def build_optimizer(name: str, params, lr: float, momentum: float = 0.9):
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    if name == "adamax":
        return torch.optim.Adamax(params, lr=lr)
    if name == "rmsprop":
        return torch.optim.RMSprop(params, lr=lr, momentum=momentum)
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum)
    raise ConfigError(f"unknown optimizer {name!r}")


def build_model(cfg: TrainConfig) -> FusionLungNet:
    return FusionLungNet(cfg.backbone, cfg.ablation, seed=cfg.seed)


def _state_extra(state: TrainState) -> dict:
    return {
        "step": state.step,
        "best_val_iou": state.best_val_iou,
        "rng_state": torch.get_rng_state(),
        "step_losses": list(state.step_losses),
        "epoch_losses": list(state.epoch_losses),
    }


def _append_csv(path: Path, header, row: dict) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(header))
        if new:
            writer.writeheader()
        writer.writerow({k: row[k] for k in header})


def train(cfg: TrainConfig, data: DatasetIndex, run_dir=None, resume=None, samples: dict | None = None) -> TrainState:
    """Optimise the network on ``data`` (the training split).

    ``cfg.val_fraction`` of the ids are held out (seeded) to pick the best
    checkpoint by validation IoU. With ``run_dir`` set, writes ``config.json``,
    ``steps.csv``, ``epochs.csv``, ``ckpt-<epoch>.pt`` every
    ``checkpoint_every`` epochs and ``best.pt``. ``resume`` is a checkpoint
    path whose parameters, optimiser state and counters are restored.
    ``samples`` may hold preloaded tensors keyed by id.
    """
    if len(data) == 0:
        raise ConfigError("training split is empty")
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        # canonical bytes, so sha256(config.json) == cfg.digest()
        (run_dir / "config.json").write_text(canonical_json(cfg.to_dict()))

    n_val = int(round(len(data) * cfg.val_fraction))
    if 0 < n_val < len(data):
        train_idx, val_idx = split_dataset(data, n_val, cfg.seed)
    else:
        train_idx, val_idx = data, None
    if samples is None:
        samples = load_tensors(data, cfg.input_size, cfg.preprocess)

    model = build_model(cfg)
    optimizer = build_optimizer(cfg.optimizer, model.parameters(), cfg.learning_rate, cfg.momentum)
    state = TrainState(model=model, run_dir=run_dir)
    if resume is not None:
        payload = torch.load(resume, map_location="cpu", weights_only=False)
        model.load_state_dict(payload["params"])
        if "optimizer" in payload:
            optimizer.load_state_dict(payload["optimizer"])
        extra = payload.get("extra", {})
        state.epoch = payload["manifest"]["epoch"]
        state.step = extra.get("step", 0)
        state.best_val_iou = extra.get("best_val_iou", -1.0)
        state.step_losses = list(extra.get("step_losses", []))
        state.epoch_losses = list(extra.get("epoch_losses", []))
        if extra.get("rng_state") is not None:
            torch.set_rng_state(extra["rng_state"])

    config = cfg.to_dict()

    def checkpoint(name):
        if run_dir is None:
            return None
        return save_checkpoint(run_dir / name, model, epoch=state.epoch, seed=cfg.seed, config=config,
                               optimizer=optimizer, extra=_state_extra(state))

    last_good = checkpoint(f"ckpt-{state.epoch}.pt") if resume is None else Path(resume)
    for epoch in range(state.epoch, cfg.epochs):
        model.train()
        t0 = time.perf_counter()
        losses = []
        for batch_ids in make_batches(train_idx, cfg.batch_size, cfg.seed, epoch):
            images, masks = stack_batch(samples, batch_ids)
            out = model(images, supervision=True)
            breakdown = total_loss(out, masks, cfg.loss_weights)
            value = breakdown.total.item()
            if not math.isfinite(value):
                raise Diverged(state.step, last_good)
            optimizer.zero_grad(set_to_none=True)
            breakdown.total.backward()
            optimizer.step()
            if run_dir is not None:
                _append_csv(run_dir / "steps.csv", STEP_LOG_FIELDS, {"step": state.step, **breakdown.row()})
            state.step_losses.append(value)
            losses.append(value)
            state.step += 1
        state.epoch = epoch + 1
        state.epoch_losses.append(float(np.median(losses)))

        val_iou = float("nan")
        if val_idx is not None:
            val_iou = evaluate_dataset(model, val_idx, cfg.threshold, samples=samples).iou
            if val_iou > state.best_val_iou:
                state.best_val_iou = val_iou
                checkpoint("best.pt")
        if state.epoch % cfg.checkpoint_every == 0 or state.epoch == cfg.epochs:
            last_good = checkpoint(f"ckpt-{state.epoch}.pt")
        if run_dir is not None:
            _append_csv(run_dir / "epochs.csv", ("epoch", "median_loss", "val_iou", "seconds"),
                        {"epoch": state.epoch, "median_loss": state.epoch_losses[-1], "val_iou": val_iou,
                         "seconds": round(time.perf_counter() - t0, 3)})
        log.info("epoch %d/%d median loss %.4f val IoU %.4f", state.epoch, cfg.epochs, state.epoch_losses[-1], val_iou)

    state.rng_state = torch.get_rng_state()
    model.eval()
    return state


def best_model(state: TrainState) -> FusionLungNet:
    """The best-by-validation checkpoint if one was written, else the final model."""
    if state.run_dir is not None and (state.run_dir / "best.pt").exists():
        return load_model(state.run_dir / "best.pt")[0]
    return state.model


def train_and_evaluate(cfg: TrainConfig, train_idx: DatasetIndex, test_idx: DatasetIndex, run_dir=None,
                       cache: dict | None = None) -> MetricReport:
    """Train, then score the best model on ``test_idx``.

    ``cache`` maps (input_size, preprocess) to preloaded tensors so sweeps
    decode each image once per resolution.
    """
    key = (cfg.input_size, cfg.preprocess)
    samples = None
    if cache is not None:
        if key not in cache:
            cache[key] = load_tensors(train_idx, cfg.input_size, cfg.preprocess) | load_tensors(
                test_idx, cfg.input_size, cfg.preprocess)
        samples = cache[key]
    state = train(cfg, train_idx, run_dir=run_dir, samples=samples)
    model = best_model(state)
    if samples is None:
        return evaluate_dataset(model, test_idx, cfg.threshold, input_size=cfg.input_size,
                                preprocess_cfg=cfg.preprocess)
    return evaluate_dataset(model, test_idx, cfg.threshold, samples=samples)


@dataclass
class SweepRow:
    label: str
    report: MetricReport | None
    error: str | None = None


def run_sweep(variants, train_idx, test_idx, runs_dir=None, cache: dict | None = None) -> list[SweepRow]:
    """Train+evaluate each ``(label, TrainConfig)``; a failing row is recorded and skipped."""
    cache = {} if cache is None else cache
    rows = []
    for i, (label, cfg) in enumerate(variants):
        run_dir = None if runs_dir is None else Path(runs_dir) / f"{i:02d}-{_slug(label)}"
        try:
            rows.append(SweepRow(label, train_and_evaluate(cfg, train_idx, test_idx, run_dir, cache)))
        except Exception as exc:  # one bad row must not sink the table
            log.exception("sweep row %r failed", label)
            rows.append(SweepRow(label, None, f"{type(exc).__name__}: {exc}"))
    return rows


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in label).strip("_")


def ablate(cfg_base: TrainConfig, grid=ABLATION_GRID, train_idx=None, test_idx=None, runs_dir=None, cache=None):
    variants = [(flags.label, replace(cfg_base, ablation=flags)) for flags in grid]
    return run_sweep(variants, train_idx, test_idx, runs_dir, cache)


def sweep_lambda(cfg: TrainConfig, rows=LAMBDA_ROWS, train_idx=None, test_idx=None, runs_dir=None, cache=None):
    variants = []
    for lam in rows:
        w = replace(cfg.loss_weights, lambda1=lam[0], lambda2=lam[1], lambda3=lam[2])
        variants.append((f"({lam[0]:g}, {lam[1]:g}, {lam[2]:g})", replace(cfg, loss_weights=w)))
    return run_sweep(variants, train_idx, test_idx, runs_dir, cache)


def sweep_input_size(cfg: TrainConfig, sizes=INPUT_SIZES, train_idx=None, test_idx=None, runs_dir=None, cache=None):
    variants = [(f"{s} x {s}", replace(cfg, input_size=(s, s))) for s in sizes]
    return run_sweep(variants, train_idx, test_idx, runs_dir, cache)


def sweep_optimizer(cfg: TrainConfig, names=("sgd", "adamax", "rmsprop", "adam"), train_idx=None, test_idx=None,
                    runs_dir=None, cache=None):
    variants = [(name, replace(cfg, optimizer=name)) for name in names]
    return run_sweep(variants, train_idx, test_idx, runs_dir, cache)


def sweep_losses(cfg: TrainConfig, names=tuple(LOSS_PRESETS), train_idx=None, test_idx=None, runs_dir=None,
                 cache=None):
    variants = []
    for name in names:
        lam = LOSS_PRESETS[name]
        w = replace(cfg.loss_weights, lambda1=lam[0], lambda2=lam[1], lambda3=lam[2])
        variants.append((name, replace(cfg, loss_weights=w)))
    return run_sweep(variants, train_idx, test_idx, runs_dir, cache)


# columns each sweep's text table shows (the CSV always carries all six)
SWEEP_COLUMNS = {
    "ablation": ("IoU", "F1", "Precision", "Recall", "Acc"),
    "lambda": ("IoU", "F1", "Acc"),
    "input-size": ("IoU",),
    "optimizer": ("IoU", "F1", "Acc"),
    "losses": ("IoU", "F1", "Acc"),
}


def format_sweep(rows: list[SweepRow], columns=COLUMNS, label="Method") -> str:
    ok = [(r.label, r.report) for r in rows if r.report is not None]
    text = format_table(ok, columns, label) if ok else ""
    failed = [f"{r.label}: FAILED ({r.error})" for r in rows if r.report is None]
    return "\n".join([text, *failed]).strip()


def write_sweep(rows: list[SweepRow], out_dir, name: str, columns=COLUMNS) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = out_dir / f"{name}.csv", out_dir / f"{name}.txt"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", *COLUMNS, "error"])
        for r in rows:
            vals = [f"{v:.6f}" for v in r.report.values()] if r.report else [""] * len(COLUMNS)
            writer.writerow([r.label, *vals, r.error or ""])
    txt_path.write_text(format_sweep(rows, columns) + "\n")
    return csv_path, txt_path
