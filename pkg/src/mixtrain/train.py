"""Optimization loop: Adam with linear warmup, per-epoch snapshots, final averaging."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from mixtrain import augment, dsp
from mixtrain.augment import StrategyConfig, SubBatch
from mixtrain.dataio import ClassMap, InterferenceAudio, UtteranceRecord, load_fixed_waveform
from mixtrain.model import (
    BCE_SIGMOID,
    CE_SOFTMAX,
    HEADS,
    BackboneConfig,
    ParameterSnapshot,
    average_snapshots,
    build_backbone,
    load_snapshot,
    loss_for_head,
    save_snapshot,
)

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


class ResumeError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    peak_lr: float = 1e-3
    warmup_epochs: int = 10
    average_last: int = 10
    seed: int = 0
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    head: str = BCE_SIGMOID
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    val_max_items: int | None = 2000
    input_norm_items: int = 500  # 0 keeps the backbone's identity input scaling
    log_steps: bool = True

    def __post_init__(self):
        if isinstance(self.strategy, dict):
            self.strategy = StrategyConfig.from_dict(self.strategy)
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig.from_dict(self.backbone)
        self.betas = tuple(self.betas)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError(f"warmup_epochs must be in [0, epochs], got {self.warmup_epochs}")
        if not 1 <= self.average_last <= self.epochs:
            raise ValueError(f"average_last must be in [1, epochs], got {self.average_last}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == CE_SOFTMAX and self.strategy.name in ("mt", "mt_n"):
            raise ValueError("mix training produces union labels and needs the bce_sigmoid head")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Linear per-epoch warmup to ``peak_lr``, constant afterwards."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    if config.warmup_epochs and epoch < config.warmup_epochs:
        return config.peak_lr * (epoch + 1) / config.warmup_epochs
    return config.peak_lr


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    mean_loss: float
    components: dict[str, float]
    n_steps: int
    n_items: int
    seconds: float

    @property
    def items_per_s(self) -> float:
        return self.n_items / self.seconds if self.seconds > 0 else float("inf")


class TrainingData:
    """Seeded batches of clean fixed-length waveforms with one-hot labels.

    Batch composition and crops depend only on ``(seed, epoch, batch index)``.
    """

    def __init__(
        self,
        records: Sequence[UtteranceRecord],
        class_map: ClassMap,
        batch_size: int,
        seed: int,
        loader: Callable | None = None,
    ):
        self.records = list(records)
        self.class_map = class_map
        self.batch_size = batch_size
        self.seed = seed
        self.loader = loader or _train_loader
        self.label_index = np.array([class_map.index(r.label) for r in self.records])

    def __len__(self) -> int:
        return len(self.records)

    def num_batches(self) -> int:
        full, rest = divmod(len(self.records), self.batch_size)
        return full + (rest >= 2)

    def batches(self, epoch: int) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
        order = np.random.default_rng([self.seed, epoch]).permutation(len(self.records))
        n_cls = self.class_map.num_classes
        for b in range(self.num_batches()):
            idx = order[b * self.batch_size : (b + 1) * self.batch_size]
            rng = np.random.default_rng([self.seed, epoch, b, 0])
            waves = np.stack([self.loader(self.records[i], rng) for i in idx])
            labels = np.zeros((len(idx), n_cls), dtype=np.float32)
            labels[np.arange(len(idx)), self.label_index[idx]] = 1.0
            yield b, waves, labels


def _train_loader(record: UtteranceRecord, rng: np.random.Generator) -> np.ndarray:
    return load_fixed_waveform(record, dsp.SAMPLE_RATE, pad_mode="zero", crop_mode="random", rng=rng)


def estimate_input_stats(data: TrainingData, max_items: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-mel-bin mean and std of clean training features over a seeded subset."""
    n = len(data)
    if n == 0:
        raise ValueError("no training records to estimate input statistics from")
    idx = np.sort(np.random.default_rng([data.seed, 3]).permutation(n)[: min(n, max_items)])
    total = np.zeros(dsp.N_MELS)
    sq = np.zeros(dsp.N_MELS)
    frames = 0
    for i in idx:
        feats = dsp.fbank(data.loader(data.records[i], np.random.default_rng([data.seed, 3, int(i)]))).astype(np.float64)
        total += feats.sum(axis=0)
        sq += (feats**2).sum(axis=0)
        frames += feats.shape[0]
    if not np.all(np.isfinite(total)):
        raise ValueError("input std is undefined: training features contain non-finite values")
    mean = total / frames
    std = np.sqrt(np.maximum(sq / frames - mean**2, 0.0))
    return mean.astype(np.float32), np.maximum(std, 1e-3).astype(np.float32)


def training_step(model, optimizer, sub_batches: Sequence[SubBatch], head: str) -> dict[str, float]:
    """Sum the sub-batch losses and take one optimizer step."""
    loss_fn = loss_for_head(head)
    model.train()
    optimizer.zero_grad(set_to_none=True)
    total = 0.0
    components = {}
    for sb in sub_batches:
        feats = torch.from_numpy(sb.features)
        loss = loss_fn(model(feats), torch.from_numpy(sb.labels))
        components[sb.name] = loss
        total = total + loss
    out = {k: float(v.detach()) for k, v in components.items()}
    out["total"] = float(total.detach())
    if not math.isfinite(out["total"]):
        return out
    total.backward()
    optimizer.step()
    return out


def train_epoch(
    model,
    optimizer,
    data: TrainingData,
    strategy: StrategyConfig,
    *,
    head: str,
    epoch: int,
    lr: float,
    pool: InterferenceAudio | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> EpochMetrics:
    for group in optimizer.param_groups:
        group["lr"] = lr
    t0 = time.perf_counter()
    history: list[float] = []
    comp_sums: dict[str, float] = {}
    n_items = 0
    for b, waves, labels in data.batches(epoch):
        rng = np.random.default_rng([data.seed, epoch, b, 1])
        subs = augment.make_training_batch(strategy, waves, labels, pool, rng)
        losses = training_step(model, optimizer, subs, head)
        if not math.isfinite(losses["total"]):
            raise TrainingDivergedError(
                f"non-finite loss {losses} at epoch {epoch} batch {b} (lr={lr}); "
                f"last losses: {history[-5:]}"
            )
        history.append(losses["total"])
        for k, v in losses.items():
            if k != "total":
                comp_sums[k] = comp_sums.get(k, 0.0) + v
        n_items += sum(len(sb.labels) for sb in subs)
        if on_step is not None:
            on_step({"epoch": epoch, "step": b, "lr": lr, "loss": losses["total"],
                     "components": {k: v for k, v in losses.items() if k != "total"}})
    n = max(1, len(history))
    return EpochMetrics(
        epoch=epoch,
        lr=lr,
        mean_loss=float(np.mean(history)) if history else float("nan"),
        components={k: v / n for k, v in comp_sums.items()},
        n_steps=len(history),
        n_items=n_items,
        seconds=time.perf_counter() - t0,
    )


@torch.no_grad()
def top1_accuracy(model, records, class_map: ClassMap, batch_size: int = 64) -> float:
    """Clean top-1 over all training classes, in percent."""
    if not records:
        return float("nan")
    model.eval()
    hits = 0
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        waves = [load_fixed_waveform(r, dsp.SAMPLE_RATE, crop_mode="center") for r in chunk]
        logits = model(torch.from_numpy(dsp.fbank_batch(waves)))
        pred = logits.argmax(dim=1).numpy()
        hits += int(sum(p == class_map.index(r.label) for p, r in zip(pred, chunk)))
    return 100.0 * hits / len(records)


def make_optimizer(model, config: TrainConfig):
    return torch.optim.Adam(
        model.parameters(), lr=lr_at(0, config), betas=config.betas, eps=config.eps, weight_decay=config.weight_decay
    )


def _snapshot_path(out_dir: Path, epoch: int) -> Path:
    return out_dir / "snapshots" / f"epoch_{epoch + 1:03d}.npz"


def run_training(
    config: TrainConfig,
    train_records: Sequence[UtteranceRecord],
    class_map: ClassMap,
    out_dir,
    *,
    val_records: Sequence[UtteranceRecord] = (),
    interference: InterferenceAudio | None = None,
    loader: Callable | None = None,
    resume: bool = True,
) -> tuple[ParameterSnapshot, list[dict]]:
    """Train for ``config.epochs`` epochs and average the last snapshots.

    Writes ``snapshots/epoch_NNN.npz`` after every epoch, ``train_log.jsonl``
    and ``final.npz``. A rerun in the same directory resumes after the newest
    snapshot, provided it was written with the same seed and config.
    """
    out_dir = Path(out_dir)
    (out_dir / "snapshots").mkdir(parents=True, exist_ok=True)
    if config.backbone.num_classes != class_map.num_classes:
        raise ValueError(
            f"backbone has {config.backbone.num_classes} outputs but the class map has {class_map.num_classes} classes"
        )
    if config.strategy.needs_interference and (interference is None or len(interference) == 0):
        raise ValueError(f"strategy {config.strategy.name!r} needs a training interference pool")
    chash = config.config_hash()
    provenance = {
        "config_hash": chash,
        "seed": config.seed,
        "strategy": config.strategy.name,
        "class_map": class_map.to_dict(),
    }

    torch.manual_seed(config.seed)
    model = build_backbone(config.backbone)
    optimizer = make_optimizer(model, config)
    data = TrainingData(train_records, class_map, config.batch_size, config.seed, loader)
    if config.input_norm_items > 0 and hasattr(model, "set_input_stats"):
        model.set_input_stats(*estimate_input_stats(data, config.input_norm_items))

    val = list(val_records)
    if config.val_max_items is not None and len(val) > config.val_max_items:
        keep = np.sort(np.random.default_rng([config.seed, 7]).choice(len(val), config.val_max_items, replace=False))
        val = [val[i] for i in keep]

    log_path = out_dir / "train_log.jsonl"
    log: list[dict] = []
    start_epoch = 0
    if resume:
        start_epoch, log = _try_resume(config, model, optimizer, out_dir, chash, log_path)
    log_fh = open(log_path, "w", encoding="utf-8")
    for rec in log:
        log_fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def emit(rec):
        log.append(rec)
        log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
        log_fh.flush()

    try:
        for epoch in range(start_epoch, config.epochs):
            lr = lr_at(epoch, config)
            on_step = (lambda r: emit({"type": "step", **r})) if config.log_steps else None
            metrics = train_epoch(
                model, optimizer, data, config.strategy, head=config.head, epoch=epoch, lr=lr,
                pool=interference, on_step=on_step,
            )
            val_acc = top1_accuracy(model, val, class_map) if val else None
            emit({
                "type": "epoch", "epoch": epoch, "lr": lr, "loss": metrics.mean_loss,
                "components": metrics.components, "val_top1": val_acc, "steps": metrics.n_steps,
                "items_per_s": round(metrics.items_per_s, 3), "wall_s": round(metrics.seconds, 3),
                "seed": config.seed, "config_hash": chash,
            })
            logger.info("epoch %d lr=%.2e loss=%.4f val_top1=%s (%.1f items/s)",
                        epoch + 1, lr, metrics.mean_loss, val_acc, metrics.items_per_s)
            snap = ParameterSnapshot.from_model(model, epoch, **provenance)
            save_snapshot(_snapshot_path(out_dir, epoch), snap, backbone=config.backbone, head=config.head)
            torch.save({"epoch": epoch, "optimizer": optimizer.state_dict()}, out_dir / "optimizer_last.pt")
    finally:
        log_fh.close()

    first = config.epochs - config.average_last
    snaps = [load_snapshot(_snapshot_path(out_dir, e))[0] for e in range(first, config.epochs)]
    final = average_snapshots(snaps)
    final.meta.update(provenance)
    save_snapshot(out_dir / "final.npz", final, backbone=config.backbone, head=config.head)
    return final, log


def _try_resume(config, model, optimizer, out_dir: Path, chash: str, log_path: Path):
    done = sorted((out_dir / "snapshots").glob("epoch_*.npz"))
    if not done:
        return 0, []
    snap, manifest = load_snapshot(done[-1])
    meta = manifest.get("meta", {})
    if meta.get("seed") != config.seed:
        raise ResumeError(
            f"{done[-1]} was trained with seed {meta.get('seed')}, config says {config.seed}; "
            "use a fresh output directory or the original seed"
        )
    if meta.get("config_hash") != chash:
        raise ResumeError(f"{done[-1]} was written by a different configuration (hash {meta.get('config_hash')})")
    epoch = int(manifest["epoch"])
    opt_path = out_dir / "optimizer_last.pt"
    state = torch.load(opt_path, weights_only=False) if opt_path.exists() else None
    if state is None or state["epoch"] != epoch:
        raise ResumeError(f"optimizer state for epoch {epoch + 1} is missing; cannot resume exactly")
    snap.load_into(model)
    optimizer.load_state_dict(state["optimizer"])
    log = []
    if log_path.exists():
        for line in log_path.read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            if rec["epoch"] <= epoch:
                log.append(rec)
    logger.info("resuming after epoch %d from %s", epoch + 1, done[-1])
    return epoch + 1, log


def loss_curve(log: Sequence[dict]) -> list[float]:
    return [r["loss"] for r in log if r.get("type") == "epoch"]
