"""Vanilla CNN backbone, output heads, losses and parameter snapshots."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from mixtrain import dsp

CE_SOFTMAX = "ce_softmax"
BCE_SIGMOID = "bce_sigmoid"
HEADS = (CE_SOFTMAX, BCE_SIGMOID)


@dataclass
class BackboneConfig:
    name: str = "vanilla_cnn"
    block_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 64, 128, 256, 512])
    kernel: int = 3
    strides: list[tuple[int, int]] = field(default_factory=lambda: [(2, 1), (2, 1)] + [(1, 1)] * 5)
    num_classes: int = 36
    n_mels: int = dsp.N_MELS

    def __post_init__(self):
        self.block_channels = [int(c) for c in self.block_channels]
        self.strides = [tuple(int(v) for v in s) for s in self.strides]
        if len(self.block_channels) != len(self.strides):
            raise ValueError(
                f"{len(self.block_channels)} block channel counts but {len(self.strides)} strides"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = [list(s) for s in self.strides]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


class ChannelLayerNorm(nn.Module):
    """LayerNorm over channels at every (frequency, time) position."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: tuple[int, int]):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=kernel // 2)
        self.norm = ChannelLayerNorm(c_out)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class VanillaCNN(nn.Module):
    """Conv -> LayerNorm -> ReLU blocks, global average pooling, linear classifier.

    Input features are ``(batch, frames, mel_bins)``; strides are applied as
    (frequency, time). Features are first standardized per mel bin with fixed
    corpus-level statistics (identity until :meth:`set_input_stats`). This is
    one affine map shared by every utterance, so volume differences survive.
    """

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config or BackboneConfig()
        blocks, c_in = [], 1
        for c_out, stride in zip(self.config.block_channels, self.config.strides):
            blocks.append(ConvBlock(c_in, c_out, self.config.kernel, stride))
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        self.classifier = nn.Linear(c_in, self.config.num_classes)
        self.register_buffer("feat_mean", torch.zeros(self.config.n_mels))
        self.register_buffer("feat_std", torch.ones(self.config.n_mels))

    def set_input_stats(self, mean, std) -> None:
        mean = torch.as_tensor(np.asarray(mean), dtype=torch.float32)
        std = torch.as_tensor(np.asarray(std), dtype=torch.float32)
        if mean.shape != self.feat_mean.shape or std.shape != self.feat_std.shape:
            raise ValueError(f"input stats must have shape ({self.config.n_mels},)")
        if not torch.all(std > 0):
            raise ValueError("input std must be positive")
        self.feat_mean.copy_(mean)
        self.feat_std.copy_(std)

    def forward(self, features):
        if features.dim() != 3 or features.shape[-1] != self.config.n_mels:
            raise ValueError(
                f"expected features of shape (batch, frames, {self.config.n_mels}), got {tuple(features.shape)}"
            )
        x = (features - self.feat_mean) / self.feat_std
        x = x.transpose(1, 2).unsqueeze(1)  # (B, 1, F, T)
        x = self.blocks(x)
        return self.classifier(x.mean(dim=(2, 3)))


_BACKBONES: dict[str, Callable[[BackboneConfig], nn.Module]] = {}


def register_backbone(name: str):
    """Register a factory ``BackboneConfig -> nn.Module``.

    A backbone maps ``(batch, frames, n_mels)`` features to
    ``(batch, num_classes)`` logits; nothing else is assumed.
    """

    def deco(factory):
        _BACKBONES[name] = factory
        return factory

    return deco


register_backbone("vanilla_cnn")(VanillaCNN)


def build_backbone(config: BackboneConfig) -> nn.Module:
    try:
        factory = _BACKBONES[config.name]
    except KeyError:
        raise ValueError(f"unknown backbone {config.name!r}; registered: {sorted(_BACKBONES)}") from None
    return factory(config)


# ---------------------------------------------------------------- heads and losses


def predict_scores(logits, head: str):
    if head == CE_SOFTMAX:
        return torch.softmax(logits, dim=-1)
    if head == BCE_SIGMOID:
        return torch.sigmoid(logits)
    raise ValueError(f"unknown head {head!r}")


def ce_loss(logits, targets):
    """Batch mean of ``-sum_c y_c log softmax(logits)_c``.

    Targets must be one-hot or soft (rows summing to 1); a union label has
    no categorical reading and is rejected.
    """
    sums = targets.sum(dim=-1)
    if torch.any(torch.abs(sums - 1) > 1e-4):
        raise ValueError("cross entropy needs one-hot or soft labels summing to 1; got a k-hot or empty label")
    return -(targets * torch.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def bce_loss(logits, targets):
    """Mean over batch and classes of the per-class binary cross entropy."""
    return F.binary_cross_entropy_with_logits(logits, targets, reduction="mean")


def loss_for_head(head: str):
    if head == CE_SOFTMAX:
        return ce_loss
    if head == BCE_SIGMOID:
        return bce_loss
    raise ValueError(f"unknown head {head!r}")


# ---------------------------------------------------------------- snapshots


@dataclass
class ParameterSnapshot:
    tensors: dict[str, np.ndarray]
    epoch: int = -1
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: nn.Module, epoch: int = -1, **meta) -> "ParameterSnapshot":
        tensors = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(tensors, epoch, dict(meta))

    def load_into(self, model: nn.Module) -> nn.Module:
        expected = model.state_dict()
        _check_schema(expected, self.tensors, "model", "snapshot")
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.tensors.items()})
        return model

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


def _check_schema(a, b, a_name="first", b_name="other"):
    if set(a) != set(b):
        missing = sorted(set(a) ^ set(b))
        raise ValueError(f"schema mismatch between {a_name} and {b_name}: tensor {missing[0]!r} not in both")
    for k in a:
        if tuple(a[k].shape) != tuple(b[k].shape):
            raise ValueError(f"schema mismatch for tensor {k!r}: {tuple(a[k].shape)} vs {tuple(b[k].shape)}")


def average_snapshots(snapshots: list[ParameterSnapshot]) -> ParameterSnapshot:
    if not snapshots:
        raise ValueError("need at least one snapshot to average")
    first = snapshots[0]
    for i, s in enumerate(snapshots[1:], start=1):
        _check_schema(first.tensors, s.tensors, "snapshot 0", f"snapshot {i}")
    out = {}
    for k, v in first.tensors.items():
        acc = np.zeros(v.shape, dtype=np.float64)
        for s in snapshots:
            acc += s.tensors[k]
        out[k] = (acc / len(snapshots)).astype(v.dtype)
    meta = dict(first.meta)
    meta["averaged_epochs"] = [s.epoch for s in snapshots]
    return ParameterSnapshot(out, max(s.epoch for s in snapshots), meta)


_FIXED_ZIP_TIME = (1980, 1, 1, 0, 0, 0)
MANIFEST_ENTRY = "__manifest__.json"


def save_snapshot(path, snapshot: ParameterSnapshot, *, backbone: BackboneConfig, head: str, **extra) -> None:
    """Write ``snapshot`` as an ``.npz``-compatible archive.

    Entries are written in sorted order with a fixed timestamp so the bytes
    depend only on the parameter values and the manifest.
    """
    manifest = {
        "backbone": backbone.to_dict(),
        "head": head,
        "epoch": snapshot.epoch,
        "tensors": {k: list(v.shape) for k, v in sorted(snapshot.tensors.items())},
        "meta": snapshot.meta,
        **extra,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo(MANIFEST_ENTRY, date_time=_FIXED_ZIP_TIME)
        zf.writestr(info, json.dumps(manifest, sort_keys=True, indent=1))
        for name in sorted(snapshot.tensors):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(snapshot.tensors[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=_FIXED_ZIP_TIME), buf.getvalue())
    tmp.replace(path)


def load_snapshot(path) -> tuple[ParameterSnapshot, dict]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read(MANIFEST_ENTRY))
        tensors = {}
        for name in manifest["tensors"]:
            tensors[name] = np.lib.format.read_array(io.BytesIO(zf.read(name + ".npy")), allow_pickle=False)
    return ParameterSnapshot(tensors, manifest["epoch"], manifest.get("meta", {})), manifest


def model_from_snapshot_file(path) -> tuple[nn.Module, dict]:
    snap, manifest = load_snapshot(path)
    model = build_backbone(BackboneConfig.from_dict(manifest["backbone"]))
    snap.load_into(model)
    model.eval()
    return model, manifest
