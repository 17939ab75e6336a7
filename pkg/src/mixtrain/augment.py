"""Training strategies as batch transforms.

Six strategies are supported:

``clean``    volume-scaled clean speech.
``da``       40% of items mixed with interference speech, label unchanged.
``mixup``    pairwise interpolation of waveforms and labels, lambda ~ Beta(0.2, 0.2).
``mixup_u``  the same with lambda ~ Uniform(0, 1).
``mt``       mix training: a clean objective plus pairwise mixtures whose
             target is the union of both labels.
``mt_n``     mix training whose clean objective also receives DA.

Labels are float32 vectors over the training classes. Their kind (one-hot,
k-hot, soft) is inferred from the values.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from mixtrain import dsp

logger = logging.getLogger(__name__)

STRATEGIES = ("clean", "da", "mixup", "mixup_u", "mt", "mt_n")
PAIRING_STRATEGIES = ("mixup", "mixup_u", "mt", "mt_n")

ONE_HOT = "one_hot"
K_HOT = "k_hot"
SOFT = "soft"


class InterferenceSource(Protocol):
    def __len__(self) -> int: ...

    def random_crop(self, rng: np.random.Generator, num_samples: int) -> np.ndarray: ...


@dataclass(frozen=True)
class ScalePair:
    omega1: float
    omega2: float

    def __post_init__(self):
        if self.omega1 < 0 or self.omega2 < 0:
            raise ValueError(f"scale factors must be >= 0, got {self}")

    def swapped(self) -> "ScalePair":
        return ScalePair(self.omega2, self.omega1)


@dataclass
class StrategyConfig:
    name: str = "clean"
    da_probability: float = 0.4
    scale_low: float = 0.1
    scale_high: float = 0.9
    mixup_alpha: float = 0.2
    rng_seed: int = 0

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.name!r}; expected one of {STRATEGIES}")
        if not 0.0 <= self.da_probability <= 1.0:
            raise ValueError(f"da_probability must be in [0, 1], got {self.da_probability}")
        if not 0.0 < self.scale_low < self.scale_high <= 1.0:
            raise ValueError(f"need 0 < scale_low < scale_high <= 1, got {self.scale_low}, {self.scale_high}")
        if self.mixup_alpha <= 0:
            raise ValueError(f"mixup_alpha must be positive, got {self.mixup_alpha}")

    @property
    def needs_interference(self) -> bool:
        return self.name in ("da", "mt_n")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyConfig":
        return cls(**d)


@dataclass
class SubBatch:
    """One loss objective's worth of training items."""

    name: str
    waveforms: np.ndarray  # (B, num_samples)
    labels: np.ndarray  # (B, num_classes)
    features: np.ndarray | None = None  # (B, T, 80)
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------- labels


def one_hot(index: int, num_classes: int) -> np.ndarray:
    y = np.zeros(num_classes, dtype=np.float32)
    y[index] = 1.0
    return y


def k_hot(indices, num_classes: int) -> np.ndarray:
    y = np.zeros(num_classes, dtype=np.float32)
    y[list(indices)] = 1.0
    return y


def label_kind(y) -> str:
    y = np.asarray(y)
    if np.any(y < 0) or np.any(y > 1):
        raise ValueError("label entries must lie in [0, 1]")
    binary = np.all((y == 0) | (y == 1))
    if binary:
        n = int(np.count_nonzero(y))
        if n == 0:
            raise ValueError("label has no active class")
        return ONE_HOT if n == 1 else K_HOT
    return SOFT


def union_labels(y_i, y_j) -> np.ndarray:
    """Elementwise logical OR of two hard labels."""
    if label_kind(y_i) == SOFT or label_kind(y_j) == SOFT:
        raise ValueError("label union is undefined for interpolated (soft) labels")
    y_i = np.asarray(y_i, dtype=np.float32)
    y_j = np.asarray(y_j, dtype=np.float32)
    if y_i.shape != y_j.shape:
        raise ValueError(f"label shape mismatch: {y_i.shape} vs {y_j.shape}")
    return np.maximum(y_i, y_j)


# ---------------------------------------------------------------- samplers


def normalize_scale_pair(a: float, b: float) -> ScalePair:
    total = a + b
    if total <= 0:
        raise ValueError(f"cannot normalize scale draws ({a}, {b})")
    return ScalePair(a / total, b / total)


def sample_scale_pair(rng: np.random.Generator, low: float = 0.1, high: float = 0.9) -> ScalePair:
    """Two independent Uniform(low, high) draws, normalized to sum to 1."""
    a, b = rng.uniform(low, high, size=2)
    return normalize_scale_pair(float(a), float(b))


def sample_volume(rng: np.random.Generator, low: float = 0.1, high: float = 0.9) -> float:
    return float(rng.uniform(low, high))


def sample_lambda(rng: np.random.Generator, source: str = "beta", alpha: float = 0.2) -> float:
    if source == "beta":
        return float(rng.beta(alpha, alpha))
    if source == "uniform":
        return float(rng.uniform(0.0, 1.0))
    raise ValueError(f"unknown lambda source {source!r}")


def pair_permutation(rng: np.random.Generator, n: int) -> np.ndarray:
    """Partner index for every batch item; self-pairing is allowed."""
    return rng.permutation(n)


# ---------------------------------------------------------------- item transforms


def apply_mixup(x_i, y_i, x_j, y_j, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup lambda must be in [0, 1], got {lam}")
    x = dsp.mix(x_i, lam, x_j, 1.0 - lam)
    y = (lam * np.asarray(y_i, dtype=np.float64) + (1.0 - lam) * np.asarray(y_j, dtype=np.float64)).astype(np.float32)
    return x, y


def apply_mt(x_i, y_i, x_j, y_j, omega: ScalePair):
    x = dsp.mix(x_i, omega.omega1, x_j, omega.omega2)
    return x, union_labels(y_i, y_j)


def apply_da(x, y, pool: InterferenceSource, rng: np.random.Generator, config: StrategyConfig | None = None):
    """Return ``(waveform, label, mixed)``.

    With probability ``da_probability`` the item is mixed with a random
    interference crop under a normalized scale pair; otherwise it is only
    volume-scaled. The label is never changed.
    """
    config = config or StrategyConfig(name="da")
    if pool is None or len(pool) == 0:
        raise ValueError("data augmentation needs a non-empty interference pool")
    x = np.asarray(x, dtype=np.float32)
    if rng.random() < config.da_probability:
        noise = pool.random_crop(rng, x.shape[0])
        omega = sample_scale_pair(rng, config.scale_low, config.scale_high)
        return dsp.mix(x, omega.omega1, noise, omega.omega2), y, True
    return dsp.scale(x, sample_volume(rng, config.scale_low, config.scale_high)), y, False


# ---------------------------------------------------------------- batches


def _volume_scaled(waves, rng, config):
    return np.stack([dsp.scale(w, sample_volume(rng, config.scale_low, config.scale_high)) for w in waves])


def _with_da(waves, labels, pool, rng, config):
    out, mixed = [], 0
    for w, y in zip(waves, labels):
        x, _, was_mixed = apply_da(w, y, pool, rng, config)
        out.append(x)
        mixed += was_mixed
    return np.stack(out), mixed


def make_training_batch(
    strategy: StrategyConfig,
    waveforms: Sequence[np.ndarray],
    labels: Sequence[np.ndarray],
    pool: InterferenceSource | None,
    rng: np.random.Generator,
    *,
    featurize: bool = True,
    permutation: np.ndarray | None = None,
) -> list[SubBatch]:
    """Turn a batch of clean one-hot items into the strategy's sub-batches.

    ``mt`` and ``mt_n`` return two sub-batches, ``clean`` then ``mixed``;
    every other strategy returns one.
    """
    waves = np.stack([np.asarray(w, dtype=np.float32) for w in waveforms])
    ys = np.stack([np.asarray(y, dtype=np.float32) for y in labels])
    n = waves.shape[0]
    name = strategy.name
    if name in PAIRING_STRATEGIES and n < 2:
        raise ValueError(f"strategy {name!r} pairs items and needs a batch of at least 2, got {n}")
    if strategy.needs_interference and (pool is None or len(pool) == 0):
        raise ValueError(f"strategy {name!r} needs a non-empty interference pool")

    subs: list[SubBatch] = []
    if name == "clean":
        subs.append(SubBatch("clean", _volume_scaled(waves, rng, strategy), ys))
    elif name == "da":
        out, mixed = _with_da(waves, ys, pool, rng, strategy)
        subs.append(SubBatch("da", out, ys, meta={"mixed": mixed}))
    elif name in ("mixup", "mixup_u"):
        perm = pair_permutation(rng, n) if permutation is None else np.asarray(permutation)
        source = "beta" if name == "mixup" else "uniform"
        xs, ts = [], []
        for i, j in enumerate(perm):
            lam = sample_lambda(rng, source, strategy.mixup_alpha)
            x, y = apply_mixup(waves[i], ys[i], waves[j], ys[j], lam)
            xs.append(x)
            ts.append(y)
        subs.append(SubBatch("mixup", np.stack(xs), np.stack(ts), meta={"permutation": perm}))
    else:  # mt, mt_n
        if name == "mt":
            clean = SubBatch("clean", _volume_scaled(waves, rng, strategy), ys)
        else:
            out, mixed = _with_da(waves, ys, pool, rng, strategy)
            clean = SubBatch("clean", out, ys, meta={"mixed": mixed})
        perm = pair_permutation(rng, n) if permutation is None else np.asarray(permutation)
        xs, ts = [], []
        for i, j in enumerate(perm):
            omega = sample_scale_pair(rng, strategy.scale_low, strategy.scale_high)
            x, y = apply_mt(waves[i], ys[i], waves[j], ys[j], omega)
            xs.append(x)
            ts.append(y)
        subs.append(clean)
        subs.append(SubBatch("mixed", np.stack(xs), np.stack(ts), meta={"permutation": perm}))

    if featurize:
        for sb in subs:
            sb.features = dsp.fbank_batch(sb.waveforms)
    return subs
