"""Test-condition builders, detection/classification metrics and reports.

Four conditions are supported:

``clean``      12-class protocol on clean test utterances (top-1, EER).
``mixed``      two distinct protocol keywords mixed under a sampled scale pair (top-2, EER).
``weak_1_10``  two keywords at a 1:10 peak ratio; only the weak one is scored (masked top-1, EER).
``noisy_10x``  protocol utterances under interference speech 10x louder (top-1, EER).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from mixtrain import dsp
from mixtrain.augment import ScalePair, sample_scale_pair
from mixtrain.dataio import (
    BACKGROUND,
    ClassMap,
    InterferenceAudio,
    UtteranceRecord,
    load_fixed_waveform,
)
from mixtrain.model import predict_scores

logger = logging.getLogger(__name__)

CONDITIONS = ("clean", "mixed", "weak_1_10", "noisy_10x")
EQUAL_SAMPLED = "equal_sampled"
ONE_TO_TEN = "one_to_ten"
WEAK_STRONG = ScalePair(1.0 / 11.0, 10.0 / 11.0)  # (weak, strong)


@dataclass(frozen=True)
class Trial:
    utterance_id: str
    class_name: str
    score: float
    is_target: bool


@dataclass
class TestItem:
    """A single-keyword test utterance, optionally corrupted by interference."""

    __test__ = False  # keep pytest from collecting this as a test class

    utterance_id: str
    waveform: np.ndarray
    label: str
    interference_id: str | None = None
    scale_pair: ScalePair | None = None

    def provenance(self) -> dict:
        return {
            "utterance_id": self.utterance_id,
            "label": self.label,
            "interference_id": self.interference_id,
            "scale_pair": None if self.scale_pair is None else [self.scale_pair.omega1, self.scale_pair.omega2],
        }


@dataclass
class MixedTestItem:
    """Mixture of two keyword utterances with distinct labels.

    ``labels``, ``component_ids`` and ``scale_pair`` are aligned. For 1:10
    items the first component is the weak one.
    """

    waveform: np.ndarray
    labels: tuple[str, str]
    scale_pair: ScalePair
    component_ids: tuple[str, str]
    ratio: str = EQUAL_SAMPLED

    @property
    def weak_label(self) -> str | None:
        return self.labels[0] if self.ratio == ONE_TO_TEN else None

    @property
    def strong_label(self) -> str | None:
        return self.labels[1] if self.ratio == ONE_TO_TEN else None

    @property
    def utterance_id(self) -> str:
        return "+".join(self.component_ids)

    def provenance(self) -> dict:
        return {
            "component_ids": list(self.component_ids),
            "labels": list(self.labels),
            "scale_pair": [self.scale_pair.omega1, self.scale_pair.omega2],
            "ratio": self.ratio,
        }


@dataclass
class EvalReport:
    condition: str
    eer_percent: float
    accuracy_percent: float
    accuracy_kind: str
    n_items: int
    strategy: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


# ---------------------------------------------------------------- builders


Loader = Callable[[UtteranceRecord], np.ndarray]


def _default_loader(record: UtteranceRecord) -> np.ndarray:
    return load_fixed_waveform(record, dsp.SAMPLE_RATE, pad_mode="zero", crop_mode="center")


def build_protocol_test(
    records: Sequence[UtteranceRecord],
    class_map: ClassMap,
    seed: int,
    *,
    split: str = "test",
    loader: Loader = _default_loader,
) -> list[TestItem]:
    """Clean 12-class protocol set.

    Every target-keyword utterance of ``split`` is kept. UNKNOWN and SILENCE
    each get as many items as the average target class, drawn under
    ``seed`` from the other keywords and the background segments.
    """
    pool = sorted((r for r in records if r.split == split), key=lambda r: r.utterance_id)
    targets = [r for r in pool if r.label in class_map.eval_targets]
    unknown = [r for r in pool if r.label != BACKGROUND and r.label not in class_map.eval_targets]
    silence = [r for r in pool if r.label == BACKGROUND]
    n_fill = int(round(len(targets) / max(1, len(class_map.eval_targets))))
    rng = np.random.default_rng(seed)

    def draw(cands):
        if not cands:
            return []
        idx = np.sort(rng.choice(len(cands), size=min(n_fill, len(cands)), replace=False))
        return [cands[i] for i in idx]

    chosen = targets + draw(unknown) + draw(silence)
    return [TestItem(r.utterance_id, loader(r), r.label) for r in chosen]


def build_mixed_test(
    records: Sequence[UtteranceRecord],
    class_map: ClassMap,
    ratio: str,
    n_items: int,
    seed: int,
    *,
    scale_low: float = 0.1,
    scale_high: float = 0.9,
    ratio_measure: str = "peak",
    loader: Loader = _default_loader,
) -> list[MixedTestItem]:
    """Random two-keyword mixtures of protocol-target test utterances.

    ``equal_sampled`` mixes the raw waveforms under a normalized
    Uniform(0.1, 0.9) scale pair. ``one_to_ten`` first normalizes both
    components (by peak, or RMS with ``ratio_measure="rms"``) and scales
    them by 1/11 (weak) and 10/11 (strong).
    """
    if ratio not in (EQUAL_SAMPLED, ONE_TO_TEN):
        raise ValueError(f"unknown mixing ratio {ratio!r}")
    if ratio_measure not in ("peak", "rms"):
        raise ValueError(f"unknown ratio measure {ratio_measure!r}")
    if n_items == 0:
        return []
    cands = sorted((r for r in records if r.label in class_map.eval_targets), key=lambda r: r.utterance_id)
    labels = np.array([r.label for r in cands])
    if len(set(labels)) < 2:
        raise ValueError("mixed test needs utterances of at least two distinct protocol keywords")
    rng = np.random.default_rng(seed)
    cache: dict[int, np.ndarray] = {}

    def wave(i):
        if i not in cache:
            cache[i] = loader(cands[i])
        return cache[i]

    items, attempts = [], 0
    while len(items) < n_items:
        attempts += 1
        if attempts > 20 * n_items + 100:
            raise ValueError(f"could only build {len(items)} of {n_items} mixtures (too many silent components)")
        i = int(rng.integers(0, len(cands)))
        others = np.flatnonzero(labels != labels[i])
        j = int(others[rng.integers(0, len(others))])
        x_i, x_j = wave(i), wave(j)
        if ratio == EQUAL_SAMPLED:
            omega = sample_scale_pair(rng, scale_low, scale_high)
            x = dsp.mix(x_i, omega.omega1, x_j, omega.omega2)
        else:
            if dsp.peak(x_i) == 0 or dsp.peak(x_j) == 0:
                continue
            omega = WEAK_STRONG
            x = _weak_strong_mix(x_i, x_j, ratio_measure)
        items.append(
            MixedTestItem(x, (cands[i].label, cands[j].label), omega, (cands[i].utterance_id, cands[j].utterance_id), ratio)
        )
    return items


def _normalize(x, measure):
    if measure == "peak":
        return dsp.peak_normalize(x)
    return (x / dsp.rms(x)).astype(np.float32)


def _weak_strong_mix(weak, strong, measure="peak"):
    x = dsp.mix(_normalize(weak, measure), WEAK_STRONG.omega1, _normalize(strong, measure), WEAK_STRONG.omega2)
    if measure == "rms":
        p = dsp.peak(x)
        if p > 1:
            x = (x / p).astype(np.float32)
    return x


def build_noisy_test(
    items: Sequence[TestItem],
    interference: InterferenceAudio,
    seed: int,
    *,
    ratio_measure: str = "peak",
) -> list[TestItem]:
    """Corrupt each test item with an interference crop 10x louder."""
    if interference is None or len(interference) == 0:
        raise ValueError("noisy test needs a non-empty test interference pool")
    rng = np.random.default_rng(seed)
    out = []
    for item in items:
        noise, src = interference.draw(rng, item.waveform.shape[0])
        if dsp.peak(noise) == 0:
            raise ValueError(f"interference clip {interference.source_id(src)} is silent")
        if dsp.peak(item.waveform) == 0:
            x = dsp.mix(item.waveform, WEAK_STRONG.omega1, _normalize(noise, ratio_measure), WEAK_STRONG.omega2)
        else:
            x = _weak_strong_mix(item.waveform, noise, ratio_measure)
        out.append(TestItem(item.utterance_id, x, item.label, interference.source_id(src), WEAK_STRONG))
    return out


def write_test_manifest(path, items: Iterable) -> None:
    """Persist mixture provenance (no audio) as one JSON object per line."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item.provenance(), sort_keys=True) + "\n")


# ---------------------------------------------------------------- metrics


def protocol_scores(raw_scores, class_map: ClassMap) -> np.ndarray:
    """Fold per-class scores onto the 12 protocol classes.

    Targets are copied, UNKNOWN is the maximum over the other keywords and
    SILENCE is the background score.
    """
    raw = np.asarray(raw_scores, dtype=np.float64)
    squeeze = raw.ndim == 1
    raw = np.atleast_2d(raw)
    out = np.empty((raw.shape[0], len(class_map.eval_targets) + 2))
    out[:, :-2] = raw[:, class_map.target_indices]
    nt = class_map.non_target_indices
    out[:, -2] = raw[:, nt].max(axis=1) if nt else -np.inf
    bg = class_map.background_index
    out[:, -1] = raw[:, bg] if bg is not None else -np.inf
    return out[0] if squeeze else out


def _rocch(tar: np.ndarray, non: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lower convex hull of the (false alarm, miss) operating points."""
    thresholds = np.unique(np.concatenate([tar, non]))
    tar_s, non_s = np.sort(tar), np.sort(non)
    # accept when score >= threshold; the extra threshold accepts nothing
    miss = np.searchsorted(tar_s, thresholds, side="left") / tar.size
    fa = 1.0 - np.searchsorted(non_s, thresholds, side="left") / non.size
    miss = np.append(miss, 1.0)
    fa = np.append(fa, 0.0)
    order = np.lexsort((miss, fa))
    pts = np.stack([fa[order], miss[order]], axis=1)
    hull: list[np.ndarray] = []
    for p in pts:
        while len(hull) >= 2:
            o, a = hull[-2], hull[-1]
            cross = (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0])
            if cross <= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    h = np.array(hull)
    return h[:, 0], h[:, 1]


def eer_from_scores(tar_scores, non_scores) -> float:
    """Equal error rate in percent, interpolated on the ROC convex hull."""
    tar = np.asarray(tar_scores, dtype=np.float64).ravel()
    non = np.asarray(non_scores, dtype=np.float64).ravel()
    if tar.size == 0 or non.size == 0:
        raise ValueError(f"EER needs target and non-target trials, got {tar.size} and {non.size}")
    if not (np.all(np.isfinite(tar)) and np.all(np.isfinite(non))):
        raise ValueError("trial scores must be finite")
    fa, miss = _rocch(tar, non)
    diff = fa - miss  # strictly increasing along the hull, from <= 0 to 1
    k = int(np.searchsorted(diff, 0.0, side="left"))
    if diff[k] == 0.0:
        return 100.0 * float(miss[k])
    k0, k1 = k - 1, k
    s = -diff[k0] / (diff[k1] - diff[k0])
    return 100.0 * float(miss[k0] + s * (miss[k1] - miss[k0]))


def compute_eer(trials: Sequence[Trial]) -> float:
    tar = [t.score for t in trials if t.is_target]
    non = [t.score for t in trials if not t.is_target]
    return eer_from_scores(tar, non)


def per_class_eer(trials: Sequence[Trial]) -> float:
    """Mean of per-class EERs; classes lacking target or non-target trials are left out."""
    by_class: dict[str, list[Trial]] = {}
    for t in trials:
        by_class.setdefault(t.class_name, []).append(t)
    eers = [
        compute_eer(ts)
        for ts in by_class.values()
        if any(t.is_target for t in ts) and not all(t.is_target for t in ts)
    ]
    if not eers:
        raise ValueError("no class has both target and non-target trials")
    return float(np.mean(eers))


def _ranked(score_rows) -> np.ndarray:
    # stable sort keeps the lower class index first among ties
    return np.argsort(-np.asarray(score_rows, dtype=np.float64), axis=1, kind="stable")


def top_k_accuracy(score_rows, label_sets, k: int) -> float:
    """Percent of rows whose whole label set lies in the top ``k`` classes."""
    scores = np.atleast_2d(np.asarray(score_rows, dtype=np.float64))
    label_sets = [set(np.atleast_1d(ls).tolist()) for ls in label_sets]
    if len(label_sets) != scores.shape[0]:
        raise ValueError(f"{scores.shape[0]} score rows but {len(label_sets)} label sets")
    for ls in label_sets:
        if len(ls) > k:
            raise ValueError(f"label set of size {len(ls)} cannot fit in the top {k}")
    if scores.shape[0] == 0:
        return 0.0
    top = _ranked(scores)[:, :k]
    hits = sum(ls <= set(row.tolist()) for ls, row in zip(label_sets, top))
    return 100.0 * hits / scores.shape[0]


def masked_top1_weak(score_rows, strong_labels, weak_labels, candidates: Sequence[int] | None = None) -> float:
    """Top-1 accuracy on the weak keyword after zeroing the strong one's score.

    ``candidates`` restricts the argmax to a subset of columns (default: all).
    """
    scores = np.array(np.atleast_2d(score_rows), dtype=np.float64)
    strong = np.asarray(strong_labels, dtype=int)
    weak = np.asarray(weak_labels, dtype=int)
    if np.any(strong == weak):
        raise ValueError("strong and weak keyword must differ in every row")
    if scores.shape[0] == 0:
        return 0.0
    scores[np.arange(scores.shape[0]), strong] = 0.0
    cols = np.arange(scores.shape[1]) if candidates is None else np.asarray(candidates, dtype=int)
    pred = cols[_ranked(scores[:, cols])[:, 0]]
    return 100.0 * float(np.mean(pred == weak))


# ---------------------------------------------------------------- scoring


@torch.no_grad()
def score_waveforms(model, head: str, waveforms, batch_size: int = 64) -> np.ndarray:
    """Per-class scores for a list of equal-length waveforms."""
    model.eval()
    out = []
    for start in range(0, len(waveforms), batch_size):
        feats = torch.from_numpy(dsp.fbank_batch(waveforms[start : start + batch_size]))
        out.append(predict_scores(model(feats), head).double().numpy())
    if not out:
        return np.zeros((0, 0))
    return np.concatenate(out)


def _keyword_trials(ids, protocol_rows, target_sets, class_map, exclude=None) -> list[Trial]:
    trials = []
    for n, (uid, row, targets) in enumerate(zip(ids, protocol_rows, target_sets)):
        for c, name in enumerate(class_map.eval_targets):
            if exclude is not None and exclude[n] == name:
                continue
            trials.append(Trial(uid, name, float(row[c]), name in targets))
    return trials


def evaluate(model, head: str, condition: str, test_set: Sequence, class_map: ClassMap, *, batch_size: int = 64) -> EvalReport:
    """Score ``test_set`` under ``condition`` and reduce to an :class:`EvalReport`."""
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}")
    if not test_set:
        raise ValueError(f"empty test set for condition {condition!r}")
    mixed = isinstance(test_set[0], MixedTestItem)
    want_ratio = {"mixed": EQUAL_SAMPLED, "weak_1_10": ONE_TO_TEN}.get(condition)
    if mixed != (want_ratio is not None) or (mixed and any(it.ratio != want_ratio for it in test_set)):
        raise ValueError(f"test set does not match condition {condition!r}")
    if condition == "noisy_10x" and any(it.interference_id is None for it in test_set):
        raise ValueError("noisy condition needs items built by build_noisy_test")
    if condition == "clean" and any(it.interference_id is not None for it in test_set):
        raise ValueError("clean condition got interference-corrupted items")

    raw = score_waveforms(model, head, [it.waveform for it in test_set], batch_size)
    proto = protocol_scores(raw, class_map)
    eval_classes = class_map.eval_classes
    ids = [it.utterance_id for it in test_set]

    if condition in ("clean", "noisy_10x"):
        gold = [class_map.protocol_index(it.label) for it in test_set]
        acc = top_k_accuracy(proto, [[g] for g in gold], 1)
        trials = _keyword_trials(ids, proto, [{it.label} for it in test_set], class_map)
        kind = "top1"
    elif condition == "mixed":
        gold = [[eval_classes.index(l) for l in it.labels] for it in test_set]
        acc = top_k_accuracy(proto, gold, 2)
        trials = _keyword_trials(ids, proto, [set(it.labels) for it in test_set], class_map)
        kind = "top2"
    else:
        n_t = len(class_map.eval_targets)
        strong = [eval_classes.index(it.strong_label) for it in test_set]
        weak = [eval_classes.index(it.weak_label) for it in test_set]
        acc = masked_top1_weak(proto, strong, weak, candidates=range(n_t))
        trials = _keyword_trials(
            ids, proto, [{it.weak_label} for it in test_set], class_map, exclude=[it.strong_label for it in test_set]
        )
        kind = "masked_top1"
    eer = compute_eer(trials)
    try:
        meta = {"eer_per_class_mean": per_class_eer(trials)}
    except ValueError:
        meta = {}
    return EvalReport(condition, eer, acc, kind, len(test_set), meta=meta)


# ---------------------------------------------------------------- tables


def write_reports(path, reports: Iterable[EvalReport]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_reports(path) -> list[EvalReport]:
    with open(path, encoding="utf-8") as fh:
        return [EvalReport.from_dict(json.loads(ln)) for ln in fh if ln.strip()]


_ACC_HEADER = {"top1": "Top1 Acc", "top2": "Top2 Acc", "masked_top1": "Top1 Acc"}
STRATEGY_ROWS = {"clean": "Clean", "da": "DA", "mixup": "Mixup", "mixup_u": "Mixup (U)", "mt": "MT", "mt_n": "MT (N)"}


def format_table(reports: Sequence[EvalReport]) -> str:
    """Plain-text table: one row per strategy, EER and accuracy per condition."""
    conditions = [c for c in CONDITIONS if any(r.condition == c for r in reports)]
    strategies = list(dict.fromkeys(r.strategy for r in reports))
    cell = {(r.strategy, r.condition): r for r in reports}
    kinds = {r.condition: r.accuracy_kind for r in reports}
    header1 = ["".ljust(12)] + [c.center(21) for c in conditions]
    header2 = ["".ljust(12)] + [f"{'EER':>9} {_ACC_HEADER[kinds[c]]:>11}" for c in conditions]
    lines = [" ".join(header1).rstrip(), " ".join(header2)]
    for s in strategies:
        row = [STRATEGY_ROWS.get(s, s or "-").ljust(12)]
        for c in conditions:
            r = cell.get((s, c))
            row.append(f"{'-':>9} {'-':>11}" if r is None else f"{r.eer_percent:9.2f} {r.accuracy_percent:11.2f}")
        lines.append(" ".join(row))
    return "\n".join(lines) + "\n"
