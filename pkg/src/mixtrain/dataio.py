"""Corpus ingestion: keyword manifests, interference pools, fixed-length audio."""

from __future__ import annotations

import json
import logging
import os
import re
import wave
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from mixtrain import dsp

logger = logging.getLogger(__name__)

GSC_KEYWORDS = (
    "backward", "bed", "bird", "cat", "dog", "down", "eight", "five", "follow", "forward",
    "four", "go", "happy", "house", "learn", "left", "marvin", "nine", "no", "off",
    "on", "one", "right", "seven", "sheila", "six", "stop", "three", "tree", "two",
    "up", "visual", "wow", "yes", "zero",
)  # fmt: skip
PROTOCOL_TARGETS = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go")
BACKGROUND = "BACKGROUND"
UNKNOWN = "UNKNOWN"
SILENCE = "SILENCE"
BACKGROUND_DIR = "_background_noise_"
SPLITS = ("train", "validation", "test")


class ConfigurationError(Exception):
    """Missing or inconsistent corpus inputs."""


class AudioError(Exception):
    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


@dataclass
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    audio_path: str
    label: str
    split: str
    duration_s: float
    offset_samples: int = 0
    num_samples: int | None = None  # None: to end of file
    transcript: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UtteranceRecord":
        return cls(**d)


@dataclass
class ClassMap:
    """Training classes and their folding onto the 12-class test protocol.

    Targets keep their own protocol class, the other keywords fold into
    UNKNOWN and BACKGROUND becomes SILENCE.
    """

    train_classes: list[str] = field(default_factory=lambda: [*GSC_KEYWORDS, BACKGROUND])
    eval_targets: list[str] = field(default_factory=lambda: list(PROTOCOL_TARGETS))

    def __post_init__(self):
        self.train_classes = list(self.train_classes)
        self.eval_targets = list(self.eval_targets)
        if len(set(self.train_classes)) != len(self.train_classes):
            raise ValueError("train_classes contains duplicates")
        missing = [t for t in self.eval_targets if t not in self.train_classes]
        if missing:
            raise ValueError(f"eval targets not among train classes: {missing}")
        self._index = {c: i for i, c in enumerate(self.train_classes)}

    @property
    def num_classes(self) -> int:
        return len(self.train_classes)

    @property
    def eval_classes(self) -> list[str]:
        return [*self.eval_targets, UNKNOWN, SILENCE]

    @property
    def target_indices(self) -> list[int]:
        return [self._index[t] for t in self.eval_targets]

    @property
    def non_target_indices(self) -> list[int]:
        targets = set(self.eval_targets)
        return [i for i, c in enumerate(self.train_classes) if c not in targets and c != BACKGROUND]

    @property
    def background_index(self) -> int | None:
        return self._index.get(BACKGROUND)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise ValueError(f"unknown class {name!r}") from None

    def protocol_label(self, train_label: str) -> str:
        if train_label in self.eval_targets:
            return train_label
        if train_label == BACKGROUND:
            return SILENCE
        if train_label in self._index:
            return UNKNOWN
        raise ValueError(f"unknown class {train_label!r}")

    def protocol_index(self, train_label: str) -> int:
        return self.eval_classes.index(self.protocol_label(train_label))

    def to_dict(self) -> dict:
        return {"train_classes": self.train_classes, "eval_targets": self.eval_targets}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassMap":
        return cls(d["train_classes"], d["eval_targets"])


@dataclass
class InterferencePool:
    records: list[UtteranceRecord]
    split: str

    def __len__(self) -> int:
        return len(self.records)

    @property
    def speakers(self) -> set[str]:
        return {r.speaker_id for r in self.records}


# ---------------------------------------------------------------- audio


def _read_wav(path: str) -> tuple[np.ndarray, int]:
    with wave.open(path, "rb") as wf:
        rate = wf.getframerate()
        width = wf.getsampwidth()
        channels = wf.getnchannels()
        raw = wf.readframes(wf.getnframes())
    if width == 2:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    elif width == 4:
        x = np.frombuffer(raw, dtype="<i4").astype(np.float64) / 2147483648.0
    elif width == 1:
        x = (np.frombuffer(raw, dtype=np.uint8).astype(np.float32) - 128.0) / 128.0
    else:
        raise AudioError(path, f"unsupported sample width {width}")
    if channels > 1:
        x = x.reshape(-1, channels)[:, 0]
    return x.astype(np.float32), rate


def read_audio(path) -> tuple[np.ndarray, int]:
    """Decode an audio file to float32 mono in [-1, 1].

    WAV is read with the standard library; other formats (FLAC) need the
    optional ``soundfile`` package.
    """
    path = str(path)
    try:
        if path.lower().endswith(".wav"):
            x, rate = _read_wav(path)
        else:
            try:
                import soundfile
            except ImportError:
                raise AudioError(path, "non-WAV audio needs the optional 'soundfile' package") from None
            x, rate = soundfile.read(path, dtype="float32", always_2d=True)
            x = x[:, 0]
    except AudioError:
        raise
    except (OSError, EOFError, wave.Error, RuntimeError, ValueError) as exc:
        raise AudioError(path, f"cannot decode audio ({exc})") from exc
    return np.clip(x, -1.0, 1.0), rate


@lru_cache(maxsize=4096)
def _read_audio_cached(path: str) -> np.ndarray:
    x, rate = read_audio(path)
    if rate != dsp.SAMPLE_RATE:
        raise AudioError(path, f"sample rate {rate} Hz, expected {dsp.SAMPLE_RATE} Hz")
    x.setflags(write=False)
    return x


def record_audio(record: UtteranceRecord) -> np.ndarray:
    x = _read_audio_cached(record.audio_path)
    start = record.offset_samples
    stop = None if record.num_samples is None else start + record.num_samples
    return x[start:stop]


def fix_length(
    x: np.ndarray,
    target_samples: int = dsp.SAMPLE_RATE,
    pad_mode: str = "zero",
    crop_mode: str = "center",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    n = x.shape[0]
    if n == 0:
        raise ValueError("zero-length waveform")
    if n > target_samples:
        if crop_mode == "center":
            start = (n - target_samples) // 2
        elif crop_mode == "random":
            if rng is None:
                raise ValueError("random crop needs a seeded generator")
            start = int(rng.integers(0, n - target_samples + 1))
        else:
            raise ValueError(f"unknown crop mode {crop_mode!r}")
        return np.array(x[start : start + target_samples], dtype=np.float32)
    if n < target_samples:
        if pad_mode == "zero":
            out = np.zeros(target_samples, dtype=np.float32)
            out[:n] = x
            return out
        if pad_mode == "repeat":
            return np.resize(np.asarray(x, dtype=np.float32), target_samples)
        raise ValueError(f"unknown pad mode {pad_mode!r}")
    return np.array(x, dtype=np.float32)


def load_fixed_waveform(
    record: UtteranceRecord,
    target_samples: int = dsp.SAMPLE_RATE,
    pad_mode: str = "zero",
    crop_mode: str = "center",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    x = record_audio(record)
    if x.shape[0] == 0:
        raise AudioError(record.audio_path, "zero-length audio")
    return fix_length(x, target_samples, pad_mode, crop_mode, rng)


class InterferenceAudio:
    """Random fixed-length crops from an interference pool.

    Clips shorter than the requested length are tiled.
    """

    def __init__(self, records: Sequence[UtteranceRecord] = (), arrays: Sequence[np.ndarray] | None = None):
        self.records = list(records)
        self.arrays = None if arrays is None else [np.asarray(a, dtype=np.float32) for a in arrays]

    @classmethod
    def from_pool(cls, pool: InterferencePool) -> "InterferenceAudio":
        return cls(pool.records)

    def __len__(self) -> int:
        return len(self.arrays) if self.arrays is not None else len(self.records)

    def _get(self, i: int) -> np.ndarray:
        if self.arrays is not None:
            return self.arrays[i]
        return record_audio(self.records[i])

    def source_id(self, i: int) -> str:
        return f"array#{i}" if self.arrays is not None else self.records[i].utterance_id

    def draw(self, rng: np.random.Generator, num_samples: int) -> tuple[np.ndarray, int]:
        """Return a random crop and the index of the clip it came from."""
        if len(self) == 0:
            raise ValueError("interference pool is empty")
        i = int(rng.integers(0, len(self)))
        return fix_length(self._get(i), num_samples, pad_mode="repeat", crop_mode="random", rng=rng), i

    def random_crop(self, rng: np.random.Generator, num_samples: int) -> np.ndarray:
        return self.draw(rng, num_samples)[0]


# ---------------------------------------------------------------- keyword corpus


def _read_list(path) -> set[str]:
    if path is None or not Path(path).is_file():
        raise ConfigurationError(f"split list not found: {path}")
    lines = Path(path).read_text().splitlines()
    return {ln.strip().replace("\\", "/") for ln in lines if ln.strip()}


def _speaker_of(filename: str) -> str:
    stem = Path(filename).stem
    return stem.split("_nohash_")[0] if "_nohash_" in stem else stem


def _probe_duration(path: str) -> float:
    if path.lower().endswith(".wav"):
        try:
            with wave.open(path, "rb") as wf:
                rate, frames = wf.getframerate(), wf.getnframes()
        except (OSError, EOFError, wave.Error) as exc:
            raise AudioError(path, f"cannot read WAV header ({exc})") from exc
        if rate != dsp.SAMPLE_RATE:
            raise AudioError(path, f"sample rate {rate} Hz, expected {dsp.SAMPLE_RATE} Hz")
        return frames / rate
    x, rate = read_audio(path)
    return x.shape[0] / rate


def scan_keyword_corpus(
    root,
    validation_list=None,
    testing_list=None,
    keywords: Iterable[str] = GSC_KEYWORDS,
) -> list[UtteranceRecord]:
    """Scan a GSC-style tree (``root/<keyword>/<speaker>_nohash_<n>.wav``).

    Files in ``validation_list.txt`` / ``testing_list.txt`` go to those
    splits, everything else to train. Unreadable files are skipped with a
    warning. Records are sorted by relative path.
    """
    root = Path(root)
    validation = _read_list(validation_list if validation_list is not None else root / "validation_list.txt")
    testing = _read_list(testing_list if testing_list is not None else root / "testing_list.txt")
    overlap = validation & testing
    if overlap:
        raise ConfigurationError(f"{len(overlap)} files listed in both validation and test lists, e.g. {min(overlap)}")
    keywords = set(keywords)

    records, skipped = [], 0
    candidates = []
    if root.is_dir():
        for sub in sorted(p for p in root.iterdir() if p.is_dir()):
            if sub.name.startswith("_"):
                continue
            if sub.name not in keywords:
                logger.warning("ignoring directory %s: not a known keyword", sub)
                continue
            candidates.extend(sub.glob("*.wav"))
    for path in sorted(candidates, key=lambda p: p.relative_to(root).as_posix()):
        rel = path.relative_to(root).as_posix()
        try:
            duration = _probe_duration(str(path))
        except AudioError as exc:
            logger.warning("skipping unreadable audio %s", exc)
            skipped += 1
            continue
        if duration == 0:
            logger.warning("skipping zero-length audio %s", path)
            skipped += 1
            continue
        split = "validation" if rel in validation else "test" if rel in testing else "train"
        records.append(
            UtteranceRecord(
                utterance_id=rel.rsplit(".", 1)[0],
                speaker_id=_speaker_of(path.name),
                audio_path=str(path.resolve()),
                label=path.parent.name,
                split=split,
                duration_s=round(duration, 6),
            )
        )
    counts = {s: sum(r.split == s for r in records) for s in SPLITS}
    logger.info("scanned %s: %d records %s, %d skipped", root, len(records), counts, skipped)
    return records


def scan_background_segments(
    root,
    segment_samples: int = dsp.SAMPLE_RATE,
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> list[UtteranceRecord]:
    """Cut the long background-noise recordings into 1 s BACKGROUND records.

    The official lists do not cover these files, so each recording is split
    in time: its first 80% of segments train, the next 10% validate, the rest
    test.
    """
    bg_dir = Path(root) / BACKGROUND_DIR
    if not bg_dir.is_dir():
        return []
    records = []
    for path in sorted(bg_dir.glob("*.wav")):
        try:
            duration = _probe_duration(str(path))
        except AudioError as exc:
            logger.warning("skipping unreadable background audio %s", exc)
            continue
        n_seg = int(round(duration * dsp.SAMPLE_RATE)) // segment_samples
        n_train = int(n_seg * split_fractions[0])
        n_val = int(n_seg * split_fractions[1])
        for k in range(n_seg):
            split = "train" if k < n_train else "validation" if k < n_train + n_val else "test"
            records.append(
                UtteranceRecord(
                    utterance_id=f"{BACKGROUND_DIR}/{path.stem}#{k:04d}",
                    speaker_id=path.stem,
                    audio_path=str(path.resolve()),
                    label=BACKGROUND,
                    split=split,
                    duration_s=segment_samples / dsp.SAMPLE_RATE,
                    offset_samples=k * segment_samples,
                    num_samples=segment_samples,
                )
            )
    return records


# ---------------------------------------------------------------- interference


_WORD_RE = re.compile(r"[a-z0-9']+")


def transcript_words(transcript: str) -> set[str]:
    return set(_WORD_RE.findall(transcript.lower()))


def contains_keyword(transcript: str, keywords: Iterable[str]) -> bool:
    """Case-insensitive whole-word match, so "lefty" does not match "left"."""
    words = transcript_words(transcript)
    return any(k.lower() in words for k in keywords)


def read_transcript_table(path) -> list[UtteranceRecord]:
    """Parse a tab-separated ``id, speaker, path, transcript`` table.

    Relative audio paths resolve against the table's directory. Durations are
    left at 0 here; they are not needed to draw crops.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"transcript table not found: {path}")
    base = path.parent
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ConfigurationError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        uid, speaker, audio, text = parts
        audio_path = Path(audio)
        if not audio_path.is_absolute():
            audio_path = base / audio_path
        records.append(
            UtteranceRecord(uid, speaker, str(audio_path.resolve()), BACKGROUND, "train", 0.0, transcript=text)
        )
    return records


def build_interference_pool(
    records: Sequence[UtteranceRecord],
    keywords: Iterable[str],
    train_count: int,
    test_count: int,
    seed: int,
) -> tuple[InterferencePool, InterferencePool]:
    """Filter keyword-bearing utterances and draw speaker-disjoint pools.

    Speakers are shuffled under ``seed`` and handed to the test side until it
    holds at least ``test_count`` utterances; the remaining speakers feed the
    train side.
    """
    keywords = list(keywords)
    clean = []
    for r in records:
        if r.transcript is None:
            raise ConfigurationError(f"interference record {r.utterance_id} has no transcript")
        if not contains_keyword(r.transcript, keywords):
            clean.append(r)
    logger.info("interference filter kept %d of %d utterances", len(clean), len(records))
    if len(clean) < train_count + test_count:
        raise ConfigurationError(
            f"need {train_count + test_count} keyword-free utterances, only {len(clean)} available "
            f"(short by {train_count + test_count - len(clean)})"
        )
    by_speaker = defaultdict(list)
    for r in sorted(clean, key=lambda r: r.utterance_id):
        by_speaker[r.speaker_id].append(r)
    speakers = sorted(by_speaker)
    rng = np.random.default_rng(seed)
    order = [speakers[i] for i in rng.permutation(len(speakers))]

    test_speakers, n_test = [], 0
    for spk in order:
        if n_test >= test_count:
            break
        test_speakers.append(spk)
        n_test += len(by_speaker[spk])
    train_speakers = [s for s in order if s not in set(test_speakers)]
    test_cands = [r for s in test_speakers for r in by_speaker[s]]
    train_cands = [r for s in train_speakers for r in by_speaker[s]]
    if len(test_cands) < test_count or len(train_cands) < train_count:
        raise ConfigurationError(
            "cannot form speaker-disjoint pools: "
            f"test side has {len(test_cands)}/{test_count}, train side {len(train_cands)}/{train_count} utterances"
        )

    def draw(cands, count, split):
        idx = np.sort(rng.choice(len(cands), size=count, replace=False))
        out = []
        for i in idx:
            d = cands[i].to_dict()
            d["split"] = split
            out.append(UtteranceRecord.from_dict(d))
        return InterferencePool(sorted(out, key=lambda r: r.utterance_id), split)

    return draw(train_cands, train_count, "train"), draw(test_cands, test_count, "test")


# ---------------------------------------------------------------- manifests


def manifest_lines(records: Iterable[UtteranceRecord]) -> str:
    return "".join(json.dumps(r.to_dict(), sort_keys=True, ensure_ascii=False) + "\n" for r in records)


def write_manifest(path, records: Iterable[UtteranceRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(manifest_lines(records), encoding="utf-8")
    os.replace(tmp, path)


def read_manifest(path) -> list[UtteranceRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(UtteranceRecord.from_dict(json.loads(line)))
    return out


def split_records(records: Iterable[UtteranceRecord], split: str) -> list[UtteranceRecord]:
    return [r for r in records if r.split == split]


def write_wav(path, samples, rate: int = dsp.SAMPLE_RATE) -> None:
    """Write float samples in [-1, 1] as 16-bit PCM mono."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32767.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        wf.writeframes(pcm.tobytes())
