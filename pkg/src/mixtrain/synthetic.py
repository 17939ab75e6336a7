"""Seeded toy corpora laid out like the real ones.

Each keyword gets a fixed recipe of voiced "syllables" (formant pair, pitch
slope, duration, optional fricative burst), rendered per speaker with
speaker-specific pitch, vocal-tract scale and speaking rate. This gives
data that exercises the whole pipeline and is learnable in minutes on a
CPU; it says nothing about accuracy on real speech.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from mixtrain import dsp
from mixtrain.dataio import BACKGROUND_DIR, GSC_KEYWORDS, write_wav

SR = dsp.SAMPLE_RATE


@dataclass(frozen=True)
class Syllable:
    f1: float
    f2: float
    duration: float
    pitch_slope: float
    burst_hz: float  # 0 means no burst


@dataclass(frozen=True)
class Speaker:
    speaker_id: str
    f0: float
    formant_scale: float
    rate: float


def _stable_rng(*parts) -> np.random.Generator:
    digest = hashlib.sha256("/".join(map(str, parts)).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def word_recipe(word: str) -> list[Syllable]:
    rng = _stable_rng("recipe", word)
    n = int(rng.integers(1, 4))
    out = []
    for _ in range(n):
        out.append(
            Syllable(
                f1=float(rng.uniform(280, 900)),
                f2=float(rng.uniform(900, 2600)),
                duration=float(rng.uniform(0.12, 0.26)),
                pitch_slope=float(rng.uniform(-0.35, 0.35)),
                burst_hz=float(rng.uniform(2000, 6500)) if rng.random() < 0.5 else 0.0,
            )
        )
    return out


def make_speaker(rng: np.random.Generator, speaker_id: str) -> Speaker:
    return Speaker(speaker_id, float(rng.uniform(90, 230)), float(rng.uniform(0.9, 1.12)), float(rng.uniform(0.85, 1.15)))


def _render_syllable(syl: Syllable, spk: Speaker, rng: np.random.Generator) -> np.ndarray:
    n = max(16, int(syl.duration / spk.rate * SR))
    t = np.arange(n) / SR
    tn = t / t[-1]
    f0 = spk.f0 * (1.0 + syl.pitch_slope * tn) * (1.0 + 0.01 * np.sin(2 * np.pi * 5.0 * t))
    phase = 2 * np.pi * np.cumsum(f0) / SR
    k = np.arange(1, int(7500 / (spk.f0 * 1.4)) + 1)
    freqs = k[:, None] * f0[None, :]
    f1 = syl.f1 * spk.formant_scale * float(rng.uniform(0.96, 1.04))
    f2 = syl.f2 * spk.formant_scale * float(rng.uniform(0.96, 1.04))
    env = (
        np.exp(-0.5 * ((freqs - f1) / 110.0) ** 2)
        + 0.7 * np.exp(-0.5 * ((freqs - f2) / 160.0) ** 2)
        + 0.25 * np.exp(-0.5 * ((freqs - 2900.0 * spk.formant_scale) / 250.0) ** 2)
    ) / np.sqrt(k)[:, None]
    env[freqs > 7800] = 0.0
    voiced = np.sum(env * np.sin(k[:, None] * phase[None, :]), axis=0)
    attack, release = int(0.02 * SR), int(0.03 * SR)
    amp = np.ones(n)
    amp[:attack] = 0.5 - 0.5 * np.cos(np.pi * np.arange(attack) / attack)
    amp[-release:] = 0.5 + 0.5 * np.cos(np.pi * np.arange(release) / release)
    voiced *= amp
    if syl.burst_hz:
        nb = int(0.04 * SR)
        noise = rng.standard_normal(nb)
        spec = np.fft.rfft(noise)
        fr = np.fft.rfftfreq(nb, 1 / SR)
        spec *= np.exp(-0.5 * ((fr - syl.burst_hz) / 600.0) ** 2)
        burst = np.fft.irfft(spec, nb) * np.hanning(nb)
        burst *= 0.6 * np.max(np.abs(voiced)) / (np.max(np.abs(burst)) + 1e-12)
        voiced = np.concatenate([burst, voiced])
    return voiced


def render_syllables(syllables: Sequence[Syllable], spk: Speaker, rng: np.random.Generator) -> np.ndarray:
    parts = []
    for s in syllables:
        parts.append(_render_syllable(s, spk, rng))
        parts.append(np.zeros(int(rng.uniform(0.02, 0.06) * SR)))
    return np.concatenate(parts)


def synthesize_word(word: str, spk: Speaker, rng: np.random.Generator, num_samples: int = SR) -> np.ndarray:
    x = render_syllables(word_recipe(word), spk, rng)
    out = np.zeros(num_samples)
    room = max(0, num_samples - x.shape[0])
    onset = int(rng.integers(0, min(room, int(0.3 * SR)) + 1)) if room else 0
    seg = x[: num_samples - onset]
    out[onset : onset + seg.shape[0]] = seg
    out += 0.003 * rng.standard_normal(num_samples)
    return (out / np.max(np.abs(out)) * rng.uniform(0.3, 0.95)).astype(np.float32)


def _speaker_ids(rng, n):
    return [f"{int(v):08x}" for v in rng.choice(2**32, size=n, replace=False)]


def write_toy_keyword_corpus(
    root,
    words: Sequence[str] = GSC_KEYWORDS,
    per_word: int = 20,
    n_speakers: int = 40,
    seed: int = 0,
    *,
    validation_fraction: float = 0.1,
    test_fraction: float = 0.1,
    background_files: int = 2,
    background_seconds: int = 30,
) -> Path:
    """Write ``root/<word>/<speaker>_nohash_<n>.wav`` plus the two split lists.

    Speakers are assigned wholesale to train, validation or test.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    speakers = [make_speaker(rng, sid) for sid in _speaker_ids(rng, n_speakers)]
    n_val = max(1, int(round(validation_fraction * n_speakers)))
    n_test = max(1, int(round(test_fraction * n_speakers)))
    split_of = {}
    for i, spk in enumerate(speakers):
        split_of[spk.speaker_id] = "validation" if i < n_val else "test" if i < n_val + n_test else "train"
    val_list, test_list = [], []
    for word in words:
        counts: dict[str, int] = {}
        for _ in range(per_word):
            spk = speakers[int(rng.integers(0, n_speakers))]
            k = counts.get(spk.speaker_id, 0)
            counts[spk.speaker_id] = k + 1
            rel = f"{word}/{spk.speaker_id}_nohash_{k}.wav"
            write_wav(root / rel, synthesize_word(word, spk, rng))
            if split_of[spk.speaker_id] == "validation":
                val_list.append(rel)
            elif split_of[spk.speaker_id] == "test":
                test_list.append(rel)
    (root / "validation_list.txt").write_text("".join(f"{p}\n" for p in sorted(val_list)))
    (root / "testing_list.txt").write_text("".join(f"{p}\n" for p in sorted(test_list)))
    for b in range(background_files):
        write_wav(root / BACKGROUND_DIR / f"noise_{b}.wav", _background(rng, background_seconds, b))
    return root


def _background(rng, seconds, kind):
    n = seconds * SR
    white = rng.standard_normal(n)
    if kind % 2 == 0:
        spec = np.fft.rfft(white)
        spec /= np.sqrt(np.maximum(np.fft.rfftfreq(n, 1 / SR), 20.0))
        x = np.fft.irfft(spec, n)
    else:
        t = np.arange(n) / SR
        x = np.sin(2 * np.pi * 60 * t) + 0.5 * np.sin(2 * np.pi * 120 * t) + 0.3 * white
    return (x / np.max(np.abs(x)) * 0.3).astype(np.float32)


_SYLLABLE_ALPHABET = ("ba", "ko", "ri", "mu", "te", "sa", "lo", "ni", "ve", "du", "ga", "pe", "zo", "fi")


def _pseudo_word(rng) -> str:
    while True:
        w = "".join(rng.choice(_SYLLABLE_ALPHABET, size=int(rng.integers(1, 4))))
        if w not in GSC_KEYWORDS:
            return w


def write_toy_interference_corpus(
    root,
    n_utterances: int = 60,
    n_speakers: int = 12,
    seed: int = 1,
    *,
    keyword_rate: float = 0.1,
    keywords: Sequence[str] = GSC_KEYWORDS,
) -> Path:
    """Babble-like utterances of pseudo-words plus a ``transcripts.tsv`` table.

    A ``keyword_rate`` fraction of utterances also contains a real keyword in
    both audio and transcript, so the keyword filter has work to do.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    speakers = [make_speaker(rng, f"spk{i:03d}") for i in range(n_speakers)]
    rows = []
    for u in range(n_utterances):
        spk = speakers[u % n_speakers]
        words = [_pseudo_word(rng) for _ in range(int(rng.integers(3, 9)))]
        if rng.random() < keyword_rate:
            words.insert(int(rng.integers(0, len(words) + 1)), str(rng.choice(list(keywords))))
        parts = []
        for w in words:
            recipe = word_recipe(w)
            parts.append(render_syllables(recipe, spk, rng))
        x = np.concatenate(parts)
        x = x + 0.003 * rng.standard_normal(x.shape[0])
        x = (x / np.max(np.abs(x)) * rng.uniform(0.4, 0.95)).astype(np.float32)
        rel = f"{spk.speaker_id}/{spk.speaker_id}-{u:04d}.wav"
        write_wav(root / rel, x)
        rows.append(f"{spk.speaker_id}-{u:04d}\t{spk.speaker_id}\t{rel}\t{' '.join(words).upper()}\n")
    (root / "transcripts.tsv").write_text("".join(rows), encoding="utf-8")
    return root
