import numpy as np
import pytest

from mixtrain import dataio
from mixtrain.dataio import (
    AudioError,
    ClassMap,
    ConfigurationError,
    UtteranceRecord,
    build_interference_pool,
    contains_keyword,
    fix_length,
    load_fixed_waveform,
    scan_keyword_corpus,
    write_wav,
)


def _tree(root, files, validation=(), testing=()):
    for rel in files:
        write_wav(root / rel, np.full(1600, 0.1, dtype=np.float32))
    (root / "validation_list.txt").write_text("".join(f + "\n" for f in validation))
    (root / "testing_list.txt").write_text("".join(f + "\n" for f in testing))


TREE = [f"{w}/spk{i}_nohash_0.wav" for w in ("yes", "no") for i in range(3)]


def test_scan_splits(tmp_path):
    _tree(tmp_path, TREE, validation=TREE[:1] + TREE[3:4])
    recs = scan_keyword_corpus(tmp_path)
    assert len(recs) == 6
    assert sum(r.split == "train" for r in recs) == 4
    assert sum(r.split == "validation" for r in recs) == 2
    assert [r.utterance_id for r in recs] == sorted(r.utterance_id for r in recs)
    assert {r.speaker_id for r in recs} == {"spk0", "spk1", "spk2"}
    assert all(r.duration_s == pytest.approx(0.1) for r in recs)


def test_scan_empty_root(tmp_path):
    _tree(tmp_path, [])
    assert scan_keyword_corpus(tmp_path) == []


def test_scan_missing_list(tmp_path):
    _tree(tmp_path, TREE)
    (tmp_path / "testing_list.txt").unlink()
    with pytest.raises(ConfigurationError, match="testing_list"):
        scan_keyword_corpus(tmp_path)


def test_scan_overlapping_lists(tmp_path):
    _tree(tmp_path, TREE, validation=TREE[:1], testing=TREE[:1])
    with pytest.raises(ConfigurationError, match="both"):
        scan_keyword_corpus(tmp_path)


def test_scan_skips_unreadable(tmp_path, caplog):
    _tree(tmp_path, TREE)
    (tmp_path / "yes" / "broken_nohash_0.wav").write_bytes(b"not a wav")
    write_wav(tmp_path / "no" / "fast_nohash_0.wav", np.zeros(100), rate=8000)
    recs = scan_keyword_corpus(tmp_path)
    assert len(recs) == 6
    assert "broken_nohash_0" in caplog.text and "8000" in caplog.text


def test_manifest_idempotent_and_exclusive(toy_corpus, tmp_path):
    root = toy_corpus / "keywords"
    a = scan_keyword_corpus(root) + dataio.scan_background_segments(root)
    b = scan_keyword_corpus(root) + dataio.scan_background_segments(root)
    dataio.write_manifest(tmp_path / "a.jsonl", a)
    dataio.write_manifest(tmp_path / "b.jsonl", b)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert dataio.read_manifest(tmp_path / "a.jsonl") == a
    ids = [r.utterance_id for r in a]
    assert len(ids) == len(set(ids))
    splits = {s: {r.utterance_id for r in a if r.split == s} for s in dataio.SPLITS}
    assert not (splits["train"] & splits["validation"]) and not (splits["train"] & splits["test"])
    assert all(splits.values())


def test_background_segments(toy_corpus):
    segs = dataio.scan_background_segments(toy_corpus / "keywords")
    per_file = {}
    for r in segs:
        per_file.setdefault(r.speaker_id, []).append(r)
        assert r.label == dataio.BACKGROUND and r.num_samples == 16000
    for recs in per_file.values():
        splits = [r.split for r in recs]
        # train, validation and test segments are contiguous runs in time
        assert splits == sorted(splits, key=["train", "validation", "test"].index)
        assert len(load_fixed_waveform(recs[-1])) == 16000


def _record(tmp_path, samples, name="x.wav"):
    path = tmp_path / name
    write_wav(path, samples)
    return UtteranceRecord(name, "s", str(path), "yes", "train", len(samples) / 16000)


def test_fixed_length_identity(tmp_path):
    x = np.round(np.linspace(-0.5, 0.5, 16000) * 32767) / 32767
    # 16-bit PCM reads back as k / 32768
    rec = _record(tmp_path, x)
    np.testing.assert_allclose(load_fixed_waveform(rec), x * 32767 / 32768, atol=1e-7)


def test_fixed_length_pad(tmp_path):
    rec = _record(tmp_path, np.full(8000, 0.25))
    out = load_fixed_waveform(rec)
    assert out.shape == (16000,)
    assert np.all(out[8000:] == 0) and np.allclose(out[:8000], 0.25, atol=1e-4)


def test_fixed_length_center_crop():
    x = np.arange(32000, dtype=np.float32)
    out = fix_length(x, 16000)
    assert out[0] == 8000 and out[-1] == 23999
    a = fix_length(x, 16000, crop_mode="random", rng=np.random.default_rng(4))
    b = fix_length(x, 16000, crop_mode="random", rng=np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)
    assert np.all(np.diff(a) == 1)


def test_fixed_length_zero_length(tmp_path):
    rec = _record(tmp_path, np.zeros(0))
    with pytest.raises(AudioError, match="zero-length"):
        load_fixed_waveform(rec)
    with pytest.raises(ValueError):
        fix_length(np.zeros(0))


def test_keyword_filter():
    assert contains_keyword("turn LEFT now", ["left"])
    assert not contains_keyword("lefty went home", ["left"])
    assert not contains_keyword("anything", [])
    assert contains_keyword("it's a dog, isn't it", ["dog"])


def _interference_records(n_speakers=12, per_speaker=5):
    recs = []
    for s in range(n_speakers):
        for k in range(per_speaker):
            text = "go left" if k == 0 and s % 3 == 0 else f"plain words {s} {k}"
            recs.append(UtteranceRecord(f"u{s:02d}_{k}", f"spk{s:02d}", f"/x/{s}_{k}.flac", dataio.BACKGROUND,
                                        "train", 0.0, transcript=text))
    return recs


def test_interference_pool():
    recs = _interference_records()
    train, test = build_interference_pool(recs, ["left", "go"], train_count=30, test_count=10, seed=0)
    assert len(train) == 30 and len(test) == 10
    assert not (train.speakers & test.speakers)
    for r in train.records + test.records:
        assert not contains_keyword(r.transcript, ["left", "go"])
    again = build_interference_pool(recs, ["left", "go"], 30, 10, seed=0)
    assert [r.utterance_id for r in again[0].records] == [r.utterance_id for r in train.records]
    assert [r.utterance_id for r in again[1].records] == [r.utterance_id for r in test.records]
    other = build_interference_pool(recs, ["left", "go"], 30, 10, seed=1)
    assert [r.utterance_id for r in other[1].records] != [r.utterance_id for r in test.records]


def test_interference_pool_shortfall():
    recs = _interference_records()
    with pytest.raises(ConfigurationError, match="short by 4"):
        build_interference_pool(recs, ["left"], train_count=50, test_count=10, seed=0)


def test_transcript_table(toy_corpus):
    recs = dataio.read_transcript_table(toy_corpus / "interference" / "transcripts.tsv")
    assert len(recs) == 40
    assert all(r.transcript for r in recs)
    audio = dataio.InterferenceAudio(recs)
    crop, i = audio.draw(np.random.default_rng(0), 16000)
    assert crop.shape == (16000,) and 0 <= i < 40


def test_class_map():
    cm = ClassMap(list(dataio.GSC_KEYWORDS) + [dataio.BACKGROUND], list(dataio.PROTOCOL_TARGETS))
    assert cm.num_classes == 36
    assert len(cm.target_indices) == 10 and len(cm.non_target_indices) == 25
    assert cm.eval_classes[-2:] == [dataio.UNKNOWN, dataio.SILENCE]
    assert cm.protocol_label("cat") == dataio.UNKNOWN
    assert cm.protocol_label(dataio.BACKGROUND) == dataio.SILENCE
    assert cm.protocol_label("left") == "left"
    assert ClassMap.from_dict(cm.to_dict()) == cm
    with pytest.raises(ValueError):
        cm.index("hello")
