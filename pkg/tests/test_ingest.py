import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speechsae import ingest
from speechsae.errors import (
    ContractError,
    CorruptInputError,
    MagicMismatchError,
    NonFiniteValueError,
    TruncatedFileError,
)
from speechsae.ingest import (
    Alignment,
    AudioMeta,
    EmbeddingSequence,
    ManifestEntry,
    Span,
    frames_for_duration,
    frames_for_interval,
    trim_padding,
)


def seq(n, dim=4, fid="f"):
    return EmbeddingSequence(fid, np.arange(n * dim, dtype=np.float32).reshape(n, dim))


@pytest.mark.parametrize("duration,expected", [(30.0, 1500), (10.0, 500), (0.03, 2), (0.02, 1), (29.999, 1500)])
def test_frames_for_duration(duration, expected):
    assert frames_for_duration(duration) == expected


@pytest.mark.parametrize("bad", [0.0, -1.0, 30.01])
def test_frames_for_duration_rejects(bad):
    with pytest.raises(ContractError):
        frames_for_duration(bad)


def test_trim_examples():
    assert trim_padding(seq(1500), AudioMeta("f", 10.0)).n_frames == 500
    full = seq(1500)
    assert trim_padding(full, AudioMeta("f", 30.0)) is full
    assert trim_padding(seq(400), AudioMeta("f", 8.0)).n_frames == 400


def test_trim_keeps_leading_frames_and_rejects_short_input():
    out = trim_padding(seq(100), AudioMeta("f", 1.0))
    assert np.array_equal(out.frames, seq(100).frames[:50])
    with pytest.raises(CorruptInputError):
        trim_padding(seq(10), AudioMeta("f", 1.0))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3000).map(lambda ms: ms / 100))
def test_trim_idempotent(duration):
    meta = AudioMeta("f", min(duration, 30.0))
    once = trim_padding(seq(1500, dim=1), meta)
    assert trim_padding(once, meta).n_frames == once.n_frames


def test_frames_for_interval_examples():
    assert list(frames_for_interval(0.05, 0.09)) == [2, 3, 4]
    assert list(frames_for_interval(0.0, 0.02)) == [0]
    assert list(frames_for_interval(0.019, 0.021)) == [0, 1]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 1400), st.integers(1, 50), st.integers(1, 50))
def test_frames_for_interval_concatenates(a, ab, bc):
    fa, fb, fc = a / 50, (a + ab) / 50, (a + ab + bc) / 50
    left = set(frames_for_interval(fa, fb))
    right = set(frames_for_interval(fb, fc))
    assert left | right == set(frames_for_interval(fa, fc))
    assert not left & right


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 9.9), st.floats(1e-4, 5))
def test_span_inside_duration_has_frames(start, length):
    end = min(start + length, 10.0)
    if end > start:
        r = frames_for_interval(start, end)
        assert len(r) > 0 and r.stop <= frames_for_duration(10.0)


def test_embedding_roundtrip(tmp_path):
    frames = np.array([[1, 2, 3], [4, 5, 6]], np.float32)
    p = tmp_path / "a.lle"
    ingest.write_embedding_file(p, frames)
    raw = p.read_bytes()
    assert raw[:4] == b"LLE1" and struct.unpack_from("<II", raw, 4) == (2, 3)
    assert len(raw) == 12 + 6 * 4
    back = ingest.load_embedding_file(p)
    assert back.file_id == "a" and back.frames.shape == (2, 3)
    assert back.frames.tobytes() == frames.tobytes()


def test_embedding_errors(tmp_path):
    p = tmp_path / "a.lle"
    ingest.write_embedding_file(p, np.ones((3, 2), np.float32))
    raw = p.read_bytes()
    p.write_bytes(raw[:-4])
    with pytest.raises(TruncatedFileError):
        ingest.load_embedding_file(p)
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(MagicMismatchError):
        ingest.load_embedding_file(p)
    p.write_bytes(raw[:12] + np.array([np.nan] * 6, "<f4").tobytes())
    with pytest.raises(NonFiniteValueError):
        ingest.load_embedding_file(p)
    p.write_bytes(raw[:8])
    with pytest.raises(TruncatedFileError):
        ingest.load_embedding_file(p)


def test_embedding_sequence_readonly():
    s = seq(3)
    with pytest.raises(ValueError):
        s.frames[0, 0] = 1.0


def test_alignment_invariants():
    with pytest.raises(CorruptInputError):
        Span("word", "x", 0.5, 0.5)
    with pytest.raises(CorruptInputError):
        Span("syllable", "x", 0, 1)
    with pytest.raises(CorruptInputError):
        Alignment("f", (Span("word", "a", 0, 1), Span("word", "b", 0.5, 2)))
    # different units may overlap
    Alignment("f", (Span("word", "ab", 0, 1), Span("char", "a", 0, 0.5)))


def test_alignment_file_roundtrip(tmp_path):
    al = Alignment("f1", (Span("char", "h", 0.0, 0.1), Span("word", "hi", 0.0, 0.3), Span("char", "i", 0.1, 0.3)))
    p = tmp_path / "a.tsv"
    ingest.write_alignment_file(p, [al])
    assert p.read_text().splitlines()[1] == "f1\tword\thi\t0.0\t0.3"
    assert ingest.read_alignment_file(p) == {"f1": al}
    p.write_text("f1\tword\thi\t0.0\n")
    with pytest.raises(CorruptInputError):
        ingest.read_alignment_file(p)


def test_manifest_unique_ids(tmp_path):
    e = ManifestEntry("a", "emb/a.lle", AudioMeta("a", 1.0))
    with pytest.raises(CorruptInputError):
        ingest.CorpusManifest((e, e))
    p = tmp_path / "m.jsonl"
    ingest.write_manifest(p, [e])
    assert ingest.read_manifest(p).entries == (e,)


def test_ingest_corpus(tmp_path):
    raw = tmp_path / "raw"
    (raw / "e").mkdir(parents=True)
    entries = []
    for fid, dur in (("b", 1.0), ("a", 0.5)):
        ingest.write_embedding_file(raw / "e" / f"{fid}.lle", np.ones((1500, 3), np.float32))
        entries.append(ManifestEntry(fid, f"e/{fid}.lle", AudioMeta(fid, dur, "en", "x"), "al.tsv", ("t",)))
    ingest.write_alignment_file(raw / "al.tsv", [Alignment("a", (Span("char", "x", 0.0, 0.1),))])
    ingest.write_manifest(raw / "m.jsonl", entries)
    store = ingest.ingest_corpus(raw / "m.jsonl", tmp_path / "store")
    assert store.file_ids == ["a", "b"] and store.dim == 3
    assert store.load("a").n_frames == 25 and store.load("b").n_frames == 50
    assert store.alignment("a").spans[0].text == "x"
    assert store.alignment("b").spans == ()
    assert sum(len(f) for f in store.iter_frames()) == 75
    reopened = ingest.Store.open(tmp_path / "store")
    assert reopened.meta()["b"].language == "en"


def test_ingest_rejects_mixed_dims(tmp_path):
    ingest.write_embedding_file(tmp_path / "a.lle", np.ones((10, 3), np.float32))
    ingest.write_embedding_file(tmp_path / "b.lle", np.ones((10, 4), np.float32))
    ingest.write_manifest(
        tmp_path / "m.jsonl",
        [ManifestEntry(f, f"{f}.lle", AudioMeta(f, 0.1)) for f in "ab"],
    )
    with pytest.raises(CorruptInputError):
        ingest.ingest_corpus(tmp_path / "m.jsonl", tmp_path / "out")
