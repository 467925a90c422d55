"""Embedding corpora, alignments and the time <-> frame mapping.

An encoder frame covers ``1 / frame_rate`` seconds (20 ms at the default
50 frames/s) and inputs are padded to 30 s, i.e. 1500 frames.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import (
    ContractError,
    CorruptInputError,
    InputError,
    MagicMismatchError,
    NonFiniteValueError,
    TruncatedFileError,
)

FRAME_RATE = 50
MAX_DURATION = 30.0
EMBEDDING_MAGIC = b"LLE1"
UNITS = ("char", "word", "phone")


def _snap(q: float) -> float:
    r = round(q)
    return float(r) if abs(q - r) < 1e-9 else q


def max_frames(frame_rate: int = FRAME_RATE) -> int:
    return math.ceil(_snap(MAX_DURATION * frame_rate))


@dataclass(frozen=True)
class EmbeddingSequence:
    file_id: str
    frames: np.ndarray

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] == 0:
            raise ContractError(f"{self.file_id}: frames must be a nonempty 2-D array")
        self.frames.setflags(write=False)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class AudioMeta:
    file_id: str
    duration: float
    language: str | None = None
    transcript: str | None = None

    def __post_init__(self):
        if not 0 < self.duration <= MAX_DURATION:
            raise ContractError(f"{self.file_id}: duration {self.duration} outside (0, 30]")


@dataclass(frozen=True)
class Span:
    unit: str
    text: str
    start: float
    end: float

    def __post_init__(self):
        if self.unit not in UNITS:
            raise CorruptInputError(f"unknown unit {self.unit!r}")
        if not self.start < self.end:
            raise CorruptInputError(f"span {self.text!r}: start {self.start} >= end {self.end}")


@dataclass(frozen=True)
class Alignment:
    file_id: str
    spans: tuple[Span, ...]

    def __post_init__(self):
        # canonical order: by time, then unit, so equal alignments compare equal
        ordered = tuple(sorted(self.spans, key=lambda s: (s.start, s.end, UNITS.index(s.unit))))
        object.__setattr__(self, "spans", ordered)
        for unit in UNITS:
            spans = self.of_unit(unit)
            for a, b in zip(spans, spans[1:]):
                if b.start < a.end:
                    raise CorruptInputError(
                        f"{self.file_id}: {unit} spans overlap at {b.text!r}"
                    )

    def of_unit(self, unit: str) -> list[Span]:
        return [s for s in self.spans if s.unit == unit]


@dataclass(frozen=True)
class ManifestEntry:
    file_id: str
    embedding: str
    meta: AudioMeta
    alignment: str | None = None
    tags: tuple[str, ...] = ()

    def to_record(self) -> dict:
        return {
            "file_id": self.file_id,
            "embedding": self.embedding,
            "meta": {
                "duration": self.meta.duration,
                "language": self.meta.language,
                "transcript": self.meta.transcript,
            },
            "alignment": self.alignment,
            "tags": list(self.tags),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ManifestEntry":
        try:
            meta = rec["meta"]
            return cls(
                file_id=rec["file_id"],
                embedding=rec["embedding"],
                meta=AudioMeta(
                    rec["file_id"],
                    float(meta["duration"]),
                    meta.get("language"),
                    meta.get("transcript"),
                ),
                alignment=rec.get("alignment"),
                tags=tuple(rec.get("tags", ())),
            )
        except KeyError as exc:
            raise CorruptInputError(f"manifest record missing field {exc}") from None


@dataclass(frozen=True)
class CorpusManifest:
    entries: tuple[ManifestEntry, ...]

    def __post_init__(self):
        ids = [e.file_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise CorruptInputError("manifest file_ids are not unique")

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.file_id: e for e in self.entries}


def frames_for_duration(duration: float, frame_rate: int = FRAME_RATE) -> int:
    if not 0 < duration <= MAX_DURATION:
        raise ContractError(f"duration {duration} outside (0, {MAX_DURATION}]")
    return min(max_frames(frame_rate), math.ceil(_snap(duration * frame_rate)))


def trim_padding(seq: EmbeddingSequence, meta: AudioMeta, frame_rate: int = FRAME_RATE) -> EmbeddingSequence:
    """Drop the padding frames past the end of the real audio."""
    n = frames_for_duration(meta.duration, frame_rate)
    if n > seq.n_frames:
        raise CorruptInputError(
            f"{seq.file_id}: duration {meta.duration}s needs {n} frames, file has {seq.n_frames}"
        )
    if n == seq.n_frames:
        return seq
    return EmbeddingSequence(seq.file_id, seq.frames[:n])


def frames_for_interval(start: float, end: float, frame_rate: int = FRAME_RATE) -> range:
    """Frames whose ``[i, i+1) / frame_rate`` interval meets ``[start, end)``."""
    if not 0 <= start < end:
        raise ContractError(f"bad interval [{start}, {end})")
    first = math.floor(_snap(start * frame_rate))
    stop = math.ceil(_snap(end * frame_rate))
    return range(first, stop)


def frame_center(frame, frame_rate: int = FRAME_RATE):
    return (np.asarray(frame, dtype=np.float64) + 0.5) / frame_rate


def write_embedding_file(path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise ContractError("embedding frames must be 2-D")
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<II", *frames.shape))
        fh.write(frames.tobytes())


def load_embedding_file(path, file_id: str | None = None) -> EmbeddingSequence:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise TruncatedFileError(f"{path}: header truncated")
    if raw[:4] != EMBEDDING_MAGIC:
        raise MagicMismatchError(f"{path}: bad magic {raw[:4]!r}")
    n_frames, dim = struct.unpack_from("<II", raw, 4)
    expected = 12 + 4 * n_frames * dim
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: payload has {len(raw) - 12} bytes, need {expected - 12}")
    if len(raw) > expected:
        raise CorruptInputError(f"{path}: {len(raw) - expected} trailing bytes")
    frames = np.frombuffer(raw, dtype="<f4", offset=12).reshape(n_frames, dim).astype(np.float32)
    if not np.all(np.isfinite(frames)):
        raise NonFiniteValueError(f"{path}: payload contains NaN or inf")
    if file_id is None:
        file_id = Path(path).stem
    return EmbeddingSequence(file_id, frames)


def write_alignment_file(path, alignments) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for al in alignments:
            for s in al.spans:
                if "\t" in s.text or "\n" in s.text:
                    raise ContractError(f"span text {s.text!r} contains a tab or newline")
                fh.write(f"{al.file_id}\t{s.unit}\t{s.text}\t{s.start!r}\t{s.end!r}\n")


def read_alignment_file(path) -> dict[str, Alignment]:
    spans: dict[str, list[Span]] = {}
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise CorruptInputError(f"{path}:{lineno}: expected 5 tab-separated fields")
            fid, unit, text, start, end = parts
            try:
                span = Span(unit, text, float(start), float(end))
            except ValueError as exc:
                raise CorruptInputError(f"{path}:{lineno}: {exc}") from None
            spans.setdefault(fid, []).append(span)
    return {fid: Alignment(fid, tuple(ss)) for fid, ss in sorted(spans.items())}


def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_record(), sort_keys=True) + "\n")


def read_manifest(path) -> CorpusManifest:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorruptInputError(f"{path}:{lineno}: {exc}") from None
            entries.append(ManifestEntry.from_record(rec))
    return CorpusManifest(tuple(entries))


@dataclass
class Store:
    """A directory of trimmed embeddings written by :func:`ingest_corpus`.

    Layout::

        store.json       {"frame_rate", "dim", "n_files"}
        manifest.jsonl   entries with paths relative to the store
        emb/<id>.lle     trimmed embedding sequences
        align/<id>.tsv   alignments, when provided
    """

    root: Path
    frame_rate: int
    dim: int
    manifest: CorpusManifest
    _alignments: dict = field(default_factory=dict, repr=False)

    @classmethod
    def open(cls, root) -> "Store":
        root = Path(root)
        info_path = root / "store.json"
        if not info_path.exists():
            raise InputError(f"{root} is not a store (missing store.json)")
        info = json.loads(info_path.read_text())
        manifest = read_manifest(root / "manifest.jsonl")
        return cls(root, int(info["frame_rate"]), int(info["dim"]), manifest)

    @property
    def file_ids(self) -> list[str]:
        return sorted(e.file_id for e in self.manifest.entries)

    def entry(self, file_id: str) -> ManifestEntry:
        try:
            return self.manifest.by_id()[file_id]
        except KeyError:
            raise InputError(f"unknown file {file_id!r}") from None

    def meta(self) -> dict[str, AudioMeta]:
        return {e.file_id: e.meta for e in self.manifest.entries}

    def load(self, file_id: str) -> EmbeddingSequence:
        return load_embedding_file(self.root / self.entry(file_id).embedding, file_id)

    def alignment(self, file_id: str) -> Alignment | None:
        if file_id not in self._alignments:
            rel = self.entry(file_id).alignment
            al = None
            if rel is not None:
                al = read_alignment_file(self.root / rel).get(file_id, Alignment(file_id, ()))
            self._alignments[file_id] = al
        return self._alignments[file_id]

    def alignments(self) -> dict[str, Alignment]:
        out = {}
        for fid in self.file_ids:
            al = self.alignment(fid)
            if al is not None:
                out[fid] = al
        return out

    def iter_sequences(self) -> Iterator[EmbeddingSequence]:
        for fid in self.file_ids:
            yield self.load(fid)

    def iter_frames(self) -> Iterator[np.ndarray]:
        for seq in self.iter_sequences():
            yield seq.frames


def ingest_corpus(manifest_path, out_dir, frame_rate: int = FRAME_RATE) -> Store:
    """Trim every manifest entry and write a store under ``out_dir``."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    out = Path(out_dir)
    (out / "emb").mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(manifest_path)
    dim = None
    entries = []
    align_cache: dict[Path, dict[str, Alignment]] = {}
    for e in sorted(manifest.entries, key=lambda e: e.file_id):
        seq = load_embedding_file(base / e.embedding, e.file_id)
        if dim is None:
            dim = seq.dim
        elif seq.dim != dim:
            raise CorruptInputError(f"{e.file_id}: dim {seq.dim} differs from corpus dim {dim}")
        seq = trim_padding(seq, e.meta, frame_rate)
        emb_rel = f"emb/{e.file_id}.lle"
        write_embedding_file(out / emb_rel, seq.frames)
        al_rel = None
        if e.alignment is not None:
            (out / "align").mkdir(exist_ok=True)
            al_path = base / e.alignment
            if al_path not in align_cache:
                align_cache[al_path] = read_alignment_file(al_path)
            al = align_cache[al_path].get(e.file_id, Alignment(e.file_id, ()))
            al_rel = f"align/{e.file_id}.tsv"
            write_alignment_file(out / al_rel, [al])
        entries.append(ManifestEntry(e.file_id, emb_rel, e.meta, al_rel, e.tags))
    if dim is None:
        raise InputError(f"{manifest_path}: manifest is empty")
    write_manifest(out / "manifest.jsonl", entries)
    info = {"dim": dim, "frame_rate": frame_rate, "n_files": len(entries)}
    (out / "store.json").write_text(json.dumps(info, sort_keys=True) + "\n")
    return Store.open(out)

