"""Inverted activation index and the feature-attribution statistics built on it.

A latent *activates* a file when it is strictly positive on at least one of
the file's trimmed frames.
"""
from __future__ import annotations

import json
import logging
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ContractError, CorruptInputError, InputError, MagicMismatchError, TruncatedFileError
from .ingest import FRAME_RATE, Alignment, AudioMeta, EmbeddingSequence, frame_center, frames_for_interval
from .sae import SaeParams, encode_frames

log = logging.getLogger(__name__)

INDEX_MAGIC = b"LLI1"
INDEX_VERSION = 1
_INDEX_HEADER = struct.Struct("<4sIIIQ")
POSTING_DTYPE = np.dtype([("file", "<u4"), ("frame", "<u4"), ("value", "<f4")])


@dataclass(frozen=True)
class FileSummary:
    max_value: float
    active_frame_count: int
    n_frames: int


class ActivationIndex:
    """Postings grouped by latent, each group sorted by (file_id, frame).

    ``files`` is sorted, and posting ``file`` fields index into it.
    """

    def __init__(self, files: list[str], n_frames, d_latent: int, k: int, offsets, postings: np.ndarray):
        self.files = list(files)
        self.n_frames = np.asarray(n_frames, dtype=np.int64)
        self.d_latent = int(d_latent)
        self.k = int(k)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.postings = postings
        self._file_pos = {f: i for i, f in enumerate(self.files)}
        if len(self.offsets) != self.d_latent + 1 or self.offsets[-1] != len(postings):
            raise CorruptInputError("index offset table does not match postings")

    @classmethod
    def from_entries(cls, files, n_frames, d_latent: int, k: int, entries) -> "ActivationIndex":
        """Build from ``(latent, file_id, frame, value)`` tuples; non-positive values are dropped."""
        files = sorted(files)
        pos = {f: i for i, f in enumerate(files)}
        rows = sorted((int(j), pos[f], int(t), float(v)) for j, f, t, v in entries if v > 0)
        post = np.array([(f, t, v) for _, f, t, v in rows], dtype=POSTING_DTYPE)
        lat = np.array([j for j, *_ in rows], dtype=np.int64)
        offsets = np.searchsorted(lat, np.arange(d_latent + 1), side="left")
        return cls(files, n_frames, d_latent, k, offsets, post)

    def _check_latent(self, latent_id: int) -> None:
        if not 0 <= latent_id < self.d_latent:
            raise ContractError(f"latent {latent_id} out of range [0, {self.d_latent})")

    def file_pos(self, file_id: str) -> int:
        try:
            return self._file_pos[file_id]
        except KeyError:
            raise InputError(f"unknown file {file_id!r}") from None

    def postings_for(self, latent_id: int) -> np.ndarray:
        self._check_latent(latent_id)
        return self.postings[self.offsets[latent_id] : self.offsets[latent_id + 1]]

    def file_postings(self, latent_id: int, file_id: str) -> np.ndarray:
        pos = self.file_pos(file_id)
        p = self.postings_for(latent_id)
        lo, hi = np.searchsorted(p["file"], [pos, pos + 1])
        return p[lo:hi]

    def active_frames(self, latent_id: int, file_id: str) -> set[int]:
        return set(self.file_postings(latent_id, file_id)["frame"].tolist())

    def activated_files(self, latent_id: int) -> set[str]:
        p = self.postings_for(latent_id)
        return {self.files[i] for i in np.unique(p["file"]).tolist()}

    def file_summary(self, latent_id: int, file_id: str) -> FileSummary:
        p = self.file_postings(latent_id, file_id)
        n = int(self.n_frames[self.file_pos(file_id)])
        if len(p) == 0:
            return FileSummary(0.0, 0, n)
        return FileSummary(float(p["value"].max()), len(p), n)

    def latent_counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def equals(self, other: "ActivationIndex") -> bool:
        return (
            self.files == other.files
            and np.array_equal(self.n_frames, other.n_frames)
            and self.d_latent == other.d_latent
            and self.k == other.k
            and np.array_equal(self.offsets, other.offsets)
            and self.postings.tobytes() == other.postings.tobytes()
        )


def build_index(corpus: Iterable[EmbeddingSequence], params: SaeParams, k: int) -> ActivationIndex:
    """Encode every frame and keep the strictly positive entries.

    ``corpus`` is a Store (streamed in file_id order) or any iterable of sequences.
    """
    if hasattr(corpus, "iter_sequences"):
        seqs = corpus.iter_sequences()
    else:
        seqs = sorted(corpus, key=lambda s: s.file_id)
    files, n_frames = [], []
    lat_parts, post_parts = [], []
    for pos, seq in enumerate(seqs):
        if seq.dim != params.d_in:
            raise ContractError(f"{seq.file_id}: dim {seq.dim} does not match model d_in={params.d_in}")
        if files and seq.file_id <= files[-1]:
            raise ContractError("corpus files must be unique and sorted by file_id")
        files.append(seq.file_id)
        n_frames.append(seq.n_frames)
        ids, vals = encode_frames(params, seq.frames, k)
        live = vals > 0
        frame_idx = np.broadcast_to(np.arange(seq.n_frames)[:, None], ids.shape)[live]
        rec = np.empty(int(live.sum()), dtype=POSTING_DTYPE)
        rec["file"] = pos
        rec["frame"] = frame_idx
        rec["value"] = vals[live]
        lat_parts.append(ids[live])
        post_parts.append(rec)
    latents = np.concatenate(lat_parts) if lat_parts else np.zeros(0, np.int64)
    postings = np.concatenate(post_parts) if post_parts else np.zeros(0, POSTING_DTYPE)
    # stable: keeps (file, frame) order inside each latent
    order = np.argsort(latents, kind="stable")
    offsets = np.zeros(params.d_latent + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(np.bincount(latents, minlength=params.d_latent))
    return ActivationIndex(files, n_frames, params.d_latent, k, offsets, postings[order])


def save_index(path, index: ActivationIndex) -> None:
    """Postings blob at ``path``; file table and offsets in ``path + '.json'``."""
    path = Path(path)
    header = _INDEX_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, index.d_latent, len(index.files), len(index.postings))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(index.postings, dtype=POSTING_DTYPE).tobytes())
    manifest = {
        "d_latent": index.d_latent,
        "files": [{"file_id": f, "n_frames": int(n)} for f, n in zip(index.files, index.n_frames)],
        "k": index.k,
        "offsets": index.offsets.tolist(),
        "postings": len(index.postings),
    }
    Path(str(path) + ".json").write_text(json.dumps(manifest, sort_keys=True) + "\n")


def load_index(path, mmap: bool = True) -> ActivationIndex:
    path = Path(path)
    with path.open("rb") as fh:
        raw_head = fh.read(_INDEX_HEADER.size)
    if len(raw_head) < _INDEX_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    magic, version, d_latent, n_files, n_post = _INDEX_HEADER.unpack(raw_head)
    if magic != INDEX_MAGIC or version != INDEX_VERSION:
        raise MagicMismatchError(f"{path}: not an index file")
    if path.stat().st_size != _INDEX_HEADER.size + n_post * POSTING_DTYPE.itemsize:
        raise TruncatedFileError(f"{path}: postings truncated")
    manifest = json.loads(Path(str(path) + ".json").read_text())
    if n_post == 0:
        postings = np.zeros(0, POSTING_DTYPE)
    elif mmap:
        postings = np.memmap(path, dtype=POSTING_DTYPE, mode="r", offset=_INDEX_HEADER.size, shape=(n_post,))
    else:
        postings = np.fromfile(path, dtype=POSTING_DTYPE, offset=_INDEX_HEADER.size, count=n_post)
    files = [f["file_id"] for f in manifest["files"]]
    if len(files) != n_files or manifest["d_latent"] != d_latent:
        raise CorruptInputError(f"{path}: manifest does not match postings header")
    return ActivationIndex(
        files, [f["n_frames"] for f in manifest["files"]], d_latent, manifest["k"], manifest["offsets"], postings
    )


def file_activated(index: ActivationIndex, latent_id: int, file_id: str) -> bool:
    return len(index.file_postings(latent_id, file_id)) > 0


@dataclass(frozen=True)
class FeatureAnnotation:
    name: str
    positives: frozenset[str]
    spans: Mapping[str, tuple[tuple[float, float], ...]] = field(default_factory=dict)

    def __post_init__(self):
        extra = set(self.spans) - set(self.positives)
        if extra:
            raise ContractError(f"annotation spans for non-positive files: {sorted(extra)[:3]}")


@dataclass(frozen=True)
class PRResult:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    def to_record(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "precision": self.precision, "recall": self.recall}


def precision_recall(
    index: ActivationIndex, latent_id: int, annotation: FeatureAnnotation, universe=None
) -> PRResult:
    """Utterance-level precision/recall of "latent fires anywhere in the file"."""
    universe = set(index.files) if universe is None else set(universe)
    if not universe:
        raise InputError("empty file universe")
    positives = set(annotation.positives)
    if not positives <= universe:
        raise ContractError(f"annotation {annotation.name!r} has positives outside the universe")
    predicted = index.activated_files(latent_id) & universe
    return PRResult(
        tp=len(predicted & positives),
        fp=len(predicted - positives),
        fn=len(positives - predicted),
    )


def _overlaps(a0: float, a1: float, b0: float, b1: float) -> bool:
    return a0 < b1 and b0 < a1


def span_precision_recall(
    index: ActivationIndex,
    latent_id: int,
    annotation: FeatureAnnotation,
    alignments: Mapping[str, Alignment],
    unit: str = "word",
    lenient: bool = False,
    frame_rate: int = FRAME_RATE,
) -> PRResult:
    """Span-level counts over every ``unit`` span of the aligned, indexed files.

    A span is predicted when any of its frames is active and actual when it
    overlaps an annotated span. With ``lenient`` a false positive inside a
    positive file is not counted.
    """
    tp = fp = fn = 0
    for fid in index.files:
        al = alignments.get(fid)
        if al is None:
            continue
        active = index.active_frames(latent_id, fid)
        marked = annotation.spans.get(fid, ())
        for s in al.of_unit(unit):
            pred = any(f in active for f in frames_for_interval(s.start, s.end, frame_rate))
            actual = any(_overlaps(s.start, s.end, a, b) for a, b in marked)
            if pred and actual:
                tp += 1
            elif pred and not (lenient and fid in annotation.positives):
                fp += 1
            elif actual and not pred:
                fn += 1
    return PRResult(tp, fp, fn)


@dataclass(frozen=True)
class ThresholdRule:
    """Predict ``positive`` when the latent's max value in a file exceeds ``threshold``."""

    latent_id: int
    threshold: float = 0.0
    positive: str = "noise"
    negative: str = "voice"

    def predict(self, index: ActivationIndex, file_id: str) -> str:
        p = index.file_postings(self.latent_id, file_id)
        hit = len(p) > 0 and float(p["value"].max()) > self.threshold
        return self.positive if hit else self.negative


@dataclass(frozen=True)
class ConfusionMatrix:
    classes: tuple[str, str]
    counts: Mapping[tuple[str, str], int]  # (predicted, true) -> count

    def precision(self, cls: str) -> float:
        col = sum(self.counts[(cls, t)] for t in self.classes)
        return self.counts[(cls, cls)] / col if col else 0.0

    def recall(self, cls: str) -> float:
        row = sum(self.counts[(p, cls)] for p in self.classes)
        return self.counts[(cls, cls)] / row if row else 0.0

    def to_record(self) -> dict:
        return {
            "classes": list(self.classes),
            "counts": {f"{p}|{t}": n for (p, t), n in sorted(self.counts.items())},
            "precision": {c: self.precision(c) for c in self.classes},
            "recall": {c: self.recall(c) for c in self.classes},
        }


def confusion_binary(index: ActivationIndex, rule: ThresholdRule, labels: Mapping[str, str]) -> ConfusionMatrix:
    classes = (rule.positive, rule.negative)
    counts = {(p, t): 0 for p in classes for t in classes}
    unknown = set(labels) - set(index.files)
    if unknown:
        raise InputError(f"labels for files not in the index: {sorted(unknown)[:3]}")
    for fid in index.files:
        if fid not in labels:
            raise InputError(f"file {fid!r} has no label")
        truth = labels[fid]
        if truth not in classes:
            raise InputError(f"file {fid!r}: label {truth!r} not in {classes}")
        counts[(rule.predict(index, fid), truth)] += 1
    return ConfusionMatrix(classes, counts)


@dataclass(frozen=True)
class PositionalStats:
    latent_id: int
    mean_time: float
    sd_time: float
    n: int


def positional_stats(index: ActivationIndex, latent_id: int, frame_rate: int = FRAME_RATE) -> PositionalStats | None:
    """Mean and population SD of frame-center times over all postings; None if there are none."""
    p = index.postings_for(latent_id)
    if len(p) == 0:
        return None
    t = frame_center(p["frame"], frame_rate)
    return PositionalStats(latent_id, float(t.mean()), float(t.std()), len(t))


@dataclass(frozen=True)
class UnitActivationRanking:
    text: str
    mean_active_frames: float
    occurrences: int
    phone_breakdown: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class TopUnits:
    rankings: list[UnitActivationRanking]
    skipped_files: int


def top_units(
    index: ActivationIndex,
    latent_id: int,
    alignments: Mapping[str, Alignment],
    unit: str = "word",
    min_occurrences: int = 3,
    frame_rate: int = FRAME_RATE,
) -> TopUnits:
    """Rank words (or phones) by mean active frames per occurrence."""
    if unit not in ("word", "phone"):
        raise ContractError(f"unit must be word or phone, got {unit!r}")
    counts: dict[str, list[int]] = defaultdict(list)
    phone_counts: dict[str, dict[str, list[int]]] = defaultdict(lambda: defaultdict(list))
    skipped = 0
    for fid in index.files:
        al = alignments.get(fid)
        if al is None:
            skipped += 1
            continue
        active = index.active_frames(latent_id, fid)

        def hits(s) -> int:
            return sum(1 for f in frames_for_interval(s.start, s.end, frame_rate) if f in active)

        phones = al.of_unit("phone")
        for s in al.of_unit(unit):
            counts[s.text].append(hits(s))
            if unit == "word":
                for ph in phones:
                    if ph.start >= s.start and ph.end <= s.end:
                        phone_counts[s.text][ph.text].append(hits(ph))
    if skipped:
        log.warning("top_units: %d indexed files have no alignment", skipped)
    out = [
        UnitActivationRanking(
            text,
            float(np.mean(c)),
            len(c),
            {ph: float(np.mean(v)) for ph, v in sorted(phone_counts[text].items())},
        )
        for text, c in counts.items()
        if len(c) >= min_occurrences
    ]
    out.sort(key=lambda r: (-r.mean_active_frames, r.text))
    return TopUnits(out, skipped)


def language_discrimination(
    index: ActivationIndex, latent_id: int, meta: Mapping[str, AudioMeta], reference: str = "en"
) -> PRResult:
    """Precision/recall of the latent as a detector of non-``reference`` files."""
    return precision_recall(index, latent_id, annotation_from_language(index.files, meta, reference))


def annotation_from_language(
    files: Iterable[str], meta: Mapping[str, AudioMeta], reference: str = "en"
) -> FeatureAnnotation:
    """Positives are the files whose language differs from ``reference``."""
    files = list(files)
    missing = [f for f in files if f not in meta or meta[f].language is None]
    if missing:
        raise InputError(f"{len(missing)} files lack a language tag, e.g. {missing[0]!r}")
    return FeatureAnnotation(f"lang:non-{reference}", frozenset(f for f in files if meta[f].language != reference))


def annotation_from_tags(name: str, tags: Mapping[str, Iterable[str]], tag: str) -> FeatureAnnotation:
    return FeatureAnnotation(name, frozenset(f for f, ts in tags.items() if tag in ts))


def annotation_from_word(alignments: Mapping[str, Alignment], word: str) -> FeatureAnnotation:
    spans = {}
    for fid, al in alignments.items():
        hits = tuple((s.start, s.end) for s in al.of_unit("word") if s.text.lower() == word.lower())
        if hits:
            spans[fid] = hits
    return FeatureAnnotation(f"word:{word}", frozenset(spans), spans)
