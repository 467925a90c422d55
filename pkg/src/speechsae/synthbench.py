"""Synthetic corpora from planted sparse dictionaries, and dictionary recovery scoring.

Every frame is a positive combination of ``sparsity`` unit-norm atoms plus
Gaussian noise. Optionally some atoms are *word-locked*: they fire on exactly
the frames of one vocabulary word, which gives ground truth for the alignment
based analyses.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import Rng
from .errors import ContractError, MagicMismatchError, TruncatedFileError
from .ingest import (
    FRAME_RATE,
    Alignment,
    AudioMeta,
    ManifestEntry,
    Span,
    write_alignment_file,
    write_embedding_file,
    write_manifest,
)
from .sae import SaeParams

DICT_MAGIC = b"LLD1"
_HEADER = struct.Struct("<4sIIIfffQ")

VOCAB = (
    "the", "of", "and", "his", "gradually", "record", "prison", "seven",
    "ten", "first", "water", "house", "letter", "morning", "people", "great",
    "through", "little", "under", "father", "again", "number", "should", "never",
)


@dataclass
class PlantedDictionary:
    atoms: np.ndarray  # (d_in, n_atoms), unit-norm columns
    sparsity: int
    lo: float = 0.5
    hi: float = 1.5
    noise_sd: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=np.float32)
        norms = np.linalg.norm(self.atoms.astype(np.float64), axis=0)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ContractError("dictionary atoms must have unit L2 norm")
        if not 1 <= self.sparsity <= self.n_atoms:
            raise ContractError(f"sparsity {self.sparsity} outside [1, {self.n_atoms}]")
        if not 0 <= self.lo <= self.hi:
            raise ContractError("coefficient range must satisfy 0 <= lo <= hi")

    @property
    def d_in(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[1]


def make_dictionary(
    d_in: int = 64,
    n_atoms: int = 512,
    sparsity: int = 8,
    lo: float = 0.5,
    hi: float = 1.5,
    noise_sd: float = 0.01,
    seed: int = 0,
) -> PlantedDictionary:
    """Atoms drawn uniformly on the sphere."""
    a = Rng(seed).derive(0xD1C7).normal((d_in, n_atoms))
    a /= np.linalg.norm(a, axis=0, keepdims=True)
    # renormalize after the float32 cast so column norms sit within 1e-6
    a = a.astype(np.float32)
    a = (a / np.linalg.norm(a.astype(np.float64), axis=0, keepdims=True)).astype(np.float32)
    return PlantedDictionary(a, sparsity, lo, hi, noise_sd, seed)


@dataclass
class SynthFile:
    file_id: str
    frames: np.ndarray
    active: np.ndarray  # (n_frames, sparsity) atom ids
    coefs: np.ndarray  # (n_frames, sparsity)
    language: str
    alignment: Alignment | None = None
    transcript: str | None = None
    tags: tuple[str, ...] = ()


@dataclass
class SynthCorpus:
    dictionary: PlantedDictionary
    files: list[SynthFile]
    word_atoms: dict[str, int] = field(default_factory=dict)
    language_atom: int | None = None
    frame_rate: int = FRAME_RATE

    def frames(self) -> np.ndarray:
        return np.concatenate([f.frames for f in self.files])


def _word_layout(rng: Rng, n_frames: int, vocab) -> list[tuple[str, int, int]]:
    """Non-overlapping (word, first_frame, stop_frame) runs with short gaps."""
    out = []
    pos = int(rng.integers(3, 1)[0])
    while True:
        length = 4 + int(rng.integers(9, 1)[0])
        if pos + length > n_frames:
            break
        word = vocab[int(rng.integers(len(vocab), 1)[0])]
        out.append((word, pos, pos + length))
        pos += length + int(rng.integers(3, 1)[0])
    return out


def _alignment(file_id: str, layout, frame_rate: int) -> Alignment:
    spans = []
    for word, a, b in layout:
        t0, t1 = a / frame_rate, b / frame_rate
        spans.append(Span("word", word, t0, t1))
        edges = np.linspace(t0, t1, len(word) + 1)
        for ch, s, e in zip(word, edges[:-1], edges[1:]):
            spans.append(Span("char", ch, float(s), float(e)))
            spans.append(Span("phone", ch.upper(), float(s), float(e)))
    return Alignment(file_id, tuple(spans))


def generate(
    dictionary: PlantedDictionary,
    n_files: int,
    frames_per_file: int,
    *,
    n_word_atoms: int = 0,
    vocab=VOCAB,
    language_atom: int | None = None,
    foreign_fraction: float = 0.0,
    frame_rate: int = FRAME_RATE,
) -> SynthCorpus:
    """Sample a corpus. Files are generated from per-file derived seeds.

    With ``n_word_atoms > 0`` every file gets a word alignment and the first
    ``n_word_atoms`` vocabulary words lock atoms ``0 .. n_word_atoms - 1``.
    With ``language_atom`` set, files tagged ``es`` carry that atom on every frame.
    """
    d = dictionary
    s = d.sparsity
    reserved = list(range(n_word_atoms))
    if language_atom is not None:
        reserved.append(language_atom)
    pool = np.setdiff1d(np.arange(d.n_atoms), reserved)
    if len(pool) < s:
        raise ContractError("not enough free atoms for the requested sparsity")
    word_atoms = {vocab[i]: i for i in range(n_word_atoms)}
    base = Rng(d.seed)
    files = []
    for f in range(n_files):
        rng = base.derive(0xF11E, f)
        file_id = f"syn{f:05d}"
        language = "es" if rng.uniform() < foreign_fraction else "en"
        active = pool[rng.choose_distinct(len(pool), s, frames_per_file)]
        coefs = rng.uniform((frames_per_file, s), d.lo, d.hi)

        layout = []
        if n_word_atoms:
            layout = _word_layout(rng, frames_per_file, vocab)
            for word, a, b in layout:
                if word in word_atoms:
                    active[a:b, 0] = word_atoms[word]
                    coefs[a:b, 0] = d.hi
        if language_atom is not None and language == "es":
            active[:, -1] = language_atom
            coefs[:, -1] = d.hi

        dense = np.zeros((frames_per_file, d.n_atoms))
        np.put_along_axis(dense, active, coefs, axis=1)
        frames = dense @ d.atoms.T.astype(np.float64)
        if d.noise_sd > 0:
            frames += rng.normal(frames.shape, scale=d.noise_sd)

        alignment = transcript = None
        tags: list[str] = []
        if layout:
            alignment = _alignment(file_id, layout, frame_rate)
            transcript = " ".join(w for w, _, _ in layout)
            tags = sorted({f"word:{w}" for w, _, _ in layout if w in word_atoms})
        order = np.argsort(active, axis=1, kind="stable")
        files.append(
            SynthFile(
                file_id=file_id,
                frames=frames.astype(np.float32),
                active=np.take_along_axis(active, order, axis=1),
                coefs=np.take_along_axis(coefs, order, axis=1),
                language=language,
                alignment=alignment,
                transcript=transcript,
                tags=tuple(tags),
            )
        )
    return SynthCorpus(d, files, word_atoms, language_atom, frame_rate)


def reconstruct_from_truth(corpus: SynthCorpus, synth_file: SynthFile) -> np.ndarray:
    """Noise-free frames rebuilt from the recorded active sets."""
    atoms = corpus.dictionary.atoms.astype(np.float64)
    return np.einsum("fs,dfs->fd", synth_file.coefs, atoms[:, synth_file.active])


@dataclass(frozen=True)
class RecoveryReport:
    matched_fraction: float
    mean_best_cosine: float
    best_cosines: np.ndarray
    threshold: float


def recovery_score(
    params: SaeParams, dictionary: PlantedDictionary, threshold: float = 0.9, optimal: bool = False
) -> RecoveryReport:
    """Best absolute cosine between each planted atom and any decoder column.

    Columns may be reused across atoms unless ``optimal`` is set, which uses a
    one-to-one assignment instead.
    """
    if params.d_in != dictionary.d_in:
        raise ContractError(f"model d_in={params.d_in} but dictionary d_in={dictionary.d_in}")
    w = params.w_dec.astype(np.float64)
    w = w / np.maximum(np.linalg.norm(w, axis=0, keepdims=True), 1e-12)
    atoms = dictionary.atoms.astype(np.float64)
    atoms = atoms / np.linalg.norm(atoms, axis=0, keepdims=True)
    cos = np.abs(atoms.T @ w)  # (n_atoms, d_latent)
    if optimal:
        rows, cols = linear_sum_assignment(-cos)
        best = np.zeros(dictionary.n_atoms)
        best[rows] = cos[rows, cols]
    else:
        best = cos.max(axis=1)
    return RecoveryReport(
        matched_fraction=float(np.mean(best >= threshold)),
        mean_best_cosine=float(best.mean()),
        best_cosines=best,
        threshold=threshold,
    )


def save_dictionary(path, d: PlantedDictionary) -> None:
    header = _HEADER.pack(DICT_MAGIC, d.d_in, d.n_atoms, d.sparsity, d.lo, d.hi, d.noise_sd, d.seed)
    Path(path).write_bytes(header + np.ascontiguousarray(d.atoms, dtype="<f4").tobytes())


def load_dictionary(path) -> PlantedDictionary:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    magic, d_in, n_atoms, s, lo, hi, noise_sd, seed = _HEADER.unpack_from(raw)
    if magic != DICT_MAGIC:
        raise MagicMismatchError(f"{path}: bad magic {magic!r}")
    need = _HEADER.size + 4 * d_in * n_atoms
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: atoms truncated")
    atoms = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size, count=d_in * n_atoms)
    return PlantedDictionary(atoms.reshape(d_in, n_atoms).astype(np.float32), s, lo, hi, noise_sd, seed)


def write_corpus(corpus: SynthCorpus, out_dir, pad_to: int | None = None) -> Path:
    """Write embeddings, alignments, manifest, dictionary and ground truth.

    The manifest is in ingest format. ``pad_to`` appends zero frames so the
    files look like fixed-length encoder outputs before trimming.
    """
    out = Path(out_dir)
    (out / "emb").mkdir(parents=True, exist_ok=True)
    entries = []
    alignments = []
    for f in corpus.files:
        frames = f.frames
        if pad_to is not None and pad_to > len(frames):
            frames = np.vstack([frames, np.zeros((pad_to - len(frames), frames.shape[1]), np.float32)])
        rel = f"emb/{f.file_id}.lle"
        write_embedding_file(out / rel, frames)
        duration = len(f.frames) / corpus.frame_rate
        al_rel = None
        if f.alignment is not None:
            alignments.append(f.alignment)
            al_rel = "alignments.tsv"
        entries.append(
            ManifestEntry(f.file_id, rel, AudioMeta(f.file_id, duration, f.language, f.transcript), al_rel, f.tags)
        )
    if alignments:
        write_alignment_file(out / "alignments.tsv", alignments)
    write_manifest(out / "manifest.jsonl", entries)
    save_dictionary(out / "dict.bin", corpus.dictionary)
    np.save(out / "truth_active.npy", np.concatenate([f.active for f in corpus.files]))
    np.save(out / "truth_coefs.npy", np.concatenate([f.coefs for f in corpus.files]))
    info = {
        "frame_rate": corpus.frame_rate,
        "language_atom": corpus.language_atom,
        "n_files": len(corpus.files),
        "word_atoms": corpus.word_atoms,
    }
    (out / "synth.json").write_text(json.dumps(info, sort_keys=True) + "\n")
    return out
