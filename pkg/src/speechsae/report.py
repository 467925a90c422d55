"""Activation-highlighted transcripts.

Each character is shaded on a linear white -> orange ramp by its latent value
divided by the largest value over the rendered set.
"""
from __future__ import annotations

import html
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .analysis import ActivationIndex
from .autolabel import file_strength
from .errors import ContractError, InputError
from .ingest import FRAME_RATE, Alignment, frames_for_interval

WHITE = (255, 255, 255)
ORANGE = (255, 165, 0)


@dataclass(frozen=True)
class HighlightDoc:
    file_id: str
    transcript: str
    intensities: tuple[float, ...]
    latent_id: int
    norm_max: float

    def __post_init__(self):
        if len(self.intensities) != len(self.transcript):
            raise ContractError("one intensity per transcript character is required")
        if any(not 0.0 <= t <= 1.0 for t in self.intensities):
            raise ContractError("intensities must lie in [0, 1]")


def ramp(t: float) -> tuple[int, int, int]:
    """Channel-wise linear interpolation from white (t=0) to orange (t=1), rounded half up."""
    return tuple(int(np.floor(w + t * (o - w) + 0.5)) for w, o in zip(WHITE, ORANGE))


def render_highlight(doc: HighlightDoc) -> str:
    if doc.norm_max <= 0 and any(doc.intensities):
        raise ContractError("normalization max must be positive when any character is highlighted")
    parts = [f'<div class="latent-highlight" data-latent="{doc.latent_id}" data-file="{html.escape(doc.file_id)}">']
    for ch, t in zip(doc.transcript, doc.intensities):
        esc = html.escape(ch)
        if t == 0:
            parts.append(esc)
        else:
            r, g, b = ramp(t)
            parts.append(f'<span style="background-color:rgb({r},{g},{b})">{esc}</span>')
    parts.append("</div>")
    return "".join(parts)


def strip_markup(markup: str) -> str:
    return html.unescape(re.sub(r"<[^>]*>", "", markup))


def render_plain(doc: HighlightDoc) -> str:
    """Markup-free fallback: highlighted runs wrapped in asterisks."""
    out = []
    on = [t > 0 for t in doc.intensities]
    for i, ch in enumerate(doc.transcript):
        if on[i] and (i == 0 or not on[i - 1]):
            out.append("*")
        out.append(ch)
        if on[i] and (i == len(on) - 1 or not on[i + 1]):
            out.append("*")
    return "".join(out)


def char_values(
    transcript: str, alignment: Alignment, frame_values: Mapping[int, float], frame_rate: int = FRAME_RATE
) -> list[float]:
    """Largest active-frame value under each character; unaligned whitespace gets 0."""
    spans = alignment.of_unit("char")
    out, si = [], 0
    for ch in transcript:
        if si < len(spans) and spans[si].text == ch:
            s = spans[si]
            vals = [frame_values[f] for f in frames_for_interval(s.start, s.end, frame_rate) if f in frame_values]
            out.append(max(vals, default=0.0))
            si += 1
        elif ch.isspace():
            out.append(0.0)
        else:
            raise InputError(f"{alignment.file_id}: transcript character {ch!r} has no matching char span")
    return out


def highlight_docs(
    index: ActivationIndex,
    latent_id: int,
    file_ids: Sequence[str],
    transcripts: Mapping[str, str],
    alignments: Mapping[str, Alignment],
    frame_rate: int = FRAME_RATE,
) -> list[HighlightDoc]:
    """Docs for ``file_ids``, normalized by the latent's max value over those files."""
    per_file = {}
    for fid in file_ids:
        p = index.file_postings(latent_id, fid)
        per_file[fid] = {int(f): float(v) for f, v in zip(p["frame"], p["value"])}
    norm = max((max(v.values(), default=0.0) for v in per_file.values()), default=0.0)
    docs = []
    for fid in file_ids:
        if fid not in transcripts or fid not in alignments:
            raise InputError(f"{fid!r} lacks a transcript or alignment")
        vals = char_values(transcripts[fid], alignments[fid], per_file[fid], frame_rate)
        intens = tuple(min(1.0, v / norm) if norm > 0 else 0.0 for v in vals)
        docs.append(HighlightDoc(fid, transcripts[fid], intens, latent_id, norm if norm > 0 else 1.0))
    return docs


def top_files(index: ActivationIndex, latent_id: int, n: int) -> list[str]:
    """Activated files by descending strength, ties by file_id."""
    files = sorted(index.activated_files(latent_id))
    files.sort(key=lambda f: -file_strength(index, latent_id, f))
    return files[:n]
