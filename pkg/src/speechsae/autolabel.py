"""Automated latent labeling through a chat-completion endpoint.

For each latent: rank activated files by how close their activation strength is
to the median, keep 100 candidates, show up to 20 of them with the activated
characters wrapped in asterisks, and ask for a JSON verdict. Anything short of
high confidence is demoted to the ``diffuse`` category.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import httpx
import numpy as np

from .analysis import ActivationIndex
from .core import Rng
from .errors import InputError, InvalidEnumError, MalformedResponseError, MissingFieldError
from .ingest import FRAME_RATE, Alignment, frames_for_interval

log = logging.getLogger(__name__)

CATEGORIES = ("phonetic", "orthographic", "morphological", "lexical", "semantic", "syntactic", "diffuse")
CONFIDENCES = ("high", "medium", "low")
ENV_URL = "SPEECHSAE_ENDPOINT_URL"
ENV_MODEL = "SPEECHSAE_MODEL"
ENV_KEY = "SPEECHSAE_API_KEY"

N_CANDIDATES = 100
N_PRESENTED = 20


@dataclass(frozen=True)
class LatentExampleSet:
    latent_id: int
    candidates: tuple[str, ...]
    presented: tuple[str, ...]
    marked: tuple[str, ...] = ()


@dataclass(frozen=True)
class LabelRecord:
    latent_id: int
    label: str
    explanation: str
    confidence: str
    category: str
    retained: bool

    def to_record(self) -> dict:
        return {
            "category": self.category,
            "confidence": self.confidence,
            "explanation": self.explanation,
            "label": self.label,
            "latent_id": self.latent_id,
            "retained": self.retained,
        }


def file_strength(index: ActivationIndex, latent_id: int, file_id: str, how: str = "max") -> float:
    p = index.file_postings(latent_id, file_id)
    if len(p) == 0:
        raise InputError(f"latent {latent_id} is not active in {file_id!r}")
    values = np.asarray(p["value"], dtype=np.float64)
    if how == "max":
        return float(values.max())
    if how == "mean":
        return float(values.mean())
    raise ValueError(f"unknown strength {how!r}")


def select_examples(
    index: ActivationIndex,
    latent_id: int,
    seed: int,
    n_candidates: int = N_CANDIDATES,
    n_presented: int = N_PRESENTED,
    how: str = "max",
) -> LatentExampleSet | None:
    """Files nearest the (lower) median strength; None when the latent never fires."""
    files = sorted(index.activated_files(latent_id))
    if not files:
        return None
    strengths = np.array([file_strength(index, latent_id, f, how) for f in files])
    median = float(np.sort(strengths)[(len(strengths) - 1) // 2])
    gap = np.abs(strengths - median)
    # files are sorted, so a stable sort breaks distance ties by file_id
    order = np.argsort(gap, kind="stable")[:n_candidates]
    candidates = tuple(files[i] for i in order)
    perm = Rng(seed).derive(latent_id).permutation(len(candidates))
    presented = tuple(candidates[i] for i in perm[:n_presented])
    return LatentExampleSet(latent_id, candidates, presented)


def mark_spans(
    transcript: str, alignment: Alignment, active_frames, frame_rate: int = FRAME_RATE
) -> str:
    """Wrap maximal runs of activated characters in asterisks.

    Characters are matched one-to-one, in order, with the alignment's ``char``
    spans; whitespace may be left unaligned and then joins a run only when
    both neighbours are active.
    """
    spans = alignment.of_unit("char")
    active_frames = set(active_frames)
    flags: list[bool | None] = []
    si = 0
    for ch in transcript:
        if si < len(spans) and spans[si].text == ch:
            s = spans[si]
            flags.append(any(f in active_frames for f in frames_for_interval(s.start, s.end, frame_rate)))
            si += 1
        elif ch.isspace():
            flags.append(None)
        else:
            raise InputError(f"{alignment.file_id}: transcript character {ch!r} has no matching char span")
    if si != len(spans):
        raise InputError(f"{alignment.file_id}: {len(spans) - si} char spans left after the transcript")

    on = [bool(f) for f in flags]
    for i, f in enumerate(flags):
        if f is None:
            left = next((flags[j] for j in range(i - 1, -1, -1) if flags[j] is not None), False)
            right = next((flags[j] for j in range(i + 1, len(flags)) if flags[j] is not None), False)
            on[i] = bool(left and right)
    out = []
    for i, ch in enumerate(transcript):
        if on[i] and (i == 0 or not on[i - 1]):
            out.append("*")
        out.append(ch)
        if on[i] and (i == len(transcript) - 1 or not on[i + 1]):
            out.append("*")
    return "".join(out)


def attach_marks(
    examples: LatentExampleSet,
    index: ActivationIndex,
    transcripts: Mapping[str, str],
    alignments: Mapping[str, Alignment],
    frame_rate: int = FRAME_RATE,
) -> LatentExampleSet:
    marked = []
    for fid in examples.presented:
        if fid not in transcripts or fid not in alignments:
            raise InputError(f"{fid!r} lacks a transcript or alignment")
        active = index.active_frames(examples.latent_id, fid)
        marked.append(mark_spans(transcripts[fid], alignments[fid], active, frame_rate))
    return replace(examples, marked=tuple(marked))


SYSTEM_PROMPT = (
    "You label features of a sparse autoencoder trained on speech-recognizer encoder "
    "frames. You will see transcripts in which the characters spoken while the feature "
    "was active are wrapped in asterisks."
)


def build_prompt(examples: LatentExampleSet, model: str = "") -> dict:
    if not examples.marked:
        raise InputError(f"latent {examples.latent_id}: no marked transcripts to present")
    lines = [f"{i + 1}. {t}" for i, t in enumerate(examples.marked)]
    user = (
        f"Feature {examples.latent_id}. Examples:\n"
        + "\n".join(lines)
        + "\n\nAssign exactly one category from: "
        + ", ".join(CATEGORIES)
        + ".\nRespond with a single JSON object with the keys "
        '"label", "explanation", "confidence" (one of high, medium, low) and "category".'
    )
    return {
        "model": model,
        "messages": [
            {"role": "system", "content": SYSTEM_PROMPT},
            {"role": "user", "content": user},
        ],
        "response_format": {"type": "json_object"},
        "temperature": 0,
    }


def encode_payload(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")


def decode_payload(raw: bytes) -> dict:
    return json.loads(raw.decode("utf-8"))


def response_content(body: dict) -> str:
    """First message content of a chat-completion response body."""
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise MalformedResponseError("response has no choices[0].message.content") from None
    if not isinstance(content, str):
        raise MalformedResponseError("message content is not a string")
    return content


def parse_response(raw: str, latent_id: int) -> LabelRecord:
    """Strict parse of the model's JSON verdict; extra keys are ignored."""
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MalformedResponseError(f"latent {latent_id}: response is not JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise MalformedResponseError(f"latent {latent_id}: response is not a JSON object")
    for key in ("label", "explanation", "confidence", "category"):
        if key not in obj:
            raise MissingFieldError(f"latent {latent_id}: missing field {key!r}")
        if not isinstance(obj[key], str):
            raise MalformedResponseError(f"latent {latent_id}: field {key!r} is not a string")
    confidence = obj["confidence"].strip().lower()
    category = obj["category"].strip().lower()
    if confidence not in CONFIDENCES:
        raise InvalidEnumError(f"latent {latent_id}: confidence {obj['confidence']!r}")
    if category not in CATEGORIES:
        raise InvalidEnumError(f"latent {latent_id}: category {obj['category']!r}")
    return LabelRecord(latent_id, obj["label"], obj["explanation"], confidence, category, confidence == "high")


def apply_confidence_policy(record: LabelRecord) -> LabelRecord:
    if record.confidence == "high":
        return replace(record, retained=True)
    explanation = f"leading hypothesis: {record.label}"
    if record.explanation:
        explanation += f"; {record.explanation}"
    return replace(record, category="diffuse", explanation=explanation, retained=False)


class ChatClient:
    """Minimal chat-completion HTTP client with timeout and retry-with-backoff."""

    def __init__(self, url: str, model: str, api_key: str | None = None, timeout: float = 60.0,
                 retries: int = 3, backoff: float = 1.0, transport: httpx.BaseTransport | None = None):
        self.url = url
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._http = httpx.Client(transport=transport, timeout=timeout)

    @classmethod
    def from_env(cls, **kwargs) -> "ChatClient":
        url = os.environ.get(ENV_URL)
        model = os.environ.get(ENV_MODEL)
        if not url or not model:
            raise InputError(f"set {ENV_URL} and {ENV_MODEL}, or use a mock endpoint")
        return cls(url, model, os.environ.get(ENV_KEY), **kwargs)

    def complete(self, payload: dict) -> str:
        payload = {**payload, "model": payload.get("model") or self.model}
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._http.post(self.url, content=encode_payload(payload), headers=headers)
                resp.raise_for_status()
                return response_content(resp.json())
            except (httpx.HTTPError, ValueError) as exc:
                last = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * 2**attempt)
        raise MalformedResponseError(f"endpoint failed after {self.retries + 1} attempts: {last}")


class MockChatClient:
    """Offline stand-in that replays canned responses.

    ``<dir>/latent_<id>.json`` holds the raw response content for a latent.
    Latents without a canned file get a verdict derived from a hash of the
    request, so runs are reproducible without any fixtures.
    """

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory else None
        self.requests: list[dict] = []

    def complete(self, payload: dict) -> str:
        self.requests.append(payload)
        latent_id = _latent_from_payload(payload)
        if self.directory is not None:
            canned = self.directory / f"latent_{latent_id}.json"
            if canned.exists():
                return canned.read_text(encoding="utf-8")
        digest = hashlib.sha256(encode_payload(payload)).digest()
        category = CATEGORIES[digest[0] % (len(CATEGORIES) - 1)]
        confidence = CONFIDENCES[digest[1] % len(CONFIDENCES)]
        return json.dumps(
            {
                "label": f"{category} pattern {digest[2:4].hex()}",
                "explanation": f"mock verdict for feature {latent_id}",
                "confidence": confidence,
                "category": category,
            },
            sort_keys=True,
        )


def _latent_from_payload(payload: dict) -> int:
    text = payload["messages"][-1]["content"]
    head = text.split(".", 1)[0]
    return int(head.rsplit(" ", 1)[-1])


def label_latent(
    latent_id: int,
    index: ActivationIndex,
    transcripts: Mapping[str, str],
    alignments: Mapping[str, Alignment],
    client,
    seed: int,
    frame_rate: int = FRAME_RATE,
) -> LabelRecord | None:
    examples = select_examples(index, latent_id, seed)
    if examples is None:
        return None
    examples = attach_marks(examples, index, transcripts, alignments, frame_rate)
    raw = client.complete(build_prompt(examples, getattr(client, "model", "")))
    return apply_confidence_policy(parse_response(raw, latent_id))


def label_latents(
    latent_ids: Sequence[int],
    index: ActivationIndex,
    transcripts: Mapping[str, str],
    alignments: Mapping[str, Alignment],
    client,
    seed: int,
    max_workers: int = 4,
    frame_rate: int = FRAME_RATE,
    on_error: Callable[[int, Exception], None] | None = None,
) -> list[LabelRecord]:
    """Label latents concurrently; results come back in latent-id order.

    Latents that never fire are skipped. A parse failure drops that latent
    when ``on_error`` is given, and raises otherwise.
    """

    def one(lid: int):
        try:
            return label_latent(lid, index, transcripts, alignments, client, seed, frame_rate)
        except Exception as exc:
            if on_error is None:
                raise
            on_error(lid, exc)
            return None

    ids = sorted(set(latent_ids))
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        results = list(pool.map(one, ids))
    return [r for r in results if r is not None]


def write_records(path, records: Sequence[LabelRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in sorted(records, key=lambda r: r.latent_id):
            fh.write(json.dumps(r.to_record(), sort_keys=True, ensure_ascii=False) + "\n")


def read_records(path) -> list[LabelRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append(LabelRecord(**rec))
    return out


def export_csv(path, records: Sequence[LabelRecord]) -> None:
    """Review sheet; the ``correct`` column is left blank for a human rater."""
    fields = ["latent_id", "label", "category", "confidence", "retained", "explanation", "correct"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in sorted(records, key=lambda r: r.latent_id):
            w.writerow({**r.to_record(), "correct": ""})


def tally_reviews(path) -> dict[str, int]:
    """Count ``correct`` marks (y/n) in a reviewed CSV."""
    counts = {"correct": 0, "incorrect": 0, "unreviewed": 0}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            mark = (row.get("correct") or "").strip().lower()
            if mark in ("y", "yes", "1", "true"):
                counts["correct"] += 1
            elif mark in ("n", "no", "0", "false"):
                counts["incorrect"] += 1
            else:
                counts["unreviewed"] += 1
    return counts
