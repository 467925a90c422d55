"""Latent edits decoded back to embedding space.

Because the decoder is linear, editing latent ``j`` by ``dv`` on a frame moves
that frame's reconstruction by exactly ``dv * w_dec[:, j]``. Reconstructions are
computed in float64 and the edit is added there, so ``SteerResult.delta`` is
exact; ``modified`` is the float32 embedding handed to an external decoder.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .analysis import ActivationIndex
from .errors import ContractError, InputError
from .ingest import EmbeddingSequence
from .sae import SaeParams, encode_frames

MODES = ("deactivate", "activate", "set")
FrameFilter = Union[str, Sequence[int]]


@dataclass(frozen=True)
class SteerSpec:
    latent_id: int
    mode: str
    magnitude: float
    frame_filter: FrameFilter = "all"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not math.isfinite(self.magnitude):
            raise ContractError("magnitude must be finite")
        if isinstance(self.frame_filter, str) and self.frame_filter not in ("all", "active-only"):
            raise ContractError(f"unknown frame filter {self.frame_filter!r}")


@dataclass(frozen=True)
class SteerResult:
    modified: EmbeddingSequence
    plain: np.ndarray
    delta: np.ndarray  # float64, modified - plain before the float32 cast
    frames_touched: int

    @property
    def l2_delta(self) -> np.ndarray:
        return np.linalg.norm(self.delta, axis=1)


def _current_values(ids: np.ndarray, vals: np.ndarray, latent_id: int) -> np.ndarray:
    hit = (ids == latent_id) & (vals > 0)
    return np.where(hit, vals, 0).sum(axis=1).astype(np.float64)


def _filter_mask(spec: SteerSpec, current: np.ndarray, n_editable: int) -> np.ndarray:
    n = len(current)
    if isinstance(spec.frame_filter, str):
        mask = np.ones(n, bool) if spec.frame_filter == "all" else current > 0
    else:
        mask = np.zeros(n, bool)
        frames = np.asarray(spec.frame_filter, dtype=np.int64)
        if len(frames) and (frames.min() < 0 or frames.max() >= n):
            raise ContractError(f"frame filter outside [0, {n})")
        mask[frames] = True
    mask[n_editable:] = False
    return mask


def value_changes(spec: SteerSpec, current: np.ndarray, n_editable: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame change to the latent's value and the mask of edited frames."""
    mask = _filter_mask(spec, current, n_editable)
    if spec.mode == "deactivate":
        mask &= current > 0
        new = -spec.magnitude
    elif spec.mode == "activate":
        mask &= current <= 0
        new = spec.magnitude
    else:
        new = spec.magnitude
    change = np.where(mask, new - current, 0.0)
    return change, mask


def plain_reconstruction(params: SaeParams, ids: np.ndarray, vals: np.ndarray) -> np.ndarray:
    cols = params.w_dec.T.astype(np.float64)[ids]  # (n, k, d_in)
    return np.einsum("nk,nkd->nd", vals.astype(np.float64), cols) + params.b_pre.astype(np.float64)


def steer_many(
    seq: EmbeddingSequence,
    params: SaeParams,
    k: int,
    specs: Sequence[SteerSpec],
    n_real_frames: int | None = None,
) -> SteerResult:
    """Apply ``specs`` in order to each frame's activation and decode.

    Frames at or beyond ``n_real_frames`` (padding) are reconstructed unedited.
    """
    if seq.dim != params.d_in:
        raise ContractError(f"sequence dim {seq.dim} does not match model d_in={params.d_in}")
    for spec in specs:
        if not 0 <= spec.latent_id < params.d_latent:
            raise ContractError(f"latent {spec.latent_id} out of range [0, {params.d_latent})")
    n_editable = seq.n_frames if n_real_frames is None else min(n_real_frames, seq.n_frames)
    ids, vals = encode_frames(params, seq.frames, k)
    plain64 = plain_reconstruction(params, ids, vals)
    delta = np.zeros_like(plain64)
    touched = np.zeros(seq.n_frames, bool)
    edited: dict[int, np.ndarray] = {}
    for spec in specs:
        j = spec.latent_id
        current = edited.get(j)
        if current is None:
            current = _current_values(ids, vals, j)
        change, mask = value_changes(spec, current, n_editable)
        delta += change[:, None] * params.w_dec[:, j].astype(np.float64)[None, :]
        edited[j] = current + change
        touched |= mask
    plain = plain64.astype(np.float32)
    modified = np.where(touched[:, None], (plain64 + delta).astype(np.float32), plain)
    return SteerResult(EmbeddingSequence(seq.file_id, modified), plain, delta, int(touched.sum()))


def steer(seq, params: SaeParams, k: int, spec: SteerSpec, n_real_frames: int | None = None) -> SteerResult:
    return steer_many(seq, params, k, [spec], n_real_frames)


def ablate(seq, params: SaeParams, k: int, latent_id: int, n_real_frames: int | None = None) -> SteerResult:
    """Zero the latent wherever it fires."""
    return steer(seq, params, k, SteerSpec(latent_id, "set", 0.0, "active-only"), n_real_frames)


def default_magnitude(index: ActivationIndex, latent_id: int) -> float:
    """Ten times the nearest-rank 95th percentile of the latent's posting values."""
    values = np.sort(np.asarray(index.postings_for(latent_id)["value"], dtype=np.float64))
    if len(values) == 0:
        raise InputError(f"latent {latent_id} has no postings; pass an explicit magnitude")
    rank = math.ceil(0.95 * len(values))
    return 10.0 * float(values[rank - 1])
