"""TopK sparse autoencoder: a linear encoder with top-k gating and a linear decoder.

Inputs are centered by a learned pre-bias before encoding and the pre-bias is
added back after decoding, so an empty activation decodes to ``b_pre``.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Rng, matmul, topk_mask
from .errors import ChecksumError, ContractError, MagicMismatchError, TruncatedFileError

CHECKPOINT_MAGIC = b"LLSA"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SaeConfig:
    d_in: int = 512
    d_latent: int = 16000
    k: int = 45

    def __post_init__(self):
        if self.d_in < 1:
            raise ContractError(f"d_in must be >= 1, got {self.d_in}")
        if not 1 <= self.k <= self.d_latent:
            raise ContractError(f"need 1 <= k <= d_latent, got k={self.k}, d_latent={self.d_latent}")


@dataclass
class SaeParams:
    w_enc: np.ndarray  # (d_latent, d_in)
    b_enc: np.ndarray  # (d_latent,)
    w_dec: np.ndarray  # (d_in, d_latent)
    b_pre: np.ndarray  # (d_in,)

    def __post_init__(self):
        d_latent, d_in = self.w_enc.shape
        if (
            self.b_enc.shape != (d_latent,)
            or self.w_dec.shape != (d_in, d_latent)
            or self.b_pre.shape != (d_in,)
        ):
            raise ContractError("inconsistent SaeParams shapes")

    @property
    def d_in(self) -> int:
        return self.w_enc.shape[1]

    @property
    def d_latent(self) -> int:
        return self.w_enc.shape[0]

    @property
    def dtype(self):
        return self.w_enc.dtype

    def copy(self) -> "SaeParams":
        return SaeParams(self.w_enc.copy(), self.b_enc.copy(), self.w_dec.copy(), self.b_pre.copy())

    def astype(self, dtype) -> "SaeParams":
        return SaeParams(*(a.astype(dtype) for a in self.arrays()))

    def arrays(self) -> tuple[np.ndarray, ...]:
        return self.w_enc, self.b_enc, self.w_dec, self.b_pre


@dataclass(frozen=True)
class SparseActivation:
    """Active latents of one frame, sorted by latent id; values strictly positive."""

    ids: np.ndarray
    values: np.ndarray

    @classmethod
    def empty(cls, dtype=np.float32) -> "SparseActivation":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=dtype))

    @classmethod
    def from_pairs(cls, pairs, dtype=np.float32) -> "SparseActivation":
        pairs = sorted(pairs)
        ids = np.array([p[0] for p in pairs], dtype=np.int64)
        values = np.array([p[1] for p in pairs], dtype=dtype)
        return cls(ids, values)

    def __len__(self) -> int:
        return len(self.ids)

    def pairs(self) -> list[tuple[int, float]]:
        return [(int(i), float(v)) for i, v in zip(self.ids, self.values)]

    def get(self, latent_id: int) -> float:
        pos = np.searchsorted(self.ids, latent_id)
        if pos < len(self.ids) and self.ids[pos] == latent_id:
            return float(self.values[pos])
        return 0.0

    def to_dense(self, d_latent: int) -> np.ndarray:
        z = np.zeros(d_latent, dtype=self.values.dtype)
        z[self.ids] = self.values
        return z


def param_count(config: SaeConfig) -> dict[str, int]:
    return {
        "weights": 2 * config.d_in * config.d_latent,
        "biases": config.d_latent + config.d_in,
    }


def init_params(config: SaeConfig, rng: Rng, sample: np.ndarray | None = None) -> SaeParams:
    """Unit-norm random decoder columns, tied encoder, pre-bias at the sample mean.

    ``sample`` should hold up to 10,000 frames; without it ``b_pre`` is zero.
    """
    w_dec = rng.normal((config.d_in, config.d_latent))
    w_dec /= np.linalg.norm(w_dec, axis=0, keepdims=True)
    w_dec = w_dec.astype(np.float32)
    b_pre = np.zeros(config.d_in, dtype=np.float32)
    if sample is not None and len(sample):
        b_pre = np.asarray(sample, dtype=np.float64).mean(axis=0).astype(np.float32)
    return SaeParams(
        w_enc=np.ascontiguousarray(w_dec.T),
        b_enc=np.zeros(config.d_latent, dtype=np.float32),
        w_dec=w_dec,
        b_pre=b_pre,
    )


def pre_activations(params: SaeParams, x: np.ndarray) -> np.ndarray:
    """``w_enc (x - b_pre) + b_enc`` for a batch ``x`` of shape (n, d_in)."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise ContractError(f"input shape {x.shape} does not match d_in={params.d_in}")
    xc = x.astype(np.float64) - params.b_pre.astype(np.float64)
    z = matmul(xc, params.w_enc.T) + params.b_enc
    return z.astype(params.dtype)


def encode_dense(params: SaeParams, x: np.ndarray, k: int) -> np.ndarray:
    """Batch encode to a dense (n, d_latent) code with at most ``k`` positive entries per row."""
    z = pre_activations(params, x)
    keep = topk_mask(z, k) & (z > 0)
    return np.where(keep, z, 0).astype(params.dtype)


def decode_dense(params: SaeParams, codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.shape[1] != params.d_latent:
        raise ContractError(f"code shape {codes.shape} does not match d_latent={params.d_latent}")
    out = matmul(codes, params.w_dec.T) + params.b_pre
    return out.astype(params.dtype)


ENCODE_CHUNK = 256


def encode_frames(params: SaeParams, frames: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k ids and clamped values for every frame, as (n, k) arrays.

    Frames are encoded in fixed chunks so that every caller sees bit-identical
    values for the same frame. Ids are ascending within a row; a clamped
    entry has value 0.
    """
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[1] != params.d_in:
        raise ContractError(f"frames shape {frames.shape} does not match d_in={params.d_in}")
    n = frames.shape[0]
    ids = np.empty((n, k), dtype=np.int64)
    vals = np.empty((n, k), dtype=params.dtype)
    for lo in range(0, n, ENCODE_CHUNK):
        z = pre_activations(params, frames[lo : lo + ENCODE_CHUNK])
        rows = z.shape[0]
        idx = np.flatnonzero(topk_mask(z, k)).reshape(rows, k) % params.d_latent
        v = np.take_along_axis(z, idx, axis=1)
        ids[lo : lo + rows] = idx
        vals[lo : lo + rows] = np.where(v > 0, v, 0)
    return ids, vals


def activations_from_rows(ids: np.ndarray, vals: np.ndarray) -> list[SparseActivation]:
    out = []
    for i, v in zip(ids, vals):
        live = v > 0
        out.append(SparseActivation(i[live].copy(), v[live].copy()))
    return out


def encode(params: SaeParams, x: np.ndarray, k: int) -> SparseActivation:
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] != params.d_in:
        raise ContractError(f"input length {x.shape} does not match d_in={params.d_in}")
    if not np.all(np.isfinite(x)):
        raise ContractError("input contains non-finite values")
    z = pre_activations(params, x[None, :])[0]
    keep = topk_mask(z[None, :], k)[0] & (z > 0)
    ids = np.flatnonzero(keep)
    return SparseActivation(ids.astype(np.int64), z[ids])


def decode(params: SaeParams, act: SparseActivation) -> np.ndarray:
    ids = np.asarray(act.ids)
    if len(ids) and (ids.min() < 0 or ids.max() >= params.d_latent):
        raise ContractError(f"latent id out of range [0, {params.d_latent})")
    cols = params.w_dec[:, ids].astype(np.float64)
    out = params.b_pre.astype(np.float64) + cols @ np.asarray(act.values, dtype=np.float64)
    return out.astype(params.dtype)


@dataclass(frozen=True)
class ForwardResult:
    x_hat: np.ndarray
    act: SparseActivation
    sq_err: float


def forward(params: SaeParams, x: np.ndarray, k: int) -> ForwardResult:
    act = encode(params, x, k)
    x_hat = decode(params, act)
    diff = x_hat.astype(np.float64) - np.asarray(x, dtype=np.float64)
    return ForwardResult(x_hat, act, float(np.mean(diff * diff)))


def decoder_column_norms(params: SaeParams) -> np.ndarray:
    return np.linalg.norm(params.w_dec.astype(np.float64), axis=0)


def save_checkpoint(path, params: SaeParams, k: int) -> None:
    """Write the LLSA checkpoint: header, float32 arrays, trailing CRC-32 as u64."""
    header = struct.pack(
        "<4sIIII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.d_in, params.d_latent, k
    )
    payload = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes()
        for a in (params.b_pre, params.b_enc, params.w_enc, params.w_dec)
    )
    crc = zlib.crc32(payload)
    Path(path).write_bytes(header + payload + struct.pack("<Q", crc))


def load_checkpoint(path) -> tuple[SaeParams, int]:
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise TruncatedFileError(f"{path}: header truncated")
    magic, version, d_in, d_latent, k = struct.unpack_from("<4sIIII", raw)
    if magic != CHECKPOINT_MAGIC:
        raise MagicMismatchError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise MagicMismatchError(f"{path}: unsupported version {version}")
    n_floats = d_in + d_latent + 2 * d_in * d_latent
    end = 20 + 4 * n_floats
    if len(raw) < end + 8:
        raise TruncatedFileError(f"{path}: payload truncated")
    payload = raw[20:end]
    (crc,) = struct.unpack_from("<Q", raw, end)
    if crc != zlib.crc32(payload):
        raise ChecksumError(f"{path}: checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    b_pre, b_enc, w_enc, w_dec = np.split(flat, np.cumsum([d_in, d_latent, d_in * d_latent]))
    params = SaeParams(
        w_enc=w_enc.reshape(d_latent, d_in),
        b_enc=b_enc,
        w_dec=w_dec.reshape(d_in, d_latent),
        b_pre=b_pre,
    )
    SaeConfig(d_in, d_latent, k)
    return params, k
