"""Frame-MSE training with analytic gradients and Adam.

The gradient treats the top-k support of each frame as fixed: selected,
strictly positive latents pass gradient straight through and every other
latent gets none.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from .core import Rng, matmul, topk_mask
from .errors import ContractError, InputError
from .sae import SaeConfig, SaeParams, init_params, pre_activations

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 512
    steps: int = 10_000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    renormalize_decoder: bool = True
    dead_window: int = 1_000_000
    shuffle_buffer: int = 65_536
    log_every: int = 100
    init_sample: int = 10_000

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ContractError("Adam betas must lie in (0, 1)")
        if self.batch_size < 1 or self.steps < 0 or self.log_every < 1:
            raise ContractError("batch_size and log_every must be >= 1, steps >= 0")


@dataclass(frozen=True)
class TrainStats:
    step: int
    mean_sq_err: float
    dead_latent_count: int
    frames_seen: int

    def to_record(self) -> dict:
        return {
            "step": self.step,
            "mean_sq_err": self.mean_sq_err,
            "dead_latent_count": self.dead_latent_count,
            "frames_seen": self.frames_seen,
        }


@dataclass
class GradientSet:
    g_w_enc: np.ndarray
    g_b_enc: np.ndarray
    g_w_dec: np.ndarray
    g_b_pre: np.ndarray

    def arrays(self) -> tuple[np.ndarray, ...]:
        return self.g_w_enc, self.g_b_enc, self.g_w_dec, self.g_b_pre


@dataclass
class AdamMoments:
    first: list[np.ndarray]
    second: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: SaeParams) -> "AdamMoments":
        return cls(
            [np.zeros_like(a) for a in params.arrays()],
            [np.zeros_like(a) for a in params.arrays()],
        )


def _as_batch(params: SaeParams, batch) -> np.ndarray:
    x = np.asarray(batch)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError("batch must be a nonempty list of frames")
    if x.shape[1] != params.d_in:
        raise ContractError(f"frame dim {x.shape[1]} does not match d_in={params.d_in}")
    return x


def _forward_batch(params: SaeParams, x: np.ndarray, k: int):
    """Top-k positions ``ids`` (n, k), clamped values ``vals`` and the reconstruction."""
    z = pre_activations(params, x).astype(np.float64)
    n = z.shape[0]
    ids = np.flatnonzero(topk_mask(z, k)).reshape(n, k) % z.shape[1]
    vals = np.take_along_axis(z, ids, axis=1)
    vals = np.where(vals > 0, vals, 0.0)
    cols = params.w_dec.T.astype(np.float64)[ids]  # (n, k, d_in)
    x_hat = np.einsum("nk,nkd->nd", vals, cols) + params.b_pre
    return ids, vals, cols, x_hat


def _scatter(ids: np.ndarray, vals: np.ndarray, d_latent: int) -> np.ndarray:
    dense = np.zeros((ids.shape[0], d_latent))
    np.put_along_axis(dense, ids, vals, axis=1)
    return dense


def batch_loss(params: SaeParams, batch, k: int) -> float:
    x = _as_batch(params, batch)
    *_, x_hat = _forward_batch(params, x, k)
    r = x_hat - x.astype(np.float64)
    return float(np.mean(np.mean(r * r, axis=1)))


def loss_and_grad(params: SaeParams, batch, k: int) -> tuple[float, GradientSet, np.ndarray]:
    """Loss, gradients and the (n, d_latent) mask of active latents."""
    x = _as_batch(params, batch).astype(np.float64)
    n, d_in = x.shape
    ids, vals, cols, x_hat = _forward_batch(params, x, k)
    r = x_hat - x
    loss = float(np.mean(np.mean(r * r, axis=1)))

    g_xhat = (2.0 / (d_in * n)) * r
    live = vals > 0
    g_vals = np.where(live, np.einsum("nkd,nd->nk", cols, g_xhat), 0.0)
    g_codes = _scatter(ids, g_vals, params.d_latent)
    codes = _scatter(ids, vals, params.d_latent)
    xc = x - params.b_pre.astype(np.float64)
    g_b_enc = g_codes.sum(axis=0)
    dtype = params.dtype
    grads = GradientSet(
        g_w_enc=matmul(g_codes.T, xc).astype(dtype),
        g_b_enc=g_b_enc.astype(dtype),
        g_w_dec=matmul(g_xhat.T, codes).astype(dtype),
        g_b_pre=(g_xhat.sum(axis=0) - g_b_enc @ params.w_enc.astype(np.float64)).astype(dtype),
    )
    return loss, grads, codes > 0


def backward(params: SaeParams, batch, k: int) -> GradientSet:
    return loss_and_grad(params, batch, k)[1]


def renormalize_decoder(params: SaeParams, moments: AdamMoments | None = None) -> None:
    """Rescale decoder columns to unit norm; drop the parallel part of their first moment."""
    w = params.w_dec.astype(np.float64)
    norms = np.linalg.norm(w, axis=0, keepdims=True)
    norms[norms == 0] = 1.0
    w /= norms
    params.w_dec[...] = w
    if moments is not None:
        m = moments.first[2].astype(np.float64)
        m -= w * np.sum(m * w, axis=0, keepdims=True)
        moments.first[2][...] = m


def adam_step(
    params: SaeParams,
    grads: GradientSet,
    moments: AdamMoments,
    config: TrainConfig,
    step: int,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``moments``."""
    if step < 1:
        raise ContractError("Adam step counter starts at 1")
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    for p, g, m, v in zip(params.arrays(), grads.arrays(), moments.first, moments.second):
        g64 = g.astype(np.float64)
        m64 = b1 * m + (1.0 - b1) * g64
        v64 = b2 * v + (1.0 - b2) * g64 * g64
        m[...] = m64
        v[...] = v64
        p[...] = p - config.learning_rate * (m64 / bc1) / (np.sqrt(v64 / bc2) + config.adam_eps)
    if config.renormalize_decoder:
        renormalize_decoder(params, moments)


_NEVER = -(2**62)


class DeadLatentTracker:
    """Latents that fired in none of the last ``window`` frames."""

    def __init__(self, d_latent: int, window: int):
        if window < 1:
            raise ContractError("window must be >= 1")
        self.window = window
        self.frames_seen = 0
        self.last_fired = np.full(d_latent, _NEVER, dtype=np.int64)

    def update(self, active: np.ndarray) -> None:
        """``active`` is a boolean (n_frames, d_latent) mask of fired latents."""
        active = np.atleast_2d(active)
        n = active.shape[0]
        fired = active.any(axis=0)
        last_row = n - 1 - np.argmax(active[::-1], axis=0)
        self.last_fired[fired] = self.frames_seen + last_row[fired]
        self.frames_seen += n

    def dead(self) -> set[int]:
        cutoff = self.frames_seen - self.window
        return set(np.flatnonzero(self.last_fired < cutoff).tolist())

    def dead_count(self) -> int:
        return int(np.count_nonzero(self.last_fired < self.frames_seen - self.window))


def track_dead_latents(activations: Iterable, d_latent: int, window: int) -> set[int]:
    """Dead latents after consuming a stream of SparseActivation (one per frame)."""
    tracker = DeadLatentTracker(d_latent, window)
    for act in activations:
        row = np.zeros((1, d_latent), dtype=bool)
        row[0, act.ids] = True
        tracker.update(row)
    return tracker.dead()


FrameSource = Callable[[], Iterator[np.ndarray]]


def as_frame_source(corpus) -> FrameSource:
    """Accept an (n, d) array, a list of arrays, or a zero-arg callable yielding chunks."""
    if callable(corpus):
        return corpus
    if isinstance(corpus, np.ndarray):
        data = corpus if corpus.ndim == 2 else corpus[None, :]
        return lambda: iter([data])
    chunks = [np.atleast_2d(np.asarray(c)) for c in corpus]
    return lambda: iter(chunks)


def _reservoir_swap(buf: np.ndarray, piece: np.ndarray, rng: Rng) -> np.ndarray:
    """Frame by frame: evict a uniformly chosen slot, then store the new frame there."""
    slots = rng.integers(len(buf), len(piece))
    out = np.empty_like(piece)
    _, first = np.unique(slots, return_index=True)
    is_first = np.zeros(len(slots), dtype=bool)
    is_first[first] = True
    out[is_first] = buf[slots[is_first]]
    latest: dict[int, int] = {}
    for i, slot in enumerate(slots.tolist()):
        if not is_first[i]:
            # an earlier frame of this block already replaced the slot
            out[i] = piece[latest[slot]]
        latest[slot] = i
    rev = slots[::-1]
    _, last_rev = np.unique(rev, return_index=True)
    last = len(slots) - 1 - last_rev
    buf[slots[last]] = piece[last]
    return out


def shuffled_batches(source: FrameSource, batch_size: int, buffer_size: int, rng: Rng) -> Iterator[np.ndarray]:
    """Endless stream of batches drawn through a seeded shuffle buffer.

    The source is replayed whenever it runs dry. A corpus that never fills the
    buffer is emitted as one shuffled permutation per pass.
    """
    buffer_size = max(buffer_size, batch_size)
    buf: np.ndarray | None = None
    fill = 0
    queue: list[np.ndarray] = []
    queued = 0
    while True:
        for chunk in source():
            chunk = np.atleast_2d(np.asarray(chunk, dtype=np.float32))
            if buf is None:
                buf = np.empty((buffer_size, chunk.shape[1]), dtype=np.float32)
            pos = 0
            while pos < len(chunk):
                if fill < buffer_size:
                    take = min(buffer_size - fill, len(chunk) - pos)
                    buf[fill : fill + take] = chunk[pos : pos + take]
                    fill += take
                else:
                    take = min(batch_size, len(chunk) - pos)
                    queue.append(_reservoir_swap(buf, chunk[pos : pos + take], rng))
                    queued += take
                pos += take
                while queued >= batch_size:
                    block = np.concatenate(queue)
                    yield block[:batch_size]
                    queue = [block[batch_size:]]
                    queued -= batch_size
        if buf is None:
            raise InputError("corpus yielded no frames")
        if fill < buffer_size:
            if fill + queued < batch_size:
                raise InputError(f"corpus has {fill + queued} frames, fewer than batch_size={batch_size}")
            queue.append(buf[rng.permutation(fill)])
            queued += fill
            fill = 0
            while queued >= batch_size:
                block = np.concatenate(queue)
                yield block[:batch_size]
                queue = [block[batch_size:]]
                queued -= batch_size


@dataclass
class TrainResult:
    params: SaeParams
    k: int
    stats: list[TrainStats] = field(default_factory=list)


def _init_sample(source: FrameSource, n: int) -> np.ndarray:
    taken, got = [], 0
    for chunk in source():
        chunk = np.atleast_2d(np.asarray(chunk, dtype=np.float32))
        taken.append(chunk[: n - got])
        got += len(taken[-1])
        if got >= n:
            break
    if not taken:
        raise InputError("corpus yielded no frames")
    return np.concatenate(taken)


def train(
    corpus,
    sae_config: SaeConfig,
    train_config: TrainConfig,
    on_stats: Callable[[TrainStats], None] | None = None,
) -> TrainResult:
    """Train from scratch. Deterministic in (corpus contents, configs)."""
    source = as_frame_source(corpus)
    rng = Rng(train_config.seed)
    sample = _init_sample(source, train_config.init_sample)
    if sample.shape[1] != sae_config.d_in:
        raise ContractError(f"corpus dim {sample.shape[1]} does not match d_in={sae_config.d_in}")

    params = init_params(sae_config, rng.derive(1), sample)
    moments = AdamMoments.zeros_like(params)
    tracker = DeadLatentTracker(sae_config.d_latent, train_config.dead_window)
    result = TrainResult(params, sae_config.k)
    batches = shuffled_batches(source, train_config.batch_size, train_config.shuffle_buffer, rng.derive(2))

    window_loss, window_n = 0.0, 0
    for step in range(1, train_config.steps + 1):
        x = next(batches)
        loss, grads, active = loss_and_grad(params, x, sae_config.k)
        tracker.update(active)
        adam_step(params, grads, moments, train_config, step)
        window_loss += loss
        window_n += 1
        if step % train_config.log_every == 0 or step == train_config.steps:
            stats = TrainStats(step, window_loss / window_n, tracker.dead_count(), tracker.frames_seen)
            result.stats.append(stats)
            window_loss, window_n = 0.0, 0
            log.debug("step %d mse %.6g dead %d", stats.step, stats.mean_sq_err, stats.dead_latent_count)
            if on_stats is not None:
                on_stats(stats)
    return result
