"""Builders shared by the test modules."""
import numpy as np

from speechsae import sae
from speechsae.core import Rng
from speechsae.ingest import Alignment, Span


def random_params(d_in, d_latent, seed=0, dtype=np.float32, bias_scale=0.1):
    rng = Rng(seed)
    w_dec = rng.derive(1).normal((d_in, d_latent))
    w_dec /= np.linalg.norm(w_dec, axis=0, keepdims=True)
    w_enc = rng.derive(2).normal((d_latent, d_in))
    b_enc = rng.derive(3).normal(d_latent, scale=bias_scale)
    b_pre = rng.derive(4).normal(d_in, scale=bias_scale)
    return sae.SaeParams(w_enc.astype(dtype), b_enc.astype(dtype), w_dec.astype(dtype), b_pre.astype(dtype))


def char_alignment(fid, text, frames_per_char=2, rate=50):
    """Each character gets ``frames_per_char`` frames; spaces take time but no span."""
    spans = []
    for i, ch in enumerate(text):
        if ch != " ":
            spans.append(Span("char", ch, i * frames_per_char / rate, (i + 1) * frames_per_char / rate))
    return Alignment(fid, tuple(spans))
