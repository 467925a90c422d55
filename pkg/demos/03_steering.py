"""
Editing one latent
==================

Steering changes a single latent's value and decodes again. The change to
the frame is always a multiple of that latent's decoder column.
"""
import numpy as np

from speechsae import sae, steering
from speechsae.core import Rng
from speechsae.ingest import EmbeddingSequence
from speechsae.sae import SaeConfig
from speechsae.steering import SteerSpec

rng = Rng(3)
frames = rng.normal((100, 8)).astype(np.float32)
params = sae.init_params(SaeConfig(8, 32, 4), rng.derive(1), frames)
seq = EmbeddingSequence("demo", frames)

ids, vals = sae.encode_frames(params, frames, 4)
latent = int(np.bincount(ids[vals > 0], minlength=32).argmax())
print("most frequent latent:", latent)

# ablation: zero the latent wherever it fires
abl = steering.ablate(seq, params, 4, latent)
print("frames touched by ablation:", abl.frames_touched)

# activation on frames where it was silent, at a chosen strength
act = steering.steer(seq, params, 4, SteerSpec(latent, "activate", 2.0))
col = params.w_dec[:, latent].astype(np.float64)
f = int(np.flatnonzero(act.l2_delta > 0)[0])
coef = act.delta[f] @ col
print(f"frame {f}: delta = {coef:.3f} x column, residual {np.linalg.norm(act.delta[f] - coef * col):.1e}")

# padding frames beyond the real audio are never edited
padded = steering.steer(seq, params, 4, SteerSpec(latent, "set", 5.0), n_real_frames=60)
print("edited frames past 60:", int((padded.l2_delta[60:] > 0).sum()))
