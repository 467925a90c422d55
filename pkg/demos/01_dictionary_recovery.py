"""
Recovering a planted dictionary
===============================

Frames are sparse sums of unit atoms plus a little noise. A TopK sparse
autoencoder trained on them should find decoder columns that line up with
the atoms.
"""
import numpy as np

from speechsae import synthbench
from speechsae.sae import SaeConfig
from speechsae.trainer import TrainConfig, train

# a small dictionary: 24 atoms in 12 dimensions, 3 active per frame
d = synthbench.make_dictionary(d_in=12, n_atoms=24, sparsity=3, seed=1)
corpus = synthbench.generate(d, n_files=40, frames_per_file=250)
frames = corpus.frames()
print("frames:", frames.shape, "mean frame norm:", np.linalg.norm(frames, axis=1).mean().round(3))

# ground truth rebuilds each frame up to the added noise
f0 = corpus.files[0]
print("largest residual vs truth:", float(np.abs(synthbench.reconstruct_from_truth(corpus, f0) - f0.frames).max()))

# train with twice as many latents as atoms, k equal to the planted sparsity
cfg = TrainConfig(learning_rate=3e-3, batch_size=256, steps=3000, seed=0, log_every=1000)
result = train(frames, SaeConfig(12, 48, 3), cfg)
for s in result.stats:
    print(f"step {s.step:5d}  mse {s.mean_sq_err:.5f}  dead {s.dead_latent_count}")

greedy = synthbench.recovery_score(result.params, d)
optimal = synthbench.recovery_score(result.params, d, optimal=True)
print(f"matched at cos>=0.9: {greedy.matched_fraction:.2f}  mean best cosine: {greedy.mean_best_cosine:.3f}")
print(f"one-to-one assignment mean cosine: {optimal.mean_best_cosine:.3f}")
