import numpy as np
import pytest

from speechsae.analysis import ActivationIndex
from speechsae.core import Rng
from speechsae.errors import ContractError, InputError
from speechsae.ingest import EmbeddingSequence
from speechsae.sae import encode
from speechsae.steering import SteerSpec, ablate, default_magnitude, steer, steer_many

from helpers import random_params


@pytest.fixture
def setup():
    p = random_params(6, 20, 1)
    p.b_enc[0] = -100.0  # guarantees one silent latent
    frames = Rng(2).normal((30, 6)).astype(np.float32)
    return p, EmbeddingSequence("s", frames), 4


def inactive_latent(p, seq, k):
    fired = set()
    for x in seq.frames:
        fired |= set(encode(p, x, k).ids.tolist())
    return next(j for j in range(p.d_latent) if j not in fired)


def test_deactivate_silent_latent_is_identity(setup):
    p, seq, k = setup
    j = inactive_latent(p, seq, k)
    res = steer(seq, p, k, SteerSpec(j, "deactivate", 5.0))
    assert res.frames_touched == 0
    assert res.modified.frames.tobytes() == res.plain.tobytes()
    assert not res.delta.any()


def test_activate_one_frame(setup):
    p, seq, k = setup
    j = inactive_latent(p, seq, k)
    res = steer(seq, p, k, SteerSpec(j, "activate", 2.5, (3,)))
    assert res.frames_touched == 1
    want = res.plain[3].astype(np.float64) + 2.5 * p.w_dec[:, j]
    assert np.allclose(res.modified.frames[3], want, atol=1e-5)
    others = np.delete(np.arange(30), 3)
    assert np.array_equal(res.modified.frames[others], res.plain[others])


def test_deactivate_active_frame(setup):
    p, seq, k = setup
    act = encode(p, seq.frames[0], k)
    j, v = int(act.ids[0]), float(act.values[0])
    res = steer(seq, p, k, SteerSpec(j, "deactivate", 4.0, (0,)))
    assert np.allclose(res.delta[0], -(4.0 + v) * p.w_dec[:, j].astype(np.float64), atol=1e-6)


def test_set_zero_on_inactive_frames_is_identity(setup):
    p, seq, k = setup
    j = inactive_latent(p, seq, k)
    res = steer(seq, p, k, SteerSpec(j, "set", 0.0))
    assert res.modified.frames.tobytes() == res.plain.tobytes()


def test_ablate_inactive_is_zero_delta(setup):
    p, seq, k = setup
    res = ablate(seq, p, k, inactive_latent(p, seq, k))
    assert not res.delta.any() and res.frames_touched == 0


def test_ablate_planted_coefficient(planted_params, word_corpus):
    atom = word_corpus.dictionary.atoms[:, 9].astype(np.float64)
    seq = EmbeddingSequence("p", np.tile((0.8 * atom).astype(np.float32), (3, 1)))
    res = ablate(seq, planted_params, 1, 9)
    assert res.frames_touched == 3
    assert np.allclose(res.l2_delta, 0.8, atol=1e-5)


def test_ablate_disjoint_latents_commute(setup):
    p, seq, k = setup
    act = encode(p, seq.frames[0], k)
    a, b = int(act.ids[0]), int(act.ids[1])
    both = steer_many(seq, p, k, [SteerSpec(a, "set", 0.0, "active-only"), SteerSpec(b, "set", 0.0, "active-only")])
    step1 = ablate(seq, p, k, a)
    step2 = ablate(seq, p, k, b)
    assert np.allclose(both.delta, step1.delta + step2.delta, atol=1e-12)


def test_restore_after_deactivate(setup):
    p, seq, k = setup
    act = encode(p, seq.frames[5], k)
    j, v = int(act.ids[0]), float(act.values[0])
    res = steer_many(seq, p, k, [SteerSpec(j, "deactivate", 3.0, (5,)), SteerSpec(j, "set", v, (5,))])
    assert np.allclose(res.delta, 0.0, atol=1e-5)
    assert np.allclose(res.modified.frames, res.plain, atol=1e-5)


def test_padding_frames_untouched(setup):
    p, seq, k = setup
    j = inactive_latent(p, seq, k)
    res = steer(seq, p, k, SteerSpec(j, "activate", 1.0), n_real_frames=10)
    assert res.frames_touched == 10
    assert np.array_equal(res.modified.frames[10:], res.plain[10:])


def test_steer_errors(setup):
    p, seq, k = setup
    with pytest.raises(ContractError):
        SteerSpec(0, "boost", 1.0)
    with pytest.raises(ContractError):
        SteerSpec(0, "set", float("nan"))
    with pytest.raises(ContractError):
        steer(seq, p, k, SteerSpec(99, "set", 1.0))
    with pytest.raises(ContractError):
        steer(seq, p, k, SteerSpec(0, "set", 1.0, (30,)))
    with pytest.raises(ContractError):
        steer(EmbeddingSequence("x", np.zeros((2, 3), np.float32)), p, k, SteerSpec(0, "set", 1.0))


def magnitude_index(values):
    entries = [(0, "f", i, v) for i, v in enumerate(values)]
    return ActivationIndex.from_entries(["f"], [len(values) + 1], 2, 1, entries)


def test_default_magnitude():
    assert default_magnitude(magnitude_index([2.0] * 7), 0) == 20.0
    assert default_magnitude(magnitude_index(list(range(1, 101))), 0) == 950.0
    with pytest.raises(InputError):
        default_magnitude(magnitude_index([1.0]), 1)
