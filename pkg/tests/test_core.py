import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from speechsae.core import Rng, as_matrix, matmul, matvec, topk_indices, topk_mask
from speechsae.errors import ContractError

M64 = (1 << 64) - 1


def splitmix64_reference(seed, n):
    """Textbook SplitMix64 on Python ints."""
    out, state = [], seed
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & M64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
        out.append(z ^ (z >> 31))
    return out


def test_matvec_examples():
    assert matvec(np.eye(3), np.array([1.0, 2, 3])).tolist() == [1, 2, 3]
    assert matvec(np.zeros((2, 4)), np.arange(4.0)).tolist() == [0, 0]
    assert matvec(np.array([[1, 2], [3, 4]], np.float32), np.ones(2)).tolist() == [3, 7]


def test_matvec_shape_errors():
    with pytest.raises(ContractError):
        matvec(np.eye(3), np.ones(2))
    with pytest.raises(ContractError):
        matmul(np.eye(3), np.ones((2, 2)))


def test_as_matrix_rejects_nonfinite():
    with pytest.raises(ContractError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(ContractError):
        as_matrix([1.0, 2.0])


def test_matvec_distributes():
    rng = Rng(3)
    m = rng.normal((256, 256)).astype(np.float32)
    a, b = rng.normal(256), rng.normal(256)
    lhs = matvec(m, a + b).astype(np.float64)
    rhs = matvec(m, a).astype(np.float64) + matvec(m, b)
    assert np.max(np.abs(lhs - rhs)) <= 1e-5 * np.max(np.abs(lhs))


def test_topk_examples():
    assert topk_indices([3, -1, 2, 5], 2).tolist() == [0, 3]
    assert topk_indices([1, 1, 1], 2).tolist() == [0, 1]
    assert topk_indices([4, 2, 9], 3).tolist() == [0, 1, 2]
    with pytest.raises(ContractError):
        topk_indices([1, 2], 0)


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 30), elements=st.integers(-3, 3).map(float)),
    st.data(),
)
def test_topk_matches_sorted_reference(v, data):
    k = data.draw(st.integers(1, len(v)))
    # reference: sort by (-value, index)
    ref = sorted(sorted(range(len(v)), key=lambda i: (-v[i], i))[:k])
    assert topk_indices(v, k).tolist() == ref


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 20), elements=st.floats(-10, 10)), st.data())
def test_topk_ignores_appended_smaller_values(v, data):
    k = data.draw(st.integers(1, len(v)))
    kth = np.sort(v)[::-1][k - 1]
    extra = kth - 1.0 - np.arange(data.draw(st.integers(1, 5)), dtype=float)
    assert topk_indices(np.concatenate([v, extra]), k).tolist() == topk_indices(v, k).tolist()


def test_topk_mask_rows_exactly_k():
    z = Rng(5).integers(4, (500, 12)).astype(float)
    mask = topk_mask(z, 5)
    assert (mask.sum(axis=1) == 5).all()


def test_rng_matches_reference_splitmix():
    assert int(Rng(0).next_u64(1)[0]) == 0xE220A8397B1DCDAF
    for seed in (1, 12345, M64):
        assert [int(x) for x in Rng(seed).next_u64(6)] == splitmix64_reference(seed, 6)


def test_rng_stream_is_counter_addressed():
    a = Rng(9)
    first = a.next_u64(3)
    rest = a.next_u64(4)
    assert np.array_equal(np.concatenate([first, rest]), Rng(9).next_u64(7))


def test_rng_reproducible_across_instances():
    assert Rng(42).normal((10, 3)).tobytes() == Rng(42).normal((10, 3)).tobytes()
    assert not np.array_equal(Rng(42).derive(1).uniform(5), Rng(42).derive(2).uniform(5))


def test_rng_ranges():
    r = Rng(11)
    u = r.uniform(20000)
    assert 0 <= u.min() and u.max() < 1
    assert abs(u.mean() - 0.5) < 0.01
    x = r.normal(20000)
    assert abs(x.mean()) < 0.03 and abs(x.std() - 1) < 0.03
    ints = r.integers(7, 5000)
    assert set(np.unique(ints).tolist()) == set(range(7))
    assert sorted(r.permutation(50).tolist()) == list(range(50))


def test_choose_distinct():
    rows = Rng(2).choose_distinct(20, 6, 300)
    assert rows.shape == (300, 6)
    assert all(len(set(r)) == 6 for r in rows.tolist())
    assert (np.diff(rows, axis=1) > 0).all()
    with pytest.raises(ContractError):
        Rng(0).choose_distinct(3, 4, 1)
