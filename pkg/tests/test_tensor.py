import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tchain.tensor import (
    as_mask,
    cyclic_shift,
    fold,
    frobenius_norm,
    mode_unfold,
    read_tct,
    relative_error,
    tensor_from_bytes,
    tensor_to_bytes,
    train_contract,
    unfold,
    unfold_matrix,
    write_tct,
)


def test_unfold_identity_layout_and_transpose():
    t = np.array([[1.0, 2, 3], [4, 5, 6]])
    np.testing.assert_array_equal(unfold_matrix(t, [0], [1]), t)
    np.testing.assert_array_equal(unfold_matrix(t, [1], [0]), t.T)


def test_unfold_entry_mapping():
    rng = np.random.default_rng(0)
    t = rng.standard_normal((3, 4, 5))
    u = unfold(t, [2, 0], [1])
    assert (u.rows, u.cols) == (15, 4)
    for i, j, k in itertools.product(range(3), range(4), range(5)):
        # row index: mode 2 fastest, then mode 0
        assert u.matrix[k + 5 * i, j] == t[i, j, k]
    np.testing.assert_array_equal(u.fold(), t)


def test_unfold_rejects_bad_modes():
    t = np.zeros((2, 3, 4))
    with pytest.raises(ValueError):
        unfold_matrix(t, [0, 1], [1, 2])
    with pytest.raises(ValueError):
        unfold_matrix(t, [0], [1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 3), min_size=1, max_size=7), st.randoms(use_true_random=False))
def test_unfold_fold_round_trip(dims, rnd):
    t = np.arange(np.prod(dims), dtype=float).reshape(dims)
    modes = list(range(len(dims)))
    rnd.shuffle(modes)
    cut = rnd.randint(0, len(dims))
    rows, cols = modes[:cut], modes[cut:]
    np.testing.assert_array_equal(fold(unfold_matrix(t, rows, cols), rows, cols, dims), t)


def test_mode_unfold_matches_definition():
    t = np.random.default_rng(1).standard_normal((2, 3, 4))
    m = mode_unfold(t, 1)
    for i, j, k in itertools.product(range(2), range(3), range(4)):
        assert m[j, i + 2 * k] == t[i, j, k]


def test_train_contract_examples():
    b = np.random.default_rng(2).standard_normal((2, 3, 4))
    np.testing.assert_array_equal(train_contract(np.eye(2), b), b)
    out = train_contract(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
    assert out.shape == (1, 1) and out[0, 0] == 11.0
    with pytest.raises(ValueError):
        train_contract(np.ones((2, 3)), np.ones((2, 3)))


def test_train_contract_associative():
    rng = np.random.default_rng(3)
    a, b, c = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 2, 5)), rng.standard_normal((5, 3))
    left = train_contract(train_contract(a, b), c)
    right = train_contract(a, train_contract(b, c))
    assert np.linalg.norm(left - right) <= 1e-12 * np.linalg.norm(left)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_train_contract_matches_loops(i, j, k, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((i, j, k)), rng.standard_normal((k, m))
    ref = np.zeros((i, j, m))
    for p, q, s in itertools.product(range(i), range(j), range(m)):
        ref[p, q, s] = sum(a[p, q, r] * b[r, s] for r in range(k))
    np.testing.assert_allclose(train_contract(a, b), ref, rtol=1e-12, atol=1e-12)


def test_cyclic_shift():
    t = np.random.default_rng(4).standard_normal((2, 3, 4))
    s = cyclic_shift(t)
    assert s.shape == (3, 4, 2)
    for i, j, k in itertools.product(range(2), range(3), range(4)):
        assert s[j, k, i] == t[i, j, k]
    np.testing.assert_array_equal(cyclic_shift(t, 3), t)
    np.testing.assert_array_equal(cyclic_shift(cyclic_shift(cyclic_shift(t))), t)
    v = np.arange(3.0)
    np.testing.assert_array_equal(cyclic_shift(v), v)
    assert frobenius_norm(s) == frobenius_norm(t)


def test_relative_error():
    y = np.random.default_rng(5).standard_normal((3, 4))
    assert relative_error(y, y) == 0.0
    assert relative_error(np.array([3.0, 4.0]), np.zeros(2)) == 1.0
    yhat = y + 0.1
    num = sum((y[i, j] - yhat[i, j]) ** 2 for i in range(3) for j in range(4))
    den = sum(y[i, j] ** 2 for i in range(3) for j in range(4))
    assert relative_error(y, yhat) == pytest.approx(np.sqrt(num / den), rel=1e-14)
    assert relative_error(y, yhat, squared=True) == pytest.approx(num / den, rel=1e-14)
    with pytest.raises(ValueError):
        relative_error(np.zeros(3), np.ones(3))
    with pytest.raises(ValueError):
        relative_error(np.zeros(3), np.ones(4))


def test_as_mask():
    assert as_mask(np.array([True, False])).tolist() == [1.0, 0.0]
    with pytest.raises(ValueError):
        as_mask(np.array([0.5, 1.0]))
    with pytest.raises(ValueError):
        as_mask(np.ones(3), dims=(4,))


def test_tct_round_trip_and_layout(tmp_path):
    t = np.random.default_rng(6).standard_normal((2, 3, 4))
    buf = tensor_to_bytes(t)
    assert buf[:4] == b"TCT1"
    assert int.from_bytes(buf[4:8], "little") == 3
    # first index fastest in the payload
    payload = np.frombuffer(buf, dtype="<f8", offset=8 + 3 * 8)
    assert payload[1] == t[1, 0, 0]
    back, end = tensor_from_bytes(buf)
    assert end == len(buf)
    np.testing.assert_array_equal(back, t)
    p = tmp_path / "t.tct"
    write_tct(p, t)
    np.testing.assert_array_equal(read_tct(p), t)


def test_tct_rejects_malformed(tmp_path):
    buf = tensor_to_bytes(np.ones((2, 2)))
    p = tmp_path / "bad.tct"
    p.write_bytes(buf + b"\x00")
    with pytest.raises(ValueError, match="trailing"):
        read_tct(p)
    with pytest.raises(ValueError):
        tensor_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(ValueError):
        tensor_from_bytes(buf[:-8])
