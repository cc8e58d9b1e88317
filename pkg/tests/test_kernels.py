import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from atomicvla import kernels
from atomicvla.kernels import _pure

native = pytest.importorskip("atomicvla.kernels._native")

walks = st.integers(0, 2**31 - 1).flatmap(
    lambda seed: st.integers(5, 200).map(lambda n: _walk(seed, n)))


def _walk(seed, n):
    rng = np.random.default_rng(seed)
    arr = np.cumsum(rng.normal(0, 0.012, (n, 5)), axis=0)
    arr[:, 3] = (arr[:, 3] * 5 + np.pi) % (2 * np.pi) - np.pi
    arr[:, 4] = (rng.random(n) > 0.7).astype(float)
    return np.ascontiguousarray(arr)


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")


@settings(max_examples=60, deadline=None)
@given(walks, st.integers(2, 5))
def test_classify_parity(arr, w):
    a = _pure.classify_windows(arr, w, 0.03, 0.05, 0.1)
    b = native.classify_windows(arr, w, 0.03, 0.05, 0.1)
    np.testing.assert_array_equal(np.asarray(a), np.asarray(b))


@settings(max_examples=60, deadline=None)
@given(arrays(np.int8, st.integers(1, 80), elements=st.integers(0, 3)), st.integers(1, 6))
def test_runs_and_merge_parity(codes, min_len):
    pa, na = _pure.runs(codes), native.runs(codes)
    for x, y in zip(pa, na):
        np.testing.assert_array_equal(np.asarray(x), np.asarray(y))
    pm = _pure.merge_short_runs(*pa, min_len)
    nm = native.merge_short_runs(*na, min_len)
    for x, y in zip(pm, nm):
        np.testing.assert_array_equal(np.asarray(x), np.asarray(y))
    s, e, _ = pm
    assert s[0] == 0 and e[-1] == len(codes)
    assert np.all(s[1:] == e[:-1])
    if len(s) > 1:
        assert np.all(e - s >= min_len)
