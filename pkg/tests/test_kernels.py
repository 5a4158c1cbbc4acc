import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentask import kernels

D, K = 6, 3


def naive_heads(theta, x, D, K):
    """Per-row loops over plain Python floats."""
    o = kernels.layout(D, K)

    def at(name, i):
        return float(theta[o[name][0] + i])

    def lsm(z):
        m = max(z)
        s = math.log(sum(math.exp(zi - m) for zi in z))
        return [zi - m - s for zi in z]

    lt = lsm([sum(x[d] * at("type_w", d * 5 + c) for d in range(D)) + at("type_b", c) for c in range(5)])
    la, lq = [], []
    for j in range(4):
        # the type one-hot enters the addressee logits
        la.append(lsm([sum(x[d] * at("addr_w", d * 2 + c) for d in range(D)) + at("addr_w", (D + j) * 2 + c)
                       + at("addr_b", c) for c in range(2)]))
        lq.append(lsm([sum(x[d] * at("q_w", (j * D + d) * K + c) for d in range(D)) + at("q_b", j * K + c)
                       for c in range(K)]))
    return np.array(lt), np.array(la), np.array(lq)


@st.composite
def problems(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    n = draw(st.integers(1, 6))
    m = draw(st.integers(0, 12))
    scale = draw(st.sampled_from([0.1, 1.0, 5.0]))
    rng = np.random.default_rng(seed)
    theta = rng.normal(scale=scale, size=kernels.n_params(D, K))
    X = rng.normal(size=(n, D))
    rows = rng.integers(0, n, size=m)
    t = rng.integers(0, 5, size=m)
    v = rng.integers(0, 2, size=m)
    k = rng.integers(0, K, size=m)
    w = rng.normal(size=m)
    w_ask = rng.normal(size=m) if draw(st.booleans()) else None
    return theta, X, rows, t, v, k, w, w_ask


def test_layout_is_contiguous():
    o = kernels.layout(D, K)
    spans = sorted(o.values())
    assert spans[0][0] == 0 and spans[-1][1] == kernels.n_params(D, K)
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))


def test_default_size():
    assert kernels.n_params(16, 4) == 401


@settings(max_examples=60, deadline=None)
@given(problems())
def test_numpy_heads_match_naive(p):
    theta, X = p[0], p[1]
    lt, la, lq = kernels.head_logprobs_numpy(theta, X, D, K)
    for n in range(X.shape[0]):
        nt, na, nq = naive_heads(theta, X[n], D, K)
        np.testing.assert_allclose(lt[n], nt, atol=1e-12)
        np.testing.assert_allclose(la[n], na, atol=1e-12)
        np.testing.assert_allclose(lq[n], nq, atol=1e-12)


@pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")
@settings(max_examples=80, deadline=None)
@given(problems())
def test_numba_matches_numpy(p):
    theta, X, rows, t, v, k, w, w_ask = p
    for a, b in zip(kernels.head_logprobs_numpy(theta, X, D, K), kernels.head_logprobs_numba(theta, X, D, K)):
        np.testing.assert_allclose(a, b, atol=1e-12)
    g_np = kernels.score_grad_numpy(theta, X, rows, t, v, k, w, D, K, w_ask)
    g_nb = kernels.score_grad_numba(theta, X, rows, t, v, k, w, D, K, w_ask)
    np.testing.assert_allclose(g_np, g_nb, atol=1e-11)


@settings(max_examples=40, deadline=None)
@given(problems())
def test_score_grad_is_linear_in_weights(p):
    theta, X, rows, t, v, k, w, _ = p
    g1 = kernels.score_grad(theta, X, rows, t, v, k, w, D, K)
    g2 = kernels.score_grad(theta, X, rows, t, v, k, 2.5 * w, D, K)
    np.testing.assert_allclose(g2, 2.5 * g1, atol=1e-10)


def test_w_ask_only_touches_ask_blocks(rng):
    theta = rng.normal(size=kernels.n_params(D, K))
    X = rng.normal(size=(3, D))
    rows, t, v, k = np.array([0, 1, 2]), np.array([0, 3, 4]), np.array([1, 0, 0]), np.array([2, 1, 0])
    w = np.ones(3)
    g = kernels.score_grad(theta, X, rows, t, v, k, w, D, K)
    g0 = kernels.score_grad(theta, X, rows, t, v, k, w, D, K, w_ask=np.zeros(3))
    o = kernels.layout(D, K)
    type_end = o["type_b"][1]
    np.testing.assert_array_equal(g[:type_end], g0[:type_end])
    assert np.all(g0[type_end:] == 0)


def test_empty_batch_gives_zero(rng):
    theta = rng.normal(size=kernels.n_params(D, K))
    e = np.zeros(0, dtype=np.int64)
    g = kernels.score_grad(theta, rng.normal(size=(2, D)), e, e, e, e, np.zeros(0), D, K)
    assert g.shape == theta.shape and not g.any()


@pytest.mark.parametrize("flag,expected", [("1", "False"), ("0", str(kernels.HAVE_NUMBA))])
def test_env_flag_selects_path(flag, expected):
    env = dict(os.environ, AGENTASK_DISABLE_JIT=flag)
    out = subprocess.run([sys.executable, "-c", "from agentask import kernels; print(kernels.USE_JIT)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected
