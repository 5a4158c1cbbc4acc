"""Hot numeric kernels for the factored softmax policy.

Two implementations share one contract:

* ``head_logprobs(theta, X, D, K)`` returns per-row log-probabilities of the
  type head ``(N, 5)``, the addressee head conditioned on each ask type
  ``(N, 4, 2)`` and the question head of each ask type ``(N, 4, K)``.
* ``score_grad(theta, X, rows, t, v, k, w, D, K, w_ask=None)`` returns
  ``sum_m w[m] * grad log pi(a_m | X[rows[m]])`` as a flat vector. When
  ``w_ask`` is given it replaces ``w`` on the addressee and question terms.

The numba path is used unless ``AGENTASK_DISABLE_JIT`` is set to a truthy
value at import time (or numba is missing).
"""

from __future__ import annotations

import os

import numpy as np

N_TYPES = 5
N_ASK = 4
N_ADDR = 2
NONE_IDX = 4

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

JIT_DISABLED = os.environ.get("AGENTASK_DISABLE_JIT", "").strip().lower() not in ("", "0", "false", "no")


def layout(D: int, K: int) -> dict[str, tuple[int, int]]:
    """Offsets ``(start, stop)`` of every parameter block in the flat vector."""
    sizes = [
        ("type_w", D * N_TYPES),
        ("type_b", N_TYPES),
        ("addr_w", (D + N_TYPES) * N_ADDR),
        ("addr_b", N_ADDR),
        ("q_w", N_ASK * D * K),
        ("q_b", N_ASK * K),
    ]
    out, start = {}, 0
    for name, size in sizes:
        out[name] = (start, start + size)
        start += size
    return out


def n_params(D: int, K: int) -> int:
    return D * N_TYPES + N_TYPES + (D + N_TYPES) * N_ADDR + N_ADDR + N_ASK * D * K + N_ASK * K


def _blocks(theta, D, K):
    o = layout(D, K)
    tw = theta[o["type_w"][0]:o["type_w"][1]].reshape(D, N_TYPES)
    tb = theta[o["type_b"][0]:o["type_b"][1]]
    aw = theta[o["addr_w"][0]:o["addr_w"][1]].reshape(D + N_TYPES, N_ADDR)
    ab = theta[o["addr_b"][0]:o["addr_b"][1]]
    qw = theta[o["q_w"][0]:o["q_w"][1]].reshape(N_ASK, D, K)
    qb = theta[o["q_b"][0]:o["q_b"][1]].reshape(N_ASK, K)
    return tw, tb, aw, ab, qw, qb


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# numpy reference path


def head_logprobs_numpy(theta, X, D, K):
    tw, tb, aw, ab, qw, qb = _blocks(theta, D, K)
    lt = _log_softmax(X @ tw + tb)
    base = X @ aw[:D] + ab  # (N, 2)
    la = _log_softmax(base[:, None, :] + aw[D:D + N_ASK][None, :, :])
    lq = _log_softmax(np.einsum("nd,adk->nak", X, qw) + qb[None])
    return lt, la, lq


def score_grad_numpy(theta, X, rows, t, v, k, w, D, K, w_ask=None):
    o = layout(D, K)
    w_ask = w if w_ask is None else w_ask
    lt, la, lq = head_logprobs_numpy(theta, X, D, K)
    g = np.zeros(theta.shape[0])
    xr = X[rows]
    M = rows.shape[0]
    ar = np.arange(M)

    # type head
    dt = -np.exp(lt[rows])
    dt[ar, t] += 1.0
    dt *= w[:, None]
    g[o["type_w"][0]:o["type_w"][1]] = (xr.T @ dt).ravel()
    g[o["type_b"][0]:o["type_b"][1]] = dt.sum(axis=0)

    ask = t != NONE_IDX
    if ask.any():
        xa, ta, va, ka, wa, ra = xr[ask], t[ask], v[ask], k[ask], w_ask[ask], rows[ask]
        ma = np.arange(ra.shape[0])
        da = -np.exp(la[ra, ta])
        da[ma, va] += 1.0
        da *= wa[:, None]
        gaw = np.zeros((D + N_TYPES, N_ADDR))
        gaw[:D] = xa.T @ da
        np.add.at(gaw[D:], ta, da)
        g[o["addr_w"][0]:o["addr_w"][1]] = gaw.ravel()
        g[o["addr_b"][0]:o["addr_b"][1]] = da.sum(axis=0)

        dq = -np.exp(lq[ra, ta])
        dq[ma, ka] += 1.0
        dq *= wa[:, None]
        gqw = np.zeros((N_ASK, D, K))
        gqb = np.zeros((N_ASK, K))
        for j in range(N_ASK):
            sel = ta == j
            if sel.any():
                gqw[j] = xa[sel].T @ dq[sel]
                gqb[j] = dq[sel].sum(axis=0)
        g[o["q_w"][0]:o["q_w"][1]] = gqw.ravel()
        g[o["q_b"][0]:o["q_b"][1]] = gqb.ravel()
    return g


# ---------------------------------------------------------------------------
# numba path

if numba is not None:

    @numba.njit(cache=True)
    def _lse_row(z):
        m = z[0]
        for i in range(1, z.shape[0]):
            if z[i] > m:
                m = z[i]
        s = 0.0
        for i in range(z.shape[0]):
            s += np.exp(z[i] - m)
        return m + np.log(s)

    @numba.njit(cache=True)
    def _heads_nb(theta, X, D, K):
        N = X.shape[0]
        o_tb = D * N_TYPES
        o_aw = o_tb + N_TYPES
        o_ab = o_aw + (D + N_TYPES) * N_ADDR
        o_qw = o_ab + N_ADDR
        o_qb = o_qw + N_ASK * D * K
        lt = np.empty((N, N_TYPES))
        la = np.empty((N, N_ASK, N_ADDR))
        lq = np.empty((N, N_ASK, K))
        z = np.empty(N_TYPES)
        za = np.empty(N_ADDR)
        zq = np.empty(K)
        for n in range(N):
            for c in range(N_TYPES):
                acc = theta[o_tb + c]
                for d in range(D):
                    acc += X[n, d] * theta[d * N_TYPES + c]
                z[c] = acc
            lse = _lse_row(z)
            for c in range(N_TYPES):
                lt[n, c] = z[c] - lse
            for c in range(N_ADDR):
                acc = theta[o_ab + c]
                for d in range(D):
                    acc += X[n, d] * theta[o_aw + d * N_ADDR + c]
                za[c] = acc
            for j in range(N_ASK):
                for c in range(N_ADDR):
                    z[c] = za[c] + theta[o_aw + (D + j) * N_ADDR + c]
                lse = _lse_row(z[:N_ADDR])
                for c in range(N_ADDR):
                    la[n, j, c] = z[c] - lse
                for c in range(K):
                    acc = theta[o_qb + j * K + c]
                    for d in range(D):
                        acc += X[n, d] * theta[o_qw + (j * D + d) * K + c]
                    zq[c] = acc
                lse = _lse_row(zq)
                for c in range(K):
                    lq[n, j, c] = zq[c] - lse
        return lt, la, lq

    @numba.njit(cache=True)
    def _score_grad_nb(theta, X, rows, t, v, k, w, w_ask, D, K):
        o_tb = D * N_TYPES
        o_aw = o_tb + N_TYPES
        o_ab = o_aw + (D + N_TYPES) * N_ADDR
        o_qw = o_ab + N_ADDR
        o_qb = o_qw + N_ASK * D * K
        lt, la, lq = _heads_nb(theta, X, D, K)
        g = np.zeros(theta.shape[0])
        for m in range(rows.shape[0]):
            n = rows[m]
            wm = w[m]
            tm = t[m]
            for c in range(N_TYPES):
                dc = -np.exp(lt[n, c])
                if c == tm:
                    dc += 1.0
                dc *= wm
                g[o_tb + c] += dc
                for d in range(D):
                    g[d * N_TYPES + c] += X[n, d] * dc
            if tm == NONE_IDX:
                continue
            wm = w_ask[m]
            if wm == 0.0:
                continue
            for c in range(N_ADDR):
                dc = -np.exp(la[n, tm, c])
                if c == v[m]:
                    dc += 1.0
                dc *= wm
                g[o_ab + c] += dc
                for d in range(D):
                    g[o_aw + d * N_ADDR + c] += X[n, d] * dc
                g[o_aw + (D + tm) * N_ADDR + c] += dc
            for c in range(K):
                dc = -np.exp(lq[n, tm, c])
                if c == k[m]:
                    dc += 1.0
                dc *= wm
                g[o_qb + tm * K + c] += dc
                for d in range(D):
                    g[o_qw + (tm * D + d) * K + c] += X[n, d] * dc
        return g

    def head_logprobs_numba(theta, X, D, K):
        return _heads_nb(np.ascontiguousarray(theta, dtype=np.float64),
                         np.ascontiguousarray(X, dtype=np.float64), int(D), int(K))

    def score_grad_numba(theta, X, rows, t, v, k, w, D, K, w_ask=None):
        w = np.ascontiguousarray(w, dtype=np.float64)
        w_ask = w if w_ask is None else np.ascontiguousarray(w_ask, dtype=np.float64)
        return _score_grad_nb(
            np.ascontiguousarray(theta, dtype=np.float64),
            np.ascontiguousarray(X, dtype=np.float64),
            np.ascontiguousarray(rows, dtype=np.int64),
            np.ascontiguousarray(t, dtype=np.int64),
            np.ascontiguousarray(v, dtype=np.int64),
            np.ascontiguousarray(k, dtype=np.int64),
            w,
            w_ask,
            int(D),
            int(K),
        )

    HAVE_NUMBA = True
else:  # pragma: no cover
    head_logprobs_numba = head_logprobs_numpy
    score_grad_numba = score_grad_numpy
    HAVE_NUMBA = False


def _as_arrays(rows, t, v, k, w):
    return (np.asarray(rows, dtype=np.int64), np.asarray(t, dtype=np.int64), np.asarray(v, dtype=np.int64),
            np.asarray(k, dtype=np.int64), np.asarray(w, dtype=np.float64))


def _numpy_score_grad(theta, X, rows, t, v, k, w, D, K, w_ask=None):
    w_ask = None if w_ask is None else np.asarray(w_ask, dtype=np.float64)
    return score_grad_numpy(np.asarray(theta, dtype=np.float64), np.asarray(X, dtype=np.float64),
                            *_as_arrays(rows, t, v, k, w), D, K, w_ask)


USE_JIT = HAVE_NUMBA and not JIT_DISABLED

if USE_JIT:
    head_logprobs = head_logprobs_numba
    score_grad = score_grad_numba
else:
    head_logprobs = head_logprobs_numpy
    score_grad = _numpy_score_grad
