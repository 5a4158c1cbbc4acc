"""Compare the numba and numpy kernel paths on policy-sized workloads.

    python3 benchmarks/bench_kernels.py [--rows 2000] [--repeat 20]

Both paths are imported from the same module, so the environment flag does
not matter here. The first numba call compiles and is reported separately.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from agentask import kernels
from agentask.policy import FEATURE_DIM, K_TEMPLATES, joint_action_arrays


def _time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=2000, help="edge states per batch")
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    D, K = FEATURE_DIM, K_TEMPLATES
    rng = np.random.default_rng(0)
    theta = rng.normal(scale=0.3, size=kernels.n_params(D, K))
    X = rng.normal(size=(args.rows, D))
    # Gradient workload of the exact KL term: every joint action at every row.
    ta, va, ka = joint_action_arrays(K)
    A = ta.shape[0]
    rows = np.repeat(np.arange(args.rows), A)
    t, v, k = np.tile(ta, args.rows), np.tile(va, args.rows), np.tile(ka, args.rows)
    w = rng.normal(size=rows.shape[0])

    if not kernels.HAVE_NUMBA:
        print("numba is not installed; only the numpy path is available")
        return
    t0 = time.perf_counter()
    kernels.head_logprobs_numba(theta, X, D, K)
    kernels.score_grad_numba(theta, X, rows, t, v, k, w, D, K)
    compile_s = time.perf_counter() - t0

    cases = {
        "head_logprobs": (lambda: kernels.head_logprobs_numpy(theta, X, D, K),
                          lambda: kernels.head_logprobs_numba(theta, X, D, K)),
        "score_grad": (lambda: kernels.score_grad_numpy(theta, X, rows, t, v, k, w, D, K),
                       lambda: kernels.score_grad_numba(theta, X, rows, t, v, k, w, D, K)),
    }
    print(f"rows={args.rows} joint-actions/row={A} params={theta.size} (numba first call incl. compile: {compile_s:.2f}s)")
    print(f"{'kernel':<15}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  max|diff|")
    for name, (f_np, f_nb) in cases.items():
        a, b = f_np(), f_nb()
        pairs = zip(a, b) if isinstance(a, tuple) else [(a, b)]
        diff = max(float(np.max(np.abs(x - y))) for x, y in pairs)
        t_np, t_nb = _time(f_np, args.repeat), _time(f_nb, args.repeat)
        print(f"{name:<15}{1e3 * t_np:>10.2f}{1e3 * t_nb:>10.2f}{t_np / t_nb:>8.1f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
