import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from agentask import policy as pol
from agentask.core import Action, RewardConfig, TrainingAbort
from agentask.egrpo import (
    DELTA,
    EmaBaseline,
    GroupSample,
    SurrogateBatch,
    TrainConfig,
    global_advantages,
    local_advantages,
    surrogate_and_grad,
    surrogate_objective,
    train_egrpo,
)
from agentask.env import Environment, EnvConfig
from agentask.rollout import LearnedPolicy, rollout_many

from fd import fd_grad, rel_err

small = st.floats(-10, 10, allow_nan=False)


def edge_states(env, seeds):
    out = []
    for seed in seeds:
        ep = env.reset(seed)
        while not ep.done:
            out.append(env.emit_edge(ep))
            ep = env.apply_action(ep, Action(gate=0)).next
    return out


STATES = edge_states(Environment(), range(10))


def random_entries(rng, n, glob_frac=0.5):
    out = []
    for _ in range(n):
        s = STATES[int(rng.integers(len(STATES)))]
        a = pol.enumerate_actions(s)[int(rng.integers(33))]
        g = float(rng.normal()) if rng.random() < glob_frac else None
        out.append((s, a, float(rng.normal()), g))
    return out


# -- advantages --------------------------------------------------------------


def test_local_advantage_example():
    np.testing.assert_allclose(local_advantages([1.0, 0.0, 1.0, 0.0]), [1, -1, 1, -1], atol=1e-7)


def test_equal_rewards_give_zero():
    assert not local_advantages([0.3] * 8).any()


@given(st.lists(small, min_size=2, max_size=16))
def test_local_advantages_are_centred(r):
    a = local_advantages(r)
    assert abs(a.sum()) < 1e-6 * len(r)
    assert np.all(np.abs(a) <= np.sqrt(len(r)))


@given(st.lists(small, min_size=2, max_size=16), st.floats(0.1, 10), st.floats(-5, 5))
def test_local_advantages_affine_invariant(r, scale, shift):
    r = np.array(r)
    assume(r.std() > 1e-3)
    # invariance is exact up to delta in the denominator: |A| <= sqrt(n), relative drift ~ delta / std
    sd = min(r.std(), scale * r.std())
    tol = 2 * np.sqrt(len(r)) * DELTA / sd + 1e-9
    np.testing.assert_allclose(local_advantages(scale * r + shift), local_advantages(r), rtol=0, atol=tol)


def test_group_needs_two():
    with pytest.raises(ValueError):
        local_advantages([1.0])
    with pytest.raises(ValueError):
        GroupSample(STATES[0], ((Action(gate=0), 0.0, 0.0),))
    with pytest.raises(ValueError):
        TrainConfig(G=1)


def test_global_advantages():
    np.testing.assert_array_equal(global_advantages(1.0, 0.25, 3), [0.75] * 3)
    np.testing.assert_array_equal(global_advantages(0.0, 0.5, 2, [1.0, 0.5]), [-0.5, -0.25])
    with pytest.raises(ValueError):
        global_advantages(1.0, 0.0, 2, [1.0])
    with pytest.raises(ValueError):
        global_advantages(1.0, 0.0, 1, [-1.0])


def test_ema_baseline():
    b = EmaBaseline(0.5)
    assert [b.update(r) for r in (1.0, 0.0, 1.0)] == [0.5, 0.25, 0.625]


# -- surrogate ---------------------------------------------------------------


@pytest.mark.parametrize("rho,A,expected", [(1.5, 1.0, 1.2), (0.5, -1.0, -0.8), (1.1, 1.0, 1.1), (0.5, 1.0, 0.5),
                                            (1.5, -1.0, -1.5)])
def test_clip_examples(rho, A, expected):
    params, old = _params_with_ratio(rho)
    state, action = STATES[0], Action(gate=0)
    obj, _, recs = surrogate_and_grad(params, old, params, [(state, action, A, None)], beta=0.0)
    assert recs[0].rho == pytest.approx(rho, rel=1e-12)
    assert obj == pytest.approx(expected, rel=1e-9)


def _params_with_ratio(rho):
    """Old and new parameters whose NONE probabilities differ by the factor rho.

    Old is uniform (p = 1/5); the new NONE bias b solves e^b / (e^b + 4) = rho / 5.
    """
    from agentask import kernels

    q = rho / 5
    theta = np.zeros(kernels.n_params(pol.FEATURE_DIM, pol.K_TEMPLATES))
    theta[kernels.layout(pol.FEATURE_DIM, pol.K_TEMPLATES)["type_b"][0] + 4] = np.log(4 * q / (1 - q))
    return pol.PolicyParams(theta), pol.PolicyParams.zeros()


def test_identity_at_old_equals_reference(rng):
    entries = random_entries(rng, 20)
    params = pol.PolicyParams.random(rng, 0.5)
    for lam in (0.0, 0.5, 1.0):
        obj, _, recs = surrogate_and_grad(params, params, params, entries, lambda_r=lam, beta=0.3)
        want = np.mean([a + (lam * g if g is not None else 0.0) for _, _, a, g in entries])
        assert obj == pytest.approx(want, abs=1e-12)
        assert all(r.rho == 1.0 and r.kl_ref == pytest.approx(0.0, abs=1e-12) for r in recs)


@settings(max_examples=200)
@given(st.floats(0.01, 5), small, st.floats(0.05, 0.5))
def test_clipped_term_bounds(rho, A, eps):
    from agentask.egrpo import _clipped

    term, _ = _clipped(np.array([rho]), np.array([A]), eps)
    assert term[0] <= rho * A + 1e-12
    assert term[0] <= np.clip(rho, 1 - eps, 1 + eps) * A + 1e-12
    assert abs(term[0]) <= max(rho, 1 + eps) * abs(A) + 1e-12


def test_gradient_matches_finite_differences(rng):
    checked = 0
    while checked < 10:
        entries = random_entries(rng, 6)
        params, old, ref = (pol.PolicyParams.random(rng, 0.5) for _ in range(3))
        params = old.with_theta(old.theta + 0.1 * (params.theta - old.theta))
        obj, g, recs = surrogate_and_grad(params, old, ref, entries, eps=0.2, lambda_r=0.5, beta=0.1)
        assert obj == surrogate_objective(params, old, ref, entries, 0.2, 0.5, 0.1)
        # the clipped objective has kinks at rho = 1 +- eps
        if any(min(abs(r.rho - 0.8), abs(r.rho - 1.2)) < 1e-3 for r in recs):
            continue
        num = fd_grad(lambda th: surrogate_objective(params.with_theta(th), old, ref, entries, 0.2, 0.5, 0.1),
                      params.theta)
        assert rel_err(g, num) < 1e-5
        checked += 1


def test_no_global_term_ignores_lambda(rng):
    entries = [(s, a, al, None) for s, a, al, _ in random_entries(rng, 30)]
    params, old, ref = (pol.PolicyParams.random(rng, 0.5) for _ in range(3))
    base = surrogate_and_grad(params, old, ref, entries, lambda_r=0.0)
    for lam in (0.25, 0.5, 2.0):
        obj, g, _ = surrogate_and_grad(params, old, ref, entries, lambda_r=lam)
        assert obj == base[0]
        assert np.array_equal(g, base[1])


def test_batch_rejects_bad_inputs(rng):
    params = pol.PolicyParams.zeros()
    with pytest.raises(ValueError):
        surrogate_and_grad(params, params, params, [])
    with pytest.raises(ValueError):
        surrogate_and_grad(params, params, params, random_entries(rng, 2), eps=1.5)


def test_batch_shares_rows_per_state(rng):
    entries = random_entries(rng, 40)
    batch = SurrogateBatch.from_entries(entries)
    assert batch.X.shape[0] == len({e[0] for e in entries})
    assert len(batch) == 40


# -- training ----------------------------------------------------------------

TINY = TrainConfig(G=4, iterations=3, episodes_per_iter=4, seed=7)


def test_training_is_deterministic(env, sft_params):
    a = train_egrpo(env, sft_params, RewardConfig(), TINY)
    b = train_egrpo(env, sft_params, RewardConfig(), TINY)
    assert a.params == b.params and a.metrics == b.metrics and a.baseline == b.baseline


def test_parallel_collection_matches_serial(env, sft_params):
    from dataclasses import replace

    a = train_egrpo(env, sft_params, RewardConfig(), TINY)
    b = train_egrpo(env, sft_params, RewardConfig(), replace(TINY, workers=2))
    assert a.params == b.params and a.metrics == b.metrics


def test_metrics_file(env, sft_params, tmp_path):
    res = train_egrpo(env, sft_params, RewardConfig(), TINY, metrics_path=tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0].startswith("iteration,mean_s,")
    assert len(lines) == 1 + len(res.metrics) == 4


def test_kl_ceiling_aborts(env):
    cfg = TrainConfig(G=4, iterations=5, episodes_per_iter=4, lr=50.0, kl_ceiling=1e-6)
    with pytest.raises(TrainingAbort, match="KL"):
        train_egrpo(env, pol.PolicyParams.zeros(), RewardConfig(), cfg)


def test_learned_policy_stays_quiet_without_faults(sft_params):
    clean = Environment(EnvConfig(injection_probabilities={}))
    res = train_egrpo(clean, sft_params, RewardConfig(), TrainConfig(iterations=20, seed=1))
    trajs = rollout_many(clean, LearnedPolicy(res.params), RewardConfig(), range(200))
    gates = [r.action.gate for t in trajs for r in t.records]
    assert np.mean(gates) < 0.02
