"""Acceptance criteria 1 to 11. Each test records one pass/fail line that the
terminal summary prints (see conftest.py), then asserts."""

import dataclasses
import itertools
import time
from fractions import Fraction

import numpy as np
import pytest

from agentask import policy as pol
from agentask.audit import annotate_distribution, overhead_metrics
from agentask.core import ASK_TYPES, Action, ErrorType, RewardConfig, decode_traces, encode_trace
from agentask.egrpo import SurrogateBatch, TrainConfig, surrogate_and_grad, surrogate_objective, train_egrpo
from agentask.env import TAXONOMY_S3, Environment, EnvConfig
from agentask.pipeline import corpus_seeds, eval_seeds, evaluate_policy, run_pipeline, run_sweep
from agentask.rewards import (
    edge_reward,
    effectiveness_reward,
    format_reward,
    parsimony_reward,
    terminal_reward,
)
from agentask.rollout import AlwaysAsk, LearnedPolicy, NeverAsk, OracleAsk, replay, rollout_many, score_action
from agentask.sft import SFTConfig, build_corpus, encode_examples, head_accuracy, sft_loss, train_sft

from conftest import ACCEPTANCE_LINES
from fd import fd_grad, rel_err
from strategies import RandomPolicy


def report(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------


def test_criterion_1_reward_exactness():
    t0 = time.perf_counter()
    grid = itertools.product(
        [Fraction(1), Fraction(1, 2), Fraction(3)],  # alpha_eff
        [Fraction(0), Fraction(1, 5), Fraction(2, 5), Fraction(4, 5)],  # lambda_sw
        [Fraction(0), Fraction(1, 10), Fraction(1, 3)],  # alpha_fmt
        [Fraction(1), Fraction(5, 2)],  # alpha_ans
    )
    grid = list(grid)
    n = bad = 0
    for z, resid, flag, s in itertools.product((0, 1), (0, 1), (0, 1), (0, 1)):
        eff_truth = 0 if z == 0 else (1 if resid == 0 else -1)
        for c in range(6):
            for a_eff, lam, a_fmt, a_ans in grid:
                par_truth = -lam * (c - 1) if c >= 2 else 0
                fmt_truth = a_fmt if flag else 0
                r_eff = effectiveness_reward(z, resid)
                r_par = parsimony_reward(c, lam)
                r_fmt = format_reward(flag, a_fmt)
                got = (r_eff, r_par, r_fmt, edge_reward(r_eff, r_par, r_fmt, a_eff), terminal_reward(s, a_ans))
                want = (eff_truth, par_truth, fmt_truth, a_eff * eff_truth + par_truth + fmt_truth, a_ans * s)
                bad += got != want
                n += 1
    dt = time.perf_counter() - t0
    report(1, bad == 0 and dt < 1.0, f"{n} grid points, {bad} mismatches, {dt:.2f}s (limit 1s)")


def test_criterion_2_gradient_correctness(env, corpus):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    states = list(_edge_states(env, range(40)))
    worst = {"action_logprob": 0.0, "sft_loss": 0.0, "surrogate": 0.0}
    counts = dict.fromkeys(worst, 0)
    while counts["action_logprob"] < 100:
        p = pol.PolicyParams.random(rng, 1.0)
        s = states[int(rng.integers(len(states)))]
        a = pol.enumerate_actions(s)[int(rng.integers(33))]
        num = fd_grad(lambda th: pol.action_logprob(p.with_theta(th), s, a), p.theta)
        worst["action_logprob"] = max(worst["action_logprob"], rel_err(pol.grad_logprob(p, s, a).theta, num))
        counts["action_logprob"] += 1
    while counts["sft_loss"] < 100:
        p = pol.PolicyParams.random(rng, 1.0)
        idx = rng.choice(len(corpus.examples), 4, replace=False)
        batch = encode_examples([corpus.examples[i] for i in idx])
        lam = float(rng.choice([0.5, 1.0, 2.0]))
        num = fd_grad(lambda th: sft_loss(p.with_theta(th), batch, lam)[0], p.theta)
        worst["sft_loss"] = max(worst["sft_loss"], rel_err(sft_loss(p, batch, lam)[1], num))
        counts["sft_loss"] += 1
    while counts["surrogate"] < 100:
        old, ref, p = (pol.PolicyParams.random(rng, 0.5) for _ in range(3))
        p = old.with_theta(old.theta + 0.1 * (p.theta - old.theta))
        entries = []
        for _ in range(3):
            s = states[int(rng.integers(len(states)))]
            entries.append((s, pol.enumerate_actions(s)[int(rng.integers(33))], float(rng.normal()),
                            float(rng.normal()) if rng.random() < 0.5 else None))
        batch = SurrogateBatch.from_entries(entries)
        obj, g, recs = surrogate_and_grad(p, old, ref, batch, 0.2, 0.5, 0.1)
        if any(min(abs(r.rho - 0.8), abs(r.rho - 1.2)) < 1e-3 for r in recs):
            continue  # the clipped objective is not differentiable at its kinks
        assert obj == surrogate_objective(p, old, ref, batch, 0.2, 0.5, 0.1)
        num = fd_grad(lambda th: surrogate_objective(p.with_theta(th), old, ref, batch, 0.2, 0.5, 0.1), p.theta)
        worst["surrogate"] = max(worst["surrogate"], rel_err(g, num))
        counts["surrogate"] += 1
    dt = time.perf_counter() - t0
    ok = all(v < 1e-5 for v in worst.values()) and dt < 30
    detail = ", ".join(f"{k} max rel err {v:.1e} over {counts[k]}" for k, v in worst.items())
    report(2, ok, f"{detail}; {dt:.1f}s (limit 30s)")


def _edge_states(env, seeds):
    for ep_seed in seeds:
        ep = env.reset(ep_seed)
        while not ep.done:
            yield env.emit_edge(ep)
            ep = env.apply_action(ep, Action(gate=0)).next


def test_criterion_3_clip_and_kl(env):
    rng = np.random.default_rng(3)
    states = list(_edge_states(env, range(20)))
    X = pol.featurize_many(states)
    # identity at theta = theta_old = theta_ref, with dyadic advantages so every sum is exact
    exact = True
    for _ in range(50):
        p = pol.PolicyParams.random(rng, 1.0)
        entries = []
        for _ in range(16):
            s = states[int(rng.integers(len(states)))]
            a_glob = float(rng.integers(-8, 9)) / 4 if rng.random() < 0.5 else None
            entries.append((s, pol.enumerate_actions(s)[int(rng.integers(33))], float(rng.integers(-8, 9)) / 8,
                            a_glob))
        lam = 0.5
        obj, _, _ = surrogate_and_grad(p, p, p, entries, 0.2, lam, 0.02)
        # mean over entries; an absent global advantage contributes zero
        want = (sum(Fraction(e[2]) for e in entries) / len(entries)
                + Fraction(lam) * sum(Fraction(e[3]) for e in entries if e[3] is not None) / len(entries))
        exact &= Fraction(obj) == want
    self_kl = all(np.all(pol.kl_divergence(p, p, X) == 0.0)
                  for p in (pol.PolicyParams.random(rng, 2.0) for _ in range(50)))
    kls = [pol.kl_divergence(pol.PolicyParams.random(rng, 1.0), pol.PolicyParams.random(rng, 1.0), X[:1])[0]
           for _ in range(1000)]
    nonneg = min(kls) >= 0.0
    report(3, exact and self_kl and nonneg,
           f"surrogate identity exact={exact}, KL(p||p)==0 exact={self_kl}, min KL over 1000 pairs={min(kls):.3g}")


def test_criterion_4_single_edge_optimality(single_edge_env):
    t0 = time.perf_counter()
    env, cfg = single_edge_env, RewardConfig()
    unique = 0
    n_eps = 200
    for seed in range(n_eps):
        ep = env.reset(seed, budget=cfg.budget_b)
        state = env.emit_edge(ep)
        returns = []
        for a in pol.enumerate_actions(state):
            step = score_action(env, ep, state, a, cfg, ())
            s = env.terminal_score(step.outcome.next)
            returns.append((step.rewards.r_edge + terminal_reward(s, cfg.alpha_ans), a))
        best = max(r for r, _ in returns)
        winners = {(a.error_type, a.addressee) for r, a in returns if r == best}
        gold = env.gold_label(ep, 0)
        unique += winners == {(gold.error_type, gold.addressee)}
    corpus = build_corpus(env, corpus_seeds(0, 400))
    sft = train_sft(corpus, SFTConfig()).params
    success = []
    for seed in range(5):
        res = train_egrpo(env, sft, cfg, TrainConfig(iterations=500, seed=seed))
        m = evaluate_policy(env, LearnedPolicy(res.params), cfg, eval_seeds(seed, 200))
        success.append(m.accuracy)
    dt = time.perf_counter() - t0
    ok = unique == n_eps and min(success) >= 0.95 and dt < 120
    report(4, ok, f"unique optimal (type, addressee) on {unique}/{n_eps} episodes (4 templates tie); "
                  f"success per seed {[round(x, 3) for x in success]}; {dt:.0f}s (limit 120s)")


def test_criterion_5_sft_transfer(env):
    t0 = time.perf_counter()
    corpus = build_corpus(env, corpus_seeds(0, 400))
    params = train_sft(corpus, SFTConfig(seed=0)).params
    held = build_corpus(env, eval_seeds(0, 400))
    acc = head_accuracy(params, encode_examples(held.examples))
    dt = time.perf_counter() - t0
    ok = acc["type_acc"] >= 0.99 and acc["addr_acc"] >= 0.99 and dt < 60
    report(5, ok, f"held-out type acc {acc['type_acc']:.4f}, addressee acc {acc['addr_acc']:.4f} "
                  f"on {len(held.examples)} fresh edges; {dt:.1f}s (limit 60s)")


SWEEP_SEEDS = range(20)


@pytest.fixture(scope="module")
def lambda_sweep():
    t0 = time.perf_counter()
    rows = run_sweep(EnvConfig(), RewardConfig(), seeds=SWEEP_SEEDS, cells=[(0.2, 3), (0.4, 3), (0.8, 3)])
    return rows, time.perf_counter() - t0


def _fmt(rows, keys):
    return "; ".join(", ".join(f"{k}={r[k]:.4g}" for k in keys) for r in rows)


def test_criterion_6_parsimony_trend(lambda_sweep):
    rows, dt = lambda_sweep
    asks = [r["asks_per_episode"] for r in rows]
    cost = [r["extra_cost_pct"] for r in rows]
    ok = all(b <= a for a, b in zip(asks, asks[1:])) and all(b <= a for a, b in zip(cost, cost[1:])) and dt < 600
    report(6, ok, f"{_fmt(rows, ('lambda_sw', 'asks_per_episode', 'extra_cost_pct'))}; "
                  f"{len(SWEEP_SEEDS)} seeds, {dt:.0f}s (limit 600s)")


def test_criterion_7_window_trend(lambda_sweep):
    mid = [r for r in lambda_sweep[0] if r["lambda_sw"] == 0.4]
    rest = run_sweep(EnvConfig(), RewardConfig(), seeds=SWEEP_SEEDS, cells=[(0.4, 2), (0.4, 4), (0.4, 5)])
    rows = sorted(mid + rest, key=lambda r: r["H"])
    acc = {r["H"]: r["accuracy"] for r in rows}
    lat = [r["latency_pct"] for r in rows]
    ok = acc[2] <= acc[3] <= acc[4] and all(b >= a for a, b in zip(lat, lat[1:]))
    report(7, ok, f"{_fmt(rows, ('H', 'accuracy', 'latency_pct'))}; lambda_sw=0.4, {len(SWEEP_SEEDS)} seeds")


def test_criterion_8_end_to_end(env, reward_cfg):
    worst_gain, worst_ratio, worst_gap = np.inf, np.inf, -np.inf
    per_seed = []
    for seed in range(10):
        res = run_pipeline(env, reward_cfg, SFTConfig(), TrainConfig(), run_seed=seed)
        seeds = list(eval_seeds(seed, 200))
        learned = evaluate_policy(env, LearnedPolicy(res.params), reward_cfg, seeds)
        never = evaluate_policy(env, NeverAsk(), reward_cfg, seeds)
        always = evaluate_policy(env, AlwaysAsk(), reward_cfg, seeds)
        oracle = evaluate_policy(env, OracleAsk(), reward_cfg, seeds)
        gain = 100 * (learned.accuracy - never.accuracy)
        ratio = always.extra_cost_pct / learned.extra_cost_pct if learned.extra_cost_pct > 0 else np.inf
        gap = 100 * (oracle.accuracy - learned.accuracy)
        worst_gain, worst_ratio, worst_gap = min(worst_gain, gain), min(worst_ratio, ratio), max(worst_gap, gap)
        per_seed.append(learned.accuracy)
    ok = worst_gain >= 10 and worst_ratio >= 3 and worst_gap <= 10
    report(8, ok, f"worst seed: +{worst_gain:.1f} pts over never-ask, always-ask cost / learned cost "
                  f"{worst_ratio:.2f}x, {worst_gap:.1f} pts below oracle; mean accuracy {np.mean(per_seed):.3f}")


def test_criterion_9_taxonomy(reward_cfg):
    env = Environment(EnvConfig(injection_probabilities=TAXONOMY_S3))
    target, trajs, total, seed = 10_000, [], 0, 0
    while total < target:
        t = rollout_many(env, NeverAsk(), reward_cfg, [seed])[0]
        if total + len(t.records) > target:
            t = dataclasses.replace(t, records=t.records[:target - total])
        trajs.append(t)
        total += len(t.records)
        seed += 1
    rep = annotate_distribution(trajs)
    want = {ErrorType.DG: 29.1, ErrorType.RD: 27.3, ErrorType.SC: 36.8, ErrorType.CG: 6.8}
    got = {t: 100 * rep.fractions.get(t, 0.0) for t in ASK_TYPES}
    ok = rep.faulted_edges == target and all(abs(got[t] - want[t]) <= 1.5 for t in ASK_TYPES)
    report(9, ok, f"{rep.faulted_edges} faulted edges: " +
           ", ".join(f"{t.value} {got[t]:.2f}% (target {want[t]})" for t in ASK_TYPES))


def test_criterion_10_replay_determinism(env, reward_cfg, corpus, tmp_path):
    policies = [NeverAsk(), AlwaysAsk(), OracleAsk(), RandomPolicy(),
                LearnedPolicy(pol.PolicyParams.random(np.random.default_rng(1), 1.0), greedy=False)]
    trajs = [t for p in policies for t in rollout_many(env, p, reward_cfg, range(40))]
    lines = [ln for t in trajs for ln in encode_trace(t)]
    decoded = decode_traces(lines)
    rescored = [replay(env, t, reward_cfg) for t in decoded]
    same_traces = decoded == trajs and rescored == trajs
    base = rollout_many(env, NeverAsk(), reward_cfg, range(40))
    same_metrics = overhead_metrics(rescored, base * len(policies)) == overhead_metrics(trajs, base * len(policies))

    def checkpoints(tag):
        sft = train_sft(corpus, SFTConfig(seed=3, epochs=30)).params
        res = train_egrpo(env, sft, reward_cfg, TrainConfig(iterations=10, seed=3))
        pol.save_checkpoint(sft, tmp_path / f"sft_{tag}.json")
        pol.save_checkpoint(res.params, tmp_path / f"rl_{tag}.json")
        return [(tmp_path / f"{k}_{tag}.json").read_bytes() for k in ("sft", "rl")]

    same_ckpt = checkpoints("a") == checkpoints("b")
    ok = same_traces and same_metrics and same_ckpt
    report(10, ok, f"{len(trajs)} traces re-scored bit-exact={same_traces}, metrics equal={same_metrics}, "
                   f"sft/train checkpoints byte-identical={same_ckpt}")


def test_criterion_11_prefix_regime(env):
    rng = np.random.default_rng(11)
    states = list(_edge_states(env, range(20)))
    identical = True
    trials = 200
    for _ in range(trials):
        old, ref, p = (pol.PolicyParams.random(rng, 0.5) for _ in range(3))
        entries = []
        for _ in range(int(rng.integers(1, 24))):
            s = states[int(rng.integers(len(states)))]
            entries.append((s, pol.enumerate_actions(s)[int(rng.integers(33))], float(rng.normal()), None))
        batch = SurrogateBatch.from_entries(entries)
        local_obj, local_g, _ = surrogate_and_grad(p, old, ref, batch, lambda_r=0.0)
        for lam in (0.5, 1.0, 7.0):
            obj, g, recs = surrogate_and_grad(p, old, ref, batch, lambda_r=lam)
            identical &= obj == local_obj and np.array_equal(g, local_g) and all(r.a_global is None for r in recs)
    report(11, identical, f"{trials} all-local batches x 3 values of lambda_R: gradients bit-identical={identical}")
