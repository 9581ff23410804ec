"""Policy sampling, reward, REINFORCE update and Adam."""

import math

import numpy as np
import pytest

from hwnas.controller import (
    AdamState,
    BaselineState,
    CategoricalPolicy,
    RewardConfig,
    entropy,
    load_checkpoint,
    log_softmax,
    logprob_of,
    most_likely,
    reinforce_gradient,
    reinforce_objective,
    reinforce_step,
    reward,
    sample,
    save_checkpoint,
    softmax,
)


def policy_of(*logit_rows):
    return CategoricalPolicy(tuple(np.array(row, dtype=np.float64) for row in logit_rows))


def test_sample_uniform_logprob():
    policy = policy_of([0.0, 0.0, 0.0, 0.0])
    dv, logprob = sample(policy, np.random.default_rng(0))
    assert dv[0] in range(4)
    assert logprob == pytest.approx(math.log(0.25))


def test_sample_saturated_logits():
    policy = policy_of([10.0, -10.0, -10.0, -10.0])
    rng = np.random.default_rng(1)
    draws = [sample(policy, rng)[0][0] for _ in range(2000)]
    assert all(d == 0 for d in draws)


def test_sample_frequencies_match_softmax():
    logits = np.array([0.3, -0.5, 1.1, 0.0])
    policy = policy_of(logits)
    p = softmax(logits)
    rng = np.random.default_rng(123)
    n = 100_000
    counts = np.zeros(4)
    for _ in range(n):
        counts[sample(policy, rng)[0][0]] += 1
    freq = counts / n
    sigma = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(freq - p) <= 3 * sigma)


def test_logprob_of_matches_sample():
    policy = policy_of([0.2, -0.1, 0.4], [1.0, 0.0])
    dv, logprob = sample(policy, np.random.default_rng(5))
    assert logprob_of(policy, dv) == pytest.approx(logprob)


def test_reward_at_budget_is_quality():
    cfg = RewardConfig(tau=-0.3, budget_ms=5.0)
    assert reward(0.7, 5.0, cfg) == pytest.approx(0.7)


def test_reward_penalty_arithmetic():
    cfg = RewardConfig(tau=-1.0, budget_ms=10.0)
    assert reward(0.5, 12.0, cfg) == pytest.approx(0.3)


def test_reward_tau_zero_ignores_latency():
    cfg = RewardConfig(tau=0.0, budget_ms=1.0)
    assert reward(0.42, 50.0, cfg) == 0.42


def test_reward_config_validation():
    with pytest.raises(ValueError, match="tau"):
        RewardConfig(tau=0.1, budget_ms=1.0)
    with pytest.raises(ValueError, match="budget"):
        RewardConfig(tau=-1.0, budget_ms=0.0)
    with pytest.raises(ValueError, match="latency"):
        reward(0.5, 0.0, RewardConfig(tau=-1.0, budget_ms=1.0))


def test_adam_defaults():
    adam = AdamState()
    assert (adam.lr, adam.beta1, adam.beta2, adam.epsilon) == (5e-3, 0.0, 0.999, 1e-8)


def test_zero_update_when_reward_equals_baseline():
    policy = policy_of([0.1, -0.2, 0.3])
    adam = AdamState.for_policy(policy)
    baseline = BaselineState(value=0.5)
    updated = reinforce_step(policy, [((1,), -1.0, 0.5)], baseline, adam)
    assert np.array_equal(updated.logits[0], policy.logits[0])


def test_first_batch_initializes_baseline():
    policy = policy_of([0.0, 0.0])
    adam = AdamState.for_policy(policy)
    baseline = BaselineState()
    reinforce_step(policy, [((0,), -0.7, 0.8)], baseline, adam)
    # init to the batch mean, then one EMA step toward the same mean
    assert baseline.value == pytest.approx(0.8)


def test_non_finite_reward_rejected():
    policy = policy_of([0.0, 0.0])
    adam = AdamState.for_policy(policy)
    with pytest.raises(ValueError, match="non-finite"):
        reinforce_step(policy, [((0,), -0.7, float("nan"))], BaselineState(), adam)


def test_reinforce_monotone_trend():
    """Two arms, reward 1 for arm 0 and 0 for arm 1: p(arm 0) trends up."""
    policy = policy_of([0.0, 0.0])
    adam = AdamState.for_policy(policy, lr=0.02)
    baseline = BaselineState()
    rng = np.random.default_rng(0)
    probs = [softmax(policy.logits[0])[0]]
    for _ in range(400):
        dv, logprob = sample(policy, rng)
        policy = reinforce_step(policy, [(dv, logprob, 1.0 if dv[0] == 0 else 0.0)],
                                baseline, adam)
        probs.append(softmax(policy.logits[0])[0])
    assert all(b >= a - 1e-12 for a, b in zip(probs, probs[1:]))
    assert probs[-1] > 0.95


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(42)
    policy = policy_of(rng.standard_normal(4), rng.standard_normal(7))
    batch = []
    for _ in range(6):
        dv, logprob = sample(policy, rng)
        batch.append((dv, logprob, float(rng.uniform(-1, 1))))
    baseline_value = 0.13
    analytic = reinforce_gradient(policy, batch, baseline_value)
    h = 1e-5
    worst = 0.0
    for d, vec in enumerate(policy.logits):
        for i in range(vec.size):
            def perturbed(delta):
                logits = [row.copy() for row in policy.logits]
                logits[d][i] += delta
                return reinforce_objective(
                    CategoricalPolicy(tuple(logits)), batch, baseline_value
                )

            fd = (perturbed(h) - perturbed(-h)) / (2 * h)
            worst = max(worst, abs(fd - analytic[d][i]))
    assert worst <= 1e-4


def test_most_likely_and_ties():
    assert most_likely(policy_of([0.0, 2.0, 1.0])) == (1,)
    assert most_likely(policy_of([1.0, 1.0, 0.0])) == (0,)  # tie -> lowest index


def test_entropy_uniform():
    policy = policy_of([0.0] * 4, [0.0] * 7)
    assert entropy(policy) == pytest.approx(math.log(4) + math.log(7))


def test_entropy_saturated():
    policy = policy_of([40.0, 0.0, 0.0])
    assert entropy(policy) < 1e-10


def test_softmax_shift_invariance():
    logits = np.array([0.5, -1.0, 2.0])
    shifted = logits + 123.4
    assert np.allclose(softmax(logits), softmax(shifted))
    assert most_likely(policy_of(logits)) == most_likely(policy_of(shifted))
    a = sample(policy_of(logits), np.random.default_rng(9))
    b = sample(policy_of(shifted), np.random.default_rng(9))
    assert a[0] == b[0]


def test_update_direction_invariant_to_advantage_scale():
    """Positive rescaling of all advantages must not flip any update sign."""
    rng = np.random.default_rng(3)
    policy = policy_of(rng.standard_normal(4), rng.standard_normal(5))
    batch = []
    for _ in range(4):
        dv, logprob = sample(policy, rng)
        batch.append((dv, logprob, float(rng.uniform(0, 1))))
    baseline_value = 0.4

    def step_delta(scale):
        scaled = [(dv, lp, baseline_value + scale * (r - baseline_value))
                  for dv, lp, r in batch]
        updated = reinforce_step(policy, scaled, BaselineState(value=baseline_value),
                                 AdamState.for_policy(policy))
        return [new - old for new, old in zip(updated.logits, policy.logits)]

    base = step_delta(1.0)
    scaled = step_delta(7.5)
    for d_base, d_scaled in zip(base, scaled):
        assert np.array_equal(np.sign(d_base), np.sign(d_scaled))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    policy = policy_of(rng.standard_normal(3), rng.standard_normal(6))
    adam = AdamState.for_policy(policy, lr=0.02)
    baseline = BaselineState(value=0.25)
    for _ in range(5):
        dv, logprob = sample(policy, rng)
        policy = reinforce_step(policy, [(dv, logprob, float(rng.uniform()))],
                                baseline, adam)
    path = tmp_path / "policy.json"
    save_checkpoint(path, policy, adam, baseline, step=5, space_ref="toy")
    policy2, adam2, baseline2, step, ref = load_checkpoint(path)
    assert step == 5 and ref == "toy"
    for a, b in zip(policy.logits, policy2.logits):
        assert np.array_equal(a, b)
    assert adam2.step == adam.step and adam2.lr == adam.lr
    for a, b in zip(adam.v, adam2.v):
        assert np.array_equal(a, b)
    assert baseline2.value == baseline.value
    # loaded state continues identically
    dv, logprob = sample(policy, np.random.default_rng(77))
    out1 = reinforce_step(policy, [(dv, logprob, 0.9)], baseline, adam)
    out2 = reinforce_step(policy2, [(dv, logprob, 0.9)], baseline2, adam2)
    for a, b in zip(out1.logits, out2.logits):
        assert np.array_equal(a, b)


def test_policy_rejects_bad_logits():
    with pytest.raises(ValueError, match="finite"):
        policy_of([0.0, float("inf")])
    with pytest.raises(ValueError):
        CategoricalPolicy((np.zeros((2, 2)),))


def test_log_softmax_normalized():
    logits = np.array([3.0, -1.0, 0.5])
    assert np.exp(log_softmax(logits)).sum() == pytest.approx(1.0)
