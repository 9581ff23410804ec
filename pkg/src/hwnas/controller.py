"""Categorical policy, latency-penalized reward and REINFORCE with Adam.

The policy keeps one logits vector per decision; sampling draws each decision
independently from its softmax. The update ascends the score-function
gradient of the advantage-weighted log-probability, with an exponential
moving average of the reward as baseline and Adam on the logits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .space import DecisionVector, SpaceSpec

# Sample outcome fed to the update: (decision vector, log-probability at
# sampling time, reward). The stored log-probability is diagnostic only; the
# gradient recomputes probabilities from the current logits.
SampleOutcome = tuple[DecisionVector, float, float]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits)
    exp = np.exp(shifted)
    return exp / exp.sum()


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits)
    return shifted - math.log(np.exp(shifted).sum())


@dataclass(frozen=True)
class CategoricalPolicy:
    """Per-decision logits; probabilities are softmax per decision."""

    logits: tuple[np.ndarray, ...]

    def __post_init__(self):
        for i, vec in enumerate(self.logits):
            if vec.ndim != 1 or vec.size < 1:
                raise ValueError(f"decision {i}: logits must be a non-empty vector")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"decision {i}: logits must be finite")

    @classmethod
    def uniform(cls, space: SpaceSpec) -> "CategoricalPolicy":
        return cls(tuple(np.zeros(len(d.choices)) for d in space.decisions))


@dataclass(frozen=True)
class RewardConfig:
    """Latency-penalized reward: quality + tau * |latency/budget - 1|.

    ``tau`` is negative (zero is tolerated for tests, where the penalty is
    switched off); ``budget_ms`` is the target latency.
    """

    tau: float
    budget_ms: float

    def __post_init__(self):
        if self.tau > 0:
            raise ValueError(f"tau must be <= 0, got {self.tau}")
        if self.budget_ms <= 0:
            raise ValueError(f"budget_ms must be positive, got {self.budget_ms}")


def reward(quality: float, latency_ms: float, cfg: RewardConfig) -> float:
    if latency_ms <= 0:
        raise ValueError(f"latency must be positive, got {latency_ms}")
    return quality + cfg.tau * abs(latency_ms / cfg.budget_ms - 1.0)


@dataclass
class AdamState:
    """Adam moments for the policy logits; update direction is ascent.

    Defaults: lr 5e-3, betas (0, 0.999), epsilon 1e-8.
    """

    lr: float = 5e-3
    beta1: float = 0.0
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_policy(cls, policy: CategoricalPolicy, **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = [np.zeros_like(vec) for vec in policy.logits]
        state.v = [np.zeros_like(vec) for vec in policy.logits]
        return state

    def apply(
        self, logits: tuple[np.ndarray, ...], grads: Sequence[np.ndarray]
    ) -> tuple[np.ndarray, ...]:
        """One ascent step; returns new logits, mutates the moments."""
        self.step += 1
        out = []
        for i, (vec, grad) in enumerate(zip(logits, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad * grad
            m_hat = self.m[i] / (1.0 - self.beta1 ** self.step)
            v_hat = self.v[i] / (1.0 - self.beta2 ** self.step)
            out.append(vec + self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon))
        return tuple(out)


@dataclass
class BaselineState:
    """Reward EMA; initialized from the first batch's mean reward."""

    decay: float = 0.9
    value: float | None = None

    def __post_init__(self):
        if not 0 <= self.decay < 1:
            raise ValueError(f"decay must be in [0, 1), got {self.decay}")


def sample(
    policy: CategoricalPolicy, rng: np.random.Generator
) -> tuple[DecisionVector, float]:
    """Independent categorical draw per decision; returns (vector, logprob)."""
    indices = []
    logprob = 0.0
    for logits in policy.logits:
        logp = log_softmax(logits)
        cdf = np.cumsum(np.exp(logp))
        idx = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")),
                  logits.size - 1)
        indices.append(idx)
        logprob += float(logp[idx])
    return tuple(indices), logprob


def logprob_of(policy: CategoricalPolicy, dv: DecisionVector) -> float:
    """Log-probability of a decision vector under the current logits."""
    return sum(float(log_softmax(vec)[idx]) for vec, idx in zip(policy.logits, dv))


def reinforce_objective(
    policy: CategoricalPolicy, batch: Sequence[SampleOutcome], baseline_value: float
) -> float:
    """Mean advantage-weighted log-probability (the surrogate being ascended)."""
    total = 0.0
    for dv, _, rew in batch:
        total += (rew - baseline_value) * logprob_of(policy, dv)
    return total / len(batch)


def reinforce_gradient(
    policy: CategoricalPolicy, batch: Sequence[SampleOutcome], baseline_value: float
) -> list[np.ndarray]:
    """Analytic score-function gradient of :func:`reinforce_objective`.

    Per decision, d logprob / d logits = onehot(chosen) - softmax(logits).
    """
    grads = [np.zeros_like(vec) for vec in policy.logits]
    for dv, _, rew in batch:
        advantage = rew - baseline_value
        for d, idx in enumerate(dv):
            g = -softmax(policy.logits[d])
            g[idx] += 1.0
            grads[d] += advantage * g
    return [g / len(batch) for g in grads]


def reinforce_step(
    policy: CategoricalPolicy,
    batch: Sequence[SampleOutcome],
    baseline: BaselineState,
    adam: AdamState,
) -> CategoricalPolicy:
    """One policy-gradient update.

    The advantage uses the pre-update baseline (initialized to the first
    batch's mean reward); the baseline EMA advances after the gradient.
    Mutates ``adam`` and ``baseline``; returns the updated policy.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    rewards = [rew for _, _, rew in batch]
    if not all(math.isfinite(r) for r in rewards):
        raise ValueError(f"non-finite reward in batch: {rewards}")
    mean_reward = sum(rewards) / len(rewards)
    if baseline.value is None:
        baseline.value = mean_reward
    grads = reinforce_gradient(policy, batch, baseline.value)
    new_logits = adam.apply(policy.logits, grads)
    baseline.value = baseline.decay * baseline.value + (1.0 - baseline.decay) * mean_reward
    return CategoricalPolicy(new_logits)


def most_likely(policy: CategoricalPolicy) -> DecisionVector:
    """Argmax per decision; ties break to the lowest index."""
    return tuple(int(np.argmax(vec)) for vec in policy.logits)


def entropy(policy: CategoricalPolicy) -> float:
    """Sum of per-decision Shannon entropies, in nats."""
    total = 0.0
    for vec in policy.logits:
        logp = log_softmax(vec)
        total += float(-np.sum(np.exp(logp) * logp))
    return total


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(
    path: str | Path,
    policy: CategoricalPolicy,
    adam: AdamState,
    baseline: BaselineState,
    step: int,
    space_ref: str = "",
    meta: dict | None = None,
) -> None:
    doc = {
        "space_ref": space_ref,
        "step": step,
        "logits": [vec.tolist() for vec in policy.logits],
        "adam": {
            "lr": adam.lr,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "epsilon": adam.epsilon,
            "step": adam.step,
            "m": [vec.tolist() for vec in adam.m],
            "v": [vec.tolist() for vec in adam.v],
        },
        "baseline": {"decay": baseline.decay, "value": baseline.value},
    }
    if meta:
        doc["_meta"] = meta
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_checkpoint(
    path: str | Path,
) -> tuple[CategoricalPolicy, AdamState, BaselineState, int, str]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    policy = CategoricalPolicy(tuple(np.array(vec, dtype=np.float64) for vec in doc["logits"]))
    adoc = doc["adam"]
    adam = AdamState(
        lr=adoc["lr"],
        beta1=adoc["beta1"],
        beta2=adoc["beta2"],
        epsilon=adoc["epsilon"],
        step=adoc["step"],
        m=[np.array(vec, dtype=np.float64) for vec in adoc["m"]],
        v=[np.array(vec, dtype=np.float64) for vec in adoc["v"]],
    )
    bdoc = doc["baseline"]
    baseline = BaselineState(decay=bdoc["decay"], value=bdoc["value"])
    return policy, adam, baseline, int(doc["step"]), doc.get("space_ref", "")
