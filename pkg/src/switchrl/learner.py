"""Tabular implicit Q-learning.

The critic pair follows the IQL recipe on lookup tables:

* ``V(s)`` regresses toward ``Q(s, a)`` for dataset actions under the
  asymmetric expectile loss, so it approximates an in-support maximum
  without ever querying unseen actions;
* ``Q(s, a)`` regresses toward ``r + gamma * V_target(s')`` where the
  target table is a Polyak average of ``V``.

Batches are applied as one averaged step per touched table entry.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import Batch, Policy, QTable, ReplayBuffer, UnionBuffer, ValueTable, digest, make_rng, softmax

CHECKPOINT_MAGIC = b"SWRLCKPT"
CHECKPOINT_VERSION = 1
ADV_WEIGHT_CAP = 100.0
BEHAVIOR_SMOOTHING = 1e-3


class LearnerDivergedError(FloatingPointError):
    pass


@dataclass
class LearnerConfig:
    expectile_tau: float = 0.9
    inv_temperature: float = 10.0
    learning_rate: float = 0.1
    batch_size: int = 256
    discount: float = 0.99
    target_update_speed: float = 5e-3
    # added to every sampled reward before the TD backup (IQL uses -1 on goal-reaching mazes)
    reward_shift: float = 0.0
    # fill value for untouched table entries; pessimistic so unseen actions never look best
    initial_value: float = 0.0
    # neural-network scale rate, kept for reference only
    reference_learning_rate: float = field(default=3e-4, repr=False)

    def __post_init__(self):
        if not 0.5 <= self.expectile_tau < 1.0:
            raise ValueError(f"expectile_tau must lie in [0.5, 1), got {self.expectile_tau}")
        if self.inv_temperature <= 0:
            raise ValueError("inv_temperature must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be a positive integer")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        if not 0.0 < self.target_update_speed <= 1.0:
            raise ValueError("target_update_speed must lie in (0, 1]")

    @classmethod
    def sparse(cls, **kw) -> "LearnerConfig":
        """Stronger pessimism, used for goal-reaching mazes."""
        base = {"expectile_tau": 0.9, "inv_temperature": 10.0, "reward_shift": -1.0, "initial_value": -100.0}
        return cls(**{**base, **kw})

    @classmethod
    def dense(cls, **kw) -> "LearnerConfig":
        return cls(**{"expectile_tau": 0.7, "inv_temperature": 3.0, **kw})

    def to_dict(self) -> dict:
        return asdict(self)


def expectile_loss(u, tau: float):
    """``|tau - 1[u < 0]| * u**2``; works on scalars and arrays."""
    u = np.asarray(u, dtype=np.float64)
    loss = np.abs(tau - (u < 0)) * u**2
    return float(loss) if loss.ndim == 0 else loss


def _entry_means(index: np.ndarray, values: np.ndarray, size: int):
    counts = np.bincount(index, minlength=size)
    sums = np.bincount(index, weights=values, minlength=size)
    touched = counts > 0
    means = np.zeros(size)
    means[touched] = sums[touched] / counts[touched]
    return means, touched


class TabularIQL:
    """Critic tables plus a softmax actor trained by advantage weighting."""

    def __init__(
        self,
        num_states: int,
        num_actions: int,
        cfg: LearnerConfig,
        q: QTable | None = None,
        v: ValueTable | None = None,
        policy: Policy | None = None,
    ):
        self.cfg = cfg
        self.num_states, self.num_actions = num_states, num_actions
        init = cfg.initial_value
        self.q = q.copy() if q is not None else QTable(np.full((num_states, num_actions), init))
        self.v = v.copy() if v is not None else ValueTable(np.full(num_states, init))
        self.v_target = self.v.values.copy()
        self.policy = policy if policy is not None else Policy.uniform(num_states, num_actions)
        self.updates = 0

    def critic_step(self, b: Batch) -> None:
        cfg = self.cfg
        S, A = self.num_states, self.num_actions
        q, v = self.q.values, self.v.values
        sa = b.states * A + b.actions

        u = q.flat[sa] - v[b.states]
        # -dL/dV for the expectile loss (L = w u^2, dL/dV = -2 w u)
        grad = 2.0 * np.abs(cfg.expectile_tau - (u < 0)) * u
        step, touched = _entry_means(b.states, grad, S)
        v[touched] += cfg.learning_rate * step[touched]

        target = b.rewards + cfg.reward_shift + cfg.discount * (~b.dones) * self.v_target[b.next_states]
        td, touched_sa = _entry_means(sa, target - q.flat[sa], S * A)
        q.flat[touched_sa] += cfg.learning_rate * td[touched_sa]

        self.v_target += cfg.target_update_speed * (v - self.v_target)
        self.updates += 1
        self._guard()

    def actor_step(self, b: Batch) -> None:
        """Advantage-weighted log-likelihood ascent on the sampled actions."""
        if self.policy.frozen:
            raise PermissionError("refusing to update a frozen policy")
        cfg = self.cfg
        logits = self.policy.action_logits
        adv = self.q.values[b.states, b.actions] - self.v.values[b.states]
        w = np.minimum(np.exp(cfg.inv_temperature * adv), ADV_WEIGHT_CAP)
        S, A = self.num_states, self.num_actions
        # per-state sum of w * (onehot(a) - pi(s)), then averaged over the state's samples
        w_sa = np.bincount(b.states * A + b.actions, weights=w, minlength=S * A).reshape(S, A)
        counts = np.bincount(b.states, minlength=S)
        touched = np.flatnonzero(counts)
        probs = softmax(logits[touched], axis=1)
        ws = w_sa[touched]
        grad = ws - ws.sum(axis=1, keepdims=True) * probs
        logits[touched] += cfg.learning_rate * grad / counts[touched, None]
        if not np.all(np.isfinite(logits[touched])):
            raise LearnerDivergedError(f"actor logits diverged after {self.updates} updates")

    def _guard(self) -> None:
        if not (math.isfinite(self.q.values.sum()) and math.isfinite(self.v.values.sum())):
            raise LearnerDivergedError(
                f"critic produced non-finite values after {self.updates} updates"
            )

    def advantage_policy(self, behavior_counts: np.ndarray | None = None) -> Policy:
        """Closed-form advantage-weighted policy ``mu(a|s) * exp(beta * A(s, a))``.

        ``behavior_counts`` are per-(s, a) dataset counts. Actions absent
        from a state's data get probability ``BEHAVIOR_SMOOTHING`` relative
        to that state's best action; states absent from the data stay
        uniform.
        """
        logits = self.cfg.inv_temperature * (self.q.values - self.v.values[:, None])
        if behavior_counts is None:
            return Policy(logits - logits.max(axis=1, keepdims=True))
        seen = behavior_counts > 0
        logits = np.where(seen, logits + np.log(np.where(seen, behavior_counts, 1.0)), -np.inf)
        best = np.where(seen.any(axis=1), logits.max(axis=1), 0.0)[:, None]
        logits = np.where(seen, logits - best, np.log(BEHAVIOR_SMOOTHING))
        logits[~seen.any(axis=1)] = 0.0
        return Policy(logits)


def behavior_counts(dataset: ReplayBuffer) -> np.ndarray:
    states, actions = dataset.columns()[:2]
    S, A = dataset.num_states, dataset.num_actions
    return np.bincount(states * A + actions, minlength=S * A).reshape(S, A).astype(np.float64)


def offline_pretrain(
    dataset: ReplayBuffer, cfg: LearnerConfig, iters: int, seed
) -> tuple[Policy, QTable, ValueTable]:
    """Fit (Q_off, V_off) on a fixed dataset and extract the frozen offline policy."""
    if len(dataset) == 0:
        raise ValueError("offline dataset is empty")
    if iters < 1:
        raise ValueError("iters must be positive")
    rng = make_rng(seed)
    learner = TabularIQL(dataset.num_states, dataset.num_actions, cfg)
    for _ in range(iters):
        learner.critic_step(dataset.sample(cfg.batch_size, rng))
    policy = learner.advantage_policy(behavior_counts(dataset)).freeze()
    q, v = learner.q, learner.v
    q.values.flags.writeable = False
    v.values.flags.writeable = False
    return policy, q, v


def online_update(learner: TabularIQL, union: UnionBuffer, rng) -> Batch:
    """One critic + actor step for the online pair from a union-buffer batch."""
    batch = union.sample(learner.cfg.batch_size, rng)
    learner.critic_step(batch)
    learner.actor_step(batch)
    return batch


@dataclass
class Checkpoint:
    """Frozen offline artifacts shared by every controller in a comparison."""

    policy: Policy
    q: QTable
    v: ValueTable
    cfg: LearnerConfig
    meta: dict = field(default_factory=dict)

    def digest(self) -> str:
        return digest(self.policy.action_logits, self.q.values, self.v.values)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        S, A = self.q.values.shape
        header = CHECKPOINT_MAGIC + np.array([CHECKPOINT_VERSION, S, A], dtype="<u4").tobytes()
        body = b"".join(
            np.ascontiguousarray(arr, dtype="<f8").tobytes()
            for arr in (self.policy.action_logits, self.q.values, self.v.values)
        )
        path.write_bytes(header + body)
        sidecar = {
            "version": CHECKPOINT_VERSION,
            "num_states": S,
            "num_actions": A,
            "learner": self.cfg.to_dict(),
            "digest": self.digest(),
            **self.meta,
        }
        sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        data = path.read_bytes()
        if not data.startswith(CHECKPOINT_MAGIC):
            raise ValueError(f"{path}: not a checkpoint file")
        off = len(CHECKPOINT_MAGIC)
        version, S, A = (int(x) for x in np.frombuffer(data[off : off + 12], dtype="<u4"))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        arrays = np.frombuffer(data[off + 12 :], dtype="<f8")
        if len(arrays) != 2 * S * A + S:
            raise ValueError(f"{path}: truncated checkpoint body")
        logits = arrays[: S * A].reshape(S, A)
        q = arrays[S * A : 2 * S * A].reshape(S, A).copy()
        v = arrays[2 * S * A :].copy()
        side = json.loads(sidecar_path(path).read_text())
        learner = side.pop("learner")
        learner.pop("reference_learning_rate", None)
        meta = {k: val for k, val in side.items() if k not in ("version", "num_states", "num_actions", "digest")}
        ckpt = cls(Policy(logits, frozen=True), QTable(q), ValueTable(v), LearnerConfig(**learner), meta)
        ckpt.q.values.flags.writeable = False
        ckpt.v.values.flags.writeable = False
        if ckpt.digest() != side["digest"]:
            raise ValueError(f"{path}: digest mismatch with sidecar")
        return ckpt


def sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")
