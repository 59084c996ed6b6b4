"""Value promise discrepancy and the Homeostasis switching trigger.

Homeostasis turns an arbitrary non-negative signal stream into binary
"switch now" decisions whose long-run frequency tracks a target rate,
independent of the signal's scale. Larger-than-usual signals are more
likely to fire.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

from .core import make_rng

RHO_MIN, RHO_MAX = 1e-4, 0.9
VAR_FLOOR = 1e-12


class UnderfilledWindowError(ValueError):
    """Raised when fewer than ``k`` steps have been observed since reset."""


class PromiseWindow:
    """Rolling history of the last ``k + 1`` state values and ``k`` rewards.

    The first push after a reset records only a value (the episode's
    initial state); each later push adds the reward that led to the new
    state. A push with ``done=True`` clears the window.
    """

    def __init__(self, k: int, gamma: float):
        if k < 1:
            raise ValueError(f"promise horizon k must be >= 1, got {k}")
        if not 0.0 < gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
        self.k = int(k)
        self.gamma = float(gamma)
        self.values: deque[float] = deque(maxlen=self.k + 1)
        self.rewards: deque[float] = deque(maxlen=self.k)

    def reset(self) -> None:
        self.values.clear()
        self.rewards.clear()

    def push(self, value: float, reward: float | None = None, done: bool = False) -> None:
        if not math.isfinite(value) or (reward is not None and not math.isfinite(reward)):
            raise ValueError("window inputs must be finite")
        if done:
            self.reset()
            return
        if self.values:
            self.rewards.append(0.0 if reward is None else float(reward))
        self.values.append(float(value))

    @property
    def filled(self) -> bool:
        return len(self.values) == self.k + 1 and len(self.rewards) == self.k

    def discrepancy(self) -> float:
        if not self.filled:
            raise UnderfilledWindowError(
                f"promise window holds {len(self.rewards)} of {self.k} steps"
            )
        # rewards[-1] is R_t, rewards[-1 - i] is R_{t-i}
        return value_promise_discrepancy(
            self.values[0], list(reversed(self.rewards)), self.values[-1], self.gamma
        )


def value_promise_discrepancy(
    v_start: float, recent_rewards, v_end: float, gamma: float
) -> float:
    """``|V(s_{t-k}) - sum_i gamma^i R_{t-i} - gamma^k V(s_t)|``.

    ``recent_rewards`` is ordered newest first: ``(R_t, R_{t-1}, ...)``,
    and its length is the horizon ``k``.
    """
    r = np.asarray(recent_rewards, dtype=np.float64)
    k = len(r)
    if k < 1:
        raise UnderfilledWindowError("need at least one reward")
    discounts = gamma ** np.arange(k)
    return abs(v_start - float(discounts @ r) - gamma**k * v_end)


@dataclass
class HomeoState:
    rho: float
    mean: float = 0.0
    var: float = 1.0
    plus_mean: float = 1.0
    t: int = 0

    def __post_init__(self):
        if not RHO_MIN <= self.rho <= RHO_MAX:
            raise ValueError(f"rho must lie in [{RHO_MIN}, {RHO_MAX}], got {self.rho}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "HomeoState":
        d = json.loads(text)
        return cls(rho=d["rho"], mean=d["mean"], var=d["var"], plus_mean=d["plus_mean"], t=d["t"])

    def copy(self) -> "HomeoState":
        return HomeoState(self.rho, self.mean, self.var, self.plus_mean, self.t)


def homeo_probability(h: HomeoState, x: float) -> tuple[float, HomeoState]:
    """Advance the running statistics by one signal and return the switch probability."""
    if not (math.isfinite(x) and x >= 0.0):
        raise ValueError(f"homeostasis input must be finite and non-negative, got {x}")
    t = h.t + 1
    tau = min(t, 100.0 / h.rho)
    w = 1.0 / tau
    mean = (1.0 - w) * h.mean + w * x
    var = max((1.0 - w) * h.var + w * (x - mean) ** 2, VAR_FLOOR)
    # cap the exponent so an extreme outlier saturates instead of overflowing
    x_plus = math.exp(min((x - mean) / math.sqrt(var), 700.0))
    plus_mean = (1.0 - w) * h.plus_mean + w * x_plus
    p = min(1.0, h.rho * x_plus / plus_mean)
    assert 0.0 <= p <= 1.0
    return p, HomeoState(h.rho, mean, var, plus_mean, t)


def homeo_update(h: HomeoState, x: float, seed) -> tuple[bool, HomeoState]:
    """One Homeostasis step: returns ``(switch_to_explore, new_state)``."""
    p, h2 = homeo_probability(h, x)
    return bool(make_rng(seed).random() < p), h2


class Homeostasis:
    """Stateful wrapper owning a :class:`HomeoState` and its RNG stream."""

    def __init__(self, rho: float, rng=None, state: HomeoState | None = None):
        self.state = state if state is not None else HomeoState(rho=rho)
        self.rng = make_rng(rng)
        self.last_probability = 0.0

    def __call__(self, x: float) -> bool:
        p, self.state = homeo_probability(self.state, x)
        self.last_probability = p
        return bool(self.rng.random() < p)
