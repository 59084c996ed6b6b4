"""Action-selection strategies over the policy set [offline, online].

* ``nonmono`` -- the offline policy exploits until a Homeostasis trigger on
  the frozen offline critic's value promise discrepancy fires, then the
  online policy acts for a fixed block of ``explore_fixed_steps`` steps.
* ``pex`` -- policy expansion: both policies propose an action every step
  and a Boltzmann draw over the online critic's values picks one.
* ``offline`` / ``buffer`` -- only one member of the set ever acts.

Every controller reports which policy produced each action so execution
counts can be tallied.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import Policy, PolicySet, QTable, Transition, ValueTable, make_rng, softmax
from .homeo import RHO_MAX, RHO_MIN, Homeostasis, HomeoState, PromiseWindow

OFFLINE, ONLINE = "offline", "online"
CONTROLLERS = ("nonmono", "pex", "offline", "buffer")
VALUE_SOURCES = ("max", "policy", "vtable")


class ModeTag(str, Enum):
    EXPLOIT = "exploit"
    EXPLORE = "explore"


@dataclass(frozen=True)
class Mode:
    tag: ModeTag = ModeTag.EXPLOIT
    steps_remaining: int = 0

    def __post_init__(self):
        if self.steps_remaining < 0:
            raise ValueError("steps_remaining must be non-negative")
        if (self.steps_remaining > 0) != (self.tag is ModeTag.EXPLORE):
            raise ValueError("steps_remaining > 0 exactly when exploring")


@dataclass
class ControllerConfig:
    rho: float = 0.1
    explore_fixed_steps: int = 100
    update_timestep: int = 1
    promise_k: int = 10
    gamma: float = 0.99
    pex_alpha: float = 0.05
    value_source: str = "max"

    def __post_init__(self):
        if not RHO_MIN <= self.rho <= RHO_MAX:
            raise ValueError(f"rho must lie in [{RHO_MIN}, {RHO_MAX}], got {self.rho}")
        for name in ("explore_fixed_steps", "update_timestep", "promise_k"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.pex_alpha <= 0:
            raise ValueError("pex_alpha must be positive")
        if self.value_source not in VALUE_SOURCES:
            raise ValueError(f"value_source must be one of {VALUE_SOURCES}")


@dataclass
class ExecutionCounters:
    offline_count: int = 0
    online_count: int = 0

    def record(self, acted: str) -> None:
        if acted == OFFLINE:
            self.offline_count += 1
        elif acted == ONLINE:
            self.online_count += 1
        else:
            raise ValueError(f"unknown actor {acted!r}")

    @property
    def total(self) -> int:
        return self.offline_count + self.online_count


def policy_entropy(p: Policy, states) -> float:
    """Mean Shannon entropy (nats) of the per-state action distributions."""
    states = np.asarray(list(states) if not isinstance(states, np.ndarray) else states, dtype=np.int64)
    if states.size == 0:
        raise ValueError("need at least one state")
    probs = softmax(p.action_logits[states], axis=1)
    plogp = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return float(-plogp.sum(axis=1).mean())


def pex_probabilities(q_values, alpha: float) -> np.ndarray:
    """Boltzmann weights over proposal values, ``softmax(Q / alpha)``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return softmax(np.asarray(q_values, dtype=np.float64) / alpha)


def pex_select(q: QTable, s: int, proposals: tuple[int, int], alpha: float, seed) -> tuple[int, str]:
    p = pex_probabilities(q.values[s, list(proposals)], alpha)
    pick = int(make_rng(seed).random() < p[1])
    return proposals[pick], (OFFLINE, ONLINE)[pick]


def offline_values(q_off: QTable, v_off: ValueTable | None, pi_off: Policy, source: str) -> np.ndarray:
    """State values of the frozen offline critic used to feed the trigger."""
    if source == "max":
        return q_off.values.max(axis=1)
    if source == "policy":
        return (pi_off.all_probs() * q_off.values).sum(axis=1)
    if source == "vtable":
        if v_off is None:
            raise ValueError("value_source='vtable' needs the offline value table")
        return v_off.values.copy()
    raise ValueError(f"unknown value source {source!r}")


class Controller:
    """Base class: pick an actor each step, observe the outcome."""

    name = "base"
    trains_online = True

    def __init__(self, pols: PolicySet, cfg: ControllerConfig):
        self.pols = pols
        self.cfg = cfg
        self.switches = 0

    def begin_episode(self, s: int) -> None:
        pass

    def select(self, s: int, t: int, rng) -> tuple[int, str]:
        raise NotImplementedError

    def observe(self, t: int, tr: Transition) -> None:
        pass

    def greedy_evaluator(self, rng) -> "Controller":
        """A detached controller acting greedily, for evaluation rollouts."""
        raise NotImplementedError


class OfflineOnly(Controller):
    name = "offline"
    trains_online = False

    def select(self, s, t, rng):
        return self.pols.offline.sample(s, rng), OFFLINE

    def greedy_action(self, s: int) -> tuple[int, str]:
        return self.pols.offline.greedy(s), OFFLINE


class BufferOnly(Controller):
    name = "buffer"

    def select(self, s, t, rng):
        return self.pols.online.sample(s, rng), ONLINE

    def greedy_action(self, s: int) -> tuple[int, str]:
        return self.pols.online.greedy(s), ONLINE


class PEX(Controller):
    name = "pex"

    def __init__(self, pols: PolicySet, cfg: ControllerConfig, q_online: QTable):
        super().__init__(pols, cfg)
        self.q_online = q_online

    def select(self, s, t, rng):
        rng = make_rng(rng)
        proposals = (self.pols.offline.sample(s, rng), self.pols.online.sample(s, rng))
        return pex_select(self.q_online, s, proposals, self.cfg.pex_alpha, rng)

    def greedy_action(self, s: int) -> tuple[int, str]:
        a_off, a_on = self.pols.offline.greedy(s), self.pols.online.greedy(s)
        q = self.q_online.values[s]
        return (a_on, ONLINE) if q[a_on] > q[a_off] else (a_off, OFFLINE)


class NonMonolithic(Controller):
    """Homeostasis-gated switching between exploitation and exploration blocks.

    The trigger is consulted only while exploiting and only when ``t`` is
    a multiple of ``update_timestep``; a firing hands control to the
    online policy for exactly ``explore_fixed_steps`` steps, during which
    the trigger is not queried. The signal depends on the frozen offline
    critic alone.
    """

    name = "nonmono"

    def __init__(
        self,
        pols: PolicySet,
        cfg: ControllerConfig,
        q_off: QTable,
        v_off: ValueTable | None = None,
        homeo_rng=None,
        homeo_state: HomeoState | None = None,
    ):
        super().__init__(pols, cfg)
        self.values = offline_values(q_off, v_off, pols.offline, cfg.value_source)
        self.values.flags.writeable = False
        self.homeo = Homeostasis(cfg.rho, homeo_rng, homeo_state)
        self.window = PromiseWindow(cfg.promise_k, cfg.gamma)
        self.mode = Mode()
        self.switch_steps: list[int] = []
        self.greedy = False

    @property
    def exploring(self) -> bool:
        return self.mode.tag is ModeTag.EXPLORE

    def begin_episode(self, s: int) -> None:
        self.window.reset()
        self.window.push(float(self.values[s]))

    def _act(self, s, rng, greedy: bool) -> tuple[int, str]:
        if self.exploring:
            left = self.mode.steps_remaining - 1
            self.mode = Mode(ModeTag.EXPLORE, left) if left else Mode()
            pol, who = self.pols.online, ONLINE
        else:
            pol, who = self.pols.offline, OFFLINE
        return (pol.greedy(s) if greedy else pol.sample(s, rng)), who

    def select(self, s, t, rng):
        return self._act(s, rng, self.greedy)

    def observe(self, t: int, tr: Transition) -> None:
        self.window.push(float(self.values[tr.next_state]), tr.reward, tr.done)
        if self.exploring or t % self.cfg.update_timestep or not self.window.filled:
            return
        if self.homeo(self.window.discrepancy()):
            self.mode = Mode(ModeTag.EXPLORE, self.cfg.explore_fixed_steps)
            self.switches += 1
            self.switch_steps.append(t)

    def greedy_evaluator(self, rng) -> "NonMonolithic":
        twin = copy.copy(self)
        twin.homeo = Homeostasis(self.cfg.rho, rng, self.homeo.state.copy())
        twin.window = PromiseWindow(self.cfg.promise_k, self.cfg.gamma)
        twin.switches, twin.switch_steps = 0, []
        twin.greedy = True
        return twin


def nonmono_step(ctrl: NonMonolithic, s: int, t: int, rng) -> tuple[int, str, Mode, HomeoState]:
    """Select at ``t``; callers must feed the outcome back through ``ctrl.observe``."""
    a, acted = ctrl.select(s, t, rng)
    return a, acted, ctrl.mode, ctrl.homeo.state


def offline_only_select(pols: PolicySet, s: int, seed) -> tuple[int, str]:
    return pols.offline.sample(s, seed), OFFLINE


def buffer_only_select(pols: PolicySet, s: int, seed) -> tuple[int, str]:
    return pols.online.sample(s, seed), ONLINE


def make_controller(
    name: str,
    pols: PolicySet,
    cfg: ControllerConfig,
    *,
    q_off: QTable,
    v_off: ValueTable | None,
    q_online: QTable,
    homeo_rng=None,
) -> Controller:
    if name == "nonmono":
        return NonMonolithic(pols, cfg, q_off, v_off, homeo_rng)
    if name == "pex":
        return PEX(pols, cfg, q_online)
    if name == "offline":
        return OfflineOnly(pols, cfg)
    if name == "buffer":
        return BufferOnly(pols, cfg)
    raise ValueError(f"unknown controller {name!r}; expected one of {CONTROLLERS}")
