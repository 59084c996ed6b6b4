"""Small synthetic tasks with exact dynamics.

Every environment is compiled into dense outcome tables
``(num_states, num_actions, K)`` of next-state, probability, reward and
termination, so dynamic programming, Monte-Carlo rollouts and the
step-by-step simulator all read the same model.

Two families are shipped:

* :class:`GridMaze` -- sparse reward, reaching the goal pays 1 and ends
  the episode. Diverse variants draw start and goal per episode; the goal
  index is folded into the state id.
* :class:`Corridor` -- dense reward equal to forward progress.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np

from .core import ReplayBuffer, Transition, make_rng

VI_TOL = 1e-10
VI_MAX_ITERS = 100_000
MEDIUM_EPSILON = 0.3
MEDIUM_FRACTION = 0.5


class DatasetTier(str, Enum):
    RANDOM = "random"
    MEDIUM = "medium"
    MEDIUM_REPLAY = "medium-replay"


class ConvergenceError(RuntimeError):
    pass


class TabularEnv:
    """Finite episodic MDP backed by outcome tables.

    Subclasses fill ``next_states``, ``probs``, ``rewards``, ``dones``
    (all shaped ``(S, A, K)``) and ``init_probs`` (shape ``(S,)``).
    """

    name = "tabular"
    num_states: int
    num_actions: int
    max_episode_steps: int
    next_states: np.ndarray
    probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    init_probs: np.ndarray

    def _finalize(self) -> None:
        for arr in (self.next_states, self.probs, self.rewards, self.dones):
            arr.flags.writeable = False
        self.init_probs.flags.writeable = False
        self._cum = np.cumsum(self.probs, axis=2)
        self._init_cum = np.cumsum(self.init_probs)

    def _check(self, s: int, a: int) -> None:
        if not 0 <= s < self.num_states:
            raise IndexError(f"state {s} out of range (num_states={self.num_states})")
        if not 0 <= a < self.num_actions:
            raise IndexError(f"action {a} out of range (num_actions={self.num_actions})")

    def reset(self, rng) -> int:
        u = make_rng(rng).random()
        return min(int(np.searchsorted(self._init_cum, u, side="right")), self.num_states - 1)

    def step(self, s: int, a: int, rng) -> Transition:
        self._check(s, a)
        u = make_rng(rng).random()
        j = min(int(np.searchsorted(self._cum[s, a], u, side="right")), self.probs.shape[2] - 1)
        return Transition(
            s, a, float(self.rewards[s, a, j]), int(self.next_states[s, a, j]), bool(self.dones[s, a, j])
        )

    # vectorised counterparts used by Monte-Carlo estimators
    def reset_many(self, n: int, rng) -> np.ndarray:
        u = make_rng(rng).random(n)
        return np.minimum(np.searchsorted(self._init_cum, u, side="right"), self.num_states - 1)

    def step_many(self, s: np.ndarray, a: np.ndarray, rng):
        u = make_rng(rng).random(len(s))
        cum = self._cum[s, a]
        j = np.minimum((cum <= u[:, None]).sum(axis=1), self.probs.shape[2] - 1)
        return self.next_states[s, a, j], self.rewards[s, a, j], self.dones[s, a, j]

    def expected_rewards(self) -> np.ndarray:
        return (self.probs * self.rewards).sum(axis=2)

    def backup(self, values: np.ndarray, gamma: float = 1.0) -> np.ndarray:
        """``Q(s, a) = E[r + gamma * (1 - done) * V(s')]`` for all pairs."""
        cont = np.where(self.dones, 0.0, values[self.next_states])
        return (self.probs * (self.rewards + gamma * cont)).sum(axis=2)

    def value_iteration(self, gamma: float, tol: float = VI_TOL, max_iters: int = VI_MAX_ITERS):
        """Infinite-horizon discounted optimum: returns ``(Q*, V*)``."""
        if not 0.0 < gamma < 1.0:
            raise ValueError("discounted value iteration needs gamma in (0, 1)")
        v = np.zeros(self.num_states)
        for _ in range(max_iters):
            q = self.backup(v, gamma)
            v_new = q.max(axis=1)
            if np.max(np.abs(v_new - v)) < tol:
                return self.backup(v_new, gamma), v_new
            v = v_new
        raise ConvergenceError(f"value iteration did not reach {tol} within {max_iters} sweeps")

    def finite_horizon(self, policy: np.ndarray | None = None, horizon: int | None = None):
        """Undiscounted episodic DP over the time limit.

        With ``policy`` (``(S, A)`` probabilities) returns its per-state
        expected return; without, returns ``(values, greedy_actions)``
        where ``greedy_actions[t]`` is the optimal action with ``t`` steps
        already taken.
        """
        T = self.max_episode_steps if horizon is None else horizon
        v = np.zeros(self.num_states)
        actions = np.zeros((T, self.num_states), dtype=np.int64)
        for t in reversed(range(T)):
            q = self.backup(v, 1.0)
            if policy is None:
                actions[t] = np.argmax(q, axis=1)
                v = q.max(axis=1)
            else:
                v = (policy * q).sum(axis=1)
        return v if policy is not None else (v, actions)

    def policy_return(self, policy: np.ndarray) -> float:
        """Exact expected undiscounted return of a stationary stochastic policy."""
        return float(self.init_probs @ self.finite_horizon(policy))

    @cached_property
    def optimal_return(self) -> float:
        v, _ = self.finite_horizon()
        return float(self.init_probs @ v)

    @cached_property
    def optimal_policy(self) -> np.ndarray:
        """Stationary greedy policy from discounted value iteration (ties -> lowest id)."""
        q, _ = self.value_iteration(0.99)
        return np.argmax(np.round(q, 12), axis=1)

    def rollout_returns(self, act, episodes: int, rng) -> np.ndarray:
        """Undiscounted returns of ``episodes`` parallel rollouts.

        ``act(states, t, rng)`` maps a vector of states to actions.
        """
        rng = make_rng(rng)
        s = self.reset_many(episodes, rng)
        ret = np.zeros(episodes)
        alive = np.ones(episodes, dtype=bool)
        for t in range(self.max_episode_steps):
            idx = np.flatnonzero(alive)
            if not len(idx):
                break
            a = act(s[idx], t, rng)
            s2, r, d = self.step_many(s[idx], a, rng)
            ret[idx] += r
            s[idx] = s2
            alive[idx[d]] = False
        return ret

    @cached_property
    def random_return(self) -> float:
        """Mean return of the uniform policy over 10^4 fixed-seed episodes."""
        A = self.num_actions
        rets = self.rollout_returns(lambda s, t, rng: rng.integers(A, size=len(s)), 10_000, 12345)
        return float(rets.mean())


MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))  # up, right, down, left


class GridMaze(TabularEnv):
    name = "maze"

    def __init__(
        self,
        layout: str,
        *,
        slip_prob: float = 0.0,
        max_episode_steps: int = 100,
        diverse: bool = False,
        name: str | None = None,
    ):
        if not 0.0 <= slip_prob < 1.0:
            raise ValueError(f"slip_prob must lie in [0, 1), got {slip_prob}")
        if max_episode_steps < 1:
            raise ValueError("max_episode_steps must be positive")
        rows = [line.strip() for line in layout.strip().splitlines() if line.strip()]
        if not rows or len({len(r) for r in rows}) != 1:
            raise ValueError("maze layout must be a non-empty rectangle")
        bad = set("".join(rows)) - set("#.SG")
        if bad:
            raise ValueError(f"unknown maze characters: {sorted(bad)}")
        self.layout = "\n".join(rows)
        self.height, self.width = len(rows), len(rows[0])
        self.walls = {(i, j) for i, row in enumerate(rows) for j, c in enumerate(row) if c == "#"}
        self.cells = [(i, j) for i in range(self.height) for j in range(self.width) if (i, j) not in self.walls]
        self.cell_index = {c: n for n, c in enumerate(self.cells)}
        self.goals = [(i, j) for i, row in enumerate(rows) for j, c in enumerate(row) if c == "G"]
        marked_starts = [(i, j) for i, row in enumerate(rows) for j, c in enumerate(row) if c == "S"]
        if not self.goals:
            raise ValueError("maze needs at least one goal cell 'G'")
        if diverse:
            self.starts = [c for c in self.cells if c not in self.goals]
        else:
            if not marked_starts:
                raise ValueError("maze needs a start cell 'S'")
            self.starts = marked_starts
        self.diverse = diverse
        self.slip_prob = float(slip_prob)
        self.max_episode_steps = int(max_episode_steps)
        if name:
            self.name = name
        self._validate_paths()
        self._build()

    @classmethod
    def from_text(cls, text: str, **kw) -> "GridMaze":
        return cls(text, **kw)

    def _neighbor(self, cell, d):
        i, j = cell[0] + MOVES[d][0], cell[1] + MOVES[d][1]
        if not (0 <= i < self.height and 0 <= j < self.width) or (i, j) in self.walls:
            return cell
        return (i, j)

    def _validate_paths(self) -> None:
        for goal in self.goals:
            seen, frontier = {goal}, deque([goal])
            while frontier:
                c = frontier.popleft()
                for d in range(4):
                    n = self._neighbor(c, d)
                    if n not in seen:
                        seen.add(n)
                        frontier.append(n)
            missing = [s for s in self.starts if s not in seen and s not in self.goals]
            if missing:
                raise ValueError(f"goal {goal} unreachable from start cells {missing[:3]}")

    def encode(self, cell, goal_index: int = 0) -> int:
        return goal_index * len(self.cells) + self.cell_index[cell]

    def decode(self, s: int):
        g, c = divmod(s, len(self.cells))
        return self.cells[c], g

    def _build(self) -> None:
        C, G = len(self.cells), len(self.goals)
        S, A, K = C * G, 4, 5
        self.num_states, self.num_actions = S, A
        nxt = np.zeros((S, A, K), dtype=np.int64)
        prob = np.zeros((S, A, K))
        rew = np.zeros((S, A, K))
        done = np.zeros((S, A, K), dtype=bool)
        for g, goal in enumerate(self.goals):
            for cell in self.cells:
                s = self.encode(cell, g)
                for a in range(A):
                    if cell == goal:
                        # unreachable in practice: episodes end on arrival
                        nxt[s, a, :] = s
                        prob[s, a, 0] = 1.0
                        done[s, a, :] = True
                        continue
                    targets = [self._neighbor(cell, a)] + [self._neighbor(cell, d) for d in range(4)]
                    weights = [1.0 - self.slip_prob] + [self.slip_prob / 4] * 4
                    for k, (c2, w) in enumerate(zip(targets, weights)):
                        nxt[s, a, k] = self.encode(c2, g)
                        prob[s, a, k] = w
                        rew[s, a, k] = 1.0 if c2 == goal else 0.0
                        done[s, a, k] = c2 == goal
        init = np.zeros(S)
        for g, goal in enumerate(self.goals):
            starts = [c for c in self.starts if c != goal]
            for c in starts:
                init[self.encode(c, g)] += 1.0 / (len(starts) * G)
        self.next_states, self.probs, self.rewards, self.dones, self.init_probs = nxt, prob, rew, done, init
        self._finalize()


class Corridor(TabularEnv):
    """1-D track; actions are back / stay / forward; reward is progress made."""

    name = "corridor"

    def __init__(self, length: int, *, max_episode_steps: int | None = None, slip_prob: float = 0.0, name=None):
        if length < 2:
            raise ValueError("corridor length must be >= 2")
        if not 0.0 <= slip_prob < 1.0:
            raise ValueError("slip_prob must lie in [0, 1)")
        self.length = int(length)
        self.slip_prob = float(slip_prob)
        self.max_episode_steps = int(max_episode_steps or 2 * length)
        if name:
            self.name = name
        L, A, K = self.length, 3, 4
        self.num_states, self.num_actions = L, A
        nxt = np.zeros((L, A, K), dtype=np.int64)
        prob = np.zeros((L, A, K))
        rew = np.zeros((L, A, K))
        done = np.zeros((L, A, K), dtype=bool)
        for s in range(L):
            for a in range(A):
                if s == L - 1:
                    nxt[s, a, :] = s
                    prob[s, a, 0] = 1.0
                    done[s, a, :] = True
                    continue
                moves = [a - 1] + [d - 1 for d in range(3)]
                weights = [1.0 - self.slip_prob] + [self.slip_prob / 3] * 3
                for k, (m, w) in enumerate(zip(moves, weights)):
                    s2 = min(max(s + m, 0), L - 1)
                    nxt[s, a, k] = s2
                    prob[s, a, k] = w
                    rew[s, a, k] = s2 - s
                    done[s, a, k] = s2 == L - 1
        init = np.zeros(L)
        init[0] = 1.0
        self.next_states, self.probs, self.rewards, self.dones, self.init_probs = nxt, prob, rew, done, init
        self._finalize()


def env_step(env: TabularEnv, s: int, a: int, seed) -> Transition:
    return env.step(s, a, seed)


def optimal_return(env: TabularEnv) -> float:
    return env.optimal_return


# -- offline datasets ---------------------------------------------------------

@dataclass
class Episode:
    transitions: list[Transition]
    truncated_by_budget: bool = False

    @property
    def ret(self) -> float:
        return sum(t.reward for t in self.transitions)


def _run_episode(env: TabularEnv, act, budget: int, rng) -> Episode:
    s = env.reset(rng)
    ep: list[Transition] = []
    for t in range(min(budget, env.max_episode_steps)):
        tr = env.step(s, act(s, t, rng), rng)
        ep.append(tr)
        if tr.done:
            break
        s = tr.next_state
    cut = not ep[-1].done and len(ep) < env.max_episode_steps
    return Episode(ep, truncated_by_budget=cut)


def _collect(env: TabularEnv, act, size: int, rng, on_episode=None) -> list[Episode]:
    """Roll ``act(s, t, rng)`` until exactly ``size`` transitions are logged."""
    episodes: list[Episode] = []
    n = 0
    while n < size:
        ep = _run_episode(env, act, size - n, rng)
        n += len(ep.transitions)
        episodes.append(ep)
        if on_episode is not None:
            on_episode(ep)
    return episodes


def medium_behavior(env: TabularEnv) -> np.ndarray:
    """Stochastic behaviour policy whose expected return is half the optimum.

    Per step: with probability 0.3 act uniformly; otherwise follow the
    optimal action with probability ``q`` and act uniformly otherwise.
    ``q`` (the truncation) is found by bisection on exact returns.
    """
    A = env.num_actions
    opt = np.eye(A)[env.optimal_policy]
    uniform = np.full((env.num_states, A), 1.0 / A)
    target = MEDIUM_FRACTION * env.optimal_return

    def mix(q):
        w = (1.0 - MEDIUM_EPSILON) * q
        return w * opt + (1.0 - w) * uniform

    lo, hi = 0.0, 1.0
    if env.policy_return(mix(lo)) >= target:
        return mix(lo)
    if env.policy_return(mix(hi)) <= target:
        return mix(hi)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if env.policy_return(mix(mid)) < target:
            lo = mid
        else:
            hi = mid
    return mix(0.5 * (lo + hi))


def dataset_episodes(env: TabularEnv, tier, size: int, seed) -> list[Episode]:
    """Episodes behind :func:`generate_offline_dataset` (same draws)."""
    tier = DatasetTier(tier)
    if size < 1:
        raise ValueError("dataset size must be >= 1")
    rng = make_rng(seed)
    A = env.num_actions

    if tier is DatasetTier.RANDOM:
        return _collect(env, lambda s, t, r: int(r.integers(A)), size, rng)

    if tier is DatasetTier.MEDIUM:
        cum = np.cumsum(medium_behavior(env), axis=1)
        return _collect(
            env, lambda s, t, r: min(int(np.searchsorted(cum[s], r.random(), side="right")), A - 1), size, rng
        )

    # medium-replay: an epsilon-greedy Q-learner from scratch; learning stops
    # once its recent returns reach the medium level, logging continues
    q = np.zeros((env.num_states, A))
    target = MEDIUM_FRACTION * env.optimal_return
    recent: deque[float] = deque(maxlen=20)
    state = {"learning": True}

    def act(s, t, r):
        if r.random() < MEDIUM_EPSILON:
            return int(r.integers(A))
        best = np.flatnonzero(q[s] == q[s].max())
        return int(best[r.integers(len(best))])

    def on_episode(ep: Episode):
        if state["learning"]:
            for tr in ep.transitions:
                boot = 0.0 if tr.done else 0.99 * q[tr.next_state].max()
                q[tr.state, tr.action] += 0.5 * (tr.reward + boot - q[tr.state, tr.action])
            recent.append(ep.ret)
            if len(recent) == recent.maxlen and np.mean(recent) >= target:
                state["learning"] = False

    return _collect(env, act, size, rng, on_episode)


def generate_offline_dataset(
    env: TabularEnv, tier, size: int, seed, capacity: int | None = None
) -> ReplayBuffer:
    buf = ReplayBuffer(env.num_states, env.num_actions, capacity or max(size, 1))
    for ep in dataset_episodes(env, tier, size, seed):
        buf.extend(ep.transitions)
    return buf


# -- shipped tasks ------------------------------------------------------------

LAYOUTS = {
    # fixed start, single goal; small enough for quick smoke runs
    "play": """
#########
#S..#...#
#.#.#.#.#
#.#...#.#
#.#####.#
#...#..G#
#########
""",
    "large": """
#################
#S......#.......#
#.#####.#.#####.#
#.#...#...#...#.#
#.#.#.#####.#.#.#
#...#.....G.#...#
###.#####.###.###
#G..#...#...#..G#
#.###.#.###.#.#.#
#.....#.....#.#.#
#################
""",
    "rooms": """
###############
#G.....#......#
#......#......#
#......S......#
#......#......#
###.#######.###
#......#......#
#......#..G...#
#.............#
#G.....#......#
###############
""",
}


def make_env(spec: str) -> TabularEnv:
    """Build a task from a registered name or a maze text file.

    Names: ``maze-<layout>`` (fixed starts), ``maze-<layout>-diverse``
    (random start and goal per episode) and ``corridor``. A path to a
    file holding a grid layout builds a fixed-start maze from it.
    """
    if spec == "corridor":
        return Corridor(20, slip_prob=0.1, max_episode_steps=40, name=spec)
    if spec.startswith("maze-"):
        body = spec[len("maze-"):]
        diverse = body.endswith("-diverse")
        layout = body[: -len("-diverse")] if diverse else body
        if layout in LAYOUTS:
            steps = 60 if layout == "play" else 40
            return GridMaze(LAYOUTS[layout], slip_prob=0.1, max_episode_steps=steps, diverse=diverse, name=spec)
    path = Path(spec)
    if path.is_file():
        return GridMaze(path.read_text(), slip_prob=0.1, name=path.stem)
    known = ["corridor"] + [f"maze-{k}{d}" for k in LAYOUTS for d in ("", "-diverse")]
    raise ValueError(f"unknown env {spec!r}; expected a maze file or one of {known}")
