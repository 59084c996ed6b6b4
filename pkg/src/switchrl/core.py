"""Shared tabular types: transitions, replay buffers, value tables and policies.

Everything here is index based. States and actions are non-negative
integers into fixed-size spaces owned by an environment, so value
functions and policies are dense ``(num_states, num_actions)`` arrays.
"""

from __future__ import annotations

import hashlib
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

RECORD_DTYPE = np.dtype(
    [
        ("state", "<u4"),
        ("action", "<u4"),
        ("reward", "<f8"),
        ("next_state", "<u4"),
        ("done", "u1"),
    ]
)
assert RECORD_DTYPE.itemsize == 21

STREAM_NAMES = ("env", "policy", "homeo", "sampler", "eval")


def make_rng(seed: int | np.random.Generator | None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one experiment seed.

    Each stream is keyed by the CRC of its name, so adding a consumer to
    one stream never shifts the draws seen by another.
    """
    return {
        name: np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])
        for name in STREAM_NAMES
    }


def digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


class Transition(NamedTuple):
    state: int
    action: int
    reward: float
    next_state: int
    done: bool


class Batch(NamedTuple):
    """Column view of sampled transitions; ``from_online`` marks D_on origin."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    from_online: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    def transitions(self) -> list[Transition]:
        return [
            Transition(int(s), int(a), float(r), int(s2), bool(d))
            for s, a, r, s2, d in zip(
                self.states, self.actions, self.rewards, self.next_states, self.dones
            )
        ]


COLUMNS = ("state", "action", "reward", "next_state", "done")
_COLUMN_DTYPES = (np.int64, np.int64, np.float64, np.int64, bool)


class ReplayBuffer:
    """FIFO ring buffer of transitions over declared state/action spaces.

    Storage is columnar so batch sampling is a handful of fancy-index
    gathers.
    """

    def __init__(self, num_states: int, num_actions: int, capacity: int = 1_000_000):
        if capacity <= 0:
            raise ValueError(f"capacity must be positive, got {capacity}")
        if num_states <= 0 or num_actions <= 0:
            raise ValueError("num_states and num_actions must be positive")
        self.num_states = int(num_states)
        self.num_actions = int(num_actions)
        self.capacity = int(capacity)
        self._cols = self._alloc(min(self.capacity, 1024))
        self._start = 0  # physical index of the oldest record
        self._size = 0

    @staticmethod
    def _alloc(n: int) -> list[np.ndarray]:
        return [np.zeros(n, dtype=dt) for dt in _COLUMN_DTYPES]

    def __len__(self) -> int:
        return self._size

    @property
    def _room(self) -> int:
        return len(self._cols[0])

    def _grow(self) -> None:
        order = self._physical(np.arange(self._size))
        new = self._alloc(min(self.capacity, 2 * self._room))
        for dst, src in zip(new, self._cols):
            dst[: self._size] = src[order]
        self._cols = new
        self._start = 0

    def _check(self, state: int, action: int, reward: float, next_state: int) -> None:
        if not (0 <= state < self.num_states and 0 <= next_state < self.num_states):
            raise ValueError(
                f"state index out of range: {state} -> {next_state} (num_states={self.num_states})"
            )
        if not 0 <= action < self.num_actions:
            raise ValueError(f"action {action} out of range (num_actions={self.num_actions})")
        if not math.isfinite(reward):
            raise ValueError(f"reward must be finite, got {reward}")

    def push(self, t: Transition) -> None:
        self._check(t[0], t[1], t[2], t[3])
        if self._size == self._room and self._size < self.capacity:
            self._grow()
        if self._size < self.capacity:
            pos = (self._start + self._size) % self._room
            self._size += 1
        else:
            pos = self._start
            self._start = (self._start + 1) % self._room
        for col, v in zip(self._cols, t):
            col[pos] = v

    def extend(self, transitions: Sequence[Transition]) -> None:
        for t in transitions:
            self.push(t)

    def _physical(self, logical):
        return (self._start + logical) % self._room

    def columns(self, logical: np.ndarray | None = None) -> tuple[np.ndarray, ...]:
        """Column arrays for the given logical indices (default: all, oldest first)."""
        if logical is None:
            logical = np.arange(self._size)
        idx = self._physical(logical)
        return tuple(col[idx] for col in self._cols)

    def records(self) -> np.ndarray:
        """Stored records as a packed structured array, oldest first."""
        recs = np.zeros(self._size, dtype=RECORD_DTYPE)
        for name, col in zip(COLUMNS, self.columns()):
            recs[name] = col
        return recs

    def __getitem__(self, i: int) -> Transition:
        if not -self._size <= i < self._size:
            raise IndexError(i)
        pos = self._physical(i % self._size)
        s, a, r, s2, d = (col[pos] for col in self._cols)
        return Transition(int(s), int(a), float(r), int(s2), bool(d))

    def __iter__(self) -> Iterator[Transition]:
        for i in range(self._size):
            yield self[i]

    def newest(self) -> Transition:
        if not self._size:
            raise IndexError("empty buffer")
        return self[self._size - 1]

    def sample(self, n: int, rng) -> Batch:
        return UnionBuffer(self, ReplayBuffer(self.num_states, self.num_actions, 1)).sample(n, rng)

    def to_bytes(self) -> bytes:
        recs = self.records()
        return np.uint32(len(recs)).astype("<u4").tobytes() + recs.tobytes()

    @classmethod
    def from_bytes(
        cls, data: bytes, num_states: int, num_actions: int, capacity: int | None = None
    ) -> "ReplayBuffer":
        if len(data) < 4:
            raise ValueError("truncated buffer stream: missing length prefix")
        count = int(np.frombuffer(data[:4], dtype="<u4")[0])
        body = data[4:]
        if len(body) != count * RECORD_DTYPE.itemsize:
            raise ValueError(
                f"record stream length mismatch: header says {count} records, "
                f"body holds {len(body) / RECORD_DTYPE.itemsize:g}"
            )
        recs = np.frombuffer(body, dtype=RECORD_DTYPE)
        if count:
            if recs["state"].max() >= num_states or recs["next_state"].max() >= num_states:
                raise ValueError("record stream holds states beyond num_states")
            if recs["action"].max() >= num_actions:
                raise ValueError("record stream holds actions beyond num_actions")
            if not np.all(np.isfinite(recs["reward"])):
                raise ValueError("record stream holds non-finite rewards")
        buf = cls(num_states, num_actions, capacity or max(count, 1))
        keep = recs[-buf.capacity:] if count else recs
        buf._cols = buf._alloc(max(len(keep), 1))
        for name, col in zip(COLUMNS, buf._cols):
            col[: len(keep)] = keep[name]
        buf._size = len(keep)
        return buf

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path, num_states: int, num_actions: int, capacity=None):
        return cls.from_bytes(Path(path).read_bytes(), num_states, num_actions, capacity)


def buffer_push(buffer: ReplayBuffer, t: Transition) -> ReplayBuffer:
    buffer.push(t)
    return buffer


class UnionBuffer:
    """Offline dataset D_off plus the growing online buffer D_on, sampled jointly."""

    def __init__(self, offline: ReplayBuffer, online: ReplayBuffer):
        if (offline.num_states, offline.num_actions) != (online.num_states, online.num_actions):
            raise ValueError("offline and online buffers disagree on space sizes")
        self.offline = offline
        self.online = online

    def __len__(self) -> int:
        return len(self.offline) + len(self.online)

    def push(self, t: Transition) -> None:
        self.online.push(t)

    def sample(self, n: int, rng) -> Batch:
        """Draw ``n`` transitions i.i.d. and uniformly over D_off ∪ D_on."""
        n_off, total = len(self.offline), len(self)
        if total == 0:
            raise ValueError("cannot sample from an empty union buffer")
        if n <= 0:
            raise ValueError(f"sample size must be positive, got {n}")
        idx = make_rng(rng).integers(total, size=n)
        from_online = idx >= n_off
        if not n_off:
            cols = self.online.columns(idx)
        elif not from_online.any():
            cols = self.offline.columns(idx)
        else:
            a = self.offline.columns(np.minimum(idx, n_off - 1))
            b = self.online.columns(np.maximum(idx - n_off, 0))
            cols = tuple(np.where(from_online, y, x) for x, y in zip(a, b))
        return Batch(*cols, from_online)


def union_sample(u: UnionBuffer, n: int, seed) -> list[Transition]:
    return u.sample(n, seed).transitions()


def _finite(name: str, values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{name} contains non-finite entries")


@dataclass
class QTable:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"QTable needs a 2-D array, got shape {self.values.shape}")
        _finite("QTable", self.values)

    @classmethod
    def zeros(cls, num_states: int, num_actions: int) -> "QTable":
        return cls(np.zeros((num_states, num_actions)))

    @property
    def num_states(self) -> int:
        return self.values.shape[0]

    @property
    def num_actions(self) -> int:
        return self.values.shape[1]

    def greedy_values(self) -> np.ndarray:
        return self.values.max(axis=1)

    def copy(self) -> "QTable":
        return QTable(self.values.copy())


@dataclass
class ValueTable:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError(f"ValueTable needs a 1-D array, got shape {self.values.shape}")
        _finite("ValueTable", self.values)

    @classmethod
    def zeros(cls, num_states: int) -> "ValueTable":
        return cls(np.zeros(num_states))

    def copy(self) -> "ValueTable":
        return ValueTable(self.values.copy())


@dataclass
class Policy:
    """Tabular softmax policy stored as per-state action logits.

    A frozen policy marks its logits array read-only, so any in-place
    update raises instead of silently changing the offline policy.
    """

    action_logits: np.ndarray
    frozen: bool = False

    def __post_init__(self):
        self.action_logits = np.array(self.action_logits, dtype=np.float64)
        if self.action_logits.ndim != 2:
            raise ValueError("action_logits must be (num_states, num_actions)")
        _finite("Policy logits", self.action_logits)
        if self.frozen:
            self.action_logits.flags.writeable = False

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "Policy":
        return cls(np.zeros((num_states, num_actions)))

    @property
    def num_states(self) -> int:
        return self.action_logits.shape[0]

    @property
    def num_actions(self) -> int:
        return self.action_logits.shape[1]

    def freeze(self) -> "Policy":
        return Policy(self.action_logits, frozen=True)

    def thawed_copy(self) -> "Policy":
        return Policy(self.action_logits.copy(), frozen=False)

    def _check_state(self, s: int) -> None:
        if not 0 <= s < self.num_states:
            raise IndexError(f"state {s} out of range (num_states={self.num_states})")

    def probs(self, s: int) -> np.ndarray:
        self._check_state(s)
        return softmax(self.action_logits[s])

    def all_probs(self) -> np.ndarray:
        return softmax(self.action_logits, axis=1)

    def sample(self, s: int, rng) -> int:
        self._check_state(s)
        row = self.action_logits[s]
        cdf = np.cumsum(np.exp(row - row.max()))
        # one uniform draw per action keeps streams aligned across policies
        u = make_rng(rng).random() * cdf[-1]
        return min(int(np.searchsorted(cdf, u, side="right")), len(row) - 1)

    def greedy(self, s: int) -> int:
        self._check_state(s)
        return int(np.argmax(self.action_logits[s]))

    def digest(self) -> str:
        return digest(self.action_logits)


def policy_sample(p: Policy, s: int, seed) -> int:
    return p.sample(s, seed)


@dataclass
class PolicySet:
    """The pair [offline, online]; the offline member must be frozen."""

    offline: Policy
    online: Policy = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.online is None:
            self.online = Policy.uniform(self.offline.num_states, self.offline.num_actions)
        if not self.offline.frozen:
            raise ValueError("offline policy must be frozen")
        if self.online.frozen:
            raise ValueError("online policy must be trainable (frozen=False)")
        if self.offline.action_logits.shape != self.online.action_logits.shape:
            raise ValueError("offline and online policies disagree on shape")
