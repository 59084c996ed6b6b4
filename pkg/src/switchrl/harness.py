"""Offline stage, online stage and metric outputs.

A run pre-trains (or loads) the frozen offline artifacts once, then plays
the online loop for each controller and seed:

    select actor/action -> env step -> push to D_on -> controller observes
    -> one online update (after warm-up) -> periodic greedy evaluation

Every row records normalized return, cumulative execution counts of both
policies, both policies' entropies and the switch events of the interval.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .controllers import (
    CONTROLLERS,
    OFFLINE,
    ONLINE,
    ControllerConfig,
    ExecutionCounters,
    NonMonolithic,
    make_controller,
    policy_entropy,
)
from .core import Policy, PolicySet, ReplayBuffer, UnionBuffer, rng_streams
from .envs import TabularEnv, generate_offline_dataset, make_env
from .learner import Checkpoint, LearnerConfig, LearnerDivergedError, TabularIQL, offline_pretrain, online_update

log = logging.getLogger(__name__)

CSV_FIELDS = (
    "step", "controller", "seed", "return_norm", "offline_count",
    "online_count", "entropy_off", "entropy_on", "switches",
)
SEED_OFFSET_ENV = "SWITCHRL_SEED_OFFSET"
PLOT_LABELS = {"nonmono": "OurModel", "pex": "PEX", "offline": "Offline", "buffer": "Buffer"}


class StageError(RuntimeError):
    """Online-stage failure carrying the offending step index."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"online stage aborted at step {step}: {cause}")
        self.step = step


@dataclass
class ExperimentSpec:
    env: str = "maze-play"
    tier: str = "medium"
    controller: str = "nonmono"
    controller_cfg: ControllerConfig = field(default_factory=ControllerConfig)
    learner_cfg: LearnerConfig = field(default_factory=LearnerConfig)
    offline_iters: int = 200_000
    online_steps: int = 50_000
    eval_interval: int = 500
    eval_episodes: int = 20
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    initial_collection_steps: int = 500
    dataset_size: int = 10_000
    buffer_capacity: int = 1_000_000

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.controller not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}")
        if self.online_steps < 0 or self.eval_interval < 1:
            raise ValueError("online_steps must be >= 0 and eval_interval >= 1")
        if self.online_steps and self.online_steps < self.eval_interval:
            raise ValueError("online_steps must be >= eval_interval")
        if self.initial_collection_steps < 0 or self.eval_episodes < 1:
            raise ValueError("initial_collection_steps >= 0 and eval_episodes >= 1 required")


@dataclass
class MetricsRow:
    step: int
    controller: str
    seed: int
    return_norm: float
    offline_count: int
    online_count: int
    entropy_off: float
    entropy_on: float
    switches: int


def seed_offset() -> int:
    return int(os.environ.get(SEED_OFFSET_ENV, "0") or 0)


def normalized_return(raw: float, env: TabularEnv) -> float:
    """Scale so the uniform policy scores 0 and the optimal policy 100."""
    lo, hi = env.random_return, env.optimal_return
    if not hi > lo:
        raise ValueError(f"degenerate task: optimal return {hi} does not exceed random return {lo}")
    return 100.0 * (raw - lo) / (hi - lo)


def pretrain(
    env: TabularEnv, tier: str, dataset_size: int, cfg: LearnerConfig, iters: int, seed: int
) -> tuple[Checkpoint, ReplayBuffer]:
    dataset = generate_offline_dataset(env, tier, dataset_size, seed)
    policy, q, v = offline_pretrain(dataset, cfg, iters, seed)
    meta = {"env": env.name, "tier": str(tier), "dataset_size": dataset_size, "offline_iters": iters, "seed": seed}
    return Checkpoint(policy, q, v, cfg, meta), dataset


def _greedy_table(ctrl, num_states: int) -> np.ndarray | None:
    if isinstance(ctrl, NonMonolithic):
        return None
    return np.array([ctrl.greedy_action(s)[0] for s in range(num_states)], dtype=np.int64)


def evaluate(ctrl, env: TabularEnv, episodes: int, rng) -> float:
    """Mean undiscounted return of greedy rollouts of the composite policy."""
    table = _greedy_table(ctrl, env.num_states)
    if table is not None:
        return float(env.rollout_returns(lambda s, t, r: table[s], episodes, rng).mean())
    twin = ctrl.greedy_evaluator(rng)
    total = 0.0
    for _ in range(episodes):
        s = env.reset(rng)
        twin.begin_episode(s)
        for t in range(env.max_episode_steps):
            a, _ = twin.select(s, t, rng)
            tr = env.step(s, a, rng)
            twin.observe(t, tr)
            total += tr.reward
            if tr.done:
                break
            s = tr.next_state
    return total / episodes


@dataclass
class StageResult:
    """Everything one (controller, seed) online stage produced."""

    rows: list[MetricsRow]
    counters: ExecutionCounters
    online_updates: int
    switch_steps: list[int]
    learner: TabularIQL
    controller: object


def run_online_stage(
    spec: ExperimentSpec,
    env: TabularEnv,
    ckpt: Checkpoint,
    dataset: ReplayBuffer,
    seed: int,
    controller: str | None = None,
    trace: list | None = None,
) -> list[MetricsRow]:
    """Metric rows of :func:`play_online_stage`."""
    return play_online_stage(spec, env, ckpt, dataset, seed, controller, trace).rows


def play_online_stage(
    spec: ExperimentSpec,
    env: TabularEnv,
    ckpt: Checkpoint,
    dataset: ReplayBuffer,
    seed: int,
    controller: str | None = None,
    trace: list | None = None,
) -> StageResult:
    """Play the online stage for one controller and seed.

    ``trace``, when given, receives one ``(t, state, action, acted,
    reward)`` tuple per environment step.
    """
    name = controller or spec.controller
    S, A = env.num_states, env.num_actions
    if ckpt.q.values.shape != (S, A):
        raise ValueError("checkpoint does not match the environment's spaces")
    streams = rng_streams(seed + seed_offset())
    learner = TabularIQL(S, A, spec.learner_cfg, q=ckpt.q, v=ckpt.v, policy=Policy.uniform(S, A))
    pols = PolicySet(ckpt.policy, learner.policy)
    ctrl = make_controller(
        name, pols, spec.controller_cfg,
        q_off=ckpt.q, v_off=ckpt.v, q_online=learner.q, homeo_rng=streams["homeo"],
    )
    union = UnionBuffer(dataset, ReplayBuffer(S, A, spec.buffer_capacity))
    counters = ExecutionCounters()
    visited = np.zeros(S, dtype=bool)
    visited[dataset.columns()[0]] = True

    rows: list[MetricsRow] = []
    self_updates = 0
    switches_before = 0
    handoffs = 0
    last_actor = None
    s = env.reset(streams["env"])
    ctrl.begin_episode(s)
    ep_len = 0
    for t in range(spec.online_steps):
        a, acted = ctrl.select(s, t, streams["policy"])
        counters.record(acted)
        if acted == ONLINE and last_actor == OFFLINE:
            handoffs += 1
        last_actor = acted
        tr = env.step(s, a, streams["env"])
        union.push(tr)
        visited[tr.state] = True
        ctrl.observe(t, tr)
        if trace is not None:
            trace.append((t, s, a, acted, tr.reward))
        if ctrl.trains_online and t >= spec.initial_collection_steps:
            try:
                online_update(learner, union, streams["sampler"])
            except LearnerDivergedError as exc:
                raise StageError(t, exc) from exc
            self_updates += 1
        ep_len += 1
        if tr.done or ep_len >= env.max_episode_steps:
            s = env.reset(streams["env"])
            ctrl.begin_episode(s)
            ep_len = 0
        else:
            s = tr.next_state

        if (t + 1) % spec.eval_interval == 0:
            raw = evaluate(ctrl, env, spec.eval_episodes, streams["eval"])
            states = np.flatnonzero(visited)
            switches = ctrl.switches if isinstance(ctrl, NonMonolithic) else handoffs
            rows.append(
                MetricsRow(
                    step=t + 1,
                    controller=name,
                    seed=seed,
                    return_norm=normalized_return(raw, env),
                    offline_count=counters.offline_count,
                    online_count=counters.online_count,
                    entropy_off=policy_entropy(pols.offline, states),
                    entropy_on=policy_entropy(pols.online, states),
                    switches=switches - switches_before,
                )
            )
            switches_before = switches
    return StageResult(rows, counters, self_updates, list(getattr(ctrl, "switch_steps", [])), learner, ctrl)


def run_experiment(
    spec: ExperimentSpec,
    env: TabularEnv,
    ckpt: Checkpoint,
    dataset: ReplayBuffer,
    controllers: Sequence[str] | None = None,
) -> list[MetricsRow]:
    """Every (controller, seed) cell against one shared checkpoint."""
    ref = ckpt.digest()
    rows: list[MetricsRow] = []
    for name in controllers or [spec.controller]:
        for seed in spec.seeds:
            rows.extend(run_online_stage(spec, env, ckpt, dataset, seed, controller=name))
            if ckpt.digest() != ref:
                raise RuntimeError("offline checkpoint changed during the online stage")
    return rows


# -- shipped benchmark suite ---------------------------------------------------

@dataclass(frozen=True)
class BenchmarkTask:
    """One row of the shipped suite: env, dataset tier and tuned modulator."""

    env: str
    tier: str
    dataset_size: int = 1000
    rho: float = 0.9
    promise_k: int = 10

    @property
    def name(self) -> str:
        return f"{self.env}/{self.tier}"

    @property
    def sparse(self) -> bool:
        return self.env.startswith("maze")

    def spec(self, controller: str = "nonmono", seeds: Sequence[int] = (0, 1, 2, 3, 4), **overrides) -> ExperimentSpec:
        learner = LearnerConfig.sparse() if self.sparse else LearnerConfig.dense()
        kw = dict(
            env=self.env,
            tier=self.tier,
            controller=controller,
            controller_cfg=ControllerConfig(rho=self.rho, promise_k=self.promise_k),
            learner_cfg=learner,
            offline_iters=SUITE_OFFLINE_ITERS,
            online_steps=SUITE_ONLINE_STEPS,
            seeds=list(seeds),
            dataset_size=self.dataset_size,
        )
        kw.update(overrides)
        return ExperimentSpec(**kw)


SUITE_OFFLINE_ITERS = 20_000
SUITE_ONLINE_STEPS = 20_000
BENCHMARK_SUITE = (
    BenchmarkTask("maze-large-diverse", "medium"),
    BenchmarkTask("maze-large-diverse", "random"),
    BenchmarkTask("maze-rooms-diverse", "medium"),
    BenchmarkTask("maze-rooms-diverse", "random"),
    BenchmarkTask("corridor", "medium", promise_k=2),
    BenchmarkTask("corridor", "random", promise_k=2),
)


def find_task(name: str) -> BenchmarkTask:
    for task in BENCHMARK_SUITE:
        if task.name == name:
            return task
    raise KeyError(f"unknown benchmark {name!r}; known: {[t.name for t in BENCHMARK_SUITE]}")


def run_benchmark(
    task: BenchmarkTask,
    controllers: Sequence[str] = CONTROLLERS,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    checkpoint_seed: int = 0,
    **overrides,
) -> list[StageResult]:
    """Pre-train once, then play every (controller, seed) cell on that checkpoint."""
    env = make_env(task.env)
    spec = task.spec(seeds=seeds, **overrides)
    ckpt, dataset = pretrain(env, task.tier, spec.dataset_size, spec.learner_cfg, spec.offline_iters, checkpoint_seed)
    ref = ckpt.digest()
    results = []
    for name in controllers:
        for seed in seeds:
            results.append(play_online_stage(spec, env, ckpt, dataset, seed, controller=name))
            if ckpt.digest() != ref:
                raise RuntimeError("offline checkpoint changed during the online stage")
    return results


def final_return(rows: Sequence[MetricsRow], tail: int = 5) -> float:
    """Mean normalized return over the last ``tail`` eval points and all seeds."""
    by_seed: dict[int, list[MetricsRow]] = {}
    for r in rows:
        by_seed.setdefault(r.seed, []).append(r)
    if not by_seed:
        raise ValueError("no rows")
    per_seed = [np.mean([r.return_norm for r in sorted(rs, key=lambda r: r.step)[-tail:]]) for rs in by_seed.values()]
    return float(np.mean(per_seed))


# -- outputs ------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def rows_to_csv(rows: Iterable[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        w.writerow([_fmt(getattr(r, f)) for f in CSV_FIELDS])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[MetricsRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_FIELDS:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    return [_coerce(d) for d in reader]


def _coerce(d: dict) -> MetricsRow:
    kinds = {f.name: f.type for f in fields(MetricsRow)}
    out = {}
    for k in CSV_FIELDS:
        kind = kinds[k]
        out[k] = d[k] if kind == "str" else (int(d[k]) if kind == "int" else float(d[k]))
    return MetricsRow(**out)


def rows_to_json(rows: Iterable[MetricsRow]) -> str:
    return json.dumps([asdict(r) for r in rows], indent=1)


def rows_from_json(text: str) -> list[MetricsRow]:
    return [_coerce(d) for d in json.loads(text)]


def aggregate(rows: Iterable[MetricsRow]) -> dict[str, dict[str, np.ndarray]]:
    """Per-controller mean and standard error over seeds at each eval step."""
    by: dict[str, dict[int, list[MetricsRow]]] = {}
    for r in rows:
        by.setdefault(r.controller, {}).setdefault(r.step, []).append(r)
    out = {}
    for name, steps in by.items():
        order = sorted(steps)
        def stat(attr):
            vals = [np.array([getattr(r, attr) for r in steps[k]], dtype=float) for k in order]
            mean = np.array([v.mean() for v in vals])
            se = np.array([v.std(ddof=1) / math.sqrt(len(v)) if len(v) > 1 else 0.0 for v in vals])
            return mean, se
        ret, ret_se = stat("return_norm")
        off, _ = stat("offline_count")
        on, _ = stat("online_count")
        out[name] = {"step": np.array(order), "return": ret, "return_se": ret_se, "offline": off, "online": on}
    return out


def moving_average(x: np.ndarray, window: int = 5) -> np.ndarray:
    """Centered moving average that shrinks its window at the edges."""
    x = np.asarray(x, dtype=float)
    half = window // 2
    return np.array([x[max(0, i - half): i + half + 1].mean() for i in range(len(x))])


def render_svg(rows: Sequence[MetricsRow], title: str = "") -> str:
    if not rows:
        raise ValueError("cannot plot an empty metrics table")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    agg = aggregate(rows)
    with matplotlib.rc_context({"svg.fonttype": "none", "svg.hashsalt": "switchrl"}):
        fig, (ax_ret, ax_cnt) = plt.subplots(1, 2, figsize=(11, 4))
        for name in [c for c in CONTROLLERS if c in agg]:
            a = agg[name]
            label = PLOT_LABELS.get(name, name)
            mean = moving_average(a["return"])
            se = moving_average(a["return_se"])
            (line,) = ax_ret.plot(a["step"], mean, label=label)
            ax_ret.fill_between(a["step"], mean - se, mean + se, alpha=0.2, color=line.get_color())
            if name in ("nonmono", "pex"):
                ax_cnt.plot(a["step"], a["offline"], label=f"{label}_Offline", linestyle="--")
                ax_cnt.plot(a["step"], a["online"], label=f"{label}_Online")
        ax_ret.set_xlabel("environment steps")
        ax_ret.set_ylabel("normalized return")
        ax_ret.set_title(title or "Normalized return")
        ax_ret.legend(loc="lower right")
        ax_cnt.set_xlabel("environment steps")
        ax_cnt.set_ylabel("execution count")
        ax_cnt.set_title("Execution count")
        if ax_cnt.lines:
            ax_cnt.legend(loc="upper left")
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    return buf.getvalue()


def emit_outputs(rows: Sequence[MetricsRow], out: str | Path, formats: Iterable[str] = ("csv", "json")) -> list[Path]:
    """Write rows as ``<out>.csv`` / ``.json`` / ``.svg``; returns the paths."""
    out = Path(out)
    written = []
    for fmt in formats:
        path = out.with_suffix(f".{fmt}")
        if fmt == "csv":
            text = rows_to_csv(rows)
        elif fmt == "json":
            text = rows_to_json(rows)
        elif fmt == "svg":
            text = render_svg(rows)
        else:
            raise ValueError(f"unknown output format {fmt!r}")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        written.append(path)
    return written
