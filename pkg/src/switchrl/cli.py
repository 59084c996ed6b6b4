"""Command line entry point.

    switchrl pretrain --env maze-large-diverse --tier medium --out runs/large.ckpt
    switchrl run --ckpt runs/large.ckpt --controller nonmono --seeds 0..4 --out runs/large
    switchrl plot --in runs/large --out runs/large.svg
    switchrl bench --out runs/suite

Any subcommand accepts ``--config FILE`` holding ``key = value`` lines;
values from the file override the matching flags.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .controllers import CONTROLLERS, VALUE_SOURCES, ControllerConfig
from .core import ReplayBuffer
from .envs import DatasetTier, GridMaze, make_env
from .harness import (
    BENCHMARK_SUITE,
    ExperimentSpec,
    emit_outputs,
    final_return,
    find_task,
    play_online_stage,
    pretrain,
    render_svg,
    rows_from_csv,
    run_benchmark,
)
from .learner import Checkpoint, LearnerConfig

log = logging.getLogger("switchrl")

LEARNER_FLAGS = {
    "expectile_tau": float,
    "inv_temperature": float,
    "learning_rate": float,
    "batch_size": int,
    "discount": float,
    "target_update_speed": float,
    "reward_shift": float,
    "initial_value": float,
}


def parse_seeds(text: str) -> list[int]:
    """``"0..4"`` (inclusive range) or a comma list such as ``"0,3,7"``."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}; use 0..4 or 0,1,2") from None
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def read_config(path: str | Path) -> dict[str, str]:
    """``key = value`` pairs; ``#`` starts a comment, quotes around values are stripped."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value.strip("\"'")
    return out


def apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.Namespace:
    if not getattr(args, "config", None):
        return args
    actions = {a.dest: a for a in parser._actions}
    for key, value in read_config(args.config).items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            parser.error(f"config key {key!r} matches no option of this command")
        conv = action.type or str
        if isinstance(action, argparse._StoreTrueAction):
            conv = lambda v: v.lower() in ("1", "true", "yes", "on")  # noqa: E731
        try:
            setattr(args, key, conv(value))
        except (ValueError, argparse.ArgumentTypeError) as exc:
            parser.error(f"config key {key!r}: {exc}")
        if action.choices is not None and getattr(args, key) not in action.choices:
            parser.error(f"config key {key!r}: {value!r} not in {list(action.choices)}")
    return args


def _add_learner_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("learner")
    for name, kind in LEARNER_FLAGS.items():
        g.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind, default=None)


def _add_controller_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("controller")
    d = ControllerConfig()
    g.add_argument("--rho", type=float, default=d.rho, help="Homeostasis target switch rate")
    g.add_argument("--explore-fixed-steps", type=int, default=d.explore_fixed_steps)
    g.add_argument("--update-timestep", type=int, default=d.update_timestep)
    g.add_argument("--promise-k", type=int, default=d.promise_k)
    g.add_argument("--gamma", type=float, default=d.gamma, help="discount inside the promise window")
    g.add_argument("--pex-alpha", type=float, default=d.pex_alpha)
    g.add_argument("--value-source", choices=VALUE_SOURCES, default=d.value_source)


def _learner_cfg(args, base: LearnerConfig) -> LearnerConfig:
    kw = base.to_dict()
    kw.pop("reference_learning_rate", None)
    for name in LEARNER_FLAGS:
        if getattr(args, name, None) is not None:
            kw[name] = getattr(args, name)
    return LearnerConfig(**kw)


def _controller_cfg(args) -> ControllerConfig:
    return ControllerConfig(**{f.name: getattr(args, f.name) for f in fields(ControllerConfig)})


def dataset_path(ckpt: Path) -> Path:
    return ckpt.with_name(ckpt.name + ".data")


def cmd_pretrain(args) -> int:
    env = make_env(args.env)
    base = LearnerConfig.sparse() if isinstance(env, GridMaze) else LearnerConfig.dense()
    cfg = _learner_cfg(args, base)
    ckpt, dataset = pretrain(env, args.tier, args.dataset_size, cfg, args.offline_iters, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data = dataset_path(out)
    dataset.save(data)
    ckpt.meta.update(env=args.env, dataset=data.name)
    ckpt.save(out)
    log.info("wrote %s (digest %s) and %d transitions to %s", out, ckpt.digest()[:12], len(dataset), data)
    return 0


def cmd_run(args) -> int:
    ckpt_path = Path(args.ckpt)
    ckpt = Checkpoint.load(ckpt_path)
    env = make_env(args.env or ckpt.meta["env"])
    S, A = env.num_states, env.num_actions
    dataset = ReplayBuffer.load(ckpt_path.with_name(ckpt.meta.get("dataset", dataset_path(ckpt_path).name)), S, A)
    spec = ExperimentSpec(
        env=env.name,
        tier=ckpt.meta.get("tier", "medium"),
        controller=args.controller,
        controller_cfg=_controller_cfg(args),
        learner_cfg=_learner_cfg(args, ckpt.cfg),
        online_steps=args.online_steps,
        eval_interval=args.eval_interval,
        eval_episodes=args.eval_episodes,
        seeds=args.seeds,
        initial_collection_steps=args.initial_collection_steps,
        buffer_capacity=args.buffer_capacity,
    )
    out = Path(args.out)
    rows = []
    for seed in spec.seeds:
        res = play_online_stage(spec, env, ckpt, dataset, seed)
        emit_outputs(res.rows, out / f"{spec.controller}_seed{seed}", args.formats)
        c = res.counters
        log.info(
            "%s seed %d: final return %.1f, offline %d / online %d",
            spec.controller, seed, res.rows[-1].return_norm if res.rows else float("nan"),
            c.offline_count, c.online_count,
        )
        rows.extend(res.rows)
    if rows:
        emit_outputs(rows, out / spec.controller, args.formats)
    return 0


def _collect_rows(src: Path):
    if src.is_file():
        return rows_from_csv(src.read_text())
    rows = []
    # per-cell files only, so merged tables are not double counted
    for path in sorted(src.glob("*_seed*.csv")):
        rows.extend(rows_from_csv(path.read_text()))
    if not rows:
        raise SystemExit(f"no per-seed CSV files under {src}")
    return rows


def cmd_plot(args) -> int:
    rows = _collect_rows(Path(args.inp))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_svg(rows, title=args.title))
    log.info("wrote %s from %d rows", out, len(rows))
    return 0


def cmd_bench(args) -> int:
    tasks = [find_task(t) for t in args.task] if args.task else list(BENCHMARK_SUITE)
    out = Path(args.out)
    overrides = {}
    if args.online_steps is not None:
        overrides["online_steps"] = args.online_steps
    for task in tasks:
        results = run_benchmark(task, controllers=args.controllers, seeds=args.seeds, **overrides)
        rows = [r for res in results for r in res.rows]
        stem = out / task.name.replace("/", "_")
        emit_outputs(rows, stem, ("csv", "svg"))
        summary = {c: final_return([r for r in rows if r.controller == c]) for c in args.controllers}
        print(task.name, " ".join(f"{c}={v:.1f}" for c, v in summary.items()), flush=True)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="switchrl", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="generate a dataset and fit the frozen offline artifacts")
    p.add_argument("--env", required=True, help="registered env name or maze layout file")
    p.add_argument("--tier", required=True, choices=[t.value for t in DatasetTier])
    p.add_argument("--out", required=True)
    p.add_argument("--dataset-size", type=int, default=1000)
    p.add_argument("--offline-iters", type=int, default=200_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    _add_learner_flags(p)
    p.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("run", help="online stage for one controller over several seeds")
    r.add_argument("--ckpt", "--pretrained", dest="ckpt", required=True, help="checkpoint written by pretrain")
    r.add_argument("--controller", required=True, choices=CONTROLLERS)
    r.add_argument("--seeds", type=parse_seeds, default=parse_seeds("0..4"))
    r.add_argument("--out", required=True)
    r.add_argument("--env", help="override the env recorded in the checkpoint")
    r.add_argument("--online-steps", type=int, default=50_000)
    r.add_argument("--eval-interval", type=int, default=500)
    r.add_argument("--eval-episodes", type=int, default=20)
    r.add_argument("--initial-collection-steps", type=int, default=500)
    r.add_argument("--buffer-capacity", type=int, default=1_000_000)
    r.add_argument("--formats", type=lambda s: tuple(s.split(",")), default=("csv", "json"))
    r.add_argument("--config")
    _add_controller_flags(r)
    _add_learner_flags(r)
    r.set_defaults(func=cmd_run)

    pl = sub.add_parser("plot", help="render return and execution-count panels")
    pl.add_argument("--in", dest="inp", required=True, help="run directory or CSV file")
    pl.add_argument("--out", required=True)
    pl.add_argument("--title", default="")
    pl.add_argument("--config")
    pl.set_defaults(func=cmd_plot)

    b = sub.add_parser("bench", help="run the shipped benchmark suite")
    b.add_argument("--out", required=True)
    b.add_argument("--task", action="append", help="task name such as corridor/medium (repeatable)")
    b.add_argument("--controllers", type=lambda s: s.split(","), default=list(CONTROLLERS))
    b.add_argument("--seeds", type=parse_seeds, default=parse_seeds("0..4"))
    b.add_argument("--online-steps", type=int, default=None)
    b.add_argument("--config")
    b.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[args.command]
    args = apply_config(sub, args)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
