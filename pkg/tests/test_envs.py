import numpy as np
import pytest
from toys import OPEN_5X5

from switchrl.core import Transition
from switchrl.envs import (
    LAYOUTS,
    Corridor,
    DatasetTier,
    GridMaze,
    dataset_episodes,
    env_step,
    generate_offline_dataset,
    make_env,
    optimal_return,
)

SHIPPED = ["corridor"] + [f"maze-{k}{d}" for k in LAYOUTS for d in ("", "-diverse")]

LINE = """
#####
#S.G#
#####
"""


def test_wall_blocks_movement():
    env = GridMaze(LINE)
    s = env.encode((1, 1))
    tr = env_step(env, s, 0, 0)  # up into the wall
    assert tr == Transition(s, 0, 0.0, s, False)


def test_goal_gives_reward_and_ends():
    env = GridMaze(LINE)
    s = env.encode((1, 2))
    tr = env_step(env, s, 1, 0)
    assert (tr.reward, tr.done, env.decode(tr.next_state)[0]) == (1.0, True, (1, 3))


def test_no_slip_trajectory_is_seed_independent():
    env = GridMaze(OPEN_5X5)
    actions = [1, 1, 2, 2, 3, 2, 1, 1, 2, 1]
    paths = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        s, path = env.reset(rng), []
        for a in actions:
            tr = env.step(s, a, rng)
            path.append(tr)
            s = tr.next_state
        paths.append(path)
    assert all(p == paths[0] for p in paths)


def test_slip_moves_in_random_directions():
    env = GridMaze(OPEN_5X5, slip_prob=0.4)
    s = env.encode((3, 3))
    rng = np.random.default_rng(0)
    dest = [env.decode(env.step(s, 1, rng).next_state)[0] for _ in range(20_000)]
    freq = dest.count((3, 4)) / len(dest)
    assert freq == pytest.approx(0.6 + 0.1, abs=0.01)
    assert {(2, 3), (4, 3), (3, 2)} <= set(dest)


@pytest.mark.parametrize(
    "layout, kw",
    [("", {}), ("#S.#\n#.", {}), ("#S.X#", {}), ("#S#G#", {}), ("#..G#", {}), ("#S.G#", {"slip_prob": 1.0}),
     ("#S.G#", {"max_episode_steps": 0})],
)
def test_maze_validation(layout, kw):
    with pytest.raises(ValueError):
        GridMaze(layout, **kw)


def test_diverse_maze_folds_goal_into_state():
    env = GridMaze(LAYOUTS["large"], diverse=True)
    assert env.num_states == len(env.cells) * len(env.goals)
    assert env.decode(env.encode((1, 1), 2)) == ((1, 1), 2)
    assert env.init_probs.sum() == pytest.approx(1.0)
    # no episode starts on its own goal
    for g, goal in enumerate(env.goals):
        assert env.init_probs[env.encode(goal, g)] == 0.0


def test_corridor_rewards_progress():
    env = Corridor(5)
    assert env_step(env, 0, 2, 0) == Transition(0, 2, 1.0, 1, False)
    assert env_step(env, 0, 0, 0).reward == 0.0
    assert env_step(env, 3, 2, 0) == Transition(3, 2, 1.0, 4, True)
    with pytest.raises(ValueError):
        Corridor(1)


def test_step_rejects_bad_indices():
    env = Corridor(4)
    with pytest.raises(IndexError):
        env.step(4, 0, 0)
    with pytest.raises(IndexError):
        env.step(0, 3, 0)


def test_optimal_return_examples():
    # three moves right from S reach G
    assert optimal_return(GridMaze("######\n#S..G#\n######")) == pytest.approx(1.0)
    assert optimal_return(Corridor(12, max_episode_steps=30)) == pytest.approx(11.0)


def test_optimal_return_matches_monte_carlo():
    env = make_env("maze-play")
    _, actions = env.finite_horizon()
    rets = env.rollout_returns(lambda s, t, rng: actions[t][s], 1_000_000, 0)
    se = rets.std() / np.sqrt(len(rets))
    assert abs(rets.mean() - env.optimal_return) <= 3 * se + 1e-12


def test_value_iteration_is_a_fixed_point():
    env = make_env("maze-large")
    q, v = env.value_iteration(0.99)
    assert np.abs(env.backup(v, 0.99) - q).max() < 1e-8


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_envs_are_non_degenerate(name):
    env = make_env(name)
    assert env.optimal_return > env.random_return


def test_make_env_from_file(tmp_path):
    path = tmp_path / "tiny.txt"
    path.write_text(OPEN_5X5)
    env = make_env(str(path))
    assert isinstance(env, GridMaze) and env.name == "tiny"
    with pytest.raises(ValueError):
        make_env("maze-nowhere")


# -- datasets -------------------------------------------------------------------

def test_random_tier_covers_open_maze():
    env = GridMaze(OPEN_5X5)
    buf = generate_offline_dataset(env, "random", 10_000, 0)
    visited = set(buf.columns()[0].tolist())
    assert len(visited) / len(env.cells) >= 0.9


def test_medium_tier_reaches_half_of_optimal():
    for name in ("maze-play", "corridor"):
        env = make_env(name)
        eps = [e for e in dataset_episodes(env, "medium", 20_000, 0) if not e.truncated_by_budget]
        mean = np.mean([e.ret for e in eps])
        assert mean / env.optimal_return == pytest.approx(0.5, abs=0.1)


def test_size_one_dataset():
    buf = generate_offline_dataset(Corridor(5), DatasetTier.MEDIUM, 1, 0)
    assert len(buf) == 1


@pytest.mark.parametrize("tier", [t.value for t in DatasetTier])
def test_dataset_exact_size_and_determinism(tier):
    env = make_env("maze-play")
    a = generate_offline_dataset(env, tier, 777, 3)
    b = generate_offline_dataset(env, tier, 777, 3)
    assert len(a) == 777
    assert a.to_bytes() == b.to_bytes()
    assert a.to_bytes() != generate_offline_dataset(env, tier, 777, 4).to_bytes()


@pytest.mark.parametrize("name", SHIPPED)
def test_tier_ordering(name):
    env = make_env(name)
    for seed in (0, 1):
        means = {
            tier: np.mean([e.ret for e in dataset_episodes(env, tier, 2000, seed)])
            for tier in ("random", "medium")
        }
        assert means["random"] < means["medium"]


@pytest.mark.parametrize("tier", [t.value for t in DatasetTier])
def test_episodes_end_by_done_or_time_limit(tier):
    env = make_env("corridor")
    eps = dataset_episodes(env, tier, 3000, 0)
    for ep in eps[:-1]:
        assert ep.transitions[-1].done or len(ep.transitions) == env.max_episode_steps
    # only the final episode may be cut by the size budget
    assert sum(e.truncated_by_budget for e in eps) <= 1
    assert sum(len(e.transitions) for e in eps) == 3000


def test_unknown_tier_rejected():
    with pytest.raises(ValueError):
        generate_offline_dataset(Corridor(5), "expert", 10, 0)
    with pytest.raises(ValueError):
        generate_offline_dataset(Corridor(5), "random", 0, 0)
