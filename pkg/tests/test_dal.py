"""Augmentation-loop tests: sampling ranges, task variants, harvesting."""

import numpy as np
import pytest

from hierdex.dal import (
    DalConfig,
    SCALE_HIGH,
    SCALE_LOW,
    augmented_tasks,
    dal_iteration,
    harvest,
    randomized_eval,
    sample_goal_offset,
    sample_scales,
    write_dal_report,
)
from hierdex.env import BimanualEnv, HOME_LEFT, HOME_RIGHT
from hierdex.expert import Demo, DemoSet, gen_dataset
from hierdex.geom import ObjectState, Rot, WristAction
from hierdex.planner import Planner, PlannerConfig
from hierdex.rl import PpoConfig, make_policy, make_value
from hierdex.traj import GOAL_OFFSET_RANGE, GoalTrajectory


def small_planner(catalog):
    cfg = PlannerConfig(category_count=len(catalog), d_model=16, head_hidden=16)
    return Planner(catalog, cfg, np.random.default_rng(0))


def probe_policy(catalog, g, hidden=(16, 16), seed=0):
    env = BimanualEnv(catalog[0], g, np.random.default_rng(0))
    rng = np.random.default_rng(seed)
    return (
        make_policy(env.obs_dim("teacher"), 12 + 2 * env.n_fingers, rng, hidden=hidden),
        make_value(env.obs_dim("teacher"), rng, hidden=hidden),
    )


def static_goal(n=40, pos=(0.0, 0.0, 0.0)):
    return GoalTrajectory(
        [ObjectState(Rot.identity(), np.array(pos), None) for _ in range(n)]
    )


def manual_demo(n=30, pos=(0.0, 0.0, 0.0), cid=0):
    states = [ObjectState(Rot.identity(), np.array(pos), None) for _ in range(n)]
    wrists = [WristAction(HOME_LEFT.copy(), HOME_RIGHT.copy()) for _ in range(n)]
    closures = [np.zeros((2, 4)) for _ in range(n)]
    tips = [np.zeros((2, 4, 3)) for _ in range(n)]
    return Demo(cid, states, wrists, closures, tips, tag="trained")


def test_sample_ranges_and_coverage():
    rng = np.random.default_rng(0)
    scales = np.array([sample_scales(rng) for _ in range(2000)])
    offsets = np.array([sample_goal_offset(rng) for _ in range(2000)])
    assert scales.min() >= SCALE_LOW and scales.max() <= SCALE_HIGH
    assert np.abs(offsets).max() <= GOAL_OFFSET_RANGE
    # both tails of each range are actually visited
    assert scales.min() < SCALE_LOW + 0.01
    assert scales.max() > SCALE_HIGH - 0.01
    assert offsets.min() < -GOAL_OFFSET_RANGE + 0.002
    assert offsets.max() > GOAL_OFFSET_RANGE - 0.002


def test_dal_config_validation():
    with pytest.raises(ValueError, match="iteration"):
        DalConfig(iterations=0)


def test_augmented_tasks_counts_and_nominals(catalog):
    ds = gen_dataset(
        [catalog[0], catalog[4]], per_category=3, steps=60,
        rng=np.random.default_rng(1),
    )
    cfg = DalConfig(variants_per_demo=2)
    tasks = augmented_tasks(catalog, ds, cfg, np.random.default_rng(2))
    trained = ds.split("trained")
    assert len(tasks) == len(trained) * 3
    # every demo contributes one unmodified task followed by scaled variants
    k = 0
    for demo in trained:
        spec0, g0 = tasks[k]
        assert spec0.category_id == demo.category_id
        assert np.allclose(spec0.dims, catalog[demo.category_id].dims)
        assert np.allclose(g0.states[0].q7(), demo.object_states[0].q7())
        for spec_v, g_v in tasks[k + 1 : k + 3]:
            ratio = spec_v.dims / catalog[demo.category_id].dims
            assert np.all(ratio >= SCALE_LOW - 1e-12)
            assert np.all(ratio <= SCALE_HIGH + 1e-12)
            assert len(g_v) == len(demo.object_states)
        k += 3


def test_augmented_tasks_requires_trained_demos(catalog):
    with pytest.raises(ValueError, match="trained split"):
        augmented_tasks(catalog, DemoSet([]), DalConfig(), np.random.default_rng(0))


def test_harvest_keeps_only_complete_episodes(catalog):
    g = static_goal(40)
    planner = small_planner(catalog)
    policy, _ = probe_policy(catalog, g)
    # a grace window longer than any episode means every rollout completes
    ppo = PpoConfig(grace_steps=10_000, noise=False, hidden=(16, 16))
    cfg = DalConfig(harvest_episodes=3)
    kept, completions = harvest(
        planner, policy, [(catalog[0], g)], ppo, cfg, np.random.default_rng(0)
    )
    assert len(completions) == 3
    assert completions == [1.0, 1.0, 1.0]
    assert len(kept) == 3
    for demo in kept.demos:
        assert demo.tag == "harvest"
        assert len(demo) == len(g)
        assert demo.goal().category_id == g.category_id
    # recorded wrists are live poses, not the planner's commands
    assert np.all(np.isfinite(kept.demos[0].wrist_poses[0].q14()))


def test_harvest_drops_failed_episodes(catalog):
    # object spawns in the air and falls away from a hovering goal
    g = static_goal(30, pos=(0.5, 0.5, 0.3))
    planner = small_planner(catalog)
    policy, _ = probe_policy(catalog, g)
    ppo = PpoConfig(grace_steps=0, noise=False, hidden=(16, 16))
    cfg = DalConfig(harvest_episodes=3)
    kept, completions = harvest(
        planner, policy, [(catalog[0], g)], ppo, cfg, np.random.default_rng(0)
    )
    assert len(kept) == 0
    assert all(c < 1.0 for c in completions)


def test_dal_iteration_skips_finetune_on_empty_harvest(catalog):
    ds = DemoSet([manual_demo(30, pos=(0.5, 0.5, 0.3))])
    planner = small_planner(catalog)
    g = ds.demos[0].goal()
    policy, value_net = probe_policy(catalog, g)
    ppo = PpoConfig(
        grace_steps=0, noise=False, hidden=(16, 16), steps_per_update=16, epochs=1
    )
    cfg = DalConfig(
        iterations=1, variants_per_demo=1, rl_updates_per_iter=1, harvest_episodes=2
    )
    before = [p.copy() for p in planner.params()]
    with pytest.warns(UserWarning, match="no episode reached full"):
        policy, value_net, new_demos, row = dal_iteration(
            planner, policy, value_net, ds, DemoSet(), catalog, cfg, ppo,
            np.random.default_rng(0),
        )
    assert len(new_demos) == 0
    assert row["harvested"] == 0
    assert row["episodes"] == 2
    for a, b in zip(before, planner.params()):
        assert np.array_equal(a, b)


def test_dal_iteration_finetunes_on_success(catalog):
    ds = DemoSet([manual_demo(40)])
    planner = small_planner(catalog)
    g = ds.demos[0].goal()
    policy, value_net = probe_policy(catalog, g)
    ppo = PpoConfig(
        grace_steps=10_000, noise=False, hidden=(16, 16),
        steps_per_update=16, epochs=1,
    )
    cfg = DalConfig(
        iterations=1, variants_per_demo=1, rl_updates_per_iter=1,
        harvest_episodes=2, finetune_epochs=1,
    )
    before = [p.copy() for p in planner.params()]
    policy, value_net, new_demos, row = dal_iteration(
        planner, policy, value_net, ds, DemoSet(), catalog, cfg, ppo,
        np.random.default_rng(0),
    )
    assert row["harvested"] == 2
    changed = any(not np.array_equal(a, b) for a, b in zip(before, planner.params()))
    assert changed


def test_randomized_eval_paired_and_bounded(catalog):
    ds = gen_dataset(
        [catalog[0], catalog[4]], per_category=2, steps=60,
        rng=np.random.default_rng(4),
    )
    planner = small_planner(catalog)
    g = ds.demos[0].goal()
    policy, _ = probe_policy(catalog, g)
    ppo = PpoConfig(noise=False, hidden=(16, 16))
    c1 = randomized_eval(planner, policy, catalog, ds, ppo, seeds=3)
    c2 = randomized_eval(planner, policy, catalog, ds, ppo, seeds=3)
    assert c1 == c2  # same seeds build the same episodes
    assert len(c1) == 3
    assert all(0.0 <= c <= 1.0 for c in c1)
    with pytest.raises(ValueError, match="trained split"):
        randomized_eval(planner, policy, catalog, DemoSet([]), ppo, seeds=1)


def test_dal_report_csv(tmp_path):
    rows = [
        {"iteration": 0, "episodes": 8, "harvested": 3,
         "completion_mean": 0.7, "completion_std": 0.2},
        {"iteration": 1, "episodes": 8, "harvested": 5,
         "completion_mean": 0.9, "completion_std": 0.1},
    ]
    path = str(tmp_path / "dal.csv")
    write_dal_report(rows, path)
    with open(path) as fh:
        lines = fh.read().strip().splitlines()
    assert lines[0] == "iteration,episodes,harvested,completion_mean,completion_std"
    assert len(lines) == 3
    assert lines[1].startswith("0,8,3,")
