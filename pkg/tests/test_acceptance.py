"""End-to-end acceptance checks for the whole stack.

The fast oracle checks (reward, rotation metrics, completion metric, bound
enforcement, sampler ranges, gradients, fusion) run in seconds. The heavy
checks share module fixtures: one synthetic dataset, one cloned planner,
three PPO controllers, one augmentation run, one distilled student. Fixture
build times are recorded in BUILD so every check can enforce its runtime
budget on top of the comparisons it makes.
"""

import copy
import json
import math
import os
import time
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from hierdex.cli import main as cli_main
from hierdex.dal import (
    DalConfig,
    dal_run,
    randomized_eval,
    sample_goal_offset,
    sample_scales,
)
from hierdex.deploy import (
    CameraModel,
    DistillConfig,
    FusionConfig,
    dagger_distill,
    fuse_poses,
    simulate_camera_estimates,
)
from hierdex.env import (
    INIT_YAW_MAX,
    BimanualEnv,
    default_catalog,
    sample_init_perturbation,
)
from hierdex.evaluation import (
    CompletionThresholds,
    completion_rate,
    mpc_baseline,
    violates,
)
from hierdex.expert import gen_dataset, reference_task, replay_demo
from hierdex.geom import (
    ObjectState,
    Pose,
    Rot,
    quat_angle,
    rot_frobenius_error,
)
from hierdex.net import Mlp, WindowNet
from hierdex.planner import Planner, eval_planner, train_bc
from hierdex.rl import (
    PpoConfig,
    RewardWeights,
    WristAction,
    hierarchical_commands,
    reward,
    rollout,
    tasks_from_demos,
    train_controller,
)
from hierdex.traj import resample_interp, resample_skip

BUILD: dict[str, float] = {}  # fixture build times, seconds


def random_rot(rng):
    axis = rng.standard_normal(3)
    return Rot.from_axis_angle(axis, float(rng.uniform(0.0, np.pi)))


# -- shared artifacts ---------------------------------------------------------


@pytest.fixture(scope="module")
def catalog():
    return default_catalog()


@pytest.fixture(scope="module")
def dataset(catalog):
    t0 = time.perf_counter()
    ds = gen_dataset(catalog, 10, 200, np.random.default_rng(0), workers=1)
    BUILD["dataset"] = time.perf_counter() - t0
    return ds


@pytest.fixture(scope="module")
def bc_planner(catalog, dataset):
    t0 = time.perf_counter()
    planner = Planner(catalog, rng=np.random.default_rng(42))
    train_bc(planner, dataset, rng=np.random.default_rng(43))
    BUILD["bc"] = time.perf_counter() - t0
    return planner


@pytest.fixture(scope="module")
def ref(catalog):
    return reference_task(catalog)


ACC_PPO = PpoConfig()  # hierarchical, 200 updates of 2048 steps


@pytest.fixture(scope="module")
def ours_ref(bc_planner, ref):
    spec, g = ref
    t0 = time.perf_counter()
    policy, value_net, history = train_controller(
        bc_planner, [(spec, g)], ACC_PPO, np.random.default_rng(101)
    )
    BUILD["ours_ref"] = time.perf_counter() - t0
    return policy, value_net, history


@pytest.fixture(scope="module")
def vanilla_ref(ref):
    spec, g = ref
    cfg = replace(ACC_PPO, mode="vanilla")
    t0 = time.perf_counter()
    policy, value_net, history = train_controller(
        None, [(spec, g)], cfg, np.random.default_rng(102)
    )
    BUILD["vanilla_ref"] = time.perf_counter() - t0
    return policy, value_net, history


@pytest.fixture(scope="module")
def ours_full(bc_planner, catalog, dataset):
    tasks = tasks_from_demos(catalog, dataset.split("trained"))
    t0 = time.perf_counter()
    policy, value_net, history = train_controller(
        bc_planner, tasks, ACC_PPO, np.random.default_rng(103)
    )
    BUILD["ours_full"] = time.perf_counter() - t0
    return policy, value_net, history


@pytest.fixture(scope="module")
def dal_result(bc_planner, catalog, dataset, ours_full):
    planner = copy.deepcopy(bc_planner)
    policy = copy.deepcopy(ours_full[0])
    value_net = copy.deepcopy(ours_full[1])
    t0 = time.perf_counter()
    policy, value_net, harvested, rows = dal_run(
        planner,
        policy,
        value_net,
        dataset,
        catalog,
        DalConfig(),
        ACC_PPO,
        np.random.default_rng(104),
    )
    BUILD["dal"] = time.perf_counter() - t0
    return planner, policy, rows


@pytest.fixture(scope="module")
def student(bc_planner, ref, ours_ref):
    spec, g = ref
    t0 = time.perf_counter()
    policy, rows = dagger_distill(
        bc_planner,
        ours_ref[0],
        [(spec, g)],
        ACC_PPO,
        DistillConfig(),
        np.random.default_rng(105),
    )
    BUILD["distill"] = time.perf_counter() - t0
    return policy, rows


def mean_completion(planner, policy, spec, g, cfg, seeds=10):
    """Deterministic-policy completion, suite protocol: per-seed env noise
    stream, 40-step grace, unperturbed start."""
    th = CompletionThresholds(grace_steps=40)
    out = []
    for seed in range(seeds):
        env = BimanualEnv(spec, g, np.random.default_rng([seed, 5]), noise=True)
        _, stats = rollout(
            env,
            planner,
            policy,
            g,
            cfg,
            np.random.default_rng([seed, 7]),
            thresholds=th,
            deterministic=True,
            collect=False,
        )
        out.append(stats["completion"])
    return float(np.mean(out))


# -- 1: reward oracle ---------------------------------------------------------


def test_reward_oracle_and_monotonicity():
    w = RewardWeights()
    assert (w.rot, w.trans, w.joint) == (20.0, 1.0, 5.0)

    rng = np.random.default_rng(7)
    origin = ObjectState(Rot.identity(), np.zeros(3), 0.0)

    def state(ang, te, je):
        axis = rng.standard_normal(3)
        return ObjectState(
            Rot.from_axis_angle(axis, ang), np.array([te, 0.0, 0.0]), je
        )

    triples = []
    for _ in range(1000):
        base = [
            float(rng.uniform(0.01, 1.4)),
            float(rng.uniform(0.01, 0.9)),
            float(rng.uniform(0.01, 0.9)),
        ]
        worse = list(base)
        worse[int(rng.integers(3))] += float(rng.uniform(1e-3, 0.05))
        triples.append((state(*base), state(*worse)))

    goal = ObjectState(Rot.identity(), np.zeros(3), 0.3)
    same = ObjectState(Rot.identity(), np.zeros(3), 0.3)
    shifted = ObjectState(Rot.identity(), np.array([0.05, 0.0, 0.0]), 0.3)

    t0 = time.perf_counter()
    exact_one = reward(goal, same, w)
    exp_gap = abs(reward(goal, shifted, w) - math.exp(-0.05))
    non_monotone = 0
    for base_state, worse_state in triples:
        if reward(origin, worse_state, w) >= reward(origin, base_state, w):
            non_monotone += 1
    elapsed = time.perf_counter() - t0

    assert exact_one == 1.0
    assert exp_gap < 1e-12
    assert non_monotone == 0
    assert elapsed < 1.0


# -- 2: rotation-metric identities -------------------------------------------


def test_rotation_metric_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    for _ in range(1000):
        a, b = random_rot(rng), random_rot(rng)
        theta = quat_angle(a, b)
        expected = 2.0 * math.sqrt(2.0) * math.sin(0.5 * theta)
        assert abs(rot_frobenius_error(a, b) - expected) < 1e-7
    for _ in range(100):
        r = random_rot(rng)
        antipode = SimpleNamespace(q=-r.q)
        assert quat_angle(r, antipode) == 0.0
    assert time.perf_counter() - t0 < 1.0


# -- 3: completion-rate oracle ------------------------------------------------


def test_completion_rate_planted_violations(catalog):
    from hierdex.traj import GoalTrajectory

    t0 = time.perf_counter()
    rng = np.random.default_rng(13)
    dim = catalog[0].longest_dim
    for rule in ("dimscaled", "plain"):
        th = CompletionThresholds(rotation_rule=rule)
        for _ in range(50):
            n = int(rng.integers(10, 120))
            k = int(rng.integers(1, n))
            states = [
                ObjectState(Rot.identity(), np.array([0.001 * i, 0.0, 0.0]), None)
                for i in range(n)
            ]
            g = GoalTrajectory([s.copy() for s in states])
            actual = [s.copy() for s in states]
            actual[k].pos = actual[k].pos + np.array([0.0, 0.06, 0.0])
            assert completion_rate(actual, g, th, dim) == k / n
        clean = [
            ObjectState(Rot.identity(), np.array([0.001 * i, 0.0, 0.0]), None)
            for i in range(40)
        ]
        assert completion_rate(clean, GoalTrajectory(clean), th, dim) == 1.0

    # the dim-scaled rule flips exactly at longest_dim * angle > 0.025
    th = CompletionThresholds(rotation_rule="dimscaled")
    goal = ObjectState(Rot.identity(), np.zeros(3), None)
    for _ in range(300):
        d = float(rng.uniform(0.05, 0.5))
        ang = float(rng.uniform(0.0, 0.06)) / d
        state = ObjectState(Rot.about_z(ang), np.zeros(3), None)
        measured = quat_angle(state.rot, goal.rot)
        assert violates(state, goal, th, d) == (d * measured > 0.025)
    for d in (0.0625, 0.125, 0.25):
        exact = 0.025 / d  # dyadic divisor: the product reproduces 0.025
        below = ObjectState(Rot.about_z(exact - 1e-9), np.zeros(3), None)
        above = ObjectState(Rot.about_z(exact + 1e-9), np.zeros(3), None)
        assert not violates(below, goal, th, d)
        assert violates(above, goal, th, d)
    assert time.perf_counter() - t0 < 1.0


# -- 4: residual bound enforcement -------------------------------------------


def test_residual_bounds_hold():
    t0 = time.perf_counter()
    cfg = PpoConfig()
    rng = np.random.default_rng(17)
    clamp_hits = 0
    for _ in range(10_000):
        plan = WristAction(
            Pose(rng.uniform(-0.3, 0.3, size=3), random_rot(rng)),
            Pose(rng.uniform(-0.3, 0.3, size=3), random_rot(rng)),
        )
        a = rng.standard_cauchy(size=20) * 3.0
        applied, fingers = hierarchical_commands(plan, a, 4, cfg)
        for base, out in ((plan.left, applied.left), (plan.right, applied.right)):
            dt = np.abs(out.t - base.t)
            assert np.all(dt <= 0.04 + 1e-12)
            assert quat_angle(base.r, out.r) <= 0.5 + 1e-9
            if np.any(dt > 0.04 - 1e-9):
                clamp_hits += 1
        assert np.all(fingers >= 0.0) and np.all(fingers <= 1.0)
    assert clamp_hits > 1000  # the draws actually stress the clamps
    assert time.perf_counter() - t0 < 1.0


# -- 5: augmentation draw ranges ----------------------------------------------


def test_augmentation_draw_ranges():
    t0 = time.perf_counter()
    rng = np.random.default_rng(19)
    scales = np.array([sample_scales(rng) for _ in range(10_000)])
    offsets = np.array([sample_goal_offset(rng) for _ in range(10_000)])
    perturb = [sample_init_perturbation(rng) for _ in range(10_000)]
    dxy = np.array([p[0] for p in perturb])
    yaw = np.array([p[1] for p in perturb])

    assert np.all(scales >= 0.9) and np.all(scales <= 1.1)
    assert np.all(np.abs(offsets) <= 0.02)
    assert np.all(np.abs(dxy) <= 0.02)
    assert np.all(yaw >= 0.0) and np.all(yaw <= INIT_YAW_MAX)
    assert abs(INIT_YAW_MAX - math.radians(30.0)) < 1e-12

    for axis in range(3):
        assert scales[:, axis].min() <= 0.9 + 0.005
        assert scales[:, axis].max() >= 1.1 - 0.005
        assert offsets[:, axis].min() <= -0.02 + 0.005
        assert offsets[:, axis].max() >= 0.02 - 0.005
    for axis in range(2):
        assert dxy[:, axis].min() <= -0.02 + 0.005
        assert dxy[:, axis].max() >= 0.02 - 0.005
    assert yaw.min() <= 0.005
    assert yaw.max() >= INIT_YAW_MAX - 0.005
    assert time.perf_counter() - t0 < 5.0


# -- 6: gradient correctness --------------------------------------------------


def fd_worst_rel_err(net, x, rng, h=1e-5):
    y, cache = net.forward(x)
    r = rng.standard_normal(y.shape)
    grads, _ = net.backward(cache, r)
    worst = 0.0
    for p, g in zip(net.params(), grads):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        idx = rng.choice(flat.size, size=min(8, flat.size), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp = float(np.sum(net.forward(x)[0] * r))
            flat[i] = orig - h
            lm = float(np.sum(net.forward(x)[0] * r))
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            denom = max(abs(num), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(num - gflat[i]) / denom)
    return worst


def test_gradients_match_finite_differences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(23)
    for trial in range(12):
        sizes = [int(rng.integers(2, 7)) for _ in range(int(rng.integers(2, 4)))]
        net = Mlp(sizes, np.random.default_rng(trial))
        x = rng.standard_normal((3, sizes[0]))
        assert fd_worst_rel_err(net, x, rng) < 1e-4
    for trial in range(8):
        token = int(rng.integers(3, 7))
        out = int(rng.integers(2, 5))
        net = WindowNet(
            token, out, np.random.default_rng(100 + trial), d_model=6, head_hidden=6
        )
        x = rng.standard_normal((2, 4, token))
        assert fd_worst_rel_err(net, x, rng) < 1e-4
    assert time.perf_counter() - t0 < 10.0


# -- 13: multi-camera fusion --------------------------------------------------


def test_fused_pose_beats_single_cameras(catalog):
    from hierdex.expert import lift_place_task

    t0 = time.perf_counter()
    spec = catalog[0]
    g = lift_place_task(spec, np.random.default_rng(29), steps=1000)
    cam = CameraModel(sigma_t=0.01, outlier_prob=0.25)
    cfg = FusionConfig()
    rng = np.random.default_rng(31)

    fused = g.states[0].copy()
    fused_err = []
    per_cam_err = []
    outliers = 0
    draws = 0
    for step in range(1000):
        true_state = g.state_at_step(step)
        estimates = simulate_camera_estimates(true_state, rng, cam, 4)
        for e in estimates:
            d = float(np.linalg.norm(e.pos - true_state.pos))
            per_cam_err.append(d)
            draws += 1
            if abs(d - cam.outlier_shift) < 1e-9:
                outliers += 1
                assert d > 0.05
        fused = fuse_poses(estimates, fused, cfg)
        fused_err.append(float(np.linalg.norm(fused.pos - true_state.pos)))

    assert abs(outliers / draws - 0.25) < 0.03
    assert float(np.mean(fused_err)) < float(np.mean(per_cam_err))

    # a frame where every camera is an outlier keeps the previous estimate
    all_out = CameraModel(sigma_t=0.01, outlier_prob=1.0)
    prev = ObjectState(Rot.about_z(0.4), np.array([0.01, 0.02, 0.1]), None)
    estimates = simulate_camera_estimates(
        ObjectState(Rot.identity(), np.zeros(3), None), rng, all_out, 4
    )
    kept = fuse_poses(estimates, prev, cfg)
    assert np.array_equal(kept.pos, prev.pos)
    assert np.array_equal(kept.rot.q, prev.rot.q)
    assert time.perf_counter() - t0 < 5.0


# -- 7: expert validity --------------------------------------------------------


def test_every_demo_replays_cleanly(catalog, dataset):
    specs = {s.category_id: s for s in catalog}
    assert len(dataset) == 50
    t0 = time.perf_counter()
    for demo in dataset.demos:
        assert replay_demo(specs[demo.category_id], demo, noise=False) == 1.0
    assert time.perf_counter() - t0 < 60.0


# -- 8: cloned planner accuracy ------------------------------------------------


def test_cloned_planner_tracks_demo_wrists(bc_planner, dataset):
    t0 = time.perf_counter()
    trained = eval_planner(bc_planner, dataset, "trained")
    unseen = eval_planner(bc_planner, dataset, "unseen_traj")
    te_trained = float(
        np.mean([r["te_cum_cm"] / r["steps"] for r in trained.rows])
    )
    te_unseen = float(np.mean([r["te_cum_cm"] / r["steps"] for r in unseen.rows]))
    assert te_trained < 2.0
    assert te_unseen <= 2.0 * te_trained
    assert BUILD["bc"] + (time.perf_counter() - t0) < 600.0


# -- 9: hierarchy vs flat RL ---------------------------------------------------


def test_hierarchy_beats_flat_rl(bc_planner, ref, ours_ref, vanilla_ref):
    spec, g = ref
    t0 = time.perf_counter()
    assert len(ours_ref[2]) >= 200 and len(vanilla_ref[2]) >= 200
    ours = mean_completion(bc_planner, ours_ref[0], spec, g, ACC_PPO)
    vanilla = mean_completion(
        None, vanilla_ref[0], spec, g, replace(ACC_PPO, mode="vanilla")
    )
    assert ours > vanilla + 0.15, (ours, vanilla)
    elapsed = BUILD["ours_ref"] + BUILD["vanilla_ref"] + (time.perf_counter() - t0)
    assert elapsed < 3600.0


# -- 10: augmentation loop under perturbation ----------------------------------


def test_augmentation_loop_helps_under_perturbation(
    bc_planner, catalog, dataset, ours_full, dal_result
):
    planner_dal, policy_dal, rows = dal_result
    assert len(rows) == 4
    t0 = time.perf_counter()
    with_dal = float(
        np.mean(
            randomized_eval(planner_dal, policy_dal, catalog, dataset, ACC_PPO, seeds=10)
        )
    )
    without = float(
        np.mean(
            randomized_eval(bc_planner, ours_full[0], catalog, dataset, ACC_PPO, seeds=10)
        )
    )
    assert with_dal > without + 0.05, (with_dal, without)
    elapsed = BUILD["ours_full"] + BUILD["dal"] + (time.perf_counter() - t0)
    assert elapsed < 3600.0


# -- 11: goal-resampling robustness ---------------------------------------------


def test_goal_resampling_robustness(bc_planner, ref, ours_ref):
    spec, g = ref
    policy = ours_ref[0]
    t0 = time.perf_counter()
    base = mean_completion(bc_planner, policy, spec, g, ACC_PPO)
    variants = {
        "skip1": (resample_skip(g, 1), ACC_PPO),
        "skip2": (resample_skip(g, 2), ACC_PPO),
        "interp1": (resample_interp(g, 1), ACC_PPO),
        "interp2": (resample_interp(g, 2), ACC_PPO),
        "random_gap": (g, replace(ACC_PPO, window_random_gaps=True)),
    }
    for name, (gv, cfg) in variants.items():
        m = mean_completion(bc_planner, policy, spec, gv, cfg)
        assert abs(m - base) <= 0.15, (name, m, base)
    assert time.perf_counter() - t0 < 1200.0


# -- 12: distillation ------------------------------------------------------------


def test_distilled_student_matches_teacher(bc_planner, ref, ours_ref, student):
    spec, g = ref
    t0 = time.perf_counter()
    teacher_c = mean_completion(bc_planner, ours_ref[0], spec, g, ACC_PPO)
    student_c = mean_completion(
        bc_planner, student[0], spec, g, replace(ACC_PPO, obs_mode="student")
    )
    assert student_c >= 0.8 * teacher_c, (student_c, teacher_c)
    assert BUILD["distill"] + (time.perf_counter() - t0) < 1200.0


# -- 14: sampling MPC ordering ----------------------------------------------------


def test_policy_beats_sampling_mpc(bc_planner, ref, ours_ref):
    spec, g = ref
    th = CompletionThresholds(grace_steps=40)
    t0 = time.perf_counter()
    mpc = []
    for seed in range(10):
        stats = mpc_baseline(
            lambda: BimanualEnv(
                spec, g, np.random.default_rng([seed, 3]), noise=True
            ),
            g,
            horizon=10,
            samples=64,
            w=RewardWeights(),
            rng=np.random.default_rng([seed, 11]),
            sigma=0.3,
            thresholds=th,
            longest_dim=spec.longest_dim,
        )
        mpc.append(stats["completion"])
    ours = mean_completion(bc_planner, ours_ref[0], spec, g, ACC_PPO)
    assert ours > float(np.mean(mpc)), (ours, mpc)
    assert time.perf_counter() - t0 < 1800.0


# -- 15: stage reruns are byte-identical ------------------------------------------


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    cfg = {
        "seed": 5,
        "workers": 1,
        "data": {"per_category": 2, "steps": 60},
        "planner": {"epochs": 2, "samples_per_demo": 12, "d_model": 16, "head_hidden": 16},
        "ppo": {"updates": 2, "steps_per_update": 96, "hidden": [16, 16]},
        "dal": {
            "iterations": 1,
            "variants_per_demo": 1,
            "rl_updates_per_iter": 1,
            "harvest_episodes": 2,
            "finetune_epochs": 1,
        },
        "suite": {"seeds": 2, "mpc_samples": 4, "mpc_horizon": 3},
    }
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    build = str(root / "build")
    for argv in (
        ["gen-data"],
        ["train-planner"],
        ["train-controller", "--mode", "hierarchical"],
        ["train-controller", "--mode", "vanilla"],
        ["train-controller", "--fingertip-reward", "0.5"],
        ["dal"],
    ):
        rc = cli_main(argv + ["--config", str(cfg_path), "--out", build])
        assert rc == 0
    return str(cfg_path), build


def test_pipeline_stages_rerun_byte_identical(pipeline_dir, tmp_path):
    cfg_path, build = pipeline_dir
    outs = []
    for tag in ("first", "second"):
        out = str(tmp_path / tag)
        outs.append(out)
        rc = cli_main(
            [
                "eval",
                "--config",
                cfg_path,
                "--out",
                out,
                "--dataset",
                os.path.join(build, "demos.jsonl"),
                "--artifacts",
                build,
            ]
        )
        assert rc == 0
        rc = cli_main(["fuse-demo", "--config", cfg_path, "--out", out])
        assert rc == 0
    for name in ("eval.csv", "eval.json", "eval.stamp.json", "fusion.csv"):
        with open(os.path.join(outs[0], name), "rb") as fh:
            first = fh.read()
        with open(os.path.join(outs[1], name), "rb") as fh:
            second = fh.read()
        assert first == second, name
