"""Deployment-side pieces: distilling the privileged controller into a
velocity-free student, smoothing filters, multi-camera pose fusion with
outlier gating, and the episode reset check.

The teacher controller trains on observations that include object and finger
velocities nothing outside a simulator can measure. The student consumes
only the pose-and-command portion of the observation; distillation runs
DAgger style so the student sees its own visitation distribution, not just
the teacher's.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .env import BimanualEnv
from .evaluation import CompletionThresholds
from .geom import ObjectState, Pose, Rot, quat_angle, translation_error
from .net import GaussianPolicy, LOG_STD_MIN, Mlp, adam_init, adam_step
from .planner import Planner, planner_forward
from .rl import PpoConfig, flat_action_dim, flat_commands, hierarchical_commands
from .traj import GoalTrajectory, sample_goal_window


@dataclass
class DistillConfig:
    iterations: int = 5
    steps_per_iter: int = 2048
    epochs: int = 5
    batch_size: int = 256
    lr: float = 1e-3
    hidden: tuple = (128, 128)


def _mixture_beta(iteration: int, total: int) -> float:
    """Teacher-action probability: linear 1 -> 0 across iterations."""
    if total <= 1:
        return 0.0
    return 1.0 - iteration / (total - 1)


def dagger_distill(
    planner: Planner | None,
    teacher: GaussianPolicy,
    tasks: list[tuple],
    ppo_cfg: PpoConfig,
    cfg: DistillConfig,
    rng: np.random.Generator,
) -> tuple[GaussianPolicy, list[dict]]:
    """Distill the privileged teacher into a student that observes no
    velocities. Each iteration rolls a beta-mixture of teacher and student,
    labels every visited state with the teacher's mean action, aggregates,
    and refits the student by mean squared error."""
    probe = BimanualEnv(
        tasks[0][0], tasks[0][1], np.random.default_rng(0), noise=ppo_cfg.noise
    )
    obs_s_dim = probe.obs_dim("student")
    act_dim = flat_action_dim(probe.n_fingers)
    student = GaussianPolicy(
        Mlp([obs_s_dim, *cfg.hidden, act_dim], rng, out_scale=0.01),
        init_log_std=LOG_STD_MIN,
    )
    th = CompletionThresholds(grace_steps=ppo_cfg.grace_steps)
    xs: list[np.ndarray] = []
    ys: list[np.ndarray] = []
    params = student.net.params()
    adam = adam_init(params)
    rows = []
    for it in range(cfg.iterations):
        beta = _mixture_beta(it, cfg.iterations)
        steps = 0
        while steps < cfg.steps_per_iter:
            spec, g = tasks[int(rng.integers(len(tasks)))]
            env = BimanualEnv(
                spec,
                g,
                np.random.default_rng(int(rng.integers(2**31))),
                noise=ppo_cfg.noise,
            )
            env.reset()
            while not env.state.done and steps < cfg.steps_per_iter:
                if planner is not None:
                    t_idx = min(env.state.step // g.dt_units, len(g) - 1)
                    window = sample_goal_window(g, t_idx)
                    plan = planner_forward(
                        planner, g.category_id, window, env.state.exposed
                    )
                else:
                    plan = None
                obs_t = env.observe(plan, "teacher")
                obs_s = env.observe(plan, "student")
                # the student input must be exactly the velocity-free prefix
                if not np.array_equal(obs_s, obs_t[: obs_s.size]):
                    raise AssertionError(
                        "student observation is not the velocity-free prefix "
                        "of the teacher observation"
                    )
                label = teacher.mean(obs_t)
                xs.append(obs_s)
                ys.append(label)
                a = label if rng.uniform() < beta else student.mean(obs_s)
                if ppo_cfg.mode == "vanilla":
                    wc, fc = flat_commands(env.state, a, env.n_fingers)
                else:
                    wc, fc = hierarchical_commands(plan[0], a, env.n_fingers, ppo_cfg)
                env.step(wc, fc)
                steps += 1
        x = np.asarray(xs)
        y = np.asarray(ys)
        mse = None
        for _ in range(cfg.epochs):
            order = rng.permutation(x.shape[0])
            losses = []
            for i in range(0, x.shape[0], cfg.batch_size):
                sel = order[i : i + cfg.batch_size]
                pred, cache = student.net.forward(x[sel])
                err = pred - y[sel]
                losses.append(float(np.mean(err**2)))
                grads, _ = student.net.backward(cache, 2.0 * err / err.size)
                adam_step(params, grads, adam, lr=cfg.lr)
            mse = float(np.mean(losses))
        rows.append(
            {"iteration": it, "beta": beta, "dataset": x.shape[0], "mse": mse}
        )
    return student, rows


# -- smoothing ---------------------------------------------------------------------


@dataclass
class EmaState:
    alpha: float = 0.3
    value: np.ndarray | None = None


def ema_filter(state: EmaState, raw: np.ndarray) -> np.ndarray:
    """Exponential moving average; the first sample passes through."""
    raw = np.asarray(raw, dtype=np.float64)
    if state.value is None:
        state.value = raw.copy()
    else:
        state.value = state.alpha * raw + (1.0 - state.alpha) * state.value
    return state.value.copy()


# -- pose fusion -------------------------------------------------------------------


@dataclass
class FusionConfig:
    cameras: int = 4
    translation_gate: float = 0.05  # m from the previous fused estimate
    rotation_gate: float = 0.5  # rad from the previous fused estimate


def fuse_poses(
    estimates: list[ObjectState], previous: ObjectState, cfg: FusionConfig
) -> ObjectState:
    """Average the per-camera estimates that sit within both gates of the
    previous fused state; if every camera is gated out, hold the previous
    estimate."""
    keep = [
        e
        for e in estimates
        if float(np.linalg.norm(e.pos - previous.pos)) <= cfg.translation_gate
        and quat_angle(e.rot, previous.rot) <= cfg.rotation_gate
    ]
    if not keep:
        return previous.copy()
    pos = np.mean([e.pos for e in keep], axis=0)
    ref_q = keep[0].rot.q
    qs = []
    for e in keep:
        q = e.rot.q
        qs.append(-q if float(np.dot(q, ref_q)) < 0.0 else q)
    qm = np.mean(qs, axis=0)
    rot = Rot.from_wxyz(qm[0], qm[1], qm[2], qm[3])
    joints = [e.joint for e in keep if e.joint is not None]
    joint = float(np.mean(joints)) if joints else previous.joint
    return ObjectState(rot, pos, joint)


def check_reset(estimate: ObjectState, start: ObjectState) -> bool:
    """True when the object is back near the episode start pose: within 3 cm
    and 0.5 rad."""
    return (
        translation_error(estimate.pos, start.pos) <= 3.0
        and quat_angle(estimate.rot, start.rot) <= 0.5
    )


# -- simulated cameras ---------------------------------------------------------------


@dataclass
class CameraModel:
    sigma_t: float = 0.005
    sigma_r: float = 0.02
    sigma_j: float = 0.01
    outlier_prob: float = 0.1
    outlier_shift: float = 0.25


def simulate_camera_estimates(
    true_state: ObjectState,
    rng: np.random.Generator,
    cam: CameraModel,
    cameras: int,
) -> list[ObjectState]:
    """Noisy per-camera object estimates; occasional gross outliers imitate
    dropped or mismatched detections."""
    out = []
    for _ in range(cameras):
        if rng.uniform() < cam.outlier_prob:
            shift = rng.normal(0.0, 1.0, size=3)
            shift *= cam.outlier_shift / max(float(np.linalg.norm(shift)), 1e-9)
            pos = true_state.pos + shift
            axis = rng.normal(0.0, 1.0, size=3)
            rot = Rot.from_axis_angle(axis, float(rng.uniform(0.8, np.pi))) * true_state.rot
        else:
            pos = true_state.pos + rng.normal(0.0, cam.sigma_t, size=3)
            axis = rng.normal(0.0, 1.0, size=3)
            rot = Rot.from_axis_angle(axis, float(rng.normal(0.0, cam.sigma_r))) * true_state.rot
        joint = None
        if true_state.joint is not None:
            joint = float(true_state.joint + rng.normal(0.0, cam.sigma_j))
        out.append(ObjectState(rot, pos, joint))
    return out


@dataclass
class FusionDemoReport:
    rows: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        te = [r["te_cm"] for r in self.rows]
        oe = [r["oe_rad"] for r in self.rows]
        return {
            "steps": len(self.rows),
            "mean_te_cm": float(np.mean(te)),
            "max_te_cm": float(np.max(te)),
            "mean_oe_rad": float(np.mean(oe)),
            "rejected_total": int(sum(r["rejected"] for r in self.rows)),
        }

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(
                fh, fieldnames=["step", "te_cm", "oe_rad", "kept", "rejected"]
            )
            w.writeheader()
            for row in self.rows:
                w.writerow(row)


def fusion_demo(
    g: GoalTrajectory,
    rng: np.random.Generator,
    cam: CameraModel | None = None,
    cfg: FusionConfig | None = None,
) -> FusionDemoReport:
    """Track a moving object through simulated noisy cameras and report the
    fused-estimate error per step."""
    cam = cam if cam is not None else CameraModel()
    cfg = cfg if cfg is not None else FusionConfig()
    fused = g.states[0].copy()
    report = FusionDemoReport()
    for step in range(g.horizon + 1):
        true_state = g.state_at_step(step)
        estimates = simulate_camera_estimates(true_state, rng, cam, cfg.cameras)
        kept = sum(
            1
            for e in estimates
            if float(np.linalg.norm(e.pos - fused.pos)) <= cfg.translation_gate
            and quat_angle(e.rot, fused.rot) <= cfg.rotation_gate
        )
        fused = fuse_poses(estimates, fused, cfg)
        report.rows.append(
            {
                "step": step,
                "te_cm": translation_error(fused.pos, true_state.pos),
                "oe_rad": quat_angle(fused.rot, true_state.rot),
                "kept": kept,
                "rejected": cfg.cameras - kept,
            }
        )
    return report
