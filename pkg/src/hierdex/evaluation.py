"""Completion metrics, the evaluation task suite, the sampling-MPC baseline,
and report emission."""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from .geom import ObjectState, quat_angle
from .traj import GoalTrajectory

DIMSCALED_LIMIT = 0.025  # m: longest_dim * angle must stay below this
PLAIN_ROT_LIMIT = 0.5  # rad
TRANS_LIMIT = 0.05  # m
JOINT_LIMIT = 0.5  # rad


@dataclass
class CompletionThresholds:
    """First-violation thresholds for the completion metric.

    grace_steps skips the check for the first steps of a rollout so that
    deliberately perturbed initial states (domain augmentation) are not
    scored as instant failures; the metric itself defaults to no grace.
    """

    translation: float = TRANS_LIMIT
    rotation_rule: str = "dimscaled"  # or "plain"
    dim_product: float = DIMSCALED_LIMIT
    plain_rotation: float = PLAIN_ROT_LIMIT
    joint: float = JOINT_LIMIT
    grace_steps: int = 0

    def __post_init__(self):
        if self.rotation_rule not in ("dimscaled", "plain"):
            raise ValueError(f"unknown rotation rule: {self.rotation_rule}")


def violates(
    actual: ObjectState,
    goal: ObjectState,
    th: CompletionThresholds,
    longest_dim: float,
) -> bool:
    """True when any pose-error threshold is exceeded for this step."""
    if float(np.linalg.norm(actual.pos - goal.pos)) > th.translation:
        return True
    ang = quat_angle(actual.rot, goal.rot)
    if th.rotation_rule == "dimscaled":
        if longest_dim * ang > th.dim_product:
            return True
    else:
        if ang > th.plain_rotation:
            return True
    if actual.joint is not None and goal.joint is not None:
        if abs(actual.joint - goal.joint) > th.joint:
            return True
    return False


def completion_rate(
    actual: list[ObjectState],
    g: GoalTrajectory,
    th: CompletionThresholds,
    longest_dim: float,
) -> float:
    """Fraction of the goal trajectory tracked before the first violation.

    actual[i] is compared index-by-index against g.states[i]. Returns
    (first violating index) / len(g); 1.0 when nothing is violated and
    actual spans the whole goal, else the tracked fraction.
    """
    n = len(g)
    if len(actual) > n:
        raise ValueError(f"actual length {len(actual)} exceeds goal length {n}")
    for i, s in enumerate(actual):
        if i < th.grace_steps:
            continue
        if violates(s, g.states[i], th, longest_dim):
            return i / n
    return 1.0 if len(actual) == n else len(actual) / n


# -- reports ------------------------------------------------------------------

CSV_COLUMNS = ["task", "method", "seed", "completion", "rotation_rule", "config_hash"]


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, task: str, method: str, seed: int, completion: float) -> None:
        self.rows.append(
            {
                "task": task,
                "method": method,
                "seed": int(seed),
                "completion": float(completion),
                "rotation_rule": self.metadata.get("rotation_rule", "dimscaled"),
                "config_hash": self.metadata.get("config_hash", ""),
            }
        )

    def aggregates(self) -> list[dict]:
        cells: dict[tuple, list[float]] = {}
        for r in self.rows:
            cells.setdefault((r["task"], r["method"]), []).append(r["completion"])
        out = []
        for (task, method), vals in sorted(cells.items()):
            v = np.asarray(vals)
            out.append(
                {
                    "task": task,
                    "method": method,
                    "n": len(vals),
                    "mean": float(v.mean()),
                    "std": float(v.std(ddof=1)) if len(vals) >= 2 else None,
                }
            )
        return out

    def cell_mean(self, task: str, method: str) -> float:
        vals = [
            r["completion"]
            for r in self.rows
            if r["task"] == task and r["method"] == method
        ]
        if not vals:
            raise KeyError(f"no rows for cell ({task}, {method})")
        return float(np.mean(vals))


def emit_report(report: EvalReport, path: str) -> tuple[str, str]:
    """CSV (one row per cell-seed) plus JSON aggregates; round-trips."""
    csv_path = path + ".csv"
    json_path = path + ".json"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in report.rows:
            row = dict(r)
            row["completion"] = repr(r["completion"])
            w.writerow(row)
    with open(json_path, "w") as fh:
        json.dump(
            {"metadata": report.metadata, "aggregates": report.aggregates()},
            fh,
            indent=1,
        )
    return csv_path, json_path


def load_report(path: str) -> EvalReport:
    report = EvalReport()
    with open(path + ".json") as fh:
        report.metadata = json.load(fh)["metadata"]
    with open(path + ".csv", newline="") as fh:
        for r in csv.DictReader(fh):
            r["seed"] = int(r["seed"])
            r["completion"] = float(r["completion"])
            report.rows.append(r)
    return report


# -- sampling MPC baseline ----------------------------------------------------


@dataclass
class MpcConfig:
    horizon: int = 10
    samples: int = 64
    sigma: float = 0.3


def mpc_baseline(
    env_factory,
    g: GoalTrajectory,
    horizon: int,
    samples: int,
    w,
    rng: np.random.Generator,
    sigma: float = 0.3,
    thresholds: CompletionThresholds | None = None,
    longest_dim: float | None = None,
) -> dict:
    """Receding-horizon random shooting in the flat action space.

    Each step: K noisy perturbations of the shifted previous plan are scored by
    total reward on cloned envs; the best plan's first action runs on the
    real env.
    """
    from .rl import RewardWeights, flat_action_dim, flat_commands, reward

    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    th = thresholds if thresholds is not None else CompletionThresholds()
    if w is None:
        w = RewardWeights()
    env = env_factory()
    env.reset(perturb_init=False)
    dim = longest_dim if longest_dim is not None else env.spec.longest_dim
    da = flat_action_dim(env.n_fingers)
    plan = np.zeros((horizon, da))
    total = len(g.states)
    actual = [env.state.exposed.copy()]
    rewards = []
    first_violation = None
    step = 0
    while not env.state.done:
        shifted = np.vstack([plan[1:], plan[-1:]])
        best_score, best_plan = -np.inf, shifted
        for k in range(samples):
            cand = shifted if k == 0 else shifted + sigma * rng.standard_normal(
                shifted.shape
            )
            sim = env.clone()
            score = 0.0
            for h in range(horizon):
                if sim.state.done:
                    break
                wc, fc = flat_commands(sim.state, cand[h], sim.n_fingers)
                _, info = sim.step(wc, fc)
                score += reward(g.state_at_step(sim.state.step), info.object, w)
            if score > best_score:
                best_score, best_plan = score, cand
        plan = best_plan
        wc, fc = flat_commands(env.state, plan[0], env.n_fingers)
        _, info = env.step(wc, fc)
        step = env.state.step
        actual.append(info.object)
        rewards.append(reward(g.state_at_step(step), info.object, w))
        if (
            first_violation is None
            and step >= th.grace_steps
            and violates(info.object, g.state_at_step(step), th, dim)
        ):
            first_violation = step
            break
    horizon_steps = env.horizon
    if first_violation is not None:
        completion = first_violation / (horizon_steps + 1)
    else:
        completion = len(actual) / (horizon_steps + 1)
    return {
        "completion": float(min(1.0, completion)),
        "steps": step,
        "mean_reward": float(np.mean(rewards)) if rewards else 0.0,
        "total": total,
    }


# -- task suite ---------------------------------------------------------------

SUITE_TASKS = (
    "single_obj_trained_traj",
    "single_obj_unseen_traj",
    "multi_obj_trained",
    "multi_obj_unseen",
)
SUITE_METHODS = (
    "ours",
    "ours_no_dal",
    "ours_fr",
    "vanilla_rl",
    "expert_replay",
    "mpc",
)


@dataclass
class SuiteSpec:
    """Everything run_task_suite needs, already loaded."""

    catalog: list
    dataset: object  # DemoSet
    artifacts: dict  # method -> dict of artifacts / parameters
    methods: tuple = SUITE_METHODS
    tasks: tuple = SUITE_TASKS
    seeds: int = 10
    rotation_rule: str = "dimscaled"
    grace_steps: int = 40
    noise: bool = True
    config_hash: str = ""


def _task_pool(spec: SuiteSpec, task: str) -> list:
    ds = spec.dataset
    if task == "single_obj_trained_traj":
        pool = [d for d in ds.split("trained") if d.category_id == 0]
    elif task == "single_obj_unseen_traj":
        pool = [d for d in ds.split("unseen_traj") if d.category_id == 0]
    elif task == "multi_obj_trained":
        pool = ds.split("trained")
    elif task == "multi_obj_unseen":
        pool = ds.split("unseen_obj")
    else:
        raise ValueError(f"unknown task: {task}")
    if not pool:
        raise ValueError(f"no demos available for task {task}")
    return pool


def run_task_suite(spec: SuiteSpec) -> EvalReport:
    """Method x task x seed completion matrix."""
    from . import rl
    from .env import BimanualEnv
    from .expert import replay_demo

    report = EvalReport(
        metadata={
            "rotation_rule": spec.rotation_rule,
            "config_hash": spec.config_hash,
            "seeds": list(range(spec.seeds)),
            "grace_steps": spec.grace_steps,
        }
    )
    specs = {c.category_id: c for c in spec.catalog}
    th = CompletionThresholds(
        rotation_rule=spec.rotation_rule, grace_steps=spec.grace_steps
    )
    for task in spec.tasks:
        pool = _task_pool(spec, task)
        for method in spec.methods:
            art = spec.artifacts.get(method)
            if art is None:
                raise ValueError(f"missing artifact for cell ({task}, {method})")
            for seed in range(spec.seeds):
                demo = pool[seed % len(pool)]
                ospec = specs[demo.category_id]
                g = demo.goal()
                rng = np.random.default_rng([seed, zlib.crc32(task.encode()), 17])
                if method == "expert_replay":
                    c = replay_demo(
                        ospec, demo, noise=spec.noise, thresholds=th, seed=seed
                    )
                elif method == "mpc":
                    stats = mpc_baseline(
                        lambda: BimanualEnv(
                            ospec, g, np.random.default_rng([seed, 3]), noise=spec.noise
                        ),
                        g,
                        horizon=art.get("horizon", 10),
                        samples=art.get("samples", 64),
                        w=art.get("reward_weights"),
                        rng=rng,
                        sigma=art.get("sigma", 0.3),
                        thresholds=th,
                        longest_dim=ospec.longest_dim,
                    )
                    c = stats["completion"]
                else:
                    env = BimanualEnv(
                        ospec, g, np.random.default_rng([seed, 5]), noise=spec.noise
                    )
                    stats = rl.rollout(
                        env,
                        art["planner"],
                        art["policy"],
                        g,
                        art["cfg"],
                        rng,
                        thresholds=th,
                        deterministic=True,
                        collect=False,
                    )[1]
                    c = stats["completion"]
                report.add(task, method, seed, c)
    return report
