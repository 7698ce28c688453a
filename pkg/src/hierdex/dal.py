"""Data augmentation loop: train the controller under object-scale, initial
state, and goal perturbations, keep only fully successful episodes, convert
them into new demonstrations, and finetune the wrist planner on the union.

Each harvested demo records what the run actually produced (exposed object
states, realized wrist poses, finger closures), so cloning on it teaches the
planner to command wrists from states the expert never visited.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .env import BimanualEnv, ObjectSpec, fingertips, scale_object
from .evaluation import CompletionThresholds
from .expert import Demo, DemoSet
from .geom import WristAction
from .planner import Planner, finetune
from .rl import PpoConfig, rollout, train_controller
from .traj import GOAL_OFFSET_RANGE, perturb_goal_trajectory

SCALE_LOW = 0.9
SCALE_HIGH = 1.1


@dataclass
class DalConfig:
    iterations: int = 4
    variants_per_demo: int = 2
    rl_updates_per_iter: int = 30
    harvest_episodes: int = 32
    finetune_epochs: int = 10
    deterministic_harvest: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one iteration")


def sample_scales(rng: np.random.Generator) -> np.ndarray:
    s = rng.uniform(SCALE_LOW, SCALE_HIGH, size=3)
    assert np.all(s >= SCALE_LOW) and np.all(s <= SCALE_HIGH), s
    return s


def sample_goal_offset(rng: np.random.Generator) -> np.ndarray:
    off = rng.uniform(-GOAL_OFFSET_RANGE, GOAL_OFFSET_RANGE, size=3)
    assert np.all(np.abs(off) <= GOAL_OFFSET_RANGE), off
    return off


def augmented_tasks(
    catalog: list[ObjectSpec],
    dataset: DemoSet,
    cfg: DalConfig,
    rng: np.random.Generator,
) -> list[tuple]:
    """(scaled spec, perturbed goal) variants of every trained demo, plus the
    unmodified demo tasks so nominal behavior is not traded away."""
    by_cat = {s.category_id: s for s in catalog}
    tasks = []
    for demo in dataset.split("trained"):
        spec = by_cat[demo.category_id]
        tasks.append((spec, demo.goal()))
        for _ in range(cfg.variants_per_demo):
            s = sample_scales(rng)
            scaled = scale_object(spec, s[0], s[1], s[2])
            g = perturb_goal_trajectory(
                demo.goal(), rng, offset=sample_goal_offset(rng)
            )
            tasks.append((scaled, g))
    if not tasks:
        raise ValueError("trained split is empty; nothing to augment")
    return tasks


class _Recorder:
    """Accumulates a rollout into demo-shaped sequences."""

    def __init__(self):
        self.objects = []
        self.wrists = []
        self.closures = []
        self.tips = []

    def __call__(self, state, info) -> None:
        self.objects.append(state.exposed.copy())
        self.wrists.append(
            WristAction(state.left.wrist.copy(), state.right.wrist.copy())
        )
        self.closures.append(
            np.stack([state.left.fingers.copy(), state.right.fingers.copy()])
        )
        self.tips.append(
            np.stack(
                [
                    fingertips(state.left.wrist, state.left.fingers),
                    fingertips(state.right.wrist, state.right.fingers),
                ]
            )
        )

    def demo(self, category_id: int) -> Demo:
        return Demo(
            category_id=category_id,
            object_states=self.objects,
            wrist_poses=self.wrists,
            finger_closures=self.closures,
            fingertips=self.tips,
            tag="harvest",
        )


def harvest(
    planner: Planner,
    policy,
    tasks: list[tuple],
    ppo_cfg: PpoConfig,
    cfg: DalConfig,
    rng: np.random.Generator,
) -> tuple[DemoSet, list[float]]:
    """Roll the current controller on augmented tasks and keep episodes that
    complete the whole horizon."""
    th = CompletionThresholds(grace_steps=ppo_cfg.grace_steps)
    kept = []
    completions = []
    for _ in range(cfg.harvest_episodes):
        spec, g = tasks[int(rng.integers(len(tasks)))]
        env = BimanualEnv(
            spec, g, np.random.default_rng(int(rng.integers(2**31))),
            noise=ppo_cfg.noise,
        )
        rec = _Recorder()
        _, stats = rollout(
            env,
            planner,
            policy,
            g,
            ppo_cfg,
            rng,
            thresholds=th,
            deterministic=cfg.deterministic_harvest,
            collect=False,
            perturb_init=True,
            on_step=rec,
        )
        completions.append(stats["completion"])
        if stats["completion"] >= 1.0:
            kept.append(rec.demo(g.category_id))
    return DemoSet(kept), completions


def dal_iteration(
    planner: Planner,
    policy,
    value_net,
    dataset: DemoSet,
    harvested: DemoSet,
    catalog: list[ObjectSpec],
    cfg: DalConfig,
    ppo_cfg: PpoConfig,
    rng: np.random.Generator,
    iteration: int = 0,
):
    """One augment -> train -> harvest -> finetune cycle. Returns the updated
    (policy, value_net), the new harvest, and a summary row."""
    tasks = augmented_tasks(catalog, dataset, cfg, rng)
    train_cfg = replace(
        ppo_cfg,
        updates=cfg.rl_updates_per_iter,
        perturb_init=True,
        domain_rand=True,
    )
    policy, value_net, _ = train_controller(
        planner, tasks, train_cfg, rng, policy=policy, value_net=value_net
    )
    new_demos, completions = harvest(planner, policy, tasks, ppo_cfg, cfg, rng)
    if len(new_demos) == 0:
        warnings.warn(
            f"augmentation iteration {iteration}: no episode reached full "
            f"completion; planner left untouched",
            stacklevel=2,
        )
    else:
        union = DemoSet(list(dataset.split("trained")))
        union.extend(harvested)
        union.extend(new_demos)
        finetune(planner, union, rng=rng, epochs=cfg.finetune_epochs)
    row = {
        "iteration": iteration,
        "episodes": len(completions),
        "harvested": len(new_demos),
        "completion_mean": float(np.mean(completions)),
        "completion_std": float(np.std(completions)),
    }
    return policy, value_net, new_demos, row


def dal_run(
    planner: Planner,
    policy,
    value_net,
    dataset: DemoSet,
    catalog: list[ObjectSpec],
    cfg: DalConfig,
    ppo_cfg: PpoConfig,
    rng: np.random.Generator,
):
    """Full augmentation schedule. Returns the final (policy, value_net), all
    harvested demos, and one summary row per iteration."""
    harvested = DemoSet()
    rows = []
    for it in range(cfg.iterations):
        policy, value_net, new_demos, row = dal_iteration(
            planner,
            policy,
            value_net,
            dataset,
            harvested,
            catalog,
            cfg,
            ppo_cfg,
            rng,
            iteration=it,
        )
        harvested.extend(new_demos)
        rows.append(row)
    return policy, value_net, harvested, rows


def randomized_eval(
    planner: Planner,
    policy,
    catalog: list[ObjectSpec],
    dataset: DemoSet,
    ppo_cfg: PpoConfig,
    seeds: int = 10,
) -> list[float]:
    """Deterministic-policy completion under the augmentation distribution
    (object rescale + goal offset + perturbed initial pose), one episode per
    seed. Seed k builds the same perturbed task every call, so two policies
    can be compared on identical episodes."""
    by_cat = {s.category_id: s for s in catalog}
    pool = dataset.split("trained")
    if not pool:
        raise ValueError("trained split is empty")
    th = CompletionThresholds(grace_steps=ppo_cfg.grace_steps)
    out = []
    for seed in range(seeds):
        task_rng = np.random.default_rng([seed, 91])
        demo = pool[seed % len(pool)]
        s = sample_scales(task_rng)
        scaled = scale_object(by_cat[demo.category_id], s[0], s[1], s[2])
        g = perturb_goal_trajectory(
            demo.goal(), task_rng, offset=sample_goal_offset(task_rng)
        )
        env = BimanualEnv(
            scaled, g, np.random.default_rng([seed, 92]), noise=ppo_cfg.noise
        )
        _, stats = rollout(
            env,
            planner,
            policy,
            g,
            ppo_cfg,
            np.random.default_rng([seed, 93]),
            thresholds=th,
            deterministic=True,
            collect=False,
            perturb_init=True,
        )
        out.append(stats["completion"])
    return out


DAL_LOG_COLUMNS = [
    "iteration",
    "episodes",
    "harvested",
    "completion_mean",
    "completion_std",
]


def write_dal_report(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=DAL_LOG_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k) for k in DAL_LOG_COLUMNS})
