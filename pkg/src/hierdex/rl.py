"""Low-level finger controller trained with PPO, plus the action plumbing
shared by every policy-driven rollout.

Two action spaces, both 12 + 2F wide:

hierarchical   [L dt(3), L dr(3), R dt(3), R dr(3), L fingers(F), R fingers(F)]
               dt/dr are bounded residuals applied on top of the planner's
               step-1 wrist; fingers are closure commands after a +0.8 bias.
vanilla        same layout but the first 12 numbers are absolute wrist
               targets (0.5 * a for position, rotation-vector for attitude),
               no planner in the loop.

The hierarchical_no_residual variant zeroes the wrist residual so the policy
only drives fingers and the planner's wrists pass through untouched.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .env import BimanualEnv, ObjectSpec, WorldState, fingertips, grasp_site_world
from .evaluation import CompletionThresholds, violates
from .geom import ObjectState, Pose, Rot, WristAction, quat_angle
from .net import (
    GaussianPolicy,
    Mlp,
    adam_init,
    adam_step,
    assign_params,
    load_params,
    save_params,
)
from .planner import Planner, planner_forward
from .traj import GoalTrajectory, sample_goal_window

import json


@dataclass
class RewardWeights:
    rot: float = 20.0
    trans: float = 1.0
    joint: float = 5.0


@dataclass
class ResidualBounds:
    trans: float = 0.04  # per-component clamp, meters
    rot: float = 0.5  # rotation-vector norm clamp, radians


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    steps_per_update: int = 2048
    lr: float = 3e-4
    updates: int = 200
    mode: str = "hierarchical"  # hierarchical | hierarchical_no_residual | vanilla
    obs_mode: str = "teacher"
    fingertip_reward_coef: float = 0.0
    init_log_std: float = -2.0
    grace_steps: int = 40
    noise: bool = True
    domain_rand: bool = False
    domain_rand_every: int = 1000
    perturb_init: bool = False
    window_random_gaps: bool = False
    hidden: tuple = (128, 128)
    reward_weights: RewardWeights = field(default_factory=RewardWeights)
    residual: ResidualBounds = field(default_factory=ResidualBounds)

    def __post_init__(self):
        if self.mode not in ("hierarchical", "hierarchical_no_residual", "vanilla"):
            raise ValueError(f"unknown mode: {self.mode}")
        if self.obs_mode not in ("teacher", "student"):
            raise ValueError(f"unknown obs mode: {self.obs_mode}")


def reward(goal: ObjectState, current: ObjectState, w: RewardWeights) -> float:
    """exp(-(w_rot * angle + w_trans * meters + w_joint * |joint gap|)).
    The joint term is dropped when either side has no joint."""
    cost = w.rot * quat_angle(goal.rot, current.rot)
    cost += w.trans * float(np.linalg.norm(goal.pos - current.pos))
    if goal.joint is not None and current.joint is not None:
        cost += w.joint * abs(goal.joint - current.joint)
    return float(np.exp(-cost))


def fingertip_reward(state: WorldState, spec: ObjectSpec) -> float:
    """exp(-mean fingertip distance to the hand's assigned grasp site);
    shaping term for the fingertip-reward baseline."""
    d = 0.0
    for hand, part in ((state.left, 0), (state.right, 1)):
        site = grasp_site_world(state.object, spec, part)
        tips = fingertips(hand.wrist, hand.fingers)
        d += float(np.mean(np.linalg.norm(tips - site.t, axis=1)))
    return float(np.exp(-0.5 * d))


def flat_action_dim(n_fingers: int) -> int:
    return 12 + 2 * n_fingers


def flat_commands(
    state: WorldState, action: np.ndarray, n_fingers: int
) -> tuple[WristAction, np.ndarray]:
    """Absolute-target mapping used by vanilla RL and the sampling planner:
    positions 0.5 * a, attitudes as rotation vectors, fingers clip(a + 0.8)."""
    a = np.asarray(action, dtype=np.float64)
    hands = []
    for h in range(2):
        seg = a[6 * h : 6 * h + 6]
        hands.append(Pose(0.5 * seg[:3], Rot.from_rotvec(seg[3:6])))
    fingers = np.clip(a[12 : 12 + 2 * n_fingers] + 0.8, 0.0, 1.0).reshape(
        2, n_fingers
    )
    return WristAction(hands[0], hands[1]), fingers


def compose_action(
    planner_wrist: WristAction, residual: np.ndarray, bounds: ResidualBounds
) -> WristAction:
    """Clamp and apply a 12-number wrist residual on top of the planned
    wrists: translation added in the world frame, rotation composed on the
    right as a bounded rotation vector."""
    res = np.asarray(residual, dtype=np.float64)
    hands = []
    for h, base in enumerate((planner_wrist.left, planner_wrist.right)):
        dt = np.clip(res[6 * h : 6 * h + 3], -bounds.trans, bounds.trans)
        rv = res[6 * h + 3 : 6 * h + 6].copy()
        n = float(np.linalg.norm(rv))
        if n > bounds.rot:
            rv *= bounds.rot / n
        hands.append(Pose(base.t + dt, base.r * Rot.from_rotvec(rv)))
    return WristAction(hands[0], hands[1])


def hierarchical_commands(
    plan_step: WristAction, action: np.ndarray, n_fingers: int, cfg: PpoConfig
) -> tuple[WristAction, np.ndarray]:
    a = np.asarray(action, dtype=np.float64)
    if cfg.mode == "hierarchical_no_residual":
        residual = np.zeros(12)
    else:
        residual = np.concatenate(
            [
                cfg.residual.trans * a[0:3],
                cfg.residual.rot * a[3:6],
                cfg.residual.trans * a[6:9],
                cfg.residual.rot * a[9:12],
            ]
        )
    fingers = np.clip(a[12 : 12 + 2 * n_fingers] + 0.8, 0.0, 1.0).reshape(
        2, n_fingers
    )
    return compose_action(plan_step, residual, cfg.residual), fingers


# -- rollout --------------------------------------------------------------------


@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return self.obs.shape[0]

    @staticmethod
    def concat(batches: list["RolloutBatch"]) -> "RolloutBatch":
        return RolloutBatch(
            obs=np.concatenate([b.obs for b in batches]),
            actions=np.concatenate([b.actions for b in batches]),
            log_probs=np.concatenate([b.log_probs for b in batches]),
            rewards=np.concatenate([b.rewards for b in batches]),
            dones=np.concatenate([b.dones for b in batches]),
        )


def rollout(
    env: BimanualEnv,
    planner: Planner | None,
    policy: GaussianPolicy,
    g: GoalTrajectory,
    cfg: PpoConfig,
    rng: np.random.Generator,
    thresholds: CompletionThresholds | None = None,
    deterministic: bool = False,
    collect: bool = True,
    perturb_init: bool = False,
    on_step=None,
) -> tuple[RolloutBatch | None, dict]:
    """One episode. Each step replans the wrist window, observes, acts, and
    scores the exposed object against the instantaneous goal. A threshold
    breach after the grace period ends the episode; completion is the
    fraction of the horizon survived. `on_step(state, info)` is called after
    every simulator step (trajectory recording)."""
    if cfg.mode != "vanilla" and planner is None:
        raise ValueError(f"mode {cfg.mode} needs a planner")
    th = (
        thresholds
        if thresholds is not None
        else CompletionThresholds(grace_steps=cfg.grace_steps)
    )
    env.reset(perturb_init=perturb_init)
    if on_step is not None:
        on_step(env.state, None)
    obs_l, act_l, logp_l, rew_l = [], [], [], []
    rewards = []
    first_violation = None
    n_actual = 1  # reset state counts
    while not env.state.done:
        if planner is not None:
            t_idx = min(env.state.step // g.dt_units, len(g) - 1)
            window = sample_goal_window(
                g, t_idx, rng=rng, random_gaps=cfg.window_random_gaps
            )
            plan = planner_forward(planner, g.category_id, window, env.state.exposed)
        else:
            plan = None
        obs = env.observe(plan, cfg.obs_mode)
        if deterministic:
            a = policy.mean(obs)
            logp = float(policy.log_prob_given_mean(a, a))
        else:
            a, logp = policy.sample(obs, rng)
            logp = float(logp)
        if cfg.mode == "vanilla":
            wc, fc = flat_commands(env.state, a, env.n_fingers)
        else:
            wc, fc = hierarchical_commands(plan[0], a, env.n_fingers, cfg)
        _, info = env.step(wc, fc)
        if on_step is not None:
            on_step(env.state, info)
        step = env.state.step
        goal_now = g.state_at_step(step)
        r = reward(goal_now, info.object, cfg.reward_weights)
        if cfg.fingertip_reward_coef > 0.0:
            r += cfg.fingertip_reward_coef * fingertip_reward(env.state, env.spec)
        rewards.append(r)
        n_actual += 1
        breach = (
            first_violation is None
            and step >= th.grace_steps
            and violates(info.object, goal_now, th, env.spec.longest_dim)
        )
        if breach:
            first_violation = step
        if collect:
            obs_l.append(obs)
            act_l.append(a)
            logp_l.append(logp)
            rew_l.append(r)
        if breach:
            break
    if first_violation is not None:
        completion = first_violation / (env.horizon + 1)
    else:
        completion = n_actual / (env.horizon + 1)
    stats = {
        "completion": float(min(1.0, completion)),
        "return": float(np.sum(rewards)),
        "mean_reward": float(np.mean(rewards)) if rewards else 0.0,
        "steps": len(rewards),
    }
    if not collect:
        return None, stats
    dones = np.zeros(len(rew_l))
    if dones.size:
        dones[-1] = 1.0
    batch = RolloutBatch(
        obs=np.asarray(obs_l),
        actions=np.asarray(act_l),
        log_probs=np.asarray(logp_l),
        rewards=np.asarray(rew_l),
        dones=dones,
    )
    return batch, stats


# -- PPO ------------------------------------------------------------------------


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float = 0.99,
    lam: float = 0.95,
    bootstrap: float = 0.0,
) -> np.ndarray:
    """Generalized advantage estimates over a batch of concatenated episodes;
    dones mask the recursion at episode boundaries."""
    n = len(rewards)
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        nonterm = 1.0 - dones[t]
        next_v = bootstrap if t == n - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_v * nonterm - values[t]
        last = delta + gamma * lam * nonterm * last
        adv[t] = last
    return adv


def ppo_update(
    policy: GaussianPolicy,
    value_net: Mlp,
    batch: RolloutBatch,
    cfg: PpoConfig,
    policy_adam,
    value_adam,
    rng: np.random.Generator,
) -> dict:
    """Clipped-surrogate update with hand-written gradients.

    The policy gradient flows through the Gaussian mean and the shared
    log-std; clipped samples (where the clipped surrogate is the active
    minimum) contribute nothing, so a zero-advantage batch produces a
    near-zero step (entropy bonus only).
    """
    obs, acts = batch.obs, batch.actions
    old_logp = batch.log_probs
    n = len(batch)
    values = value_net(obs).reshape(-1)
    adv = gae(batch.rewards, values, batch.dones, cfg.gamma, cfg.gae_lambda)
    returns = adv + values
    std_a = float(adv.std())
    adv_n = (adv - adv.mean()) / (std_a + 1e-8)

    p_params = policy.params()
    v_params = value_net.params()
    clip_hits = []
    pol_losses, val_losses = [], []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for chunk in np.array_split(order, cfg.minibatches):
            if chunk.size == 0:
                continue
            b = chunk.size
            o, a = obs[chunk], acts[chunk]
            advm, lp_old, ret = adv_n[chunk], old_logp[chunk], returns[chunk]

            mean, cache = policy.net.forward(o)
            var = np.exp(2.0 * policy.log_std)
            logp = policy.log_prob_given_mean(mean, a)
            ratio = np.exp(logp - lp_old)
            surr1 = ratio * advm
            clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
            surr2 = clipped * advm
            pol_loss = -float(np.mean(np.minimum(surr1, surr2)))
            ent = policy.entropy()
            loss = pol_loss - cfg.entropy_coef * ent
            if not np.isfinite(loss):
                raise FloatingPointError("non-finite policy loss")
            active = (surr1 <= surr2).astype(np.float64)
            dlogp = -(active * ratio * advm) / b
            diff = a - mean
            dmean = dlogp[:, None] * diff / var
            dlog_std = (dlogp[:, None] * (diff * diff / var - 1.0)).sum(axis=0)
            dlog_std -= cfg.entropy_coef
            net_grads, _ = policy.net.backward(cache, dmean)
            adam_step(p_params, net_grads + [dlog_std], policy_adam, lr=cfg.lr)
            policy.clamp_log_std()

            pred, vcache = value_net.forward(o)
            pred = pred.reshape(-1)
            verr = pred - ret
            val_loss = cfg.value_coef * float(np.mean(verr**2))
            dv = cfg.value_coef * 2.0 * verr[:, None] / b
            vgrads, _ = value_net.backward(vcache, dv)
            adam_step(v_params, vgrads, value_adam, lr=cfg.lr)

            clip_hits.append(float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)))
            pol_losses.append(pol_loss)
            val_losses.append(val_loss)
    new_logp = policy.log_prob(obs, acts)
    return {
        "policy_loss": float(np.mean(pol_losses)),
        "value_loss": float(np.mean(val_losses)),
        "entropy": policy.entropy(),
        "approx_kl": float(np.mean(old_logp - new_logp)),
        "clip_fraction": float(np.mean(clip_hits)),
    }


# -- training loop ----------------------------------------------------------------


def make_policy(
    obs_dim: int,
    act_dim: int,
    rng: np.random.Generator,
    hidden: tuple = (128, 128),
    init_log_std: float = -2.0,
) -> GaussianPolicy:
    net = Mlp([obs_dim, *hidden, act_dim], rng, out_scale=0.01)
    return GaussianPolicy(net, init_log_std=init_log_std)


def make_value(
    obs_dim: int, rng: np.random.Generator, hidden: tuple = (128, 128)
) -> Mlp:
    return Mlp([obs_dim, *hidden, 1], rng)


def tasks_from_demos(catalog: list[ObjectSpec], demos: list) -> list[tuple]:
    by_cat = {s.category_id: s for s in catalog}
    return [(by_cat[d.category_id], d.goal()) for d in demos]


TRAIN_LOG_COLUMNS = [
    "update",
    "env_steps",
    "episodes",
    "mean_return",
    "mean_completion",
    "policy_loss",
    "value_loss",
    "entropy",
    "approx_kl",
    "clip_fraction",
]


def _append_log(path: str, row: dict) -> None:
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRAIN_LOG_COLUMNS)
        if new:
            w.writeheader()
        w.writerow({k: row.get(k) for k in TRAIN_LOG_COLUMNS})


def train_controller(
    planner: Planner | None,
    tasks: list[tuple],
    cfg: PpoConfig,
    rng: np.random.Generator,
    policy: GaussianPolicy | None = None,
    value_net: Mlp | None = None,
    log_path: str | None = None,
    env_hook=None,
) -> tuple[GaussianPolicy, Mlp, list[dict]]:
    """PPO over episodes sampled from (object spec, goal trajectory) tasks.
    Domain knobs are re-randomized every `domain_rand_every` env steps when
    enabled. `env_hook(env)` runs after each env construction (used by the
    augmentation loop for perturbed variants)."""
    if not tasks:
        raise ValueError("no tasks to train on")
    probe = BimanualEnv(
        tasks[0][0], tasks[0][1], np.random.default_rng(0), noise=cfg.noise
    )
    obs_dim = probe.obs_dim(cfg.obs_mode)
    act_dim = flat_action_dim(probe.n_fingers)
    if policy is None:
        policy = make_policy(
            obs_dim, act_dim, rng, hidden=cfg.hidden, init_log_std=cfg.init_log_std
        )
    if value_net is None:
        value_net = make_value(obs_dim, rng, hidden=cfg.hidden)
    policy_adam = adam_init(policy.params())
    value_adam = adam_init(value_net.params())
    th = CompletionThresholds(grace_steps=cfg.grace_steps)
    history = []
    env_steps = 0
    next_rand = 0
    for update in range(cfg.updates):
        batches, completions, returns = [], [], []
        got = 0
        while got < cfg.steps_per_update:
            spec, g = tasks[int(rng.integers(len(tasks)))]
            env = BimanualEnv(
                spec, g, np.random.default_rng(int(rng.integers(2**31))), noise=cfg.noise
            )
            if cfg.domain_rand and env_steps >= next_rand:
                env.randomize_domain()
                next_rand = env_steps + cfg.domain_rand_every
            if env_hook is not None:
                env_hook(env)
            batch, st = rollout(
                env,
                planner,
                policy,
                env.g,
                cfg,
                rng,
                thresholds=th,
                collect=True,
                perturb_init=cfg.perturb_init,
            )
            batches.append(batch)
            got += len(batch)
            env_steps += len(batch)
            completions.append(st["completion"])
            returns.append(st["return"])
        big = RolloutBatch.concat(batches)
        stats = ppo_update(policy, value_net, big, cfg, policy_adam, value_adam, rng)
        row = {
            "update": update,
            "env_steps": env_steps,
            "episodes": len(batches),
            "mean_return": float(np.mean(returns)),
            "mean_completion": float(np.mean(completions)),
            **stats,
        }
        history.append(row)
        if log_path is not None:
            _append_log(log_path, row)
    return policy, value_net, history


# -- baselines ----------------------------------------------------------------------


class ExpertReplayActor:
    """Open-loop actor that ignores observations and replays a demo's
    commands step by step."""

    def __init__(self, demo):
        self.demo = demo

    def __call__(self, step: int) -> tuple[WristAction, np.ndarray]:
        i = min(step + 1, len(self.demo) - 1)
        return self.demo.wrist_poses[i], self.demo.finger_closures[i]


# -- persistence ---------------------------------------------------------------------


def save_controller(policy: GaussianPolicy, value_net: Mlp, path: str) -> None:
    save_params(policy.params(), path + ".policy")
    save_params(value_net.params(), path + ".value")
    meta = {
        "policy_sizes": policy.net.sizes,
        "value_sizes": value_net.sizes,
    }
    with open(path + ".meta.json", "w") as fh:
        json.dump(meta, fh)


def load_controller(path: str) -> tuple[GaussianPolicy, Mlp]:
    with open(path + ".meta.json") as fh:
        meta = json.load(fh)
    rng = np.random.default_rng(0)
    policy = GaussianPolicy(Mlp(meta["policy_sizes"], rng), init_log_std=-2.0)
    value_net = Mlp(meta["value_sizes"], rng)
    assign_params(policy.params(), load_params(path + ".policy"))
    assign_params(value_net.params(), load_params(path + ".value"))
    return policy, value_net
