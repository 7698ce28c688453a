"""High-level bimanual wrist planner: behavior-cloned window regression.

The net never predicts world poses directly. For each window state it
predicts small offsets relative to a grasp-standoff prior (the pose a
wrist would hold to carry that state's grasp site), so an untrained
zero-output net already proposes sensible standoff wrists and training
only has to learn corrections: the expert's actual standoff, scale and
perturbation compensation harvested by the augmentation loop, and the
state-feedback needed when the object is off its goal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .env import ObjectSpec, grasp_site_world
from .expert import DemoSet
from .geom import (
    ObjectState,
    Pose,
    Rot,
    WristAction,
    quat_angle,
    rot_frobenius_error,
    translation_error,
)
from .net import WindowNet, adam_init, adam_step, assign_params, load_params, save_params
from .traj import WINDOW_SIZE, GoalWindow, sample_goal_window

PRIOR_STANDOFF = Pose(np.array([0.0, 0.0, 0.03]), Rot.identity())
FINETUNE_LR_FACTOR = 0.1
_IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass
class PlannerConfig:
    T: int = WINDOW_SIZE
    category_count: int = 5
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    samples_per_demo: int = 120
    d_model: int = 64
    head_hidden: int = 64

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("window size T must be >= 1")


class Planner:
    """Category registry + window net + the standoff-prior parameterization."""

    def __init__(
        self,
        catalog: list[ObjectSpec],
        cfg: PlannerConfig | None = None,
        rng: np.random.Generator | None = None,
    ):
        if rng is None:
            rng = np.random.default_rng(0)
        self.cfg = cfg if cfg is not None else PlannerConfig(category_count=len(catalog))
        self.catalog = list(catalog)
        self.specs = {s.category_id: s for s in catalog}
        self.cat_slot = {s.category_id: i for i, s in enumerate(catalog)}
        self.token_dim = 8 + len(catalog)
        self.net = WindowNet(
            self.token_dim,
            14,
            rng,
            d_model=self.cfg.d_model,
            head_hidden=self.cfg.head_hidden,
            out_scale=0.01,
        )
        self.force_category: int | None = None

    # -- category handling ---------------------------------------------------

    def resolve_category(self, category_id: int) -> int:
        if category_id in self.cat_slot:
            return category_id
        if self.force_category is not None:
            return self.force_category
        raise KeyError(
            f"unknown category {category_id}; set force_category to substitute "
            f"a trained id"
        )

    # -- encoding --------------------------------------------------------------

    def tokens(
        self, category_id: int, window: GoalWindow, current: ObjectState
    ) -> np.ndarray:
        cid = self.resolve_category(category_id)
        t = len(window.states)
        feats = np.zeros((t, self.token_dim))
        rinv = current.rot.inverse()
        cj = current.joint if current.joint is not None else 0.0
        for i, s in enumerate(window.states):
            feats[i, 0:3] = rinv.rotate(s.pos - current.pos)
            feats[i, 3:7] = (rinv * s.rot).q
            feats[i, 7] = (s.joint if s.joint is not None else 0.0) - cj
        feats[:, 8 + self.cat_slot[cid]] = 1.0
        return feats

    def priors(self, category_id: int, window: GoalWindow) -> list[WristAction]:
        cid = self.resolve_category(category_id)
        spec = self.specs[cid]
        out = []
        for s in window.states:
            out.append(
                WristAction(
                    grasp_site_world(s, spec, 0).compose(PRIOR_STANDOFF),
                    grasp_site_world(s, spec, 1).compose(PRIOR_STANDOFF),
                )
            )
        return out

    # -- inference --------------------------------------------------------------

    def forward(
        self, category_id: int, window: GoalWindow, current: ObjectState
    ) -> list[WristAction]:
        x = self.tokens(category_id, window, current)
        y = self.net(x)
        return self.compose(category_id, window, y)

    def compose(
        self, category_id: int, window: GoalWindow, offsets: np.ndarray
    ) -> list[WristAction]:
        priors = self.priors(category_id, window)
        out = []
        for i, pr in enumerate(priors):
            hands = []
            for h, base in enumerate((pr.left, pr.right)):
                o = offsets[i, 7 * h : 7 * h + 7]
                t = base.t + base.r.rotate(o[:3])
                r = base.r * Rot(o[3:7] + _IDENTITY_Q)
                hands.append(Pose(t, r))
            out.append(WristAction(hands[0], hands[1]))
        return out

    def target_offsets(
        self, category_id: int, window: GoalWindow, wrists: list[WristAction]
    ) -> np.ndarray:
        """Inverse of compose: the offsets that reproduce given wrist poses."""
        priors = self.priors(category_id, window)
        y = np.zeros((len(priors), 14))
        for i, (pr, w) in enumerate(zip(priors, wrists)):
            for h, (base, tgt) in enumerate(((pr.left, w.left), (pr.right, w.right))):
                rinv = base.r.inverse()
                y[i, 7 * h : 7 * h + 3] = rinv.rotate(tgt.t - base.t)
                y[i, 7 * h + 3 : 7 * h + 7] = (rinv * tgt.r).q - _IDENTITY_Q
        return y

    def params(self) -> list[np.ndarray]:
        return self.net.params()


def planner_forward(
    planner: Planner, category_id: int, window: GoalWindow, current: ObjectState
) -> list[WristAction]:
    return planner.forward(category_id, window, current)


# -- training -------------------------------------------------------------------


def window_indices(start: int, gaps: list[int], last: int) -> list[int]:
    idx = []
    t = start
    for g in gaps:
        t = min(t + g, last)
        idx.append(t)
    return idx


def bc_pairs(
    planner: Planner, demos: list, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Supervised (tokens, offsets) built by sliding random-gap windows over
    each demo, conditioning on the demo's own object state at the slide
    point."""
    xs, ys = [], []
    per = planner.cfg.samples_per_demo
    for demo in demos:
        g = demo.goal()
        last = len(g) - 1
        n = min(per, last)
        starts = rng.choice(last, size=n, replace=n > last) if last > 0 else []
        for t in sorted(int(v) for v in starts):
            window = sample_goal_window(g, t, rng, random_gaps=True)
            idx = window_indices(t, window.gaps, last)
            wrists = [demo.wrist_poses[j] for j in idx]
            xs.append(planner.tokens(demo.category_id, window, demo.object_states[t]))
            ys.append(planner.target_offsets(demo.category_id, window, wrists))
    if not xs:
        raise ValueError("no training pairs (empty demo list)")
    return np.stack(xs), np.stack(ys)


def _run_epochs(
    planner: Planner,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    holdout: tuple[np.ndarray, np.ndarray] | None = None,
) -> list[dict]:
    params = planner.params()
    state = adam_init(params)
    bs = planner.cfg.batch_size
    curve = []
    n = x.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for i in range(0, n, bs):
            sel = order[i : i + bs]
            xb, yb = x[sel], y[sel]
            pred, cache = planner.net.forward(xb)
            err = pred - yb
            loss = float(np.mean(err**2))
            grads, _ = planner.net.backward(cache, 2.0 * err / err.size)
            adam_step(params, grads, state, lr=lr)
            losses.append(loss)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if holdout is not None:
            hp = planner.net(holdout[0])
            row["holdout_loss"] = float(np.mean((hp - holdout[1]) ** 2))
        curve.append(row)
    return curve


def train_bc(
    planner: Planner,
    dataset: DemoSet,
    cfg: PlannerConfig | None = None,
    rng: np.random.Generator | None = None,
) -> list[dict]:
    """Behavior cloning on the trained split; returns the loss curve."""
    if rng is None:
        rng = np.random.default_rng(1)
    if cfg is not None:
        planner.cfg = cfg
    demos = dataset.split("trained")
    if not demos:
        raise ValueError("trained split is empty")
    x, y = bc_pairs(planner, demos, rng)
    n_hold = max(1, x.shape[0] // 10)
    perm = rng.permutation(x.shape[0])
    hold = (x[perm[:n_hold]], y[perm[:n_hold]])
    xt, yt = x[perm[n_hold:]], y[perm[n_hold:]]
    curve = _run_epochs(
        planner, xt, yt, planner.cfg.epochs, planner.cfg.lr, rng, holdout=hold
    )
    return curve


def finetune(
    planner: Planner,
    demos: DemoSet,
    cfg: PlannerConfig | None = None,
    rng: np.random.Generator | None = None,
    epochs: int | None = None,
) -> list[dict]:
    """Continue BC at reduced lr on an aggregated (original + harvested)
    dataset. Empty input is a no-op."""
    if rng is None:
        rng = np.random.default_rng(2)
    if cfg is not None:
        planner.cfg = cfg
    if len(demos) == 0:
        return []
    x, y = bc_pairs(planner, demos.demos, rng)
    n_epochs = epochs if epochs is not None else max(1, planner.cfg.epochs // 3)
    return _run_epochs(
        planner, x, y, n_epochs, planner.cfg.lr * FINETUNE_LR_FACTOR, rng
    )


# -- evaluation -------------------------------------------------------------------


@dataclass
class PlannerReport:
    metric: str
    rows: list[dict] = field(default_factory=list)  # one per sequence

    def aggregates(self) -> list[dict]:
        splits: dict[str, list[dict]] = {}
        for r in self.rows:
            splits.setdefault(r["split"], []).append(r)
        out = []
        for split, rows in sorted(splits.items()):
            out.append(
                {
                    "split": split,
                    "sequences": len(rows),
                    "TE_cum_cm": float(np.mean([r["te_cum_cm"] for r in rows])),
                    "OE_cum": float(np.mean([r["oe_cum"] for r in rows])),
                    "metric": self.metric,
                }
            )
        return out

    def to_csv(self, path: str) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(
                fh, fieldnames=["split", "sequences", "TE_cum_cm", "OE_cum", "metric"]
            )
            w.writeheader()
            for row in self.aggregates():
                w.writerow(row)


def eval_planner(
    planner: Planner, dataset: DemoSet, split: str, metric: str = "angle"
) -> PlannerReport:
    """Slide a 1-gap window over each sequence and accumulate the step-1
    prediction error against the demo wrists. TE/OE are the mean of the two
    hands, summed over the sequence."""
    if metric not in ("angle", "frobenius"):
        raise ValueError(f"unknown metric: {metric}")
    demos = dataset.split(split)
    if not demos:
        raise ValueError(f"split {split} is empty")
    report = PlannerReport(metric=metric)
    oe_fn = quat_angle if metric == "angle" else rot_frobenius_error
    for k, demo in enumerate(demos):
        g = demo.goal()
        last = len(g) - 1
        te = 0.0
        oe = 0.0
        for t in range(last):
            window = sample_goal_window(g, t)
            pred = planner.forward(demo.category_id, window, demo.object_states[t])[0]
            truth = demo.wrist_poses[min(t + 1, last)]
            te += 0.5 * (
                translation_error(pred.left.t, truth.left.t)
                + translation_error(pred.right.t, truth.right.t)
            )
            oe += 0.5 * (
                oe_fn(pred.left.r, truth.left.r) + oe_fn(pred.right.r, truth.right.r)
            )
        report.rows.append(
            {
                "split": split,
                "sequence": k,
                "category_id": demo.category_id,
                "steps": last,
                "te_cum_cm": te,
                "oe_cum": oe,
            }
        )
    return report


# -- persistence -------------------------------------------------------------------


def save_planner(planner: Planner, path: str) -> None:
    save_params(planner.params(), path)
    meta = {
        "cfg": {
            "T": planner.cfg.T,
            "category_count": planner.cfg.category_count,
            "epochs": planner.cfg.epochs,
            "batch_size": planner.cfg.batch_size,
            "lr": planner.cfg.lr,
            "samples_per_demo": planner.cfg.samples_per_demo,
            "d_model": planner.cfg.d_model,
            "head_hidden": planner.cfg.head_hidden,
        },
        "catalog": [s.to_json() for s in planner.catalog],
        "force_category": planner.force_category,
    }
    with open(path + ".meta.json", "w") as fh:
        json.dump(meta, fh, indent=1)


def load_planner(path: str) -> Planner:
    with open(path + ".meta.json") as fh:
        meta = json.load(fh)
    catalog = [ObjectSpec.from_json(d) for d in meta["catalog"]]
    cfg = PlannerConfig(**meta["cfg"])
    planner = Planner(catalog, cfg, np.random.default_rng(0))
    assign_params(planner.params(), load_params(path))
    planner.force_category = meta["force_category"]
    return planner
