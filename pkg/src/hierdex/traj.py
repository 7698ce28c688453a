"""Goal-trajectory construction, resampling, windowing, and perturbation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geom import ObjectState, Rot, slerp

WINDOW_SIZE = 10
MAX_RANDOM_GAP = 3
GOAL_OFFSET_RANGE = 0.02  # m, per axis
MIN_PERTURB_SPAN = 20  # steps


@dataclass
class GoalTrajectory:
    """Time-indexed sequence of object states.

    ``dt_units`` is the number of simulator time units between consecutive
    states; state i sits at simulator step ``i * dt_units``. The continuity
    guard bounds the translation delta between consecutive states and scales
    with ``dt_units`` so that skip-resampled trajectories stay valid.
    """

    states: list[ObjectState]
    category_id: int = 0
    dt_units: int = 1
    continuity_tol: float = 0.05  # m per time unit

    def __post_init__(self):
        if len(self.states) < 2:
            raise ValueError("a goal trajectory needs at least 2 states")
        if self.dt_units < 1:
            raise ValueError("dt_units must be >= 1")
        tol = self.continuity_tol * self.dt_units
        for i in range(len(self.states) - 1):
            d = float(np.linalg.norm(self.states[i + 1].pos - self.states[i].pos))
            if d >= tol:
                raise ValueError(
                    f"continuity guard: step {i} -> {i + 1} moves {d:.4f} m "
                    f">= {tol:.4f} m"
                )

    def __len__(self) -> int:
        return len(self.states)

    @property
    def horizon(self) -> int:
        """Total simulator steps spanned by the trajectory."""
        return (len(self.states) - 1) * self.dt_units

    def state_at_step(self, step: float) -> ObjectState:
        """Instantaneous goal at a simulator step, interpolating between
        states when dt_units > 1. Clamps beyond either end."""
        x = step / self.dt_units
        if x <= 0:
            return self.states[0]
        if x >= len(self.states) - 1:
            return self.states[-1]
        i = int(np.floor(x))
        u = x - i
        if u == 0.0:
            return self.states[i]
        return _blend(self.states[i], self.states[i + 1], u)


def _blend(a: ObjectState, b: ObjectState, u: float) -> ObjectState:
    pos = (1.0 - u) * a.pos + u * b.pos
    rot = slerp(a.rot, b.rot, u)
    if a.joint is None or b.joint is None:
        joint = a.joint if u < 1.0 else b.joint
    else:
        joint = (1.0 - u) * a.joint + u * b.joint
    return ObjectState(rot, pos, joint)


@dataclass
class GoalWindow:
    """Exactly WINDOW_SIZE future states plus the time-unit gap to each."""

    states: list[ObjectState]
    gaps: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.gaps:
            self.gaps = [1] * len(self.states)
        if len(self.states) != len(self.gaps):
            raise ValueError("window states and gaps must align")


def interpolate_keyposes(
    keyposes: list[tuple[ObjectState, int]], total_steps: int
) -> GoalTrajectory:
    """Dense trajectory through keyposes at given step indices.

    Translations and joint angles are linearly interpolated, rotations
    slerped. Keyposes are reproduced exactly at their indices.
    """
    if len(keyposes) < 2:
        raise ValueError("need at least 2 keyposes")
    indices = [idx for _, idx in keyposes]
    if indices[0] != 0:
        raise ValueError("first keypose index must be 0")
    if indices[-1] != total_steps - 1:
        raise ValueError("last keypose index must be total_steps - 1")
    for a, b in zip(indices, indices[1:]):
        if b <= a:
            raise ValueError(f"keypose indices must be strictly increasing ({a} -> {b})")

    states: list[ObjectState] = []
    seg = 0
    for i in range(total_steps):
        while seg < len(keyposes) - 2 and i >= indices[seg + 1]:
            seg += 1
        s0, i0 = keyposes[seg]
        s1, i1 = keyposes[seg + 1]
        if i <= i0:
            states.append(s0.copy())
        elif i >= i1:
            states.append(s1.copy())
        else:
            states.append(_blend(s0, s1, (i - i0) / (i1 - i0)))
    return GoalTrajectory(states, category_id=0, dt_units=1)


def resample_skip(g: GoalTrajectory, k: int) -> GoalTrajectory:
    """Drop k states between every two kept states (coarser in time)."""
    if k not in (1, 2):
        raise ValueError("k must be 1 or 2")
    if len(g.states) <= k + 1:
        raise ValueError("trajectory too short to skip-resample")
    kept = [g.states[i].copy() for i in range(0, len(g.states), k + 1)]
    return GoalTrajectory(
        kept,
        category_id=g.category_id,
        dt_units=g.dt_units * (k + 1),
        continuity_tol=g.continuity_tol,
    )


def resample_interp(g: GoalTrajectory, k: int) -> GoalTrajectory:
    """Insert k interpolated states between every two states (denser)."""
    if k not in (1, 2):
        raise ValueError("k must be 1 or 2")
    out: list[ObjectState] = []
    for i in range(len(g.states) - 1):
        out.append(g.states[i].copy())
        for j in range(1, k + 1):
            out.append(_blend(g.states[i], g.states[i + 1], j / (k + 1)))
    out.append(g.states[-1].copy())
    return GoalTrajectory(
        out,
        category_id=g.category_id,
        dt_units=g.dt_units,
        continuity_tol=g.continuity_tol,
    )


def sample_goal_window(
    g: GoalTrajectory,
    t: int,
    rng: np.random.Generator | None = None,
    random_gaps: bool = False,
    size: int = WINDOW_SIZE,
) -> GoalWindow:
    """Window of future states starting after index t.

    With ``random_gaps`` each successive index advances by 1 + U{0..3} time
    units; otherwise by 1. Indices past the end clamp to the final state.
    """
    if t >= len(g.states):
        raise ValueError(f"t={t} out of range for length {len(g.states)}")
    if random_gaps and rng is None:
        raise ValueError("random_gaps requires an rng")
    states: list[ObjectState] = []
    gaps: list[int] = []
    idx = t
    last = len(g.states) - 1
    for _ in range(size):
        gap = 1 + int(rng.integers(0, MAX_RANDOM_GAP + 1)) if random_gaps else 1
        idx = min(idx + gap, last)
        states.append(g.states[idx])
        gaps.append(gap)
    return GoalWindow(states, gaps)


def perturb_goal_trajectory(
    g: GoalTrajectory,
    rng: np.random.Generator,
    span: tuple[int, int] | None = None,
    offset: np.ndarray | None = None,
) -> GoalTrajectory:
    """Offset a contiguous waypoint span, blended to zero at the span edges.

    One offset vector with components uniform in +-GOAL_OFFSET_RANGE is
    scaled by a tent profile over a random span (minimum width
    MIN_PERTURB_SPAN, clamped to the trajectory). Rotations and joint angles
    are untouched and shared with the input. ``span``/``offset`` override the
    sampling when given.
    """
    n = len(g.states)
    if offset is None:
        offset = rng.uniform(-GOAL_OFFSET_RANGE, GOAL_OFFSET_RANGE, size=3)
    offset = np.asarray(offset, dtype=np.float64)
    if span is None:
        width = min(
            n, MIN_PERTURB_SPAN + int(rng.integers(0, max(1, n - MIN_PERTURB_SPAN + 1)))
        )
        start = int(rng.integers(0, n - width + 1))
        end = start + width - 1
    else:
        start, end = span
        if end < start:
            return GoalTrajectory(
                list(g.states), g.category_id, g.dt_units, g.continuity_tol
            )
        width = end - start + 1
    mid = 0.5 * (start + end)
    half = max(1e-9, 0.5 * (end - start))

    states: list[ObjectState] = []
    for i, s in enumerate(g.states):
        if i < start or i > end:
            states.append(s)
            continue
        w = 1.0 - abs(i - mid) / half if width > 1 else 0.0
        states.append(ObjectState(s.rot, s.pos + w * offset, s.joint))
    return GoalTrajectory(
        states,
        category_id=g.category_id,
        dt_units=g.dt_units,
        continuity_tol=g.continuity_tol,
    )


def relative_goal_window(w: GoalWindow, current: ObjectState) -> np.ndarray:
    """Window states expressed relative to the current object state.

    Per state: translation delta in the current frame (3), relative rotation
    quaternion (4), joint-angle delta (1). Flat length len(w) * 8.
    """
    out = np.zeros(len(w.states) * 8)
    rinv = current.rot.inverse()
    cj = current.joint if current.joint is not None else 0.0
    for i, s in enumerate(w.states):
        o = 8 * i
        out[o : o + 3] = rinv.rotate(s.pos - current.pos)
        out[o + 3 : o + 7] = (rinv * s.rot).q
        out[o + 7] = (s.joint if s.joint is not None else 0.0) - cj
    return out


def compose_relative_window(features: np.ndarray, current: ObjectState) -> list[ObjectState]:
    """Inverse of relative_goal_window (round-trip check / debugging)."""
    n = len(features) // 8
    states = []
    cj = current.joint if current.joint is not None else 0.0
    for i in range(n):
        f = features[8 * i : 8 * i + 8]
        pos = current.pos + current.rot.rotate(f[:3])
        rot = current.rot * Rot(f[3:7])
        joint = None if current.joint is None else cj + f[7]
        states.append(ObjectState(rot, pos, joint))
    return states


def save_trajectory(g: GoalTrajectory, path: str) -> None:
    """JSON-lines: header with category/dt, then one state per line."""
    with open(path, "w") as fh:
        fh.write(
            json.dumps({"category_id": g.category_id, "dt_units": g.dt_units}) + "\n"
        )
        for i, s in enumerate(g.states):
            rec = {"t": i, "pose": [float(v) for v in s.q7()], "joint": s.joint}
            fh.write(json.dumps(rec) + "\n")


def load_trajectory(path: str) -> GoalTrajectory:
    with open(path) as fh:
        header = json.loads(fh.readline())
        states = []
        for line in fh:
            rec = json.loads(line)
            pose = np.asarray(rec["pose"], dtype=np.float64)
            states.append(ObjectState(Rot(pose[3:]), pose[:3], rec["joint"]))
    return GoalTrajectory(
        states, category_id=header["category_id"], dt_units=header["dt_units"]
    )
