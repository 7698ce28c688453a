"""Kinematic bimanual-manipulation simulator.

Contact is modeled as threshold-gated rigid attachment instead of force
dynamics: a hand grabs a part when its wrist is close to the part's grasp
site and the fingers are mostly closed, and the part then follows the wrist
rigidly until the fingers open. Every object is a base part plus a child
part joined by a hinge about the base-frame x axis; rigid objects simply
have joint limits [0, 0]. Object frames sit at the bottom-center of the
base part, so a resting object has z = 0 (table height). World frame is
right-handed, z up. Units are meters and radians throughout.

The reported ("exposed") object state optionally carries zero-mean uniform
process noise; the internal state driving attachment stays clean so rigid
attachment is exact.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .geom import ObjectState, Pose, Rot, WristAction
from .traj import GoalTrajectory, relative_goal_window, sample_goal_window

GRASP_RADIUS = 0.04  # m, wrist-to-site attach distance
ATTACH_CLOSURE = 0.7
DETACH_CLOSURE = 0.4
WRIST_TRANS_RATE = 0.02  # m per step
WRIST_ROT_RATE = 0.1  # rad per step
FINGER_RATE = 0.2  # closure units per step
FALL_RATE = 0.05  # m per step
TABLE_Z = 0.0
NOISE_TRANS = 0.001  # m, process-noise half-range
NOISE_ROT = 0.005  # rad
N_FINGERS = 4
INIT_XY_RANGE = 0.02  # m, reset perturbation
INIT_YAW_MAX = np.deg2rad(30.0)
FINGER_LEN = 0.05  # m, fingertip arc radius
FINGER_SPREAD = 0.03  # m, half-width of the finger row

HOME_LEFT = Pose(np.array([-0.25, -0.05, 0.15]), Rot.identity())
HOME_RIGHT = Pose(np.array([0.25, -0.05, 0.15]), Rot.identity())

_HINGE_AXIS = np.array([1.0, 0.0, 0.0])


@dataclass
class ObjectSpec:
    """Geometry and randomization knobs for one object category."""

    category_id: int
    dims: np.ndarray  # (width, length, height) -> (x, y, z) extents, m
    articulated: bool
    joint_limits: tuple[float, float]
    grasp_sites: tuple[Pose, Pose]  # base-part frame, child-part frame
    name: str = ""
    mass_scale: float = 1.0
    friction_scale: float = 1.0

    def __post_init__(self):
        self.dims = np.asarray(self.dims, dtype=np.float64).reshape(3)
        if np.any(self.dims <= 0):
            raise ValueError(f"dims must be positive: {self.dims}")
        lo, hi = self.joint_limits
        if self.articulated and not lo < hi:
            raise ValueError("articulated object needs joint_limits lo < hi")
        if len(self.grasp_sites) != 2:
            raise ValueError("exactly one grasp site per part (2 total)")

    @property
    def longest_dim(self) -> float:
        return float(self.dims.max())

    def hinge_anchor(self) -> np.ndarray:
        """Child-part frame origin in the base frame: the top back edge for
        articulated objects, the base origin otherwise."""
        if self.articulated:
            return np.array([0.0, -0.5 * self.dims[1], self.dims[2]])
        return np.zeros(3)

    def grasp_radius(self) -> float:
        """Attach distance after the friction knob (+-10% over [0.8, 1.2])."""
        return GRASP_RADIUS * (1.0 + 0.5 * (self.friction_scale - 1.0))

    def to_json(self) -> dict:
        return {
            "category_id": self.category_id,
            "name": self.name,
            "dims": [float(v) for v in self.dims],
            "articulated": self.articulated,
            "joint_limits": [float(v) for v in self.joint_limits],
            "grasp_sites": [[float(v) for v in p.q7()] for p in self.grasp_sites],
            "mass_scale": self.mass_scale,
            "friction_scale": self.friction_scale,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ObjectSpec":
        return cls(
            category_id=d["category_id"],
            dims=np.asarray(d["dims"]),
            articulated=d["articulated"],
            joint_limits=(d["joint_limits"][0], d["joint_limits"][1]),
            grasp_sites=(
                Pose.from_q7(np.asarray(d["grasp_sites"][0])),
                Pose.from_q7(np.asarray(d["grasp_sites"][1])),
            ),
            name=d.get("name", ""),
            mass_scale=d.get("mass_scale", 1.0),
            friction_scale=d.get("friction_scale", 1.0),
        )


def default_catalog() -> list[ObjectSpec]:
    """Five desk-scale categories; the last one is held out as unseen."""

    def rigid(cid, name, w, l, h):
        return ObjectSpec(
            category_id=cid,
            dims=np.array([w, l, h]),
            articulated=False,
            joint_limits=(0.0, 0.0),
            grasp_sites=(
                Pose(np.array([-0.5 * w, 0.0, 0.5 * h]), Rot.identity()),
                Pose(np.array([0.5 * w, 0.0, 0.5 * h]), Rot.identity()),
            ),
            name=name,
        )

    def hinged(cid, name, w, l, h, lid_angle):
        # base site on the left face; lid site near the lid's free edge
        return ObjectSpec(
            category_id=cid,
            dims=np.array([w, l, h]),
            articulated=True,
            joint_limits=(0.0, lid_angle),
            grasp_sites=(
                Pose(np.array([-0.5 * w, 0.0, 0.5 * h]), Rot.identity()),
                Pose(np.array([0.0, 0.8 * l, 0.01]), Rot.identity()),
            ),
            name=name,
        )

    return [
        rigid(0, "box", 0.12, 0.08, 0.06),
        rigid(1, "carton", 0.10, 0.10, 0.08),
        hinged(2, "laptop", 0.14, 0.10, 0.02, 1.3),
        hinged(3, "case", 0.12, 0.06, 0.04, 1.2),
        rigid(4, "tray", 0.16, 0.12, 0.03),
    ]


def scale_object(spec: ObjectSpec, sx: float, sy: float, sz: float) -> ObjectSpec:
    """Anisotropic rescale of dims and grasp-site translations."""
    s = np.array([sx, sy, sz], dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError(f"scales must be positive: {s}")
    sites = tuple(Pose(p.t * s, p.r) for p in spec.grasp_sites)
    return replace(spec, dims=spec.dims * s, grasp_sites=sites)


def part_pose(state: ObjectState, spec: ObjectSpec, part: int) -> Pose:
    """World pose of part 0 (base) or part 1 (hinged child)."""
    base = state.pose()
    if part == 0:
        return base
    theta = state.joint if state.joint is not None else 0.0
    hinge = Pose(spec.hinge_anchor(), Rot.from_axis_angle(_HINGE_AXIS, theta))
    return base.compose(hinge)


def grasp_site_world(state: ObjectState, spec: ObjectSpec, part: int) -> Pose:
    return part_pose(state, spec, part).compose(spec.grasp_sites[part])


def implied_joint(base: Pose, child: Pose, spec: ObjectSpec) -> float:
    """Hinge angle that best explains the child pose, clamped to limits."""
    rel = base.compose(Pose(spec.hinge_anchor(), Rot.identity())).inverse().compose(child)
    q = rel.r.q
    theta = 2.0 * np.arctan2(float(q[1]), float(q[0]))
    lo, hi = spec.joint_limits
    return float(np.clip(theta, lo, hi))


def fingertips(wrist: Pose, fingers: np.ndarray) -> np.ndarray:
    """Fingertip world points: tips move on an arc curling toward the palm
    (-z in the wrist frame) as closure goes 0 -> 1."""
    fingers = np.asarray(fingers, dtype=np.float64)
    f = fingers.shape[0]
    ys = np.linspace(-FINGER_SPREAD, FINGER_SPREAD, f)
    phi = fingers * (0.5 * np.pi)
    local = np.stack(
        [FINGER_LEN * np.cos(phi), ys, -FINGER_LEN * np.sin(phi)], axis=1
    )
    return np.array([wrist.transform_point(p) for p in local])


@dataclass
class HandState:
    wrist: Pose
    fingers: np.ndarray

    def __post_init__(self):
        self.fingers = np.clip(
            np.asarray(self.fingers, dtype=np.float64).reshape(-1), 0.0, 1.0
        )

    @property
    def closure(self) -> float:
        return float(self.fingers.mean())

    def fingertip_points(self) -> np.ndarray:
        return fingertips(self.wrist, self.fingers)

    def copy(self) -> "HandState":
        return HandState(self.wrist.copy(), self.fingers.copy())


@dataclass
class WorldState:
    object: ObjectState  # clean kinematic state
    left: HandState
    right: HandState
    attach: dict  # hand name -> None | (part id, grasp-frame Pose)
    step: int
    exposed: ObjectState  # object state as observers/metrics see it
    prev_action: np.ndarray
    prev_object: ObjectState
    prev_fingers: tuple[np.ndarray, np.ndarray]
    done: bool = False

    def hand(self, name: str) -> HandState:
        return self.left if name == "left" else self.right


@dataclass
class StepInfo:
    step: int
    done: bool
    attached: dict = field(default_factory=dict)  # hand -> part id or None
    object: ObjectState | None = None  # exposed state after the step


class BimanualEnv:
    """Two floating wrists with simple fingers, one object, one goal.

    The env owns its RNG; clone() deep-copies everything including the
    generator state so lookahead rollouts replay exactly.
    """

    def __init__(
        self,
        spec: ObjectSpec,
        g: GoalTrajectory,
        rng: np.random.Generator,
        noise: bool = False,
        n_fingers: int = N_FINGERS,
    ):
        self.spec = spec
        self.g = g
        self.rng = rng
        self.noise = noise
        self.noise_scale = 1.0
        self.n_fingers = n_fingers
        self.horizon = g.horizon
        self.state: WorldState | None = None

    # -- lifecycle ---------------------------------------------------------

    def reset(self, perturb_init: bool = False) -> WorldState:
        start = self.g.states[0].copy()
        if perturb_init:
            dxy, yaw = sample_init_perturbation(self.rng)
            start.pos = start.pos + np.array([dxy[0], dxy[1], 0.0])
            start.rot = Rot.about_z(yaw) * start.rot
        prev_action = np.zeros(12 + 2 * self.n_fingers)
        fingers = np.zeros(self.n_fingers)
        self.state = WorldState(
            object=start,
            left=HandState(HOME_LEFT.copy(), fingers.copy()),
            right=HandState(HOME_RIGHT.copy(), fingers.copy()),
            attach={"left": None, "right": None},
            step=0,
            exposed=start.copy(),
            prev_action=prev_action,
            prev_object=start.copy(),
            prev_fingers=(fingers.copy(), fingers.copy()),
            done=False,
        )
        return self.state

    def clone(self) -> "BimanualEnv":
        """Independent copy for lookahead rollouts, RNG state included.

        The goal trajectory and object spec are shared, never copied: the
        env treats both as immutable (randomize_domain swaps the spec for a
        new value rather than mutating it)."""
        new = BimanualEnv.__new__(BimanualEnv)
        new.spec = self.spec
        new.g = self.g
        new.rng = copy.deepcopy(self.rng)
        new.noise = self.noise
        new.noise_scale = self.noise_scale
        new.n_fingers = self.n_fingers
        new.horizon = self.horizon
        new.state = copy.deepcopy(self.state)
        return new

    # -- dynamics ----------------------------------------------------------

    def step(
        self, wrist_cmds: WristAction, finger_cmds: np.ndarray
    ) -> tuple[WorldState, StepInfo]:
        s = self.state
        if s is None:
            raise RuntimeError("reset() before step()")
        if s.done:
            raise RuntimeError("episode finished; reset() to continue")
        finger_cmds = np.asarray(finger_cmds, dtype=np.float64).reshape(
            2, self.n_fingers
        )
        for p in (wrist_cmds.left, wrist_cmds.right):
            if not (np.all(np.isfinite(p.t)) and np.all(np.isfinite(p.r.q))):
                raise ValueError("non-finite wrist command")
        if not np.all(np.isfinite(finger_cmds)):
            raise ValueError("non-finite finger command")

        prev_object = s.object.copy()
        prev_fingers = (s.left.fingers.copy(), s.right.fingers.copy())
        pre_wrists = {"left": s.left.wrist, "right": s.right.wrist}

        cmds = {"left": wrist_cmds.left, "right": wrist_cmds.right}
        for i, name in enumerate(("left", "right")):
            hand = s.hand(name)
            hand.wrist = move_toward(hand.wrist, cmds[name])
            delta = np.clip(
                np.clip(finger_cmds[i], 0.0, 1.0) - hand.fingers,
                -FINGER_RATE,
                FINGER_RATE,
            )
            hand.fingers = np.clip(hand.fingers + delta, 0.0, 1.0)

        # detach before attach so a released part is grabbable the same step
        for name in ("left", "right"):
            if s.attach[name] is not None and s.hand(name).closure < DETACH_CLOSURE:
                s.attach[name] = None
        r_g = self.spec.grasp_radius()
        for name in ("left", "right"):
            if s.attach[name] is not None:
                continue
            hand = s.hand(name)
            if hand.closure <= ATTACH_CLOSURE:
                continue
            held = {s.attach[n][0] for n in ("left", "right") if s.attach[n]}
            best = None
            for part in (0, 1):
                if part in held:
                    continue
                site = grasp_site_world(s.object, self.spec, part)
                d = float(np.linalg.norm(hand.wrist.t - site.t))
                if d <= r_g and (best is None or d < best[1]):
                    best = (part, d)
            if best is not None:
                part = best[0]
                offset = hand.wrist.inverse().compose(
                    part_pose(s.object, self.spec, part)
                )
                s.attach[name] = (part, offset)

        self._advance_object(s)

        s.exposed = self._expose(s.object)
        s.prev_object = prev_object
        s.prev_fingers = prev_fingers
        s.prev_action = _encode_action(
            pre_wrists, cmds, finger_cmds, self.n_fingers
        )
        s.step += 1
        s.done = s.step >= self.horizon
        info = StepInfo(
            step=s.step,
            done=s.done,
            attached={
                n: (s.attach[n][0] if s.attach[n] else None)
                for n in ("left", "right")
            },
            object=s.exposed.copy(),
        )
        return s, info

    def _advance_object(self, s: WorldState) -> None:
        holder = {}
        for name in ("left", "right"):
            if s.attach[name] is not None:
                part, offset = s.attach[name]
                holder[part] = s.hand(name).wrist.compose(offset)
        if 0 in holder and 1 in holder:
            base = holder[0]
            joint = (
                implied_joint(base, holder[1], self.spec)
                if self.spec.articulated
                else s.object.joint
            )
            s.object = ObjectState(base.r, base.t, joint)
        elif 0 in holder:
            base = holder[0]
            s.object = ObjectState(base.r, base.t, s.object.joint)
        elif 1 in holder:
            if self.spec.articulated:
                s.object = ObjectState(
                    s.object.rot,
                    s.object.pos,
                    implied_joint(s.object.pose(), holder[1], self.spec),
                )
            # a rigid object's child site is on the base body, so holding it
            # drives the base
            else:
                child = holder[1]
                s.object = ObjectState(child.r, child.t, s.object.joint)
        else:
            if s.object.pos[2] > TABLE_Z:
                pos = s.object.pos.copy()
                pos[2] = max(TABLE_Z, pos[2] - FALL_RATE)
                s.object = ObjectState(s.object.rot, pos, s.object.joint)

    def _expose(self, obj: ObjectState) -> ObjectState:
        if not self.noise:
            return obj.copy()
        # direction x magnitude keeps the translation noise norm-bounded
        dt = _random_dir(self.rng) * self.rng.uniform(0.0, NOISE_TRANS) * self.noise_scale
        axis = _random_dir(self.rng)
        ang = self.rng.uniform(-NOISE_ROT, NOISE_ROT) * self.noise_scale
        return ObjectState(
            Rot.from_axis_angle(axis, ang) * obj.rot, obj.pos + dt, obj.joint
        )

    # -- randomization -----------------------------------------------------

    def randomize_domain(self) -> ObjectSpec:
        """Resample mass/friction knobs and the observation-noise scale.
        The rollout driver calls this every 1000 steps."""
        self.spec = replace(
            self.spec,
            mass_scale=float(self.rng.uniform(0.8, 1.2)),
            friction_scale=float(self.rng.uniform(0.8, 1.2)),
        )
        self.noise_scale = float(self.rng.uniform(0.0, 1.5))
        return self.spec

    # -- observation -------------------------------------------------------

    def observe(
        self, wrist_window: list[WristAction] | None, mode: str = "teacher"
    ) -> np.ndarray:
        s = self.state
        obj = s.exposed
        t_idx = min(s.step // self.g.dt_units, len(self.g) - 1)
        window = sample_goal_window(self.g, t_idx)
        goal_feat = relative_goal_window(window, obj)

        w = len(window.states)
        wrist_feat = np.zeros(w * 14)
        if wrist_window is not None:
            for i, wa in enumerate(wrist_window[:w]):
                for j, (cur, tgt) in enumerate(
                    ((s.left.wrist, wa.left), (s.right.wrist, wa.right))
                ):
                    o = 14 * i + 7 * j
                    rinv = cur.r.inverse()
                    wrist_feat[o : o + 3] = rinv.rotate(tgt.t - cur.t)
                    wrist_feat[o + 3 : o + 7] = (rinv * tgt.r).q

        parts = [
            obj.q7(),
            [obj.joint if obj.joint is not None else 0.0],
            s.left.wrist.q7(),
            s.right.wrist.q7(),
            s.left.fingers,
            s.right.fingers,
            s.prev_action,
            goal_feat,
            wrist_feat,
        ]
        if mode == "teacher":
            lin_vel = s.object.pos - s.prev_object.pos
            ang_vel = (s.prev_object.rot.inverse() * s.object.rot).as_rotvec()
            parts.append(lin_vel)
            parts.append(ang_vel)
            parts.append(s.left.fingers - s.prev_fingers[0])
            parts.append(s.right.fingers - s.prev_fingers[1])
        elif mode != "student":
            raise ValueError(f"unknown observation mode: {mode}")
        return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])

    def obs_dim(self, mode: str) -> int:
        base = 7 + 1 + 14 + 2 * self.n_fingers + (12 + 2 * self.n_fingers) + 80 + 140
        return base + (6 + 2 * self.n_fingers if mode == "teacher" else 0)


def sample_init_perturbation(
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Initial-state augmentation draw: xy shift in +-INIT_XY_RANGE and a
    z rotation in [0, INIT_YAW_MAX]."""
    dxy = rng.uniform(-INIT_XY_RANGE, INIT_XY_RANGE, size=2)
    yaw = float(rng.uniform(0.0, INIT_YAW_MAX))
    assert np.all(np.abs(dxy) <= INIT_XY_RANGE) and 0.0 <= yaw <= INIT_YAW_MAX
    return dxy, yaw


def _random_dir(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    n = float(np.linalg.norm(v))
    return v / n if n > 0 else np.array([0.0, 0.0, 1.0])


def move_toward(current: Pose, target: Pose) -> Pose:
    dt = target.t - current.t
    n = float(np.linalg.norm(dt))
    t_new = target.t if n <= WRIST_TRANS_RATE else current.t + dt * (WRIST_TRANS_RATE / n)
    rel = current.r.inverse() * target.r
    v = rel.as_rotvec()
    ang = float(np.linalg.norm(v))
    if ang <= WRIST_ROT_RATE:
        r_new = target.r
    else:
        r_new = current.r * Rot.from_rotvec(v * (WRIST_ROT_RATE / ang))
    return Pose(t_new, r_new)


def _encode_action(pre_wrists, cmds, finger_cmds, n_fingers) -> np.ndarray:
    out = np.zeros(12 + 2 * n_fingers)
    for i, name in enumerate(("left", "right")):
        pre = pre_wrists[name]
        cmd = cmds[name]
        out[6 * i : 6 * i + 3] = cmd.t - pre.t
        out[6 * i + 3 : 6 * i + 6] = (pre.r.inverse() * cmd.r).as_rotvec()
    out[12 : 12 + n_fingers] = finger_cmds[0]
    out[12 + n_fingers :] = finger_cmds[1]
    return out


def write_episode_log(records: list[dict], path: str) -> None:
    """Episode log: JSON-lines of (step, object state, hand states,
    attachments), one record per step."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def episode_record(state: WorldState) -> dict:
    return {
        "step": state.step,
        "object": [float(v) for v in state.object.q7()],
        "joint": state.object.joint,
        "left_wrist": [float(v) for v in state.left.wrist.q7()],
        "right_wrist": [float(v) for v in state.right.wrist.q7()],
        "left_fingers": [float(v) for v in state.left.fingers],
        "right_fingers": [float(v) for v in state.right.fingers],
        "attach": {
            k: (v[0] if v else None) for k, v in state.attach.items()
        },
    }
