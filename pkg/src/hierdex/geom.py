"""Rotation, pose, and error arithmetic.

Conventions:
  - Quaternions are scalar-first float64 arrays [w, x, y, z], kept unit-norm
    and canonicalized to the w >= 0 hemisphere (ties at w == 0 broken by the
    first nonzero vector component being positive).
  - Translations are 3-vectors in meters; angles are radians everywhere
    except the translation-error metric, which reports centimeters.
  - Pose serialization order is (tx, ty, tz, qw, qx, qy, qz) in every file
    format of this package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EPS = 1e-12

_IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


def _canonicalize(q: np.ndarray) -> np.ndarray:
    """Normalize and fix the hemisphere of a scalar-first quaternion."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have 4 components: {q!r}")
    n2 = float(q @ q)
    # non-finite components propagate into the squared norm
    if not math.isfinite(n2):
        raise ValueError(f"non-finite quaternion: {q}")
    n = math.sqrt(n2)
    if n < EPS:
        raise ValueError("zero-norm quaternion")
    if abs(n2 - 1.0) > 1e-12:
        # skip the division for unit input so sign flips stay bit-exact
        q = q / n
    else:
        q = q.copy()
    if q[0] < 0.0:
        q = -q
    elif q[0] == 0.0:
        for c in q[1:]:
            if c != 0.0:
                if c < 0.0:
                    q = -q
                break
    return q


class Rot:
    """Unit quaternion rotation, canonical hemisphere (w >= 0)."""

    __slots__ = ("q",)

    def __init__(self, q):
        self.q = _canonicalize(q)

    @staticmethod
    def identity() -> "Rot":
        r = Rot.__new__(Rot)
        r.q = _IDENTITY_Q.copy()
        return r

    @classmethod
    def from_wxyz(cls, w: float, x: float, y: float, z: float) -> "Rot":
        return cls(np.array([w, x, y, z], dtype=np.float64))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Rot":
        axis = np.asarray(axis, dtype=np.float64)
        n = float(np.linalg.norm(axis))
        if n < EPS:
            return cls.identity()
        half = 0.5 * float(angle)
        return cls(np.concatenate(([np.cos(half)], np.sin(half) * axis / n)))

    @classmethod
    def from_rotvec(cls, v) -> "Rot":
        v = np.asarray(v, dtype=np.float64)
        angle = float(np.linalg.norm(v))
        if angle < EPS:
            return cls.identity()
        return cls.from_axis_angle(v, angle)

    @classmethod
    def about_z(cls, angle: float) -> "Rot":
        return cls.from_axis_angle(np.array([0.0, 0.0, 1.0]), angle)

    def matrix(self) -> np.ndarray:
        """3x3 rotation matrix (maps local to world)."""
        w, x, y, z = self.q
        ww, xx, yy, zz = w * w, x * x, y * y, z * z
        wx, wy, wz = w * x, w * y, w * z
        xy, xz, yz = x * y, x * z, y * z
        return np.array(
            [
                [ww + xx - yy - zz, 2 * (xy - wz), 2 * (xz + wy)],
                [2 * (xy + wz), ww - xx + yy - zz, 2 * (yz - wx)],
                [2 * (xz - wy), 2 * (yz + wx), ww - xx - yy + zz],
            ]
        )

    def inverse(self) -> "Rot":
        r = Rot.__new__(Rot)
        r.q = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return r

    def compose(self, other: "Rot") -> "Rot":
        return Rot(quat_mul(self.q, other.q))

    def __mul__(self, other: "Rot") -> "Rot":
        return self.compose(other)

    def rotate(self, v) -> np.ndarray:
        """Rotate a 3-vector: R v, without materializing the matrix.

        Rodrigues form v + 2 u x (u x v + w v) with the cross products
        written out; this sits on every kinematic hot path."""
        q = self.q
        w, ux, uy, uz = q[0], q[1], q[2], q[3]
        v = np.asarray(v, dtype=np.float64)
        vx, vy, vz = v[0], v[1], v[2]
        ax = uy * vz - uz * vy + w * vx
        ay = uz * vx - ux * vz + w * vy
        az = ux * vy - uy * vx + w * vz
        return np.array(
            [
                vx + 2.0 * (uy * az - uz * ay),
                vy + 2.0 * (uz * ax - ux * az),
                vz + 2.0 * (ux * ay - uy * ax),
            ]
        )

    def as_rotvec(self) -> np.ndarray:
        """Axis-angle vector (angle in [0, pi] thanks to the hemisphere fix)."""
        w = min(1.0, max(-1.0, float(self.q[0])))
        s = float(np.linalg.norm(self.q[1:]))
        if s < EPS:
            return 2.0 * self.q[1:].copy()
        return (2.0 * np.arctan2(s, w) / s) * self.q[1:]

    def angle_to(self, other: "Rot") -> float:
        return quat_angle(self, other)

    def __repr__(self) -> str:
        w, x, y, z = self.q
        return f"Rot({w:.6f}, {x:.6f}, {y:.6f}, {z:.6f})"


def quat_mul(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product of scalar-first quaternions (raw arrays)."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quat_angle(a: Rot, b: Rot) -> float:
    """Rotation angle between two orientations, in [0, pi].

    Measured from the relative quaternion with atan2, so q and -q compare
    exactly equal and small angles keep full precision (arccos of the dot
    product loses half the mantissa near zero).
    """
    wa, xa, ya, za = (float(v) for v in a.q)
    wb, xb, yb, zb = (float(v) for v in b.q)
    d = wa * wb + xa * xb + ya * yb + za * zb
    if not math.isfinite(d):
        raise ValueError("non-finite quaternion input")
    # cancelling products sit adjacent so identical or negated inputs
    # evaluate to exact zeros instead of rounding residue
    rx = wa * xb - xa * wb - ya * zb + za * yb
    ry = wa * yb - ya * wb + xa * zb - za * xb
    rz = wa * zb - za * wb + ya * xb - xa * yb
    return 2.0 * math.atan2(math.sqrt(rx * rx + ry * ry + rz * rz), abs(d))


def rot_frobenius_error(a: Rot, b: Rot) -> float:
    """Frobenius norm of the difference of the two rotation matrices."""
    return float(np.linalg.norm(a.matrix() - b.matrix()))


def translation_error(a, b) -> float:
    """Euclidean distance between two points, reported in centimeters."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return 100.0 * float(np.linalg.norm(a - b))


def slerp(a: Rot, b: Rot, u: float) -> Rot:
    """Geodesic interpolation along the shortest arc, u in [0, 1].

    Falls back to normalized linear interpolation when the inter-quaternion
    angle is below 1e-6 rad.
    """
    qa, qb = a.q, b.q
    d = float(np.dot(qa, qb))
    if d < 0.0:
        qb = -qb
        d = -d
    d = min(1.0, d)
    theta = np.arccos(d)
    if theta < 1e-6:
        return Rot((1.0 - u) * qa + u * qb)
    s = np.sin(theta)
    return Rot((np.sin((1.0 - u) * theta) / s) * qa + (np.sin(u * theta) / s) * qb)


@dataclass
class Pose:
    """Rigid transform: rotation then translation (world = r * local + t)."""

    t: np.ndarray
    r: Rot

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not math.isfinite(float(t[0]) + float(t[1]) + float(t[2])):
            raise ValueError(f"non-finite translation: {t}")
        self.t = t

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), Rot.identity())

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.t + self.r.rotate(other.t), self.r * other.r)

    def inverse(self) -> "Pose":
        rinv = self.r.inverse()
        return Pose(-rinv.rotate(self.t), rinv)

    def transform_point(self, p) -> np.ndarray:
        return self.t + self.r.rotate(p)

    def copy(self) -> "Pose":
        # Rot is treated as immutable, so sharing it is safe.
        return Pose(self.t.copy(), self.r)

    def q7(self) -> np.ndarray:
        """Serialize to 7 numbers (tx, ty, tz, qw, qx, qy, qz)."""
        return np.concatenate((self.t, self.r.q))

    @classmethod
    def from_q7(cls, arr) -> "Pose":
        arr = np.asarray(arr, dtype=np.float64).reshape(7)
        return cls(arr[:3], Rot(arr[3:]))


def pose_compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def pose_inverse(a: Pose) -> Pose:
    return a.inverse()


def transform_point(a: Pose, p) -> np.ndarray:
    return a.transform_point(p)


@dataclass
class ObjectState:
    """Object goal/actual state: orientation, position, optional hinge angle."""

    rot: Rot
    pos: np.ndarray
    joint: float | None = None

    def __post_init__(self):
        p = np.asarray(self.pos, dtype=np.float64).reshape(3)
        if not math.isfinite(float(p[0]) + float(p[1]) + float(p[2])):
            raise ValueError(f"non-finite object position: {p}")
        self.pos = p
        if self.joint is not None:
            self.joint = float(self.joint)

    def pose(self) -> Pose:
        return Pose(self.pos, self.rot)

    def copy(self) -> "ObjectState":
        return ObjectState(self.rot, self.pos.copy(), self.joint)

    def q7(self) -> np.ndarray:
        return np.concatenate((self.pos, self.rot.q))

    @classmethod
    def from_pose(cls, p: Pose, joint: float | None = None) -> "ObjectState":
        return cls(p.r, p.t, joint)


@dataclass
class WristAction:
    """Bimanual wrist target: one world-frame pose per hand."""

    left: Pose
    right: Pose

    def copy(self) -> "WristAction":
        return WristAction(self.left.copy(), self.right.copy())

    def q14(self) -> np.ndarray:
        return np.concatenate((self.left.q7(), self.right.q7()))

    @classmethod
    def from_q14(cls, v: np.ndarray) -> "WristAction":
        v = np.asarray(v, dtype=np.float64).reshape(14)
        return cls(Pose.from_q7(v[:7]), Pose.from_q7(v[7:]))
