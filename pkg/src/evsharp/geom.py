"""SE(3) poses, exponential/log maps, trajectory interpolation, ray generation.

Rotations are stored as unit quaternions (w, x, y, z).  Twists are 6-vectors
(omega, v) with the rotation part first.  The low-level math is written on
component tuples so the same formulas run on floats, numpy arrays, and
autodiff variables (see train's pose chain).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

# Below this rotation angle the closed-form exp/log coefficients switch to
# their 2nd-order Taylor expansions (0/0 guard at the identity).
SMALL_ANGLE = 1e-8
_SMALL_SQ = SMALL_ANGLE * SMALL_ANGLE


# ---------------------------------------------------------------------------
# component-tuple quaternion / se(3) math (works on scalars, arrays, Vars)

def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def quat_conj(q):
    w, x, y, z = q
    return (w, -x, -y, -z)


def quat_rotate(q, v):
    """Rotate vector tuple v by unit quaternion q (q v q*)."""
    w, x, y, z = q
    vx, vy, vz = v
    # t = 2 q_vec x v
    tx = 2.0 * (y * vz - z * vy)
    ty = 2.0 * (z * vx - x * vz)
    tz = 2.0 * (x * vy - y * vx)
    # v' = v + w t + q_vec x t
    return (
        vx + w * tx + y * tz - z * ty,
        vy + w * ty + z * tx - x * tz,
        vz + w * tz + x * ty - y * tx,
    )


def quat_exp_rotvec(o):
    """Unit quaternion for rotation vector (ox, oy, oz)."""
    ox, oy, oz = o
    t2 = ox * ox + oy * oy + oz * oz
    th = ad.sqrt(ad.maximum(t2, _SMALL_SQ))
    small = t2 < _SMALL_SQ
    # sin(th/2)/th and cos(th/2), with Taylor branches in th^2
    s = ad.where(small, 0.5 - t2 / 48.0, ad.sin(0.5 * th) / th)
    w = ad.where(small, 1.0 - t2 / 8.0, ad.cos(0.5 * th))
    return (w, s * ox, s * oy, s * oz)


def quat_log_rotvec(q):
    """Rotation vector of unit quaternion q; angle must stay below pi."""
    w, x, y, z = q
    # canonicalize sign so w >= 0 (angle in [0, pi])
    sgn = ad.where(w < 0.0, -1.0, 1.0)
    w, x, y, z = sgn * w, sgn * x, sgn * y, sgn * z
    n2 = x * x + y * y + z * z
    n = ad.sqrt(ad.maximum(n2, _SMALL_SQ))
    small = n2 < _SMALL_SQ
    # theta/n with theta = 2 atan2(n, w);  -> 2/w (1 - n^2/(3 w^2)) as n -> 0.
    # The Taylor branch is only selected for n ~ 0 where w ~ 1; the guard on w
    # keeps the untaken branch finite so it cannot poison gradients.
    ws = ad.maximum(w, 0.5)
    f = ad.where(small, (2.0 / ws) * (1.0 - n2 / (3.0 * ws * ws)),
                 2.0 * ad.atan2(n, w) / n)
    return (f * x, f * y, f * z)


def _se3_coeffs(t2):
    """A = sin/th, B = (1-cos)/th^2, C = (th-sin)/th^3 with Taylor guards."""
    t2s = ad.maximum(t2, _SMALL_SQ)
    th = ad.sqrt(t2s)
    small = t2 < _SMALL_SQ
    half = 0.5 * th
    sh = ad.sin(half)
    a = ad.where(small, 1.0 - t2 / 6.0, ad.sin(th) / th)
    b = ad.where(small, 0.5 - t2 / 24.0, 2.0 * (sh * sh) / t2s)
    c = ad.where(small, 1.0 / 6.0 - t2 / 120.0, (th - ad.sin(th)) / (t2s * th))
    return a, b, c


def _cross(o, v):
    ox, oy, oz = o
    vx, vy, vz = v
    return (oy * vz - oz * vy, oz * vx - ox * vz, ox * vy - oy * vx)


def se3_exp(o, v):
    """Closed-form SE(3) exponential on component tuples -> (quat, trans)."""
    t2 = o[0] * o[0] + o[1] * o[1] + o[2] * o[2]
    _, b, c = _se3_coeffs(t2)
    q = quat_exp_rotvec(o)
    ov = _cross(o, v)
    oov = _cross(o, ov)
    t = tuple(v[i] + b * ov[i] + c * oov[i] for i in range(3))
    return q, t


def se3_log(q, t):
    """Inverse of se3_exp -> (omega, v) component tuples."""
    o = quat_log_rotvec(q)
    t2 = o[0] * o[0] + o[1] * o[1] + o[2] * o[2]
    a, b, _ = _se3_coeffs(t2)
    # V^{-1} = I - 1/2 [o]x + D [o]x^2,  D = (1 - A/(2B)) / th^2
    small = t2 < _SMALL_SQ
    t2s = ad.maximum(t2, _SMALL_SQ)
    d = ad.where(small, 1.0 / 12.0 + t2 / 720.0, (1.0 - a / (2.0 * b)) / t2s)
    ot = _cross(o, t)
    oot = _cross(o, ot)
    v = tuple(t[i] - 0.5 * ot[i] + d * oot[i] for i in range(3))
    return o, v


def pose_compose_q(qa, ta, qb, tb):
    """(qa, ta) o (qb, tb): apply b first, then a."""
    q = quat_mul(qa, qb)
    rt = quat_rotate(qa, tb)
    return q, tuple(ta[i] + rt[i] for i in range(3))


def pose_inverse_q(q, t):
    qi = quat_conj(q)
    ti = quat_rotate(qi, t)
    return qi, (-ti[0], -ti[1], -ti[2])


def interp_q(qa, ta, qb, tb, alpha):
    """SE(3) geodesic between two (quat, trans) pairs at parameter alpha."""
    qi, ti = pose_inverse_q(qa, ta)
    qr, tr = pose_compose_q(qi, ti, qb, tb)
    o, v = se3_log(qr, tr)
    o = tuple(alpha * oi for oi in o)
    v = tuple(alpha * vi for vi in v)
    qd, td = se3_exp(o, v)
    return pose_compose_q(qa, ta, qd, td)


# ---------------------------------------------------------------------------
# public value types

@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping camera coordinates to world coordinates."""

    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    translation: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        n = np.linalg.norm(self.rotation)
        if abs(n - 1.0) > 1e-9:
            object.__setattr__(self, "rotation", self.rotation / n)

    @staticmethod
    def identity(time: float = 0.0) -> "Pose":
        return Pose(np.array([1.0, 0, 0, 0]), np.zeros(3), time)

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.rotation
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (w * y + x * z)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (w * x + y * z), 1 - 2 * (x * x + y * y)],
        ])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the sensor")


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple = (0.0, 0.0)
    time: float = 0.0


# ---------------------------------------------------------------------------
# operations on poses

def compose(a: Pose, b: Pose) -> Pose:
    q, t = pose_compose_q(tuple(a.rotation), tuple(a.translation),
                          tuple(b.rotation), tuple(b.translation))
    return Pose(np.array(q), np.array(t), b.time)


def inverse(p: Pose) -> Pose:
    q, t = pose_inverse_q(tuple(p.rotation), tuple(p.translation))
    return Pose(np.array(q), np.array(t), p.time)


def exp_map(xi: np.ndarray, time: float = 0.0) -> Pose:
    """SE(3) exponential of a twist (omega, v)."""
    xi = np.asarray(xi, dtype=np.float64)
    assert xi.shape == (6,)
    q, t = se3_exp(tuple(xi[:3]), tuple(xi[3:]))
    return Pose(np.array(q), np.array(t), time)


def log_map(p: Pose) -> np.ndarray:
    """Twist whose exponential is p.  Rejects rotations at/near pi."""
    w = abs(float(p.rotation[0]))
    angle = 2.0 * math.atan2(math.sqrt(max(0.0, 1.0 - w * w)), w)
    if angle >= math.pi - 1e-6:
        raise ValueError(f"rotation angle {angle:.6f} too close to pi for log_map")
    o, v = se3_log(tuple(p.rotation), tuple(p.translation))
    return np.array([*o, *v])


def interp_pose(p0: Pose, p1: Pose, alpha: float) -> Pose:
    """Geodesic interpolation p0 * exp(alpha * log(p0^-1 * p1))."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    rel = compose(inverse(p0), p1)
    w = abs(float(rel.rotation[0]))
    angle = 2.0 * math.atan2(math.sqrt(max(0.0, 1.0 - w * w)), w)
    if angle >= math.pi - 1e-6:
        raise ValueError("relative rotation too close to pi")
    q, t = interp_q(tuple(p0.rotation), tuple(p0.translation),
                    tuple(p1.rotation), tuple(p1.translation), alpha)
    time = (1.0 - alpha) * p0.time + alpha * p1.time
    return Pose(np.array(q), np.array(t), time)


def pixel_to_ray(k: CameraIntrinsics, pose: Pose, x: float, y: float) -> Ray:
    """Ray through the center of pixel (x, y), in world coordinates."""
    if not (0 <= x < k.width and 0 <= y < k.height):
        raise ValueError(f"pixel ({x}, {y}) out of bounds")
    d = np.array([(x + 0.5 - k.cx) / k.fx, (y + 0.5 - k.cy) / k.fy, 1.0])
    d = pose.rotation_matrix() @ d
    d /= np.linalg.norm(d)
    return Ray(pose.translation.copy(), d, (x, y), pose.time)


def rays_for_pixels(k: CameraIntrinsics, pose: Pose, px: np.ndarray, py: np.ndarray):
    """Vectorized pixel_to_ray: returns (origins (n,3), directions (n,3))."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    d = np.stack([(px + 0.5 - k.cx) / k.fx, (py + 0.5 - k.cy) / k.fy,
                  np.ones_like(px)], axis=-1)
    d = d @ pose.rotation_matrix().T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(pose.translation, d.shape).copy()
    return o, d
