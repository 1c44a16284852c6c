"""Quadrature volume rendering along rays and the motion-blur compositor.

The scene lives in the unit cube; per-ray integration bounds come from the
ray/box intersection.  integrate() is written on ad generics so the same
code path serves the plain-numpy evaluators and the taped training loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import field as field_mod
from . import geom

TRAIN_SAMPLES = 64   # default quadrature points per ray during training
EVAL_SAMPLES = 128   # default for evaluation renders
_MIN_NEAR = 1e-6


@dataclass
class RaySamples:
    depths: np.ndarray
    deltas: np.ndarray
    density: np.ndarray
    color: np.ndarray  # (N, 3)

    def validate(self):
        if np.any(np.diff(self.depths) <= 0):
            raise ValueError("sample depths must be strictly increasing")
        if np.any(self.deltas < 0):
            raise ValueError("segment lengths must be non-negative")
        if np.any(self.density < 0):
            raise ValueError("negative density violates the field contract")


@dataclass
class RenderOutput:
    color: np.ndarray
    opacity: float
    depth: float


def ray_box_bounds(origin, direction, lo=0.0, hi=1.0):
    """Entry/exit distances of rays against the axis-aligned box [lo, hi]^3.

    Works on (3,) or (n, 3) arrays.  Rays starting inside the box get
    near clamped to a small positive value; degenerate hits collapse to an
    empty interval just past the origin.
    """
    o = np.atleast_2d(np.asarray(origin, dtype=np.float64))
    d = np.atleast_2d(np.asarray(direction, dtype=np.float64))
    d = np.where(np.abs(d) < 1e-12, np.where(d < 0, -1e-12, 1e-12), d)
    t1 = (lo - o) / d
    t2 = (hi - o) / d
    near = np.minimum(t1, t2).max(axis=1)
    far = np.maximum(t1, t2).min(axis=1)
    near = np.maximum(near, _MIN_NEAR)
    far = np.maximum(far, near + 1e-9)
    if np.asarray(origin).ndim == 1:
        return float(near[0]), float(far[0])
    return near, far


def sample_fractions(n_rays: int, n_samples: int, stratified: bool, rng=None):
    """Per-ray bin fractions in [0, 1): centers, or one draw per bin."""
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    base = np.arange(n_samples) / n_samples
    if not stratified:
        frac = base + 0.5 / n_samples
        return np.broadcast_to(frac, (n_rays, n_samples)).copy()
    u = rng.uniform(size=(n_rays, n_samples))
    return base + u / n_samples


def sample_ray(ray: geom.Ray, d_near: float, d_far: float, n: int,
               stratified: bool = False, rng=None) -> np.ndarray:
    """N ascending depths in [d_near, d_far]."""
    if not 0 < d_near < d_far:
        raise ValueError("need 0 < d_near < d_far")
    frac = sample_fractions(1, n, stratified, rng)[0]
    return d_near + frac * (d_far - d_near)


def deltas_from_depths(depths, far):
    """Segment lengths; the last segment runs to the far bound."""
    if isinstance(depths, np.ndarray) and depths.ndim == 1:
        return np.append(np.diff(depths), far - depths[-1])
    raise ValueError("deltas_from_depths expects a 1-D depth array")


def integrate(density, red, green, blue, deltas, depths=None):
    """Quadrature compositing over (R, N) sample grids (arrays or Vars).

    alpha_i = 1 - exp(-sigma_i delta_i); T_i = prod_{j<i} (1 - alpha_j);
    returns (color (R,3), opacity (R,), depth (R,)).
    """
    tau = density * deltas
    inc = ad.cumsum(tau, axis=1)
    transmittance = ad.exp(tau - inc)  # exp(-(cumsum - tau)): exclusive product
    alpha = 1.0 - ad.exp(-tau)
    w = transmittance * alpha
    color = ad.stack_cols([ad.sum(w * red, axis=1),
                           ad.sum(w * green, axis=1),
                           ad.sum(w * blue, axis=1)])
    opacity = ad.sum(w, axis=1)
    if depths is None:
        return color, opacity, None
    depth = ad.sum(w * depths, axis=1)
    return color, opacity, depth


def volume_render(samples: RaySamples) -> RenderOutput:
    """Composite one ray's samples front to back over a black background."""
    samples.validate()
    c = np.asarray(samples.color, dtype=np.float64)
    color, opacity, depth = integrate(
        samples.density[None, :], c[None, :, 0], c[None, :, 1], c[None, :, 2],
        samples.deltas[None, :], samples.depths[None, :])
    return RenderOutput(color[0], float(opacity[0]), float(depth[0]))


def _field_on_rays(params, origins, dirs, fractions, embedding):
    """Plain-numpy field render of rays (no tape): returns RenderOutput arrays."""
    near, far = ray_box_bounds(origins, dirs)
    depths = near[:, None] + fractions * (far - near)[:, None]
    deltas = np.concatenate([np.diff(depths, axis=1),
                             (far[:, None] - depths[:, -1:])], axis=1)
    n_rays, n_samples = depths.shape
    pts = origins[:, None, :] + depths[..., None] * dirs[:, None, :]
    pts = np.clip(pts.reshape(-1, 3), 0.0, 1.0)
    enc = field_mod.sh_encode(dirs)
    enc = np.repeat(enc, n_samples, axis=0)
    emb = np.broadcast_to(np.asarray(embedding, dtype=np.float64),
                          (pts.shape[0], len(embedding)))
    sigma, rgb = field_mod.field_forward(
        params.arrays, params.config,
        pts[:, 0], pts[:, 1], pts[:, 2], enc, emb)
    sig = sigma.reshape(n_rays, n_samples)
    r = rgb[:, 0].reshape(n_rays, n_samples)
    g = rgb[:, 1].reshape(n_rays, n_samples)
    b = rgb[:, 2].reshape(n_rays, n_samples)
    return integrate(sig, r, g, b, deltas, depths)


def render_pixel(params, k: geom.CameraIntrinsics, pose: geom.Pose,
                 x: float, y: float, embedding: np.ndarray,
                 n_samples: int = EVAL_SAMPLES, stratified: bool = False,
                 rng=None) -> RenderOutput:
    """pixel_to_ray -> sample_ray -> field query -> volume_render."""
    ray = geom.pixel_to_ray(k, pose, x, y)
    frac = sample_fractions(1, n_samples, stratified, rng)
    color, opacity, depth = _field_on_rays(
        params, ray.origin[None, :], ray.direction[None, :], frac, embedding)
    return RenderOutput(color[0], float(opacity[0]), float(depth[0]))


def blur_sample_times(t_mid: float, tau: float, n: int, rng) -> np.ndarray:
    """n exposure times ~ U[t_mid - tau/2, t_mid + tau/2] (one rng call)."""
    if n < 1:
        raise ValueError("need n >= 1 blur samples")
    if tau < 0:
        raise ValueError("exposure must be non-negative")
    return t_mid - tau / 2.0 + tau * rng.uniform(size=n)


def blur_poses(trajectory, t_mid: float, tau: float, times: np.ndarray):
    """Map exposure times onto the (pose_start, pose_end) segment."""
    pose_start, pose_end = trajectory
    poses = []
    for t in times:
        alpha = 0.5 if tau == 0 else (t - (t_mid - tau / 2.0)) / tau
        poses.append(geom.interp_pose(pose_start, pose_end,
                                      float(np.clip(alpha, 0.0, 1.0))))
    return poses


def render_blur(params, k: geom.CameraIntrinsics, trajectory, t_mid: float,
                tau: float, n: int, x: float, y: float,
                embedding: np.ndarray, rng,
                n_samples: int = TRAIN_SAMPLES) -> np.ndarray:
    """Monte-Carlo motion blur: mean of n renders along the pose segment.

    trajectory is the (pose_start, pose_end) pair spanning the exposure; all
    n samples share one embedding (one sensor state per captured frame).
    """
    times = blur_sample_times(t_mid, tau, n, rng)
    acc = np.zeros(3)
    for pose in blur_poses(trajectory, t_mid, tau, times):
        acc += render_pixel(params, k, pose, x, y, embedding,
                            n_samples=n_samples).color
    return acc / n


def render_image(params, k: geom.CameraIntrinsics, pose: geom.Pose,
                 embedding: np.ndarray, n_samples: int = EVAL_SAMPLES,
                 chunk: int = 8192) -> np.ndarray:
    """Full-frame sharp render (H, W, 3) at the given pose and embedding."""
    xs, ys = np.meshgrid(np.arange(k.width), np.arange(k.height))
    px = xs.reshape(-1).astype(np.float64)
    py = ys.reshape(-1).astype(np.float64)
    origins, dirs = geom.rays_for_pixels(k, pose, px, py)
    out = np.empty((px.size, 3))
    frac = sample_fractions(1, n_samples, stratified=False)[0]
    for lo in range(0, px.size, chunk):
        hi = min(lo + chunk, px.size)
        f = np.broadcast_to(frac, (hi - lo, n_samples)).copy()
        color, _, _ = _field_on_rays(params, origins[lo:hi], dirs[lo:hi],
                                     f, embedding)
        out[lo:hi] = color
    return out.reshape(k.height, k.width, 3)
