"""Synthetic ground-truth world: analytic scenes, oracle renderer,
camera trajectories, and dataset generation.

The scene is a closed-form density/color field on the unit cube: an
enclosing textured box (so rays always terminate) plus a handful of soft
spheres and boxes carrying sinusoid/checker textures.  The oracle renderer
integrates it by fine midpoint quadrature in a fused kernel, independent of
the learnable renderer's code path.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field as dfield

import numpy as np

from . import _kernels, event, geom, io, render

ORACLE_SAMPLES = 512

# trajectory twist amplitudes (sum over 3 harmonics), radians / scene units
FAST_ROT, FAST_TRANS = 0.26, 0.05
SLOW_ROT, SLOW_TRANS = 0.018, 0.004

BASE_CAMERA = np.array([0.5, 0.5, 0.16])  # looks toward +z at the objects
LOG_FLOOR = 1e-4


@dataclass
class AnalyticScene:
    seed: int
    kind: np.ndarray        # (K,) 0 sphere, 1 box
    center: np.ndarray      # (K, 3)
    size: np.ndarray        # (K, 3) radius in [:, 0] or half-extents
    smax: np.ndarray        # (K,)
    edge: np.ndarray        # (K,) softness of the density falloff
    base_color: np.ndarray  # (K, 3)
    tex_kind: np.ndarray    # (K,) 0 sinusoid, 1 checker
    tex_freq: np.ndarray
    tex_phase: np.ndarray
    tex_amp: np.ndarray
    wall_thick: float = 0.04
    wall_sigma: float = 45.0
    wall_edge: float = 0.03
    wall_color: np.ndarray = dfield(default_factory=lambda: np.array([0.55, 0.5, 0.45]))
    wall_freq: float = 14.0

    def _args(self):
        return (self.kind, self.center, self.size, self.smax, self.edge,
                self.base_color, self.tex_kind, self.tex_freq, self.tex_phase,
                self.tex_amp, self.wall_thick, self.wall_sigma, self.wall_edge,
                self.wall_color, self.wall_freq)

    def evaluate(self, pts: np.ndarray):
        """Ground-truth (sigma, rgb) at (M, 3) unit-cube points."""
        pts = np.ascontiguousarray(pts, dtype=np.float64)
        sig = np.empty(pts.shape[0])
        rgb = np.empty((pts.shape[0], 3))
        _kernels.scene_eval(*self._args(), pts, sig, rgb)
        return sig, rgb


def make_scene(seed: int, n_objects: int = 6, empty: bool = False) -> AnalyticScene:
    """Deterministic random scene; `empty` keeps only vacuum (test hook)."""
    rng = np.random.default_rng(seed)
    k = 0 if empty else n_objects
    centers = np.zeros((k, 3))
    placed = 0
    guard = 0
    while placed < k:
        guard += 1
        if guard > 10_000:
            raise RuntimeError("could not place scene objects without overlap")
        c = rng.uniform([0.22, 0.22, 0.38], [0.78, 0.78, 0.82])
        if placed and np.linalg.norm(centers[:placed] - c, axis=1).min() < 0.17:
            continue
        centers[placed] = c
        placed += 1
    kind = (np.arange(k) % 2).astype(np.int8)
    size = np.zeros((k, 3))
    size[:, 0] = rng.uniform(0.07, 0.12, size=k)
    size[:, 1] = rng.uniform(0.05, 0.10, size=k)
    size[:, 2] = rng.uniform(0.05, 0.10, size=k)
    scene = AnalyticScene(
        seed=seed, kind=kind, center=centers, size=size,
        smax=rng.uniform(25.0, 45.0, size=k),
        edge=np.full(k, 0.04),
        base_color=rng.uniform(0.25, 0.80, size=(k, 3)),
        tex_kind=(rng.uniform(size=k) < 0.5).astype(np.int8),
        tex_freq=rng.uniform(8.0, 18.0, size=k),
        tex_phase=rng.uniform(0.0, 2 * np.pi, size=k),
        tex_amp=rng.uniform(0.3, 0.6, size=k),
    )
    if empty:
        scene.wall_sigma = 0.0
    return scene


@dataclass
class SensorModel:
    width: int = 96
    height: int = 72
    fx: float = 80.0
    event_gamma: float = 2.2   # ground-truth c to recover
    gain_sigma: float = 0.05   # per-frame log-normal RGB gain jitter
    omega: float = 0.2         # event threshold
    exposure: float = 0.025    # shutter-open seconds
    store_gamma: float = 2.2   # PPM gamma encoding
    baseline: float = 0.03     # rigid rig offset of the event camera

    def intrinsics(self) -> geom.CameraIntrinsics:
        return geom.CameraIntrinsics(fx=self.fx, fy=self.fx,
                                     cx=self.width / 2.0, cy=self.height / 2.0,
                                     width=self.width, height=self.height)

    def rig_offset(self) -> geom.Pose:
        """Event camera pose in RGB camera coordinates."""
        return geom.Pose(np.array([1.0, 0, 0, 0]),
                         np.array([self.baseline, 0.2 * self.baseline, 0.0]))

    @staticmethod
    def from_config(cfg: io.RunConfig) -> "SensorModel":
        s = cfg.values["sensor"]
        return SensorModel(width=s["width"], height=s["height"], fx=s["fx"],
                           event_gamma=s["event_gamma"],
                           gain_sigma=s["gain_sigma"], omega=s["omega"],
                           exposure=s["exposure"], store_gamma=s["store_gamma"],
                           baseline=s["baseline"])


@dataclass
class Trajectory:
    base: geom.Pose
    amps: np.ndarray    # (harmonics, 6)
    phases: np.ndarray  # (harmonics, 6)
    period: float
    t_start: float = 0.0

    def twist_at(self, t: float) -> np.ndarray:
        h = np.arange(1, self.amps.shape[0] + 1)[:, None]
        arg = 2 * np.pi * h * (t - self.t_start) / self.period + self.phases
        return (self.amps * np.sin(arg)).sum(axis=0)

    def pose_at(self, t: float) -> geom.Pose:
        p = geom.compose(self.base, geom.exp_map(self.twist_at(t)))
        return geom.Pose(p.rotation, p.translation, time=t)


def make_trajectory(seed: int, duration: float, mode: str = "fast",
                    base: geom.Pose | None = None,
                    t_start: float = 0.0) -> Trajectory:
    """Smooth periodic camera path (2-3 harmonics per twist coordinate)."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    if mode not in ("fast", "slow"):
        raise ValueError(f"unknown trajectory mode {mode!r}")
    rng = np.random.default_rng(seed)
    rot_amp, trans_amp = (FAST_ROT, FAST_TRANS) if mode == "fast" \
        else (SLOW_ROT, SLOW_TRANS)
    n_h = 3
    amps = np.empty((n_h, 6))
    amps[:, :3] = rng.uniform(0.4, 1.0, size=(n_h, 3)) * rot_amp / n_h
    amps[:, 3:] = rng.uniform(0.4, 1.0, size=(n_h, 3)) * trans_amp / n_h
    phases = rng.uniform(0, 2 * np.pi, size=(n_h, 6))
    if base is None:
        base = geom.Pose(np.array([1.0, 0, 0, 0]), BASE_CAMERA.copy())
    return Trajectory(base, amps, phases, period=duration, t_start=t_start)


def oracle_render(scene: AnalyticScene, k: geom.CameraIntrinsics,
                  pose: geom.Pose, n_samples: int = ORACLE_SAMPLES) -> np.ndarray:
    """Deterministic fine-quadrature render of the analytic scene (H, W, 3)."""
    xs, ys = np.meshgrid(np.arange(k.width), np.arange(k.height))
    origins, dirs = geom.rays_for_pixels(k, pose, xs.reshape(-1), ys.reshape(-1))
    near, far = render.ray_box_bounds(origins, dirs)
    out = np.empty((origins.shape[0], 3))
    _kernels.oracle_render_rays(*scene._args(),
                                np.ascontiguousarray(origins),
                                np.ascontiguousarray(dirs),
                                near, far, n_samples, out)
    return out.reshape(k.height, k.width, 3)


def oracle_blur_render(scene, k, traj: Trajectory, t_mid: float, tau: float,
                       subrenders: int, n_samples: int = ORACLE_SAMPLES):
    """Mean of `subrenders` oracle renders at exposure bin-center times."""
    if tau == 0 or subrenders <= 1:
        return oracle_render(scene, k, traj.pose_at(t_mid), n_samples)
    times = t_mid - tau / 2 + (np.arange(subrenders) + 0.5) / subrenders * tau
    acc = np.zeros((k.height, k.width, 3))
    for t in times:
        acc += oracle_render(scene, k, traj.pose_at(t), n_samples)
    return acc / subrenders


def pixel_flow(k: geom.CameraIntrinsics, pose_a: geom.Pose, pose_b: geom.Pose,
               depth: float = 0.4) -> float:
    """Max projected displacement (pixels) of a mid-scene point grid."""
    xs = np.linspace(8, k.width - 8, 5)
    ys = np.linspace(8, k.height - 8, 4)
    worst = 0.0
    for x in xs:
        for y in ys:
            ray = geom.pixel_to_ray(k, pose_a, x, y)
            pt = ray.origin + depth * ray.direction
            # project into pose_b
            rel = geom.inverse(pose_b)
            cam = rel.rotation_matrix() @ pt + rel.translation
            if cam[2] <= 1e-6:
                continue
            u = k.fx * cam[0] / cam[2] + k.cx - 0.5
            v = k.fy * cam[1] / cam[2] + k.cy - 0.5
            worst = max(worst, float(np.hypot(u - x, v - y)))
    return worst


def _event_pose(traj: Trajectory, offset: geom.Pose, t: float) -> geom.Pose:
    p = geom.compose(traj.pose_at(t), offset)
    return geom.Pose(p.rotation, p.translation, time=t)


def perturb_pose(pose: geom.Pose, rng, rot_deg: float, trans_frac: float):
    """Random twist within the given rotation (deg) / translation bounds."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = np.deg2rad(rng.uniform(0.3, 1.0) * rot_deg)
    v = rng.normal(size=3)
    v *= rng.uniform(0.3, 1.0) * trans_frac / np.linalg.norm(v)
    noise = geom.exp_map(np.concatenate([axis * ang, v]))
    p = geom.compose(noise, pose)
    return geom.Pose(p.rotation, p.translation, time=pose.time)


def gen_dataset(scene: AnalyticScene, sensor: SensorModel, traj: Trajectory,
                n_frames: int, fps: float, out_dir, *,
                test_frames: int = 12, test_traj: Trajectory | None = None,
                blur_subrenders: int = 16, event_substeps: int = 8,
                seed: int = 0, config: io.RunConfig | None = None):
    """Write blurry frames + events + held-out sharp frames to out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "test"), exist_ok=True)
    rng = np.random.default_rng(seed)
    k = sensor.intrinsics()
    tau = sensor.exposure
    t_mids = (np.arange(n_frames) + 0.5) / fps

    # (a) blurry RGB frames with per-frame gain jitter, gamma-encoded PPM
    gains = np.exp(sensor.gain_sigma * rng.normal(size=n_frames))
    with open(os.path.join(out_dir, "frames.txt"), "w") as f:
        f.write("# index t_mid tau gain\n")
        for i, t_mid in enumerate(t_mids):
            img = oracle_blur_render(scene, k, traj, t_mid, tau, blur_subrenders)
            img = np.clip(gains[i] * img, 0.0, 1.0)
            io.write_ppm(os.path.join(out_dir, "frames", f"{i:04d}.ppm"),
                         io.encode_gamma(img, sensor.store_gamma))
            f.write(f"{i} {t_mid:.17g} {tau:.17g} {gains[i]:.17g}\n")

    # initial (perturbed) and ground-truth poses at frame midpoints
    gt_poses = [traj.pose_at(t) for t in t_mids]
    init_poses = [perturb_pose(p, rng, rot_deg=0.5, trans_frac=0.002)
                  for p in gt_poses]
    io.write_poses(os.path.join(out_dir, "poses_rgb.txt"), init_poses)
    io.write_poses(os.path.join(out_dir, "poses_rgb_gt.txt"), gt_poses)

    # (b) event stream from the event camera's own (offset) pose path
    offset = sensor.rig_offset()
    span0 = t_mids[0] - tau / 2
    span1 = t_mids[-1] + tau / 2
    n_sub = int(np.ceil((span1 - span0) * fps * event_substeps)) + 1
    sub_times = np.linspace(span0, span1, n_sub)
    log_frames = np.empty((n_sub, sensor.height, sensor.width))
    for i, t in enumerate(sub_times):
        img = oracle_render(scene, k, _event_pose(traj, offset, t))
        gray = np.maximum(event.to_gray(img), LOG_FLOOR)
        log_frames[i] = sensor.event_gamma * np.log(gray)
    events = event.simulate_events(log_frames, sub_times, omega=sensor.omega)
    io.write_events(os.path.join(out_dir, "events.evs"), events,
                    sensor.width, sensor.height)
    evs_poses = [_event_pose(traj, offset, t) for t in t_mids]
    io.write_poses(os.path.join(out_dir, "poses_evs.txt"), evs_poses)

    # (d) held-out sharp test frames at exact poses from the slow segment
    if test_frames:
        ttraj = test_traj if test_traj is not None else traj
        t0 = ttraj.t_start
        test_times = t0 + (np.arange(test_frames) + 0.5) / test_frames \
            * ttraj.period
        test_poses = [ttraj.pose_at(t) for t in test_times]
        for i, p in enumerate(test_poses):
            img = oracle_render(scene, k, p)
            io.write_ppm(os.path.join(out_dir, "test", f"{i:04d}.ppm"),
                         io.encode_gamma(img, sensor.store_gamma))
        io.write_poses(os.path.join(out_dir, "test", "test_poses.txt"),
                       test_poses)

    if config is not None:
        config.save(os.path.join(out_dir, "scene.toml"))


def generate(cfg: io.RunConfig, out_dir):
    """Full dataset from a RunConfig (the CLI entry)."""
    seed = cfg.get("scene", "seed")
    scene = make_scene(seed, cfg.get("scene", "objects"))
    sensor = SensorModel.from_config(cfg)
    fast_s = cfg.get("trajectory", "fast_seconds")
    slow_s = cfg.get("trajectory", "slow_seconds")
    n_train = cfg.get("trajectory", "train_frames")
    n_test = cfg.get("trajectory", "test_frames")
    traj = make_trajectory(seed + 1, fast_s, "fast")
    test_traj = make_trajectory(seed + 2, slow_s, "slow", t_start=fast_s)
    gen_dataset(scene, sensor, traj, n_train, n_train / fast_s, out_dir,
                test_frames=n_test, test_traj=test_traj,
                blur_subrenders=cfg.get("trajectory", "blur_subrenders"),
                event_substeps=cfg.get("trajectory", "event_substeps"),
                seed=seed, config=cfg)
    return out_dir


@dataclass
class Dataset:
    """In-memory view of a generated dataset directory."""

    k_rgb: geom.CameraIntrinsics
    k_evs: geom.CameraIntrinsics
    frames: np.ndarray       # (T, H, W, 3) linear
    t_mids: np.ndarray
    taus: np.ndarray
    gains: np.ndarray        # ground truth, for diagnostics only
    poses_init: list
    poses_gt: list | None
    events: np.ndarray
    test_images: np.ndarray  # (M, H, W, 3) linear
    test_poses: list
    config: io.RunConfig
    store_gamma: float

    @property
    def n_frames(self):
        return self.frames.shape[0]


def load_dataset(path) -> Dataset:
    cfg = io.RunConfig.load(os.path.join(path, "scene.toml")) \
        if os.path.exists(os.path.join(path, "scene.toml")) \
        else io.RunConfig.default()
    sensor = SensorModel.from_config(cfg)
    k = sensor.intrinsics()
    rows = []
    with open(os.path.join(path, "frames.txt")) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append([float(v) for v in line.split()])
    t_mids = np.array([r[1] for r in rows])
    taus = np.array([r[2] for r in rows])
    gains = np.array([r[3] for r in rows])
    frames = np.stack([
        io.decode_gamma(io.read_ppm(os.path.join(path, "frames", f"{i:04d}.ppm")),
                        sensor.store_gamma)
        for i in range(len(rows))])
    poses_init = io.read_poses(os.path.join(path, "poses_rgb.txt"))
    gt_file = os.path.join(path, "poses_rgb_gt.txt")
    poses_gt = io.read_poses(gt_file) if os.path.exists(gt_file) else None
    _, events = io.read_events(os.path.join(path, "events.evs"))
    test_poses = io.read_poses(os.path.join(path, "test", "test_poses.txt"))
    test_images = np.stack([
        io.decode_gamma(io.read_ppm(os.path.join(path, "test", f"{i:04d}.ppm")),
                        sensor.store_gamma)
        for i in range(len(test_poses))])
    return Dataset(k_rgb=k, k_evs=k, frames=frames, t_mids=t_mids, taus=taus,
                   gains=gains, poses_init=poses_init, poses_gt=poses_gt,
                   events=events, test_images=test_images,
                   test_poses=test_poses, config=cfg,
                   store_gamma=sensor.store_gamma)
