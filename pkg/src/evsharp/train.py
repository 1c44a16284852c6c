"""Joint optimization of the field, sensor mapper, embeddings, and poses.

Each step renders one batch of motion-blurred RGB pixels (n virtual cameras
per frame, shared by every ray of that frame, as the blur model prescribes)
plus one batch of event pixel-pairs between consecutive virtual cameras of
the event trajectory.  Gradients flow through the full chain: grid, MLPs,
embeddings, gamma exponent, and SE(3) correction twists via the exponential
map.  Camera twists stay frozen (exactly zero) until the warmup step.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field as dfield, replace

import numpy as np

from . import _kernels, autodiff as ad, event, field, geom, io, render, sim


@dataclass
class TrainConfig:
    steps: int = 20000
    rays_per_step: int = 256
    event_pairs_per_step: int = 192   # pixels x (n_blur - 1)
    n_blur: int = 4
    lambda_evs: float = 1.0
    lr_grid: float = 1e-2
    lr_mlp: float = 1e-3
    lr_embed: float = 1e-3
    lr_gamma: float = 1e-3
    lr_pose: float = 1e-4
    lr_decay: float = 0.0             # 0 = constant; else final-lr fraction
    warmup_frac: float = 0.05
    embed_fit_steps: int = 500
    train_samples: int = 48
    eval_samples: int = 128
    use_embeddings: bool = True
    use_events: bool = True
    use_camopt: bool = True
    freeze_gamma: bool = False
    seed: int = 0
    checkpoint_every_frac: float = 0.25
    metrics_every: int = 50
    field_config: field.FieldConfig = dfield(default_factory=field.FieldConfig)

    def __post_init__(self):
        assert self.n_blur >= 2
        assert 0.0 <= self.warmup_frac < 1.0
        for name in ("lr_grid", "lr_mlp", "lr_embed", "lr_gamma", "lr_pose"):
            assert getattr(self, name) >= 0

    @property
    def warmup_steps(self):
        return int(round(self.warmup_frac * self.steps))

    @staticmethod
    def from_runconfig(cfg: io.RunConfig) -> "TrainConfig":
        t = cfg.values["train"]
        e = cfg.values["eval"]
        return TrainConfig(
            steps=t["steps"], rays_per_step=t["rays_per_step"],
            event_pairs_per_step=t["event_pairs_per_step"],
            n_blur=t["n_blur"], lambda_evs=t["lambda_evs"],
            lr_grid=t["lr_grid"], lr_mlp=t["lr_mlp"], lr_embed=t["lr_embed"],
            lr_gamma=t["lr_gamma"], lr_pose=t["lr_pose"],
            lr_decay=t["lr_decay"], warmup_frac=t["warmup_frac"],
            embed_fit_steps=t["embed_fit_steps"],
            train_samples=t["train_samples"], eval_samples=e["eval_samples"],
            seed=t["seed"])


class EventIndex:
    """Per-pixel sorted event times with polarity prefix sums."""

    def __init__(self, events: np.ndarray, width: int, height: int):
        pix = events["y"].astype(np.int64) * width + events["x"]
        order = np.argsort(pix, kind="stable")  # events already time-sorted
        self.times = events["t"][order].astype(np.int64)
        self.pix_sorted = pix[order]
        self.starts = np.searchsorted(self.pix_sorted,
                                      np.arange(width * height + 1))
        pol = events["p"][order].astype(np.float64)
        self.psum = np.concatenate([[0.0], np.cumsum(pol)])
        self.width = width

    def window_sum(self, px, py, t0_us, t1_us):
        """Signed polarity count at one pixel for t in [t0_us, t1_us]."""
        pid = int(py) * self.width + int(px)
        lo, hi = self.starts[pid], self.starts[pid + 1]
        seg = self.times[lo:hi]
        a = lo + np.searchsorted(seg, t0_us, side="left")
        b = lo + np.searchsorted(seg, t1_us, side="right")
        return self.psum[b] - self.psum[a]


@dataclass
class TrainState:
    params: field.FieldParams
    rgb_twists: np.ndarray            # (T, 6)
    evs_twists: np.ndarray            # (T * n_blur, 6)
    config: TrainConfig
    step: int = 0
    opt_m: dict = dfield(default_factory=dict)
    opt_v: dict = dfield(default_factory=dict)
    opt_t: dict = dfield(default_factory=dict)
    loss_history: list = dfield(default_factory=list)

    def checkpoint_arrays(self) -> dict:
        out = dict(self.params.arrays)
        out["rgb_twists"] = self.rgb_twists
        out["evs_twists"] = self.evs_twists
        out["step"] = np.array(float(self.step))
        return out

    @staticmethod
    def from_checkpoint(path, config: "TrainConfig") -> "TrainState":
        arrays = io.load_checkpoint(path)
        rgb_twists = arrays.pop("rgb_twists")
        evs_twists = arrays.pop("evs_twists")
        step = int(arrays.pop("step"))
        params = field.FieldParams(config.field_config, arrays)
        return TrainState(params, rgb_twists, evs_twists, config, step=step)


# ---------------------------------------------------------------------------
# trainer-side trajectories

def piecewise_pose(knot_q, knot_t, knot_times, t):
    """Plain-numpy pose on the piecewise-linear knot trajectory (extrapolating
    with constant velocity beyond the ends)."""
    s = int(np.clip(np.searchsorted(knot_times, t) - 1, 0, len(knot_times) - 2))
    alpha = (t - knot_times[s]) / (knot_times[s + 1] - knot_times[s])
    q, tt = geom.interp_q(tuple(knot_q[s]), tuple(knot_t[s]),
                          tuple(knot_q[s + 1]), tuple(knot_t[s + 1]), alpha)
    return geom.Pose(np.array(q), np.array(tt), time=t)


def _poses_to_comps(poses):
    q = np.stack([p.rotation for p in poses])
    t = np.stack([p.translation for p in poses])
    return q, t


def event_knot_times(t_mids, taus, n_blur):
    """(T, n) fixed knot times spanning each frame's exposure."""
    j = np.arange(n_blur)
    return t_mids[:, None] + (j / (n_blur - 1) - 0.5)[None, :] * taus[:, None]


def init_event_knots(dataset: sim.Dataset, n_blur: int):
    """Initial event-camera knot poses: linear interpolation of the initial
    RGB camera trajectory at the knot times."""
    q0, t0 = _poses_to_comps(dataset.poses_init)
    times = event_knot_times(dataset.t_mids, dataset.taus, n_blur)
    poses = [piecewise_pose(q0, t0, dataset.t_mids, t)
             for t in times.reshape(-1)]
    return _poses_to_comps(poses)


def _comps(arr2d, width):
    """Split an (n, width) Var/array into per-column components."""
    return tuple(ad.col(arr2d, j) if isinstance(arr2d, ad.Var)
                 else arr2d[:, j] for j in range(width))


def corrected_knots(twists, init_q, init_t):
    """exp(twist) o init, componentwise over all knots."""
    o = _comps(twists, 6)[:3]
    v = _comps(twists, 6)[3:]
    dq, dt = geom.se3_exp(o, v)
    return geom.pose_compose_q(dq, dt, tuple(init_q.T), tuple(init_t.T))


def interp_knots(kq, kt, seg, alpha):
    """Geodesic interpolation between gathered knot pairs.

    kq/kt: component tuples over knots; seg: (M,) int segment start index;
    alpha: (M,) float, may extrapolate outside [0, 1] at the trajectory ends.
    """
    qa = tuple(ad.gather(c, seg) for c in kq)
    ta = tuple(ad.gather(c, seg) for c in kt)
    qb = tuple(ad.gather(c, seg + 1) for c in kq)
    tb = tuple(ad.gather(c, seg + 1) for c in kt)
    return geom.interp_q(qa, ta, qb, tb, alpha)


# ---------------------------------------------------------------------------
# batched differentiable rendering

def taped_render_rays(pa, cfg: field.FieldConfig, k: geom.CameraIntrinsics,
                      cam_q, cam_t, px, py, frac, emb_rows):
    """Render pixels (px, py) from per-ray camera components (Vars or arrays).

    frac: (M, N) in-bin fractions (constants); emb_rows: (M, D) embedding
    rows (Var or array).  Returns color components ((M,), (M,), (M,)).
    """
    m, n = frac.shape
    dcx = (px + 0.5 - k.cx) / k.fx
    dcy = (py + 0.5 - k.cy) / k.fy
    wx, wy, wz = geom.quat_rotate(cam_q, (dcx, dcy, np.ones(m)))
    norm = ad.sqrt(wx * wx + wy * wy + wz * wz)
    dx, dy, dz = wx / norm, wy / norm, wz / norm
    ox, oy, oz = cam_t

    # differentiable ray/box bounds (slab method)
    near = 1e-6
    fars = []
    for o, d in zip((ox, oy, oz), (dx, dy, dz)):
        dv = d.value if isinstance(d, ad.Var) else d
        sign_floor = np.where(dv < 0, -1e-12, 1e-12)
        d_safe = ad.where(np.abs(dv) < 1e-12, sign_floor, d)
        t1 = (0.0 - o) / d_safe
        t2 = (1.0 - o) / d_safe
        fars.append(ad.maximum(t1, t2))
    far = ad.minimum(ad.minimum(fars[0], fars[1]), fars[2])
    far = ad.maximum(far, near + 1e-9)

    far2 = ad.reshape(far, (m, 1))
    depths = near + frac * (far2 - near)
    last = far2 - ad.slice_cols(depths, n - 1, n)
    deltas = ad.concat([ad.slice_cols(depths, 1, n)
                        - ad.slice_cols(depths, 0, n - 1), last], axis=1)

    def positions(o, d):
        p = ad.reshape(o, (m, 1)) + depths * ad.reshape(d, (m, 1))
        return ad.minimum(ad.maximum(ad.reshape(p, (m * n,)), 0.0), 1.0)

    xs = positions(ox, dx)
    ys = positions(oy, dy)
    zs = positions(oz, dz)

    point_ray = np.repeat(np.arange(m), n)
    enc_ray = ad.stack_cols(field.sh_encode_components(dx, dy, dz))
    enc = ad.gather(enc_ray, point_ray)
    emb = ad.gather(emb_rows, point_ray)

    sigma, rgb = field.field_forward(pa, cfg, xs, ys, zs, enc, emb)
    sig2 = ad.reshape(sigma, (m, n))
    r2 = ad.reshape(ad.col(rgb, 0), (m, n))
    g2 = ad.reshape(ad.col(rgb, 1), (m, n))
    b2 = ad.reshape(ad.col(rgb, 2), (m, n))
    color, _, _ = render.integrate(sig2, r2, g2, b2, deltas)
    return ad.col(color, 0), ad.col(color, 1), ad.col(color, 2)


# ---------------------------------------------------------------------------
# losses

def rgb_loss_value(pred_r, pred_g, pred_b, target):
    dr = pred_r - target[:, 0]
    dg = pred_g - target[:, 1]
    db = pred_b - target[:, 2]
    return ad.mean(ad.stack_cols([dr * dr, dg * dg, db * db]))


def total_loss(rgb, evs, lambda_evs):
    return rgb + lambda_evs * evs if evs is not None else rgb


# ---------------------------------------------------------------------------
# optimizer

ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8


def _param_groups(state: TrainState):
    cfg = state.config
    groups = {}
    for name in state.params.arrays:
        if name.startswith("grid"):
            groups[name] = ("grid", cfg.lr_grid)
        elif name == "embeddings" or name == "global_embedding":
            groups[name] = ("embed", cfg.lr_embed)
        elif name == "raw_c":
            groups[name] = ("gamma", cfg.lr_gamma)
        else:
            groups[name] = ("mlp", cfg.lr_mlp)
    groups["rgb_twists"] = ("pose", cfg.lr_pose)
    groups["evs_twists"] = ("pose", cfg.lr_pose)
    return groups


def adam_update(state: TrainState, name: str, param: np.ndarray,
                grad: np.ndarray, lr: float, skip_zero: bool):
    if lr == 0.0 or not np.any(grad):
        return
    if name not in state.opt_m:
        state.opt_m[name] = np.zeros_like(param)
        state.opt_v[name] = np.zeros_like(param)
        state.opt_t[name] = 0
    state.opt_t[name] += 1
    t = state.opt_t[name]
    bc1 = 1.0 - ADAM_B1 ** t
    bc2 = 1.0 - ADAM_B2 ** t
    if param.ndim and param.size >= 4096:
        _kernels.adam_step(param, np.ascontiguousarray(grad),
                           state.opt_m[name], state.opt_v[name],
                           lr, ADAM_B1, ADAM_B2, ADAM_EPS, bc1, bc2, skip_zero)
    else:
        m = state.opt_m[name]
        v = state.opt_v[name]
        m[...] = ADAM_B1 * m + (1 - ADAM_B1) * grad
        v[...] = ADAM_B2 * v + (1 - ADAM_B2) * grad * grad
        param -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


# ---------------------------------------------------------------------------
# the training loop

class Trainer:
    def __init__(self, dataset: sim.Dataset, config: TrainConfig):
        self.dataset = dataset
        self.config = config
        n_frames = dataset.n_frames
        params = field.init_params(config.field_config, n_frames,
                                   seed=config.seed)
        self.state = TrainState(
            params=params,
            rgb_twists=np.zeros((n_frames, 6)),
            evs_twists=np.zeros((n_frames * config.n_blur, 6)),
            config=config)
        self.rgb_init_q, self.rgb_init_t = _poses_to_comps(dataset.poses_init)
        self.evs_init_q, self.evs_init_t = init_event_knots(dataset,
                                                            config.n_blur)
        self.evs_knot_times = event_knot_times(dataset.t_mids, dataset.taus,
                                               config.n_blur)
        self.event_index = EventIndex(dataset.events, dataset.k_evs.width,
                                      dataset.k_evs.height)
        self.rng = np.random.default_rng(config.seed)
        self.metrics_rows = []

    # -- pose plumbing ------------------------------------------------------

    def _rgb_seg(self, times):
        t_mids = self.dataset.t_mids
        seg = np.clip(np.searchsorted(t_mids, times) - 1, 0, len(t_mids) - 2)
        alpha = (times - t_mids[seg]) / (t_mids[seg + 1] - t_mids[seg])
        return seg, alpha

    def _evs_seg(self, times, frame_of_time):
        """Local knot segment within each frame's exposure."""
        n = self.config.n_blur
        kt = self.evs_knot_times
        local = np.empty_like(times, dtype=np.int64)
        alpha = np.empty_like(times)
        for i, (t, f) in enumerate(zip(times, frame_of_time)):
            row = kt[f]
            s = int(np.clip(np.searchsorted(row, t) - 1, 0, n - 2))
            local[i] = f * n + s
            alpha[i] = (t - row[s]) / (row[s + 1] - row[s])
        return local, alpha

    # -- one optimization step ---------------------------------------------

    def step_once(self):
        cfg = self.config
        ds = self.dataset
        state = self.state
        tape = ad.Tape()
        n = cfg.n_blur
        t_frames = ds.n_frames

        camopt_on = cfg.use_camopt and state.step >= cfg.warmup_steps
        pa = {name: tape.var(arr, requires_grad=True)
              for name, arr in state.params.arrays.items()}
        rgb_tw = tape.var(state.rgb_twists, requires_grad=camopt_on)
        evs_tw = tape.var(state.evs_twists, requires_grad=camopt_on)

        # shared per-frame virtual camera times for this step
        rgb_times = np.sort(
            ds.t_mids[:, None]
            + (self.rng.uniform(size=(t_frames, n)) - 0.5) * ds.taus[:, None],
            axis=1)
        evs_times = np.sort(
            ds.t_mids[:, None]
            + (self.rng.uniform(size=(t_frames, n)) - 0.5) * ds.taus[:, None],
            axis=1)

        rkq, rkt = corrected_knots(rgb_tw, self.rgb_init_q, self.rgb_init_t)
        seg_r, alpha_r = self._rgb_seg(rgb_times.reshape(-1))
        rgb_cam_q, rgb_cam_t = interp_knots(rkq, rkt, seg_r, alpha_r)

        # RGB blur batch
        rays = cfg.rays_per_step
        f_r = self.rng.integers(0, t_frames, size=rays)
        px = self.rng.integers(0, ds.k_rgb.width, size=rays)
        py = self.rng.integers(0, ds.k_rgb.height, size=rays)
        inst = (np.repeat(f_r, n) * n + np.tile(np.arange(n), rays))
        cam_q = tuple(ad.gather(c, inst) for c in rgb_cam_q)
        cam_t = tuple(ad.gather(c, inst) for c in rgb_cam_t)
        frac = render.sample_fractions(rays * n, cfg.train_samples,
                                       stratified=True, rng=self.rng)
        if cfg.use_embeddings:
            emb = ad.gather(pa["embeddings"], np.repeat(f_r, n))
        else:
            emb = np.zeros((rays * n, cfg.field_config.embed_dim))
        pr, pg, pb = taped_render_rays(
            pa, cfg.field_config, ds.k_rgb, cam_q, cam_t,
            np.repeat(px, n).astype(np.float64),
            np.repeat(py, n).astype(np.float64), frac, emb)
        mr = ad.mean(ad.reshape(pr, (rays, n)), axis=1)
        mg = ad.mean(ad.reshape(pg, (rays, n)), axis=1)
        mb = ad.mean(ad.reshape(pb, (rays, n)), axis=1)
        target = ds.frames[f_r, py, px]
        loss_rgb = rgb_loss_value(mr, mg, mb, target)

        # event pixel-pair batch
        loss_evs = None
        if cfg.use_events and cfg.lambda_evs != 0.0:
            n_pix = max(1, cfg.event_pairs_per_step // (n - 1))
            f_e = self.rng.integers(0, t_frames, size=n_pix)
            ex = self.rng.integers(0, ds.k_evs.width, size=n_pix)
            ey = self.rng.integers(0, ds.k_evs.height, size=n_pix)
            flat_times = evs_times[np.repeat(f_e, n),
                                   np.tile(np.arange(n), n_pix)]
            seg, alpha = self._evs_seg(flat_times, np.repeat(f_e, n))
            ekq, ekt = corrected_knots(evs_tw, self.evs_init_q, self.evs_init_t)
            ecam_q, ecam_t = interp_knots(ekq, ekt, seg, alpha)
            efrac = render.sample_fractions(n_pix * n, cfg.train_samples,
                                            stratified=True, rng=self.rng)
            if cfg.use_embeddings:
                eemb = ad.gather(pa["embeddings"], np.repeat(f_e, n))
            else:
                eemb = np.zeros((n_pix * n, cfg.field_config.embed_dim))
            er, eg, eb = taped_render_rays(
                pa, cfg.field_config, ds.k_evs, ecam_q, ecam_t,
                np.repeat(ex, n).astype(np.float64),
                np.repeat(ey, n).astype(np.float64), efrac, eemb)
            gray = event.to_gray_components(er, eg, eb)
            raw_c = pa["raw_c"] if not cfg.freeze_gamma else 0.0
            intens = event.gamma_map(gray, raw_c)
            logi = ad.reshape(ad.log(intens), (n_pix, n))
            d_log = ad.slice_cols(logi, 1, n) - ad.slice_cols(logi, 0, n - 1)
            bii = np.empty((n_pix, n - 1))
            for i in range(n_pix):
                ts = np.round(evs_times[f_e[i]] * 1e6).astype(np.int64)
                for j in range(n - 1):
                    bii[i, j] = self.dataset_omega * self.event_index.window_sum(
                        ex[i], ey[i], ts[j], ts[j + 1])
            diff = d_log - bii
            loss_evs = ad.mean(diff * diff)

        loss = total_loss(loss_rgb, loss_evs, cfg.lambda_evs)
        if not np.isfinite(loss.value):
            raise FloatingPointError(
                f"non-finite loss at step {state.step}")
        grads = ad.backward(loss)

        groups = _param_groups(state)
        decay = 1.0
        if cfg.lr_decay > 0:
            decay = cfg.lr_decay ** (state.step / max(1, cfg.steps))
        for name, var in pa.items():
            kind, lr = groups[name]
            if kind == "embed" and not cfg.use_embeddings:
                continue
            if name == "global_embedding":
                continue  # fitted after training, not during
            if kind == "gamma" and cfg.freeze_gamma:
                continue
            skip_zero = kind in ("grid", "embed")
            adam_update(state, name, state.params.arrays[name],
                        grads.of(var), lr * decay, skip_zero)
        if camopt_on:
            _, lr = groups["rgb_twists"]
            adam_update(state, "rgb_twists", state.rgb_twists,
                        grads.of(rgb_tw), lr * decay, False)
            adam_update(state, "evs_twists", state.evs_twists,
                        grads.of(evs_tw), lr * decay, False)

        rgb_v = float(loss_rgb.value)
        evs_v = float(loss_evs.value) if loss_evs is not None else 0.0
        state.loss_history.append((state.step, rgb_v, evs_v))
        state.step += 1
        return rgb_v, evs_v

    @property
    def dataset_omega(self):
        return self.dataset.config.get("sensor", "omega")

    # -- driver --------------------------------------------------------------

    def run(self, out_dir=None, log=None):
        cfg = self.config
        state = self.state
        ck_every = max(1, int(round(cfg.checkpoint_every_frac * cfg.steps)))
        last_ckpt = None
        while state.step < cfg.steps:
            try:
                rgb_v, evs_v = self.step_once()
            except FloatingPointError:
                if last_ckpt is not None:
                    raise FloatingPointError(
                        f"training diverged; last good checkpoint: {last_ckpt}")
                raise
            done = state.step
            if out_dir and (done % cfg.metrics_every == 0 or done == cfg.steps):
                self.metrics_rows.append(
                    (done, rgb_v, evs_v, state.params.gamma_c))
            if out_dir and (done % ck_every == 0 or done == cfg.steps):
                os.makedirs(out_dir, exist_ok=True)
                last_ckpt = os.path.join(out_dir, f"ckpt_{done:06d}.evck")
                io.save_checkpoint(last_ckpt, state.checkpoint_arrays())
            if log and done % 500 == 0:
                log(f"step {done}/{cfg.steps} rgb {rgb_v:.5f} evs {evs_v:.5f} "
                    f"c {state.params.gamma_c:.3f}")
        if out_dir:
            self.write_metrics(os.path.join(out_dir, "metrics.csv"))
        return state

    def write_metrics(self, path):
        with open(path, "w") as f:
            f.write("step,rgb_loss,evs_loss,c\n")
            for row in self.metrics_rows:
                f.write(f"{row[0]},{row[1]:.10e},{row[2]:.10e},{row[3]:.10e}\n")

    # -- optimized pose access (for eval) ------------------------------------

    def optimized_rgb_poses(self):
        kq, kt = corrected_knots(self.state.rgb_twists,
                                 self.rgb_init_q, self.rgb_init_t)
        out = []
        for i in range(self.dataset.n_frames):
            q = np.array([c[i] for c in kq])
            t = np.array([c[i] for c in kt])
            out.append(geom.Pose(q, t, time=self.dataset.t_mids[i]))
        return out


def train(dataset: sim.Dataset, config: TrainConfig, out_dir=None,
          log=None) -> Trainer:
    """Run the full optimization; returns the Trainer with final state."""
    trainer = Trainer(dataset, config)
    if config.steps > 0:
        trainer.run(out_dir=out_dir, log=log)
    return trainer


def fit_global_embedding(trainer: Trainer, fit_steps=None, log=None):
    """Post-hoc global embedding: RGB loss only, everything else frozen."""
    cfg = trainer.config
    ds = trainer.dataset
    state = trainer.state
    steps = cfg.embed_fit_steps if fit_steps is None else fit_steps
    n = cfg.n_blur
    rng = np.random.default_rng(cfg.seed + 77)
    for _ in range(steps):
        tape = ad.Tape()
        pa = {name: (tape.var(arr, requires_grad=(name == "global_embedding")))
              for name, arr in state.params.arrays.items()}
        rgb_times = np.sort(
            ds.t_mids[:, None]
            + (rng.uniform(size=(ds.n_frames, n)) - 0.5) * ds.taus[:, None],
            axis=1)
        kq, kt = corrected_knots(state.rgb_twists,
                                 trainer.rgb_init_q, trainer.rgb_init_t)
        seg, alpha = trainer._rgb_seg(rgb_times.reshape(-1))
        cam_all_q, cam_all_t = interp_knots(kq, kt, seg, alpha)
        rays = cfg.rays_per_step
        f_r = rng.integers(0, ds.n_frames, size=rays)
        px = rng.integers(0, ds.k_rgb.width, size=rays)
        py = rng.integers(0, ds.k_rgb.height, size=rays)
        inst = np.repeat(f_r, n) * n + np.tile(np.arange(n), rays)
        cam_q = tuple(np.take(q, inst) for q in cam_all_q)
        cam_t = tuple(np.take(t, inst) for t in cam_all_t)
        frac = render.sample_fractions(rays * n, cfg.train_samples,
                                       stratified=True, rng=rng)
        emb = ad.gather(ad.reshape(pa["global_embedding"],
                                   (1, cfg.field_config.embed_dim)),
                        np.zeros(rays * n, dtype=np.int64))
        pr, pg, pb = taped_render_rays(
            pa, cfg.field_config, ds.k_rgb, cam_q, cam_t,
            np.repeat(px, n).astype(np.float64),
            np.repeat(py, n).astype(np.float64), frac, emb)
        mr = ad.mean(ad.reshape(pr, (rays, n)), axis=1)
        mg = ad.mean(ad.reshape(pg, (rays, n)), axis=1)
        mb = ad.mean(ad.reshape(pb, (rays, n)), axis=1)
        loss = rgb_loss_value(mr, mg, mb, ds.frames[f_r, py, px])
        grads = ad.backward(loss)
        adam_update(state, "fit_global_embedding",
                    state.params.arrays["global_embedding"],
                    grads.of(pa["global_embedding"]), cfg.lr_embed, False)
        if log and (_ + 1) % 100 == 0:
            log(f"embed fit {_ + 1}/{steps} rgb {float(loss.value):.5f}")
    return state.params.arrays["global_embedding"].copy()
