"""Learnable radiance field: multiresolution dense feature grid + MLPs.

Density comes from a small MLP over concatenated per-level trilinear grid
features; color from a second MLP over the geometry feature, a degree-3
spherical-harmonics direction encoding, and a per-frame embedding.  The
embedding feeds only the color branch, so density is invariant to it by
construction.  All forward math runs on either plain arrays or tape Vars.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dfield

import numpy as np

from . import _kernels
from . import autodiff as ad

GLOBAL_EMBEDDING = -1  # sentinel frame index selecting the global embedding


@dataclass
class FieldConfig:
    grid_levels: tuple = (16, 32, 64, 128)
    grid_features: int = 2
    density_width: int = 48
    color_width: int = 48
    geo_features: int = 15  # density MLP output is 1 + geo_features wide
    embed_dim: int = 32
    sh_terms: int = 16


@dataclass
class FieldSample:
    density: float
    color: np.ndarray


@dataclass
class FieldParams:
    """All learnable state.  raw_c reparameterizes the gamma exponent c > 0."""

    config: FieldConfig
    arrays: dict = dfield(default_factory=dict)

    @property
    def n_frames(self):
        return self.arrays["embeddings"].shape[0]

    @property
    def gamma_c(self) -> float:
        return float(np.exp(self.arrays["raw_c"]))

    def names(self):
        return list(self.arrays)

    def check_finite(self):
        for name, a in self.arrays.items():
            if not np.all(np.isfinite(a)):
                raise FloatingPointError(f"non-finite parameter array {name!r}")


def _mlp_arrays(rng, sizes, zero_last=False):
    out = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = np.sqrt(2.0 / n_in)
        w = rng.normal(0.0, scale, size=(n_in, n_out))
        b = np.zeros(n_out)
        if zero_last and i == len(sizes) - 2:
            w = np.zeros((n_in, n_out))
        out[f"w{i}"] = w
        out[f"b{i}"] = b
    return out


def init_params(config: FieldConfig, n_frames: int, seed: int = 0) -> FieldParams:
    """Fresh parameters: tiny random grid, He-init MLPs, zero embeddings.

    The color output layer starts at zero (renders mid-gray) and raw_c at
    zero (identity gamma)."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for li, res in enumerate(config.grid_levels):
        arrays[f"grid{li}"] = rng.uniform(
            -1e-4, 1e-4, size=(res ** 3, config.grid_features))
    lf = len(config.grid_levels) * config.grid_features
    dw = config.density_width
    for k, v in _mlp_arrays(rng, [lf, dw, dw, 1 + config.geo_features]).items():
        arrays[f"den_{k}"] = v
    cin = config.geo_features + config.sh_terms + config.embed_dim
    cw = config.color_width
    for k, v in _mlp_arrays(rng, [cin, cw, cw, 3], zero_last=True).items():
        arrays[f"col_{k}"] = v
    arrays["embeddings"] = np.zeros((n_frames, config.embed_dim))
    arrays["global_embedding"] = np.zeros(config.embed_dim)
    arrays["raw_c"] = np.zeros(())
    return FieldParams(config, arrays)


def lookup_embedding(params: FieldParams, t: int) -> np.ndarray:
    """Row t of the per-frame embeddings, or the global one for the sentinel."""
    if t == GLOBAL_EMBEDDING:
        return params.arrays["global_embedding"].copy()
    n = params.n_frames
    if not 0 <= t < n:
        raise IndexError(f"frame index {t} out of range [0, {n})")
    return params.arrays["embeddings"][t].copy()


# ---------------------------------------------------------------------------
# direction encoding: real spherical harmonics through degree 3 (16 values)

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.445305721320277,
       -0.5900435899266435)


def sh_encode_components(dx, dy, dz):
    """16 SH basis values for unit direction components (scalars/arrays/Vars)."""
    xx, yy, zz = dx * dx, dy * dy, dz * dz
    xy, yz, xz = dx * dy, dy * dz, dx * dz
    one = dx * 0.0 + 1.0
    return [
        _C0 * one,
        -_C1 * dy, _C1 * dz, -_C1 * dx,
        _C2[0] * xy, _C2[1] * yz, _C2[2] * (3.0 * zz - 1.0),
        _C2[3] * xz, _C2[4] * (xx - yy),
        _C3[0] * dy * (3.0 * xx - yy), _C3[1] * xy * dz,
        _C3[2] * dy * (4.0 * zz - xx - yy),
        _C3[3] * dz * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        _C3[4] * dx * (4.0 * zz - xx - yy),
        _C3[5] * dz * (xx - yy), _C3[6] * dx * (xx - 3.0 * yy),
    ]


def sh_encode(dirs: np.ndarray) -> np.ndarray:
    d = np.asarray(dirs, dtype=np.float64)
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    return np.stack(sh_encode_components(d[..., 0], d[..., 1], d[..., 2]), axis=-1)


# ---------------------------------------------------------------------------
# grid interpolation

def grid_interp_level(grid, res: int, x, y, z):
    """Trilinear interpolation of one level; differentiable in grid and x/y/z."""
    gv = grid.value if isinstance(grid, ad.Var) else np.asarray(grid)
    xv = np.ascontiguousarray(x.value if isinstance(x, ad.Var) else x)
    yv = np.ascontiguousarray(y.value if isinstance(y, ad.Var) else y)
    zv = np.ascontiguousarray(z.value if isinstance(z, ad.Var) else z)
    out = np.empty((xv.size, gv.shape[1]))
    _kernels.trilinear_fwd(gv, res, xv, yv, zv, out)

    tape = None
    for cand in (grid, x, y, z):
        if isinstance(cand, ad.Var):
            tape = cand.tape
            break
    if tape is None:
        return out

    cache = {}

    def pos_grads(g):
        if cache.get("key") is not g:
            gx = np.zeros_like(xv)
            gy = np.zeros_like(yv)
            gz = np.zeros_like(zv)
            _kernels.trilinear_bwd_pos(gv, res, xv, yv, zv,
                                       np.ascontiguousarray(g), gx, gy, gz)
            cache["key"] = g
            cache["val"] = (gx, gy, gz)
        return cache["val"]

    parents = []
    if isinstance(grid, ad.Var):
        def grid_vjp(g):
            gg = np.zeros_like(gv)
            _kernels.trilinear_bwd_grid(res, xv, yv, zv,
                                        np.ascontiguousarray(g), gg)
            return gg
        parents.append((grid, grid_vjp))
    if isinstance(x, ad.Var):
        parents.append((x, lambda g: pos_grads(g)[0]))
    if isinstance(y, ad.Var):
        parents.append((y, lambda g: pos_grads(g)[1]))
    if isinstance(z, ad.Var):
        parents.append((z, lambda g: pos_grads(g)[2]))
    return ad.custom(tape, out, parents)


def grid_interp(params: FieldParams, x: np.ndarray) -> np.ndarray:
    """Concatenated per-level features at unit-cube point(s) x."""
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    feats = [grid_interp_level(params.arrays[f"grid{li}"], res,
                               pts[:, 0], pts[:, 1], pts[:, 2])
             for li, res in enumerate(params.config.grid_levels)]
    out = np.concatenate(feats, axis=1)
    return out[0] if np.asarray(x).ndim == 1 else out


# ---------------------------------------------------------------------------
# field forward

def field_forward(pa, config: FieldConfig, x, y, z, dir_enc, emb):
    """Density and color for a batch of samples.

    pa: mapping name -> array or Var (grids, MLP weights).
    x, y, z: (P,) position components; dir_enc: (P, 16); emb: (P, D).
    Returns (sigma (P,), rgb (P, 3)).
    """
    feats = [grid_interp_level(pa[f"grid{li}"], res, x, y, z)
             for li, res in enumerate(config.grid_levels)]
    h = ad.concat(feats, axis=1) if len(feats) > 1 else feats[0]
    h = ad.relu(ad.affine(h, pa["den_w0"], pa["den_b0"]))
    h = ad.relu(ad.affine(h, pa["den_w1"], pa["den_b1"]))
    geo_out = ad.affine(h, pa["den_w2"], pa["den_b2"])
    sigma = ad.softplus(ad.col(geo_out, 0))
    geo = ad.slice_cols(geo_out, 1, 1 + config.geo_features)

    c = ad.concat([geo, dir_enc, emb], axis=1)
    c = ad.relu(ad.affine(c, pa["col_w0"], pa["col_b0"]))
    c = ad.relu(ad.affine(c, pa["col_w1"], pa["col_b1"]))
    rgb = ad.sigmoid(ad.affine(c, pa["col_w2"], pa["col_b2"]))
    return sigma, rgb


def query(params: FieldParams, x: np.ndarray, d: np.ndarray,
          embedding: np.ndarray) -> FieldSample:
    """Field sample at position x viewed from direction d with embedding."""
    params.check_finite()
    x = np.asarray(x, dtype=np.float64)
    enc = sh_encode(np.asarray(d, dtype=np.float64))
    sigma, rgb = field_forward(params.arrays, params.config,
                               x[None, 0], x[None, 1], x[None, 2],
                               enc[None, :], np.asarray(embedding)[None, :])
    return FieldSample(float(sigma[0]), rgb[0])
