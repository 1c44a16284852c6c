"""Numba kernels for the hot inner loops (activations, grid ops, Adam).

Everything here is deterministic: parallel loops write disjoint elements and
scatter-accumulation runs single-threaded, so results do not depend on the
thread count.
"""

import numpy as np
import numba
from numba import njit, prange

# The default TBB layer is too old on some hosts and warns; omp is always fine.
numba.config.THREADING_LAYER = "omp"


@njit(parallel=True, cache=True)
def sigmoid_fwd(x, out):
    for i in prange(x.size):
        v = x.flat[i]
        if v >= 0.0:
            out.flat[i] = 1.0 / (1.0 + np.exp(-v))
        else:
            e = np.exp(v)
            out.flat[i] = e / (1.0 + e)


@njit(parallel=True, cache=True)
def softplus_fwd(x, out):
    for i in prange(x.size):
        v = x.flat[i]
        if v > 0.0:
            out.flat[i] = v + np.log1p(np.exp(-v))
        else:
            out.flat[i] = np.log1p(np.exp(v))


@njit(parallel=True, cache=True)
def exp_fwd(x, out):
    for i in prange(x.size):
        out.flat[i] = np.exp(x.flat[i])


@njit(parallel=True, cache=True)
def trilinear_fwd(grid, res, x, y, z, out):
    """Interpolate a dense (res^3, feat) grid at unit-cube points."""
    n = x.size
    feat = grid.shape[1]
    r1 = res - 1
    for i in prange(n):
        u = x[i] * r1
        v = y[i] * r1
        w = z[i] * r1
        i0 = int(u)
        j0 = int(v)
        k0 = int(w)
        if i0 > res - 2:
            i0 = res - 2
        if j0 > res - 2:
            j0 = res - 2
        if k0 > res - 2:
            k0 = res - 2
        if i0 < 0:
            i0 = 0
        if j0 < 0:
            j0 = 0
        if k0 < 0:
            k0 = 0
        fu = u - i0
        fv = v - j0
        fw = w - k0
        base = (i0 * res + j0) * res + k0
        for f in range(feat):
            c000 = grid[base, f]
            c001 = grid[base + 1, f]
            c010 = grid[base + res, f]
            c011 = grid[base + res + 1, f]
            c100 = grid[base + res * res, f]
            c101 = grid[base + res * res + 1, f]
            c110 = grid[base + res * res + res, f]
            c111 = grid[base + res * res + res + 1, f]
            c00 = c000 * (1 - fw) + c001 * fw
            c01 = c010 * (1 - fw) + c011 * fw
            c10 = c100 * (1 - fw) + c101 * fw
            c11 = c110 * (1 - fw) + c111 * fw
            c0 = c00 * (1 - fv) + c01 * fv
            c1 = c10 * (1 - fv) + c11 * fv
            out[i, f] = c0 * (1 - fu) + c1 * fu


@njit(cache=True)
def trilinear_bwd_grid(res, x, y, z, gout, ggrid):
    """Accumulate d(loss)/d(grid) for trilinear_fwd.  Serial: races otherwise."""
    n = x.size
    feat = gout.shape[1]
    r1 = res - 1
    for i in range(n):
        u = x[i] * r1
        v = y[i] * r1
        w = z[i] * r1
        i0 = min(max(int(u), 0), res - 2)
        j0 = min(max(int(v), 0), res - 2)
        k0 = min(max(int(w), 0), res - 2)
        fu = u - i0
        fv = v - j0
        fw = w - k0
        base = (i0 * res + j0) * res + k0
        w000 = (1 - fu) * (1 - fv) * (1 - fw)
        w001 = (1 - fu) * (1 - fv) * fw
        w010 = (1 - fu) * fv * (1 - fw)
        w011 = (1 - fu) * fv * fw
        w100 = fu * (1 - fv) * (1 - fw)
        w101 = fu * (1 - fv) * fw
        w110 = fu * fv * (1 - fw)
        w111 = fu * fv * fw
        for f in range(feat):
            g = gout[i, f]
            ggrid[base, f] += g * w000
            ggrid[base + 1, f] += g * w001
            ggrid[base + res, f] += g * w010
            ggrid[base + res + 1, f] += g * w011
            ggrid[base + res * res, f] += g * w100
            ggrid[base + res * res + 1, f] += g * w101
            ggrid[base + res * res + res, f] += g * w110
            ggrid[base + res * res + res + 1, f] += g * w111


@njit(parallel=True, cache=True)
def trilinear_bwd_pos(grid, res, x, y, z, gout, gx, gy, gz):
    """Accumulate d(loss)/d(position) for trilinear_fwd."""
    n = x.size
    feat = grid.shape[1]
    r1 = res - 1
    for i in prange(n):
        u = x[i] * r1
        v = y[i] * r1
        w = z[i] * r1
        i0 = min(max(int(u), 0), res - 2)
        j0 = min(max(int(v), 0), res - 2)
        k0 = min(max(int(w), 0), res - 2)
        fu = u - i0
        fv = v - j0
        fw = w - k0
        base = (i0 * res + j0) * res + k0
        au = 0.0
        av = 0.0
        aw = 0.0
        for f in range(feat):
            c000 = grid[base, f]
            c001 = grid[base + 1, f]
            c010 = grid[base + res, f]
            c011 = grid[base + res + 1, f]
            c100 = grid[base + res * res, f]
            c101 = grid[base + res * res + 1, f]
            c110 = grid[base + res * res + res, f]
            c111 = grid[base + res * res + res + 1, f]
            g = gout[i, f]
            # d/dfu
            au += g * (-(c000 * (1 - fv) + c010 * fv) * (1 - fw)
                       - (c001 * (1 - fv) + c011 * fv) * fw
                       + (c100 * (1 - fv) + c110 * fv) * (1 - fw)
                       + (c101 * (1 - fv) + c111 * fv) * fw)
            # d/dfv
            av += g * (-(c000 * (1 - fu) + c100 * fu) * (1 - fw)
                       - (c001 * (1 - fu) + c101 * fu) * fw
                       + (c010 * (1 - fu) + c110 * fu) * (1 - fw)
                       + (c011 * (1 - fu) + c111 * fu) * fw)
            # d/dfw
            aw += g * (-(c000 * (1 - fv) + c010 * fv) * (1 - fu)
                       - (c100 * (1 - fv) + c110 * fv) * fu
                       + (c001 * (1 - fv) + c011 * fv) * (1 - fu)
                       + (c101 * (1 - fv) + c111 * fv) * fu)
        gx[i] += au * r1
        gy[i] += av * r1
        gz[i] += aw * r1


@njit(inline="always")
def _smoothstep(u):
    """Clamped cubic smoothstep on [0, 1]."""
    if u <= 0.0:
        return 0.0
    if u >= 1.0:
        return 1.0
    return u * u * (3.0 - 2.0 * u)


@njit(inline="always")
def _scene_point(kind, center, size, smax, edge, base_color,
                 tex_kind, tex_freq, tex_phase, tex_amp,
                 wall_thick, wall_sigma, wall_edge, wall_color, wall_freq,
                 px, py, pz):
    """Additive density and density-weighted color of the analytic scene.

    Density falloffs are compact-support smoothsteps over a band of width
    `edge` around each surface (polynomial: keeps the fine-quadrature
    oracle cheap and lets far samples skip the primitive entirely).
    """
    sig_total = 0.0
    cr = 0.0
    cg = 0.0
    cb = 0.0
    # enclosing textured box: shell density near every face of [0,1]^3
    d_wall = min(min(px, 1.0 - px), min(min(py, 1.0 - py), min(pz, 1.0 - pz)))
    sw = wall_sigma * _smoothstep((wall_thick - d_wall) / wall_edge + 0.5)
    if sw > 0.0:
        s = np.sin(wall_freq * px) * np.sin(wall_freq * py) * np.sin(wall_freq * pz)
        f = 1.0 + 0.6 * (3.0 * s) / (1.0 + abs(3.0 * s))
        wr = min(max(wall_color[0] * f, 0.08), 0.92)
        wg = min(max(wall_color[1] * f, 0.08), 0.92)
        wb = min(max(wall_color[2] * f, 0.08), 0.92)
        sig_total += sw
        cr += sw * wr
        cg += sw * wg
        cb += sw * wb
    for i in range(kind.shape[0]):
        ox = px - center[i, 0]
        oy = py - center[i, 1]
        oz = pz - center[i, 2]
        band = edge[i]
        if kind[i] == 0:  # sphere: squared-distance early out
            reach = size[i, 0] + 0.5 * band
            d2 = ox * ox + oy * oy + oz * oz
            if d2 >= reach * reach:
                continue
            d = np.sqrt(d2) - size[i, 0]
        else:  # axis-aligned box
            qx = abs(ox) - size[i, 0]
            qy = abs(oy) - size[i, 1]
            qz = abs(oz) - size[i, 2]
            d = max(qx, max(qy, qz))
            if d >= 0.5 * band:
                continue
        si = smax[i] * _smoothstep(0.5 - d / band)
        if si > 0.0:
            ph = tex_freq[i] * (px + py + pz)
            if tex_kind[i] == 0:
                f = 1.0 + tex_amp[i] * np.sin(ph + tex_phase[i])
            else:
                s = (np.sin(tex_freq[i] * px + tex_phase[i])
                     * np.sin(tex_freq[i] * py)
                     * np.sin(tex_freq[i] * pz))
                f = 1.0 + tex_amp[i] * (3.0 * s) / (1.0 + abs(3.0 * s))
            tr = min(max(base_color[i, 0] * f, 0.08), 0.92)
            tg = min(max(base_color[i, 1] * f, 0.08), 0.92)
            tb = min(max(base_color[i, 2] * f, 0.08), 0.92)
            sig_total += si
            cr += si * tr
            cg += si * tg
            cb += si * tb
    if sig_total > 1e-12:
        inv = 1.0 / sig_total
        return sig_total, cr * inv, cg * inv, cb * inv
    return 0.0, 0.5, 0.5, 0.5


@njit(parallel=True, cache=True)
def scene_eval(kind, center, size, smax, edge, base_color,
               tex_kind, tex_freq, tex_phase, tex_amp,
               wall_thick, wall_sigma, wall_edge, wall_color, wall_freq,
               pts, sig_out, rgb_out):
    for i in prange(pts.shape[0]):
        s, r, g, b = _scene_point(
            kind, center, size, smax, edge, base_color,
            tex_kind, tex_freq, tex_phase, tex_amp,
            wall_thick, wall_sigma, wall_edge, wall_color, wall_freq,
            pts[i, 0], pts[i, 1], pts[i, 2])
        sig_out[i] = s
        rgb_out[i, 0] = r
        rgb_out[i, 1] = g
        rgb_out[i, 2] = b


@njit(parallel=True, cache=True)
def oracle_render_rays(kind, center, size, smax, edge, base_color,
                       tex_kind, tex_freq, tex_phase, tex_amp,
                       wall_thick, wall_sigma, wall_edge, wall_color, wall_freq,
                       origins, dirs, near, far, n_samples, out):
    """Fused fine-quadrature render of the analytic scene (midpoint rule)."""
    for r in prange(origins.shape[0]):
        ox = origins[r, 0]
        oy = origins[r, 1]
        oz = origins[r, 2]
        dx = dirs[r, 0]
        dy = dirs[r, 1]
        dz = dirs[r, 2]
        t0 = near[r]
        dt = (far[r] - t0) / n_samples
        trans = 1.0
        cr = 0.0
        cg = 0.0
        cb = 0.0
        for s in range(n_samples):
            t = t0 + (s + 0.5) * dt
            px = min(max(ox + t * dx, 0.0), 1.0)
            py = min(max(oy + t * dy, 0.0), 1.0)
            pz = min(max(oz + t * dz, 0.0), 1.0)
            sig, pr, pg, pb = _scene_point(
                kind, center, size, smax, edge, base_color,
                tex_kind, tex_freq, tex_phase, tex_amp,
                wall_thick, wall_sigma, wall_edge, wall_color, wall_freq,
                px, py, pz)
            a = 1.0 - np.exp(-sig * dt)
            w = trans * a
            cr += w * pr
            cg += w * pg
            cb += w * pb
            trans *= 1.0 - a
            if trans < 1e-9:
                break
        out[r, 0] = cr
        out[r, 1] = cg
        out[r, 2] = cb


@njit(parallel=True, cache=True)
def adam_step(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2, skip_zero):
    """Fused Adam update; optionally skips entries with exactly zero gradient."""
    for i in prange(param.size):
        g = grad.flat[i]
        if skip_zero and g == 0.0:
            continue
        mi = beta1 * m.flat[i] + (1.0 - beta1) * g
        vi = beta2 * v.flat[i] + (1.0 - beta2) * g * g
        m.flat[i] = mi
        v.flat[i] = vi
        mh = mi / bc1
        vh = vi / bc2
        param.flat[i] -= lr * mh / (np.sqrt(vh) + eps)
