"""Event-domain processing: sensor mapping, brightness increment images,
the event loss, and a reference-crossing event simulator.

Event streams are structured arrays with fields t (microseconds, u8),
x, y (u2), p (i1 in {-1, +1}), sorted by (t, y, x).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

# matches the on-disk record layout (14 bytes, pad always 0) so file reads
# are a single memcpy
EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"),
                        ("p", "<i1"), ("pad", "<u1")])

GRAY_WEIGHTS = (0.299, 0.587, 0.114)  # BT.601 luma
GAMMA_EPS = 1e-5
DEFAULT_OMEGA = 0.2      # event threshold and BII weight
DEFAULT_WINDOW = 2.5e-3  # BII accumulation half-window span (seconds)


def make_events(t_us, x, y, p) -> np.ndarray:
    ev = np.zeros(len(t_us), dtype=EVENT_DTYPE)
    ev["t"] = t_us
    ev["x"] = x
    ev["y"] = y
    ev["p"] = p
    return ev


def sort_events(ev: np.ndarray) -> np.ndarray:
    """Canonical (t, y, x) ordering."""
    order = np.lexsort((ev["x"], ev["y"], ev["t"]))
    return ev[order]


def to_gray(rgb):
    """BT.601 luma of an (..., 3) array with channels in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return (GRAY_WEIGHTS[0] * rgb[..., 0] + GRAY_WEIGHTS[1] * rgb[..., 1]
            + GRAY_WEIGHTS[2] * rgb[..., 2])


def to_gray_components(r, g, b):
    """Same luma on separate channel components (arrays or Vars)."""
    return GRAY_WEIGHTS[0] * r + GRAY_WEIGHTS[1] * g + GRAY_WEIGHTS[2] * b


def gamma_map(gray, raw_c):
    """I = max(gray, eps)^c with c = exp(raw_c); differentiable in both."""
    c = ad.exp(raw_c)
    return ad.pow(ad.maximum(gray, GAMMA_EPS), c)


class BrightnessIncrementImage:
    """Per-pixel omega0-weighted signed event counts over a time window."""

    def __init__(self, values, t_center, half_window, omega0):
        self.values = values
        self.t_center = t_center
        self.half_window = half_window
        self.omega0 = omega0


def build_bii(events: np.ndarray, t_center: float, half_window: float,
              omega0: float, width: int, height: int) -> BrightnessIncrementImage:
    """Accumulate events with |t - t_center| <= half_window (inclusive)."""
    if len(events) and (events["x"].max() >= width or events["y"].max() >= height):
        raise ValueError("event coordinates outside the sensor plane")
    t = events["t"] * 1e-6
    mask = np.abs(t - t_center) <= half_window
    img = np.zeros((height, width))
    sel = events[mask]
    np.add.at(img, (sel["y"].astype(np.intp), sel["x"].astype(np.intp)),
              sel["p"].astype(np.float64))
    return BrightnessIncrementImage(img * omega0, t_center, half_window, omega0)


def count_events_window(events: np.ndarray, t0_us: int, t1_us: int,
                        width: int, height: int) -> np.ndarray:
    """Signed event count per pixel for t in [t0_us, t1_us] (inclusive)."""
    lo = np.searchsorted(events["t"], t0_us, side="left")
    hi = np.searchsorted(events["t"], t1_us, side="right")
    img = np.zeros((height, width))
    sel = events[lo:hi]
    np.add.at(img, (sel["y"].astype(np.intp), sel["x"].astype(np.intp)),
              sel["p"].astype(np.float64))
    return img


def event_loss(i_end, i_start, bii_values):
    """Mean over pixels of (log I_end - log I_start - bii)^2."""
    diff = ad.log(i_end) - ad.log(i_start) - bii_values
    return ad.mean(diff * diff)


def simulate_events(log_frames: np.ndarray, times: np.ndarray,
                    omega: float = DEFAULT_OMEGA) -> np.ndarray:
    """Per-pixel reference-crossing event generation.

    log_frames: (F, H, W) log intensities at strictly increasing `times`
    (seconds).  Each pixel keeps a reference level initialized from the
    first frame; whenever the linearly-interpolated signal moves a full
    omega away from the reference, an event is emitted at the interpolated
    crossing time and the reference advances by sign * omega.
    """
    log_frames = np.asarray(log_frames, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    if log_frames.ndim != 3 or log_frames.shape[0] < 2:
        raise ValueError("need at least two (H, W) log frames")
    if np.any(np.diff(times) <= 0):
        raise ValueError("frame times must be strictly increasing")
    if not np.all(np.isfinite(log_frames)):
        raise ValueError("non-finite log intensities")

    h, w = log_frames.shape[1:]
    ys, xs = np.divmod(np.arange(h * w), w)
    ref = log_frames[0].reshape(-1).copy()
    chunks = []
    for f in range(1, log_frames.shape[0]):
        l0 = log_frames[f - 1].reshape(-1)
        l1 = log_frames[f].reshape(-1)
        diff = l1 - ref
        k = np.floor(np.abs(diff) / omega).astype(np.int64)
        active = np.nonzero(k)[0]
        if active.size:
            counts = k[active]
            sign = np.sign(diff[active])
            pix = np.repeat(active, counts)
            starts = np.cumsum(counts) - counts
            j = np.arange(counts.sum()) - np.repeat(starts, counts) + 1
            level = ref[pix] + np.repeat(sign, counts) * j * omega
            denom = l1[pix] - l0[pix]
            denom = np.where(np.abs(denom) < 1e-300,
                             np.where(denom < 0, -1e-300, 1e-300), denom)
            frac = np.clip((level - l0[pix]) / denom, 0.0, 1.0)
            t_ev = times[f - 1] + frac * (times[f] - times[f - 1])
            chunks.append(make_events(
                np.round(t_ev * 1e6).astype(np.uint64),
                xs[pix], ys[pix], np.repeat(sign, counts).astype(np.int8)))
            ref[active] += sign * counts * omega
    if not chunks:
        return np.empty(0, dtype=EVENT_DTYPE)
    return sort_events(np.concatenate(chunks))
