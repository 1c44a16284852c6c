"""File formats, HDR->LDR conversion, and run configuration.

Formats (all little-endian):
  PPM          binary P6, 8-bit, '#' comments in the header
  poses        text, one camera per line: t qw qx qy qz tx ty tz
  events       magic 'EVS1', u32 W, u32 H, u64 count, then count records of
               {u64 t_us, u16 x, u16 y, i8 p, u8 pad}, sorted by (t, y, x)
  checkpoint   magic 'EVCK', u32 version, u32 count, then named float64 arrays
  config       INI-style sections with typed defaults; unknown keys rejected

Errors carry stable codes (FormatError.code) so tests can assert on them.
"""

from __future__ import annotations

import io as _stdio
import struct
from dataclasses import dataclass

import numpy as np

from . import event as event_mod
from . import geom

EVENT_MAGIC = b"EVS1"
CHECKPOINT_MAGIC = b"EVCK"
CHECKPOINT_VERSION = 1

FILE_DTYPE = event_mod.EVENT_DTYPE  # on-disk record layout == in-memory


class FormatError(Exception):
    """I/O format violation with a stable machine-checkable code."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


# ---------------------------------------------------------------------------
# PPM images

def write_ppm(path, img: np.ndarray):
    """img: (H, W, 3) uint8."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise FormatError("BAD_VALUE", "write_ppm expects (H, W, 3) uint8")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def _read_ppm_token(f, path):
    """Next whitespace-separated header token, skipping '#' comments."""
    tok = b""
    while True:
        ch = f.read(1)
        if ch == b"":
            raise FormatError("TRUNCATED", f"{path}: header ended early")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic != b"P6":
            raise FormatError("BAD_MAGIC", f"{path}: not a P6 PPM (got {magic!r})")
        try:
            w = int(_read_ppm_token(f, path))
            h = int(_read_ppm_token(f, path))
            maxval = int(_read_ppm_token(f, path))
        except ValueError as e:
            raise FormatError("BAD_HEADER", f"{path}: non-numeric header field ({e})")
        if maxval != 255:
            raise FormatError("BAD_HEADER", f"{path}: only 8-bit PPM supported, "
                                            f"maxval={maxval}")
        data = f.read(w * h * 3)
        if len(data) != w * h * 3:
            raise FormatError("TRUNCATED",
                              f"{path}: expected {w * h * 3} pixel bytes, "
                              f"got {len(data)}")
        return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def encode_gamma(linear: np.ndarray, k: float = 2.2) -> np.ndarray:
    """[0,1] linear floats -> gamma-encoded uint8."""
    return np.rint(255.0 * np.clip(linear, 0.0, 1.0) ** (1.0 / k)).astype(np.uint8)


def decode_gamma(img8: np.ndarray, k: float = 2.2) -> np.ndarray:
    """Gamma-encoded uint8 -> [0,1] linear floats."""
    return (np.asarray(img8, dtype=np.float64) / 255.0) ** k


def hdr_to_ldr(img: np.ndarray, k: float, b: float) -> np.ndarray:
    """255 * min(1, max(0, (I_hdr / b)^(1/k))), rounded to uint8."""
    if k <= 0 or b <= 0:
        raise FormatError("BAD_VALUE", "hdr_to_ldr needs k > 0 and b > 0")
    img = np.asarray(img, dtype=np.float64)
    out = np.clip((img / b), 0.0, None) ** (1.0 / k)
    return np.rint(255.0 * np.minimum(1.0, out)).astype(np.uint8)


# ---------------------------------------------------------------------------
# pose files

def write_poses(path, poses):
    with open(path, "w") as f:
        f.write("# t qw qx qy qz tx ty tz\n")
        for p in poses:
            vals = [p.time, *p.rotation, *p.translation]
            f.write(" ".join(f"{v:.17g}" for v in vals) + "\n")


def read_poses(path):
    poses = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 8:
                raise FormatError("BAD_HEADER",
                                  f"{path}:{ln}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(v) for v in parts]
            except ValueError:
                raise FormatError("BAD_VALUE", f"{path}:{ln}: non-numeric field")
            poses.append(geom.Pose(np.array(vals[1:5]), np.array(vals[5:8]),
                                   time=vals[0]))
    return poses


# ---------------------------------------------------------------------------
# event streams

def _check_sorted(rec) -> bool:
    """Vectorized (t, y, x) lexicographic monotonicity."""
    if len(rec) < 2:
        return True
    dt = np.diff(rec["t"].astype(np.int64))
    dy = np.diff(rec["y"].astype(np.int32))
    dx = np.diff(rec["x"].astype(np.int32))
    ok = (dt > 0) | ((dt == 0) & ((dy > 0) | ((dy == 0) & (dx >= 0))))
    return bool(ok.all())


def write_events(path, events: np.ndarray, width: int, height: int):
    if len(events):
        if events["x"].max() >= width or events["y"].max() >= height:
            raise FormatError("OUT_OF_PLANE", "event outside the sensor plane")
        if not _check_sorted(events):
            raise FormatError("UNSORTED", "events must be sorted by (t, y, x)")
    rec = np.asarray(events, dtype=FILE_DTYPE)
    with open(path, "wb") as f:
        f.write(EVENT_MAGIC)
        f.write(struct.pack("<IIQ", width, height, len(events)))
        f.write(rec.tobytes())


def iter_events(path, chunk_size: int = 1 << 20):
    """Stream (header, chunk) pairs without buffering the whole file."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != EVENT_MAGIC:
            raise FormatError("BAD_MAGIC", f"{path}: bad magic {magic!r}")
        header = f.read(16)
        if len(header) != 16:
            raise FormatError("TRUNCATED", f"{path}: header ended early")
        width, height, count = struct.unpack("<IIQ", header)
        remaining = count
        prev_key = None
        while remaining > 0:
            n = min(remaining, chunk_size)
            data = f.read(n * FILE_DTYPE.itemsize)
            if len(data) != n * FILE_DTYPE.itemsize:
                raise FormatError("TRUNCATED",
                                  f"{path}: {remaining} records missing")
            rec = np.frombuffer(data, dtype=FILE_DTYPE).copy()
            if np.any((rec["p"] != 1) & (rec["p"] != -1)):
                raise FormatError("BAD_POLARITY", f"{path}: polarity not in {{-1,1}}")
            if np.any(rec["x"] >= width) or np.any(rec["y"] >= height):
                raise FormatError("OUT_OF_PLANE",
                                  f"{path}: event outside {width}x{height}")
            first = (int(rec["t"][0]), int(rec["y"][0]), int(rec["x"][0])) \
                if len(rec) else None
            if not _check_sorted(rec) or (prev_key is not None
                                          and first is not None
                                          and first < prev_key):
                raise FormatError("UNSORTED", f"{path}: records not (t, y, x) sorted")
            if len(rec):
                prev_key = (int(rec["t"][-1]), int(rec["y"][-1]), int(rec["x"][-1]))
            yield (width, height), rec
            remaining -= n
        if f.read(1) != b"":
            raise FormatError("BAD_HEADER", f"{path}: trailing bytes after "
                                            f"{count} records")


def read_events(path):
    """Whole stream: returns ((width, height), events)."""
    shape = None
    chunks = []
    for shape, ev in iter_events(path):
        chunks.append(ev)
    if shape is None:  # zero-count file: pull the header alone
        with open(path, "rb") as f:
            if f.read(4) != EVENT_MAGIC:
                raise FormatError("BAD_MAGIC", f"{path}: bad magic")
            width, height, _ = struct.unpack("<IIQ", f.read(16))
            shape = (width, height)
    events = (np.concatenate(chunks) if chunks
              else np.empty(0, dtype=event_mod.EVENT_DTYPE))
    return shape, events


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, arrays: dict):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)  # 0-d survives (tobytes C-orders)
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise FormatError("BAD_MAGIC", f"{path}: not a checkpoint")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise FormatError("BAD_HEADER", f"{path}: unsupported version {version}")
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if ndim else 1
            data = f.read(8 * n)
            if len(data) != 8 * n:
                raise FormatError("TRUNCATED", f"{path}: array {name!r} cut short")
            arrays[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
        return arrays


# ---------------------------------------------------------------------------
# run configuration

CONFIG_DEFAULTS = {
    "scene": {
        "seed": 7,
        "objects": 6,
    },
    "sensor": {
        "width": 96,
        "height": 72,
        "fx": 80.0,
        "event_gamma": 2.2,
        "gain_sigma": 0.05,
        "omega": 0.2,
        "exposure": 0.025,
        "store_gamma": 2.2,
        "baseline": 0.03,
    },
    "trajectory": {
        "fast_seconds": 2.0,
        "slow_seconds": 1.0,
        "train_frames": 48,
        "test_frames": 12,
        "blur_subrenders": 16,
        "event_substeps": 8,
    },
    "train": {
        "steps": 20000,
        "rays_per_step": 256,
        "event_pairs_per_step": 192,
        "n_blur": 4,
        "lambda_evs": 1.0,
        "lr_grid": 1e-2,
        "lr_mlp": 1e-3,
        "lr_embed": 1e-3,
        "lr_gamma": 1e-3,
        "lr_pose": 1e-4,
        "lr_decay": 0.0,
        "warmup_frac": 0.05,
        "embed_fit_steps": 500,
        "train_samples": 48,
        "seed": 0,
    },
    "eval": {
        "pose_opt_steps": 1000,
        "eval_samples": 128,
    },
}


@dataclass
class RunConfig:
    values: dict

    @staticmethod
    def default() -> "RunConfig":
        return RunConfig({s: dict(kv) for s, kv in CONFIG_DEFAULTS.items()})

    def get(self, section, key):
        return self.values[section][key]

    def set(self, section, key, value):
        if section not in CONFIG_DEFAULTS or key not in CONFIG_DEFAULTS[section]:
            raise FormatError("UNKNOWN_KEY", f"[{section}] {key}")
        want = type(CONFIG_DEFAULTS[section][key])
        try:
            self.values[section][key] = want(value)
        except (TypeError, ValueError):
            raise FormatError("BAD_VALUE",
                              f"[{section}] {key}: expected {want.__name__}, "
                              f"got {value!r}")

    def serialize(self) -> str:
        out = _stdio.StringIO()
        for section in CONFIG_DEFAULTS:
            out.write(f"[{section}]\n")
            for key in CONFIG_DEFAULTS[section]:
                v = self.values[section][key]
                out.write(f"{key} = {v!r}\n" if isinstance(v, str)
                          else f"{key} = {v}\n")
            out.write("\n")
        return out.getvalue()

    @staticmethod
    def parse(text: str) -> "RunConfig":
        cfg = RunConfig.default()
        section = None
        for ln, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in CONFIG_DEFAULTS:
                    raise FormatError("UNKNOWN_KEY", f"line {ln}: section {section!r}")
                continue
            if "=" not in line or section is None:
                raise FormatError("BAD_HEADER", f"line {ln}: expected key = value")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip().strip("'\"")
            cfg.set(section, key, val)
        return cfg

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.serialize())

    @staticmethod
    def load(path) -> "RunConfig":
        with open(path) as f:
            return RunConfig.parse(f.read())
