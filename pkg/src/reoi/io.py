"""Binary episode, model and region files; hashing; portable pixmap export.

All numbers are little-endian.  Every format starts with a 4-byte magic and
a u32 version and ends with a u32-length-prefixed JSON document.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from pathlib import Path

import numpy as np

from . import sim, wm
from .trustregion import TrustRegion

EPISODE_MAGIC = b"RWMD"
MODEL_MAGIC = b"RWMM"
REGION_MAGIC = b"RWTR"
EPISODE_VERSION = 1
MODEL_VERSION_LINEAR = 1
MODEL_VERSION_CONV = 2
REGION_VERSION = 1
EPISODE_GLOB = "*.rwmd"


class FormatError(ValueError):
    """File does not follow the expected binary layout."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    """File length disagrees with the length implied by its header."""


class VersionError(FormatError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def config_hash(obj) -> str:
    return sha256_bytes(canonical_json(obj))


class _Reader:
    def __init__(self, data: bytes, magic: bytes, versions):
        self.data = data
        self.pos = 0
        if data[:4] != magic:
            raise BadMagicError(f"expected magic {magic!r}, got {data[:4]!r}")
        self.pos = 4
        self.version = self.u32()
        if self.version not in versions:
            raise VersionError(f"unsupported version {self.version}")

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def array(self, dtype, shape) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        n = int(np.prod(shape)) * dt.itemsize
        return np.frombuffer(self.take(n), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))

    def json(self):
        n = self.u32()
        return json.loads(self.take(n).decode())

    def done(self):
        if self.pos != len(self.data):
            raise TruncatedError(f"{len(self.data) - self.pos} unexpected trailing bytes")


def _u32(*vals) -> bytes:
    return struct.pack(f"<{len(vals)}I", *vals)


def _arr(a, dtype) -> bytes:
    return np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


def _json(obj) -> bytes:
    b = canonical_json(obj)
    return _u32(len(b)) + b


# ---------------------------------------------------------------- episodes

def episode_bytes(traj: wm.Trajectory) -> bytes:
    frames = np.asarray(traj.frames)
    t1, h, w, c = frames.shape
    a = traj.actions.shape[1]
    return (EPISODE_MAGIC + _u32(EPISODE_VERSION, h, w, c, t1 - 1, a)
            + _arr(frames, "f4") + _arr(traj.actions, "f4") + _json(traj.metadata))


def episode_from_bytes(data: bytes) -> wm.Trajectory:
    r = _Reader(data, EPISODE_MAGIC, (EPISODE_VERSION,))
    h, w, c, t, a = (r.u32() for _ in range(5))
    frames = r.array("f4", (t + 1, h, w, c))
    actions = r.array("f4", (t, a))
    meta = r.json()
    r.done()
    return wm.Trajectory(frames, actions, meta)


def save_episode(path, traj: wm.Trajectory) -> None:
    Path(path).write_bytes(episode_bytes(traj))


def load_episode(path) -> wm.Trajectory:
    return episode_from_bytes(Path(path).read_bytes())


def episode_files(directory) -> list:
    return sorted(Path(directory).glob(EPISODE_GLOB), key=lambda p: p.name)


def save_dataset(directory, trajectories, manifest: dict = None) -> str:
    """Write ``episode_NNNNN.rwmd`` files and ``manifest.json``; returns the dataset hash."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, traj in enumerate(trajectories):
        save_episode(d / f"episode_{i:05d}.rwmd", traj)
    digest = hash_dataset(d)
    man = dict(manifest or {})
    man.update({"n_episodes": len(trajectories), "dataset_hash": digest})
    (d / "manifest.json").write_bytes(json.dumps(man, sort_keys=True, indent=2).encode() + b"\n")
    return digest


def load_dataset(directory) -> list:
    files = episode_files(directory)
    if not files:
        raise FileNotFoundError(f"no {EPISODE_GLOB} files in {directory}")
    return [load_episode(p) for p in files]


def hash_dataset(directory) -> str:
    """SHA-256 over episode files in name order, covering each name and its bytes."""
    h = hashlib.sha256()
    for p in episode_files(directory):
        data = p.read_bytes()
        name = p.name.encode()
        h.update(_u32(len(name)) + name)
        h.update(struct.pack("<Q", len(data)))
        h.update(data)
    return h.hexdigest()


# ---------------------------------------------------------------- models

def _model_header(version: int) -> bytes:
    return MODEL_MAGIC + _u32(version, wm.D, wm.HISTORY, wm.ACTION_DIM, sim.H, sim.W, wm.C)


def model_bytes(model: wm.WorldModel) -> bytes:
    stats = struct.pack("<2d", model.residual_mean, model.residual_max)
    if isinstance(model, wm.LinearWorldModel):
        return (_model_header(MODEL_VERSION_LINEAR) + _arr(model.dyn_W, "f4")
                + _arr(model.dec_W, "f4") + stats + _json(model.manifest))
    if isinstance(model, wm.ConvWorldModel):
        params = model.params
        out = [_model_header(MODEL_VERSION_CONV), _u32(len(params))]
        for name in sorted(params):
            arr = params[name]
            nb = name.encode()
            out += [_u32(len(nb)), nb, _u32(arr.ndim, *arr.shape), _arr(arr, "f4")]
        out += [_u32(len(model.codebook)), _arr(model.codebook, "f8"), stats]
        man = {**model.manifest, "hidden": model.hidden}
        out.append(_json(man))
        return b"".join(out)
    raise TypeError(f"cannot serialise {type(model).__name__}")


def model_from_bytes(data: bytes) -> wm.WorldModel:
    r = _Reader(data, MODEL_MAGIC, (MODEL_VERSION_LINEAR, MODEL_VERSION_CONV))
    d, hist, adim, h, w, c = (r.u32() for _ in range(6))
    if (d, hist, adim, h, w, c) != (wm.D, wm.HISTORY, wm.ACTION_DIM, sim.H, sim.W, wm.C):
        raise FormatError(f"model dimensions {(d, hist, adim, h, w, c)} do not match this build")
    if r.version == MODEL_VERSION_LINEAR:
        dyn = r.array("f4", (d, hist * d + adim)).astype(np.float64)
        dec = r.array("f4", (h * w * c, d)).astype(np.float64)
        mean, mx = r.f64(), r.f64()
        man = r.json()
        r.done()
        return wm.LinearWorldModel(dyn, dec, float(man.get("train_config", {}).get("ridge_lambda", 0.0)),
                                   mean, mx, man)
    params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        params[name] = r.array("f4", shape)
    codebook = r.array("f8", (r.u32(), 3))
    mean, mx = r.f64(), r.f64()
    man = r.json()
    r.done()
    hidden = man.pop("hidden")
    return wm.ConvWorldModel(params, codebook, hidden, mean, mx, man)


def save_model(path, model: wm.WorldModel) -> None:
    Path(path).write_bytes(model_bytes(model))


def load_model(path) -> wm.WorldModel:
    return model_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- regions

def region_bytes(region: TrustRegion) -> bytes:
    m, d = region.centers.shape
    return (REGION_MAGIC + _u32(REGION_VERSION, m, d) + _arr(region.centers, "f4")
            + struct.pack("<4d", region.radius, region.lipschitz, region.max_train_error,
                          region.dispersion)
            + _arr(region.mean, "f8") + _arr(region.std, "f8")
            + _arr(region.indices, "u4") + _json(region.meta))


def region_from_bytes(data: bytes) -> TrustRegion:
    r = _Reader(data, REGION_MAGIC, (REGION_VERSION,))
    m, d = r.u32(), r.u32()
    centers = r.array("f4", (m, d)).astype(np.float64)
    radius, lip, err, disp = (r.f64() for _ in range(4))
    mean = r.array("f8", (d,))
    std = r.array("f8", (d,))
    idx = r.array("u4", (m,)).astype(np.int64)
    meta = r.json()
    r.done()
    return TrustRegion(centers, radius, lip, err, disp, mean, std, idx, meta)


def save_region(path, region: TrustRegion) -> None:
    Path(path).write_bytes(region_bytes(region))


def load_region(path) -> TrustRegion:
    return region_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- images

def frame_to_ppm(frame) -> bytes:
    """Binary P6 pixmap, 8 bits per channel."""
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3), got {f.shape}")
    px = np.rint(np.clip(f, 0.0, 1.0) * 255).astype(np.uint8)
    return f"P6\n{f.shape[1]} {f.shape[0]}\n255\n".encode() + px.tobytes()


def mask_to_pbm(mask) -> bytes:
    """Binary P4 bitmap; set bits are mask pixels."""
    m = np.asarray(mask, dtype=bool)
    return f"P4\n{m.shape[1]} {m.shape[0]}\n".encode() + np.packbits(m, axis=1).tobytes()


def write_ppm(path, frame) -> None:
    Path(path).write_bytes(frame_to_ppm(frame))


def write_pbm(path, mask) -> None:
    Path(path).write_bytes(mask_to_pbm(mask))


def read_ppm(path) -> np.ndarray:
    """Read a P6 file written by :func:`write_ppm` back into unit-range floats."""
    data = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise BadMagicError("not a binary pixmap")
    w, h, mx = (int(g) for g in m.groups())
    px = np.frombuffer(data[m.end():m.end() + w * h * 3], dtype=np.uint8)
    if px.size != w * h * 3:
        raise TruncatedError("pixmap data too short")
    return px.reshape(h, w, 3) / float(mx)


def filmstrip(frames) -> np.ndarray:
    """Frames side by side with a 1-px white separator."""
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    h = frames[0].shape[0]
    sep = np.ones((h, 1, 3))
    parts = []
    for i, f in enumerate(frames):
        if i:
            parts.append(sep)
        parts.append(f)
    return np.concatenate(parts, axis=1)
