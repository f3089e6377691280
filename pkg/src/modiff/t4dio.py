"""T4D binary tensor container, structured-text sidecars, and PNG export.

Layout (all little-endian, byte-exact across platforms):
    magic   4 bytes  b"T4D1"
    dtype   u8       0 = 32-bit IEEE float
    flags   u8       bit0 = signed-range data (values nominally in [-1, 1])
    rank    u32
    dims    rank * u32
    payload raw row-major float32
"""

import struct
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError

MAGIC = b"T4D1"
DTYPE_F32 = 0
FLAG_SIGNED = 1


def write_t4d(path, array, signed=False):
    """Write a float array to a T4D file. `signed` marks [-1, 1] data."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    flags = FLAG_SIGNED if signed else 0
    header = struct.pack("<4sBBI", MAGIC, DTYPE_F32, flags, arr.ndim)
    dims = struct.pack("<%dI" % arr.ndim, *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(arr.tobytes(order="C"))


def read_t4d(path):
    """Read a T4D file. Returns (array, signed)."""
    with open(path, "rb") as fh:
        head = fh.read(10)
        if len(head) < 10:
            raise ConfigError(f"{path}: truncated T4D header")
        magic, dtype, flags, rank = struct.unpack("<4sBBI", head)
        if magic != MAGIC:
            raise ConfigError(f"{path}: bad magic {magic!r}, not a T4D file")
        if dtype != DTYPE_F32:
            raise ConfigError(f"{path}: unsupported dtype code {dtype}")
        dims = struct.unpack("<%dI" % rank, fh.read(4 * rank))
        payload = fh.read(4 * int(np.prod(dims)))
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return arr, bool(flags & FLAG_SIGNED)


def write_meta(path, meta):
    """Write the structured-text sidecar (`<name>.meta`) for a T4D file."""
    with open(path, "w") as fh:
        yaml.safe_dump(meta, fh, sort_keys=True)


def read_meta(path):
    with open(path) as fh:
        return yaml.safe_load(fh)


def save_volume_sequence(path, frames, meta=None, signed=False):
    """Save an (N, L, H, W) stack plus optional sidecar next to it."""
    path = Path(path)
    write_t4d(path, frames, signed=signed)
    if meta is not None:
        write_meta(path.with_suffix(path.suffix + ".meta"), meta)


def load_volume_sequence(path):
    path = Path(path)
    frames, signed = read_t4d(path)
    meta_path = path.with_suffix(path.suffix + ".meta")
    meta = read_meta(meta_path) if meta_path.exists() else None
    return frames, signed, meta


def save_montage(frames, path, signed=False):
    """Tile the axial mid-slice of each frame horizontally into an 8-bit PNG.

    Unsigned data maps [0, 1] -> [0, 255]; signed data maps [-1, 1].
    """
    from PIL import Image

    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4:
        raise ConfigError(f"montage expects (N, L, H, W), got shape {frames.shape}")
    mid = frames.shape[1] // 2
    strip = np.concatenate([frames[i, mid] for i in range(frames.shape[0])], axis=1)
    if signed:
        strip = (strip + 1.0) / 2.0
    strip = np.clip(strip, 0.0, 1.0)
    img = Image.fromarray(np.round(strip * 255.0).astype(np.uint8), mode="L")
    img.save(path)
