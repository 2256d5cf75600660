"""On-disk raster formats: 16-bit NOCS PNG, 8-bit mask PNG, raw float32 depth."""
from __future__ import annotations

import struct
from pathlib import Path

import cv2
import numpy as np

DEPTH_MAGIC = b"DPTH"
_HEADER = struct.Struct("<4sIII")


class RasterFormatError(ValueError):
    pass


def write_nocs_png(path, nocs) -> None:
    """3-channel 16-bit PNG, channel value ``round(nocs * 65535)``, RGB order."""
    nocs = np.asarray(nocs, dtype=np.float64)
    if nocs.ndim != 3 or nocs.shape[2] != 3:
        raise RasterFormatError("NOCS map must be (H, W, 3)")
    q = np.round(np.clip(nocs, 0.0, 1.0) * 65535.0).astype(np.uint16)
    if not cv2.imwrite(str(path), q[..., ::-1].copy()):
        raise OSError(f"could not write {path}")


def read_nocs_png(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise RasterFormatError(f"could not read {path}")
    if img.dtype != np.uint16 or img.ndim != 3 or img.shape[2] != 3:
        raise RasterFormatError(f"{path}: expected a 3-channel 16-bit PNG")
    return img[..., ::-1].astype(np.float64) / 65535.0


def write_mask_png(path, mask) -> None:
    m = np.where(np.asarray(mask) > 0.5, 255, 0).astype(np.uint8)
    if not cv2.imwrite(str(path), m):
        raise OSError(f"could not write {path}")


def read_mask_png(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise RasterFormatError(f"could not read {path}")
    if img.dtype != np.uint8 or img.ndim != 2:
        raise RasterFormatError(f"{path}: expected a single-channel 8-bit PNG")
    if not np.isin(img, (0, 255)).all():
        raise RasterFormatError(f"{path}: mask values must be 0 or 255")
    return img == 255


def write_depth(path, depth) -> None:
    """Little-endian float32 raw after a 16-byte header ("DPTH", width, height, 0)."""
    d = np.asarray(depth, dtype="<f4")
    if d.ndim != 2:
        raise RasterFormatError("depth map must be 2-D")
    h, w = d.shape
    Path(path).write_bytes(_HEADER.pack(DEPTH_MAGIC, w, h, 0) + d.tobytes())


def read_depth(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise RasterFormatError(f"{path}: truncated header")
    magic, w, h, _ = _HEADER.unpack_from(data)
    if magic != DEPTH_MAGIC:
        raise RasterFormatError(f"{path}: bad magic {magic!r}")
    if len(data) != _HEADER.size + 4 * w * h:
        raise RasterFormatError(f"{path}: payload size does not match {w}x{h}")
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w).astype(np.float64)
