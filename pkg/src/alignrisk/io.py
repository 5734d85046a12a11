"""Binary field/checkpoint formats and grayscale image IO."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

DF2D_MAGIC = b"DF2D"
DF2C_MAGIC = b"DF2C"  # multi-channel variant used for feature maps
LAWT_MAGIC = b"LAWT"


class FormatError(ValueError):
    pass


def write_df2d(path, field) -> None:
    f = np.asarray(field, dtype="<f4")
    if f.ndim != 3 or f.shape[0] != 2:
        raise FormatError(f"DF2D expects a (2, H, W) field, got {f.shape}")
    _, h, w = f.shape
    with open(path, "wb") as fh:
        fh.write(DF2D_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(f[0].tobytes(order="C"))
        fh.write(f[1].tobytes(order="C"))


def read_df2d(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DF2D_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    h, w = struct.unpack_from("<II", raw, 4)
    n = h * w
    if len(raw) != 12 + 8 * n:
        raise FormatError(f"{path}: expected {12 + 8 * n} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=12, count=2 * n)
    return data.reshape(2, h, w).astype(np.float64)


def write_featuremap(path, fmap) -> None:
    """DF2D-style raw dump with an extra channel-count field.

    Layout: magic ``DF2C``, u32 channels, u32 height, u32 width, then
    ``C*H*W`` little-endian float32 values, channel-major.
    """
    f = np.asarray(fmap, dtype="<f4")
    if f.ndim != 3:
        raise FormatError(f"feature map must be (C, H, W), got {f.shape}")
    with open(path, "wb") as fh:
        fh.write(DF2C_MAGIC)
        fh.write(struct.pack("<III", *f.shape))
        fh.write(f.tobytes(order="C"))


def read_featuremap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DF2C_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    c, h, w = struct.unpack_from("<III", raw, 4)
    data = np.frombuffer(raw, dtype="<f4", offset=16, count=c * h * w)
    return data.reshape(c, h, w).astype(np.float64)


def write_checkpoint(path, tensors: dict) -> None:
    """Serialize named float32 tensors.

    Layout (little-endian): magic ``LAWT``, u32 count, then per tensor:
    u32 name length, UTF-8 name bytes, u32 rank, rank x u32 dims, float32 data.
    Tensors are written in sorted name order so files are reproducible.
    """
    with open(path, "wb") as fh:
        fh.write(LAWT_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f4")
            key = name.encode("utf-8")
            fh.write(struct.pack("<I", len(key)))
            fh.write(key)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != LAWT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    (count,) = struct.unpack_from("<I", raw, 4)
    pos = 8
    out = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + klen].decode("utf-8")
        pos += klen
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(raw, dtype="<f4", offset=pos, count=n).reshape(dims).astype(np.float64)
        pos += 4 * n
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


def load_image(path) -> np.ndarray:
    """Load an 8/16-bit grayscale PNG or binary PGM as floats in [0, 1]."""
    with Image.open(path) as im:
        mode = im.mode
        arr = np.array(im)
    if arr.ndim == 3:
        raise FormatError(f"{path}: expected grayscale, got mode {mode}")
    if mode in ("I;16", "I;16B", "I;16L", "I") or arr.dtype == np.uint16 or arr.max(initial=0) > 255:
        return arr.astype(np.float64) / 65535.0
    return arr.astype(np.float64) / 255.0


def save_image(path, image, bits: int = 16) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    path = Path(path)
    if bits == 8 or path.suffix.lower() == ".pgm":
        Image.fromarray(np.round(img * 255.0).astype(np.uint8), mode="L").save(path)
    elif bits == 16:
        Image.fromarray(np.round(img * 65535.0).astype(np.uint16)).save(path)
    else:
        raise ValueError(f"unsupported bit depth {bits}")
