"""Spatial substrate: images, displacement fields, affine maps, bilinear warping.

Conventions used throughout the package:

* An image is a 2D float64 array of shape ``(H, W)``.
* A displacement field is a float64 array of shape ``(2, H, W)``; ``field[0]``
  is the horizontal component ``u`` and ``field[1]`` the vertical component
  ``v``, both in pixels of the grid the field lives on.
* Warping is backward (pull): ``out(p) = moving(p + field(p))`` with border
  replication outside the image.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np


class DimensionError(ValueError):
    """Raised when two grids that must match in shape do not."""


class ConfigurationError(ValueError):
    """Raised for invalid sizes, level counts or other settings."""


def as_image(data) -> np.ndarray:
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError(f"image must be 2D, got shape {img.shape}")
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise DimensionError(f"image must be at least 2x2, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def as_field(data) -> np.ndarray:
    f = np.asarray(data, dtype=np.float64)
    if f.ndim != 3 or f.shape[0] != 2:
        raise DimensionError(f"field must have shape (2, H, W), got {f.shape}")
    if f.shape[1] < 2 or f.shape[2] < 2:
        raise DimensionError(f"field must be at least 2x2, got {f.shape[1:]}")
    if not np.all(np.isfinite(f)):
        raise ValueError("field contains non-finite displacements")
    return f


def zero_field(height: int, width: int) -> np.ndarray:
    return np.zeros((2, height, width))


def _check_same(shape_a, shape_b, what="shapes"):
    if tuple(shape_a) != tuple(shape_b):
        raise DimensionError(f"{what} differ: {tuple(shape_a)} vs {tuple(shape_b)}")


def bilinear_sample(arr: np.ndarray, x: np.ndarray, y: np.ndarray, with_grad: bool = False):
    """Sample ``arr`` (shape ``(..., H, W)``) at continuous pixel positions.

    ``x`` and ``y`` have shape ``(H', W')`` or ``(B, H', W')`` matching the
    leading batch axis of ``arr``; every leading channel is sampled at the
    same positions. Positions are clamped to the image (border replication).

    With ``with_grad`` also returns the spatial derivatives of the sampled
    surface with respect to ``x`` and ``y``; they are zero where a coordinate
    was clamped. At exact integer positions the right-hand derivative is used.
    """
    H, W = arr.shape[-2:]
    xc = np.clip(x, 0.0, W - 1.0)
    yc = np.clip(y, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.intp), W - 2)
    y0 = np.minimum(np.floor(yc).astype(np.intp), H - 2)
    ax = xc - x0
    ay = yc - y0

    if x.ndim == 2:
        v00 = arr[..., y0, x0]
        v01 = arr[..., y0, x0 + 1]
        v10 = arr[..., y0 + 1, x0]
        v11 = arr[..., y0 + 1, x0 + 1]
    else:
        b = np.arange(arr.shape[0]).reshape(-1, 1, 1)
        # move channels last for batched fancy indexing, then back
        a = np.moveaxis(arr, 1, -1) if arr.ndim == 4 else arr[..., None]
        v00 = a[b, y0, x0]
        v01 = a[b, y0, x0 + 1]
        v10 = a[b, y0 + 1, x0]
        v11 = a[b, y0 + 1, x0 + 1]
        v00, v01, v10, v11 = (np.moveaxis(t, -1, 1) for t in (v00, v01, v10, v11))
        if arr.ndim == 3:
            v00, v01, v10, v11 = (t[:, 0] for t in (v00, v01, v10, v11))
        if arr.ndim == 4:
            ax = ax[:, None]
            ay = ay[:, None]

    top = (1.0 - ax) * v00 + ax * v01
    bot = (1.0 - ax) * v10 + ax * v11
    out = (1.0 - ay) * top + ay * bot
    if not with_grad:
        return out

    inside_x = (x >= 0.0) & (x <= W - 1.0)
    inside_y = (y >= 0.0) & (y <= H - 1.0)
    if x.ndim == 3 and arr.ndim == 4:
        inside_x = inside_x[:, None]
        inside_y = inside_y[:, None]
    dx = ((1.0 - ay) * (v01 - v00) + ay * (v11 - v10)) * inside_x
    dy = (bot - top) * inside_y
    return out, dx, dy


def pixel_grid(height: int, width: int):
    """Return ``(xs, ys)`` pixel coordinate arrays of shape ``(H, W)``."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs, ys


def warp_bilinear(image, field) -> np.ndarray:
    """Pull-warp ``image`` by ``field``: ``out(p) = image(p + field(p))``."""
    img = as_image(image)
    f = as_field(field)
    _check_same(img.shape, f.shape[1:], "image and field shapes")
    xs, ys = pixel_grid(*img.shape)
    return bilinear_sample(img, xs + f[0], ys + f[1])


@dataclass(frozen=True)
class AffineTransform2D:
    """Affine map in normalized ``[-1, 1]^2`` coordinates.

    ``matrix`` acts on ``(x~, y~)``; ``translation`` is in normalized units.
    """

    matrix: np.ndarray = dc_field(default_factory=lambda: np.eye(2))
    translation: np.ndarray = dc_field(default_factory=lambda: np.zeros(2))

    @classmethod
    def identity(cls) -> "AffineTransform2D":
        return cls(np.eye(2), np.zeros(2))

    @classmethod
    def from_params(cls, theta) -> "AffineTransform2D":
        theta = np.asarray(theta, dtype=np.float64)
        return cls(theta[:4].reshape(2, 2).copy(), theta[4:6].copy())

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.matrix).ravel(), np.asarray(self.translation)])

    @property
    def determinant(self) -> float:
        return float(np.linalg.det(self.matrix))


def normalized_grid(height: int, width: int):
    xs, ys = pixel_grid(height, width)
    return 2.0 * xs / (width - 1) - 1.0, 2.0 * ys / (height - 1) - 1.0


def affine_to_field(affine: AffineTransform2D, height: int, width: int) -> np.ndarray:
    if height < 2 or width < 2:
        raise ConfigurationError("affine_to_field needs height, width >= 2")
    m = np.asarray(affine.matrix, dtype=np.float64) - np.eye(2)
    t = np.asarray(affine.translation, dtype=np.float64)
    xn, yn = normalized_grid(height, width)
    u = (m[0, 0] * xn + m[0, 1] * yn + t[0]) * ((width - 1) / 2.0)
    v = (m[1, 0] * xn + m[1, 1] * yn + t[1]) * ((height - 1) / 2.0)
    out = np.stack([u, v])
    if not np.all(np.isfinite(out)):
        raise ValueError("affine transform produced non-finite displacements")
    return out


def compose_fields(outer, inner) -> np.ndarray:
    """``(outer o inner)(p) = inner(p) + outer(p + inner(p))``."""
    fo = as_field(outer)
    fi = as_field(inner)
    _check_same(fo.shape, fi.shape, "field shapes")
    xs, ys = pixel_grid(*fi.shape[1:])
    return fi + bilinear_sample(fo, xs + fi[0], ys + fi[1])


def resize_field(field, new_height: int, new_width: int) -> np.ndarray:
    """Resample a field onto a new grid, rescaling displacements per axis.

    Uses pixel-center alignment so that a size ratio ``r`` maps source
    coordinates by exactly ``r``; displacements are multiplied by the same
    per-axis ratio.
    """
    f = as_field(field)
    if new_height < 2 or new_width < 2:
        raise ConfigurationError("resize target must be at least 2x2")
    h, w = f.shape[1:]
    if (h, w) == (new_height, new_width):
        return f.copy()
    sx = w / new_width
    sy = h / new_height
    xs, ys = pixel_grid(new_height, new_width)
    out = bilinear_sample(f, (xs + 0.5) * sx - 0.5, (ys + 0.5) * sy - 0.5)
    out[0] *= new_width / w
    out[1] *= new_height / h
    return out


def downsample2(image: np.ndarray) -> np.ndarray:
    """2x2 average pooling; odd sizes are padded by edge replication."""
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape
    if H % 2 or W % 2:
        img = np.pad(img, ((0, H % 2), (0, W % 2)), mode="edge")
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


@dataclass
class Pyramid:
    levels: list  # coarsest first
    scale_factor: int = 2

    def __len__(self):
        return len(self.levels)


def build_pyramid(image, levels: int, min_size: int = 8) -> Pyramid:
    img = as_image(image)
    if levels < 1:
        raise ConfigurationError("pyramid needs at least one level")
    out = [img]
    for _ in range(levels - 1):
        nxt = downsample2(out[-1])
        if min(nxt.shape) < min_size:
            raise ConfigurationError(
                f"{levels} levels too many for {img.shape}: coarsest would be {nxt.shape}"
            )
        out.append(nxt)
    if min(out[-1].shape) < min_size:
        raise ConfigurationError(f"image {img.shape} smaller than minimum level size {min_size}")
    return Pyramid(out[::-1])
