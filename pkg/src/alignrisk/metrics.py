"""Similarity and deformation-quality measures, with their analytic gradients.

Spatial derivatives are forward differences; the last column (for d/dx) and
last row (for d/dy) repeat the previous difference so that affine fields have
uniform derivatives everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .grid import DimensionError, as_field, as_image


class UndefinedCorrelationError(ValueError):
    """NCC denominator is zero (both inputs constant)."""


def _fsum(a) -> float:
    # fixed pairwise order; reproducible run to run
    return float(np.sum(a))


def ncc(a, b, mask=None) -> float:
    a = as_image(a)
    b = as_image(b)
    if a.shape != b.shape:
        raise DimensionError(f"ncc shapes differ: {a.shape} vs {b.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        a, b = a[m], b[m]
    da = a - a.mean()
    db = b - b.mean()
    saa = _fsum(da * da)
    sbb = _fsum(db * db)
    if saa == 0.0 or sbb == 0.0:
        if saa == 0.0 and sbb == 0.0:
            raise UndefinedCorrelationError("both images are constant")
        return 0.0
    r = _fsum(da * db) / np.sqrt(saa * sbb)
    return float(np.clip(r, -1.0, 1.0))


def ncc_and_grad(fixed: np.ndarray, warped: np.ndarray):
    """Return ``NCC(fixed, warped)`` and its gradient with respect to ``warped``."""
    a = fixed - fixed.mean()
    b = warped - warped.mean()
    saa = _fsum(a * a)
    sbb = _fsum(b * b)
    if saa == 0.0 or sbb == 0.0:
        if saa == 0.0 and sbb == 0.0:
            raise UndefinedCorrelationError("both images are constant")
        return 0.0, np.zeros_like(warped)
    sab = _fsum(a * b)
    denom = np.sqrt(saa * sbb)
    return sab / denom, (a - (sab / sbb) * b) / denom


def forward_diffs(c: np.ndarray):
    """Forward differences ``(d/dx, d/dy)`` of a 2D array with edge replication."""
    dx = np.empty_like(c)
    dx[:, :-1] = c[:, 1:] - c[:, :-1]
    dx[:, -1] = dx[:, -2]
    dy = np.empty_like(c)
    dy[:-1] = c[1:] - c[:-1]
    dy[-1] = dy[-2]
    return dx, dy


def forward_diffs_adjoint(gdx: np.ndarray, gdy: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`forward_diffs`: maps gradients on ``(dx, dy)`` back to the array."""
    out = np.zeros_like(gdx)
    g = gdx[:, :-1].copy()
    g[:, -1] += gdx[:, -1]
    out[:, 1:] += g
    out[:, :-1] -= g
    g = gdy[:-1].copy()
    g[-1] += gdy[-1]
    out[1:] += g
    out[:-1] -= g
    return out


@dataclass
class JacobianMap:
    det: np.ndarray

    @property
    def height(self) -> int:
        return self.det.shape[0]

    @property
    def width(self) -> int:
        return self.det.shape[1]


def jacobian_map(field) -> JacobianMap:
    """Per-pixel ``det(I + grad(field))``."""
    f = as_field(field)
    ux, uy = forward_diffs(f[0])
    vx, vy = forward_diffs(f[1])
    return JacobianMap((1.0 + ux) * (1.0 + vy) - uy * vx)


def _det(jmap) -> np.ndarray:
    return jmap.det if isinstance(jmap, JacobianMap) else np.asarray(jmap, dtype=np.float64)


def njd_percent(jmap) -> float:
    det = _det(jmap)
    return 100.0 * np.count_nonzero(det <= 0.0) / det.size


def jacobian_std(jmap) -> float:
    return float(np.std(_det(jmap)))


def smoothness_map(field) -> np.ndarray:
    f = as_field(field)
    ux, uy = forward_diffs(f[0])
    vx, vy = forward_diffs(f[1])
    return ux * ux + uy * uy + vx * vx + vy * vy


def smoothness_energy(field, reduction: str = "mean") -> float:
    """Squared-gradient energy of a field, averaged (default) or summed over pixels."""
    e = smoothness_map(field)
    if reduction == "mean":
        return float(np.mean(e))
    if reduction == "sum":
        return _fsum(e)
    raise ValueError(f"unknown reduction {reduction!r}")


def smoothness_grad(field: np.ndarray, reduction: str = "mean") -> np.ndarray:
    scale = 2.0 / field[0].size if reduction == "mean" else 2.0
    out = np.empty_like(field)
    for k in range(2):
        dx, dy = forward_diffs(field[k])
        out[k] = scale * forward_diffs_adjoint(dx, dy)
    return out


def jd_penalty(jmap) -> float:
    """Mean hinge ``max(0, -det)``: zero exactly when nothing folds."""
    det = _det(jmap)
    return float(np.mean(np.maximum(0.0, -det)))


def jd_penalty_grad(field: np.ndarray) -> np.ndarray:
    ux, uy = forward_diffs(field[0])
    vx, vy = forward_diffs(field[1])
    det = (1.0 + ux) * (1.0 + vy) - uy * vx
    gdet = np.where(det < 0.0, -1.0 / det.size, 0.0)
    out = np.empty_like(field)
    out[0] = forward_diffs_adjoint(gdet * (1.0 + vy), gdet * (-vx))
    out[1] = forward_diffs_adjoint(gdet * (-uy), gdet * (1.0 + ux))
    return out


@dataclass
class DeformQualityReport:
    njd_percent: float
    jacobian_std: float
    ncc_before: float
    ncc_affine: float
    ncc_final: float

    def as_dict(self) -> dict:
        return asdict(self)


def field_report(field, fixed=None, moving=None) -> dict:
    """Row of deformation metrics for a field, with NCC when images are given.

    NCC here is between ``fixed`` and ``moving`` warped by ``field``.
    """
    from .grid import warp_bilinear

    jm = jacobian_map(field)
    row = {
        "njd_percent": njd_percent(jm),
        "jacobian_std": jacobian_std(jm),
        "smoothness": smoothness_energy(field),
        "jd_penalty": jd_penalty(jm),
        "ncc": float("nan"),
    }
    if fixed is not None and moving is not None:
        row["ncc"] = ncc(fixed, warp_bilinear(moving, field))
    return row
