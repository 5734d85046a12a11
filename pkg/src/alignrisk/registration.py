"""Per-pair longitudinal registration: affine stage then coarse-to-fine deformable refinement.

The objective for a pair is

    (1 - NCC(fixed, moving o affine)) + (1 - NCC(fixed, moving o final))
        + gamma * (smoothness(field) + lambda_jd * jd_penalty(field))

minimized directly per pair with Adam and hand-derived gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field, fields

import numpy as np

from . import metrics as M
from .grid import (
    AffineTransform2D,
    DimensionError,
    affine_to_field,
    as_image,
    bilinear_sample,
    build_pyramid,
    compose_fields,
    normalized_grid,
    pixel_grid,
    resize_field,
    warp_bilinear,
    zero_field,
)
from .optim import Adam

log = logging.getLogger(__name__)


class RegistrationDivergenceError(RuntimeError):
    def __init__(self, stage: str, iteration: int, value):
        super().__init__(f"non-finite loss {value!r} in {stage} stage at iteration {iteration}")
        self.stage = stage
        self.iteration = iteration


@dataclass
class RegistrationConfig:
    gamma: float = 0.03  # effective weight for a per-pixel mean penalty; see README
    lambda_jd: float = 1e-5
    deformable_levels: int = 4
    affine_iters: int = 200
    deformable_iters_per_level: int = 150
    affine_lr: float = 1e-2
    deformable_lr: float = 0.5
    stop_rel_tol: float = 1e-5
    seed: int = 0
    affine_levels: int = 2
    smoothness_reduction: str = "mean"

    def __post_init__(self):
        if self.gamma < 0 or self.lambda_jd < 0:
            raise ValueError("gamma and lambda_jd must be >= 0")
        if self.deformable_levels < 1 or self.affine_levels < 1:
            raise ValueError("level counts must be >= 1")
        if self.affine_iters < 1 or self.deformable_iters_per_level < 1:
            raise ValueError("iteration budgets must be >= 1")
        if self.smoothness_reduction not in ("mean", "sum"):
            raise ValueError("smoothness_reduction must be 'mean' or 'sum'")

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown registration config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RegistrationResult:
    affine: AffineTransform2D
    final_field: np.ndarray
    warped_affine: np.ndarray
    warped_final: np.ndarray
    quality: M.DeformQualityReport
    loss_trace: dict = dc_field(default_factory=dict)  # stage name -> list of losses


def loss_image(fixed, warped_affine, warped_final, field, cfg: RegistrationConfig):
    """Full image-alignment loss and its terms."""
    ncc_a = M.ncc(fixed, warped_affine)
    ncc_f = M.ncc(fixed, warped_final)
    jm = M.jacobian_map(field)
    smooth = M.smoothness_energy(field, cfg.smoothness_reduction)
    jd = M.jd_penalty(jm)
    total = (1.0 - ncc_a) + (1.0 - ncc_f) + cfg.gamma * (smooth + cfg.lambda_jd * jd)
    return total, {"ncc_affine": ncc_a, "ncc_final": ncc_f, "smoothness": smooth, "jd_penalty": jd}


def check_gradients(objective, point, step: float = 1e-4) -> float:
    """Max relative deviation between analytic and central-difference gradients.

    ``objective(x)`` returns ``(value, grad)``. Per coordinate the deviation is
    ``|g_a - g_fd| / max(|g_a|, |g_fd|, floor)`` with
    ``floor = max(1e-3 * max|g_fd|, 1e-7 * max(1, |f(x)|))`` so coordinates whose
    true gradient is zero (e.g. biases cancelled by a normalization) are judged
    against finite-difference round-off rather than against themselves.
    """
    x = np.array(point, dtype=np.float64)
    f0, g = objective(x.copy())
    g = np.asarray(g, dtype=np.float64).ravel()
    flat = x.ravel()
    num = np.empty_like(g)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += step
        xm = flat.copy()
        xm[i] -= step
        fp, _ = objective(xp.reshape(x.shape))
        fm, _ = objective(xm.reshape(x.shape))
        num[i] = (fp - fm) / (2.0 * step)
    floor = max(1e-3 * float(np.max(np.abs(num))), 1e-7 * max(1.0, abs(float(f0))))
    denom = np.maximum(np.maximum(np.abs(g), np.abs(num)), floor)
    return float(np.max(np.abs(g - num) / denom))


def affine_objective(fixed: np.ndarray, moving: np.ndarray):
    """``theta -> (1 - NCC(fixed, moving o affine(theta)), d/dtheta)`` for the 6 affine params."""
    H, W = fixed.shape
    xs, ys = pixel_grid(H, W)
    xn, yn = normalized_grid(H, W)
    sx, sy = (W - 1) / 2.0, (H - 1) / 2.0

    def objective(theta):
        aff = AffineTransform2D.from_params(theta)
        f = affine_to_field(aff, H, W)
        warped, dmx, dmy = bilinear_sample(moving, xs + f[0], ys + f[1], with_grad=True)
        r, dr = M.ncc_and_grad(fixed, warped)
        gu = -dr * dmx * sx
        gv = -dr * dmy * sy
        grad = np.array([
            M._fsum(gu * xn), M._fsum(gu * yn),
            M._fsum(gv * xn), M._fsum(gv * yn),
            M._fsum(gu), M._fsum(gv),
        ])
        return 1.0 - r, grad

    return objective


def deformable_objective(fixed: np.ndarray, moving: np.ndarray, cfg: RegistrationConfig, ncc_affine: float = 1.0):
    """``field -> (loss, d loss/d field)`` for the image loss with the affine term held fixed."""
    H, W = fixed.shape
    xs, ys = pixel_grid(H, W)
    const = 1.0 - ncc_affine

    def objective(field):
        field = np.asarray(field, dtype=np.float64).reshape(2, H, W)
        warped, dmx, dmy = bilinear_sample(moving, xs + field[0], ys + field[1], with_grad=True)
        r, dr = M.ncc_and_grad(fixed, warped)
        grad = np.stack([-dr * dmx, -dr * dmy])
        loss = const + (1.0 - r)
        if cfg.gamma:
            smooth = M.smoothness_energy(field, cfg.smoothness_reduction)
            reg = smooth
            grad += cfg.gamma * M.smoothness_grad(field, cfg.smoothness_reduction)
            if cfg.lambda_jd:
                reg += cfg.lambda_jd * M.jd_penalty(M.jacobian_map(field))
                grad += (cfg.gamma * cfg.lambda_jd) * M.jd_penalty_grad(field)
            loss += cfg.gamma * reg
        return loss, grad

    return objective


def _descend(objective, x0, lr, iters, tol, stage, trace):
    """Adam descent returning the best iterate seen; appends losses to ``trace``."""
    params = {"x": np.array(x0, dtype=np.float64)}
    opt = Adam(lr=lr)
    best_x = params["x"].copy()
    best = np.inf
    prev = None
    for it in range(iters):
        loss, grad = objective(params["x"])
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise RegistrationDivergenceError(stage, it, loss)
        trace.append(float(loss))
        if loss < best:
            best = loss
            best_x = params["x"].copy()
        if prev is not None and it >= 10 and abs(prev - loss) <= tol * max(abs(prev), 1e-12):
            break
        prev = loss
        opt.step(params, {"x": grad})
    loss, _ = objective(params["x"])
    if np.isfinite(loss) and loss < best:
        trace.append(float(loss))
        best_x = params["x"].copy()
    return best_x


def _check_pair(fixed, moving):
    fixed = as_image(fixed)
    moving = as_image(moving)
    if fixed.shape != moving.shape:
        raise DimensionError(f"fixed {fixed.shape} and moving {moving.shape} differ")
    return fixed, moving


def _levels_for(shape, wanted: int) -> int:
    n = 1
    h, w = shape
    while n < wanted and min(h, w) // 2 >= 8:
        h, w = (h + 1) // 2, (w + 1) // 2
        n += 1
    return n


def optimize_affine(fixed, moving, cfg: RegistrationConfig | None = None, trace: list | None = None) -> AffineTransform2D:
    cfg = cfg or RegistrationConfig()
    fixed, moving = _check_pair(fixed, moving)
    trace = [] if trace is None else trace
    n = _levels_for(fixed.shape, cfg.deformable_levels)
    pf = build_pyramid(fixed, n).levels
    pm = build_pyramid(moving, n).levels
    theta = AffineTransform2D.identity().params
    for lvl in range(min(cfg.affine_levels, n)):
        obj = affine_objective(pf[lvl], pm[lvl])
        theta = _descend(obj, theta, cfg.affine_lr, cfg.affine_iters, cfg.stop_rel_tol, f"affine[{lvl}]", trace)
    return AffineTransform2D.from_params(theta)


def optimize_deformable(fixed, moving_after_affine, cfg: RegistrationConfig | None = None,
                        trace: list | None = None, ncc_affine: float = 1.0) -> np.ndarray:
    cfg = cfg or RegistrationConfig()
    fixed, moving = _check_pair(fixed, moving_after_affine)
    trace = [] if trace is None else trace
    n = _levels_for(fixed.shape, cfg.deformable_levels)
    pf = build_pyramid(fixed, n).levels
    pm = build_pyramid(moving, n).levels
    field = None
    for lvl in range(n):
        h, w = pf[lvl].shape
        field = zero_field(h, w) if field is None else resize_field(field, h, w)
        obj = deformable_objective(pf[lvl], pm[lvl], cfg, ncc_affine)
        lr = cfg.deformable_lr / (2.0 ** lvl)
        field = _descend(obj, field, lr, cfg.deformable_iters_per_level, cfg.stop_rel_tol,
                         f"deformable[{lvl}]", trace)
    return field


def register(fixed, moving, cfg: RegistrationConfig | None = None) -> RegistrationResult:
    cfg = cfg or RegistrationConfig()
    fixed, moving = _check_pair(fixed, moving)
    H, W = fixed.shape
    trace = {"affine": [], "deformable": []}

    ncc_before = M.ncc(fixed, moving)
    affine = optimize_affine(fixed, moving, cfg, trace["affine"])
    aff_field = affine_to_field(affine, H, W)
    warped_affine = warp_bilinear(moving, aff_field)
    ncc_affine = M.ncc(fixed, warped_affine)

    deform = optimize_deformable(fixed, warped_affine, cfg, trace["deformable"], ncc_affine)
    final = compose_fields(aff_field, deform)
    warped_final = warp_bilinear(moving, final)
    jm = M.jacobian_map(final)
    quality = M.DeformQualityReport(
        njd_percent=M.njd_percent(jm),
        jacobian_std=M.jacobian_std(jm),
        ncc_before=ncc_before,
        ncc_affine=ncc_affine,
        ncc_final=M.ncc(fixed, warped_final),
    )
    log.debug("registered pair: %s", quality)
    return RegistrationResult(affine, final, warped_affine, warped_final, quality, trace)
