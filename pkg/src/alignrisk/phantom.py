"""Synthetic longitudinal phantoms with known deformations and outcomes.

A phantom is an ellipse-bounded "breast" touching the left (chest-wall) edge,
filled with multi-octave value noise, carrying one soft-edged lesion. The
current exam is the prior tissue with the lesion grown, pulled through a
smooth ground-truth field. Every layer is a continuous function of position,
so the current exam is evaluated at the displaced coordinates rather than
resampled from the prior's pixels and carries no interpolation blur.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage

from . import metrics as M
from .grid import pixel_grid, zero_field
from .records import ExamPair, SurvivalLabel

DENSITIES = ("A", "B", "C", "D")


class PhantomSpecError(ValueError):
    pass


@dataclass
class Lesion:
    center: tuple  # (x, y) pixels
    radius: float
    growth_rate: float = 0.0  # pixels of radius per year
    intensity: float = 0.35


@dataclass
class PhantomSpec:
    height: int = 128
    width: int = 160
    texture_scale: float = 3.0  # finest noise cell size, pixels
    texture_seed: int = 0
    lesion: Lesion | None = None
    true_field: np.ndarray | None = None
    gap_months: float = 12.0
    density: str = "B"
    years_to_cancer: int | None = None
    followup_years: float = 5.0
    patient_id: str = "P0000"
    exam_id: str = "E0000"
    noise_sigma: float = 0.0  # per-exam acquisition noise, independent between the two exams

    def field(self) -> np.ndarray:
        return zero_field(self.height, self.width) if self.true_field is None else self.true_field


def _coords(height, width, x, y):
    if x is None:
        return pixel_grid(height, width)
    return x, y


def breast_mask(height: int, width: int, softness: float = 1.5, x=None, y=None) -> np.ndarray:
    """Soft half-ellipse anchored on the left edge, values in [0, 1].

    Evaluated on the pixel grid, or at sample positions ``x``, ``y``.
    """
    xs, ys = _coords(height, width, x, y)
    r = np.sqrt((xs / (0.82 * width)) ** 2 + ((ys - (height - 1) / 2.0) / (0.44 * height)) ** 2)
    # distance to boundary in approximately pixel units
    d = (1.0 - r) * 0.44 * height
    return 1.0 / (1.0 + np.exp(-d / softness))


def inside_breast(height: int, width: int, x: float, y: float, radius: float = 0.0) -> bool:
    r = np.sqrt((x / (0.82 * width)) ** 2 + ((y - (height - 1) / 2.0) / (0.44 * height)) ** 2)
    return bool(r * 0.44 * height + radius < 0.44 * height)


class NoiseTexture:
    """Multi-octave value noise as a continuous function of position.

    Each octave is a cubic B-spline through a random lattice; the finest
    lattice spacing is ``scale`` pixels. Values are normalized so that the
    texture spans [0, 1] on the ``height`` x ``width`` pixel grid.
    """

    def __init__(self, height: int, width: int, scale: float, rng: np.random.Generator, octaves: int = 3):
        self.octaves = []
        amp = 1.0
        cell = scale * 2 ** (octaves - 1)
        margin = 4
        for _ in range(octaves):
            gh = int(np.ceil(height / cell)) + 2 * margin
            gw = int(np.ceil(width / cell)) + 2 * margin
            coeffs = ndimage.spline_filter(rng.random((gh, gw)), order=3, mode="mirror")
            self.octaves.append((coeffs, cell, amp, margin))
            amp *= 0.6
            cell /= 2
        self.total = sum(o[2] for o in self.octaves)
        self.lo, self.hi = 0.0, 1.0
        raw = self(*pixel_grid(height, width))
        self.lo, self.hi = float(raw.min()), float(raw.max())

    def __call__(self, x, y) -> np.ndarray:
        out = np.zeros(np.shape(x))
        for coeffs, cell, amp, margin in self.octaves:
            pos = np.stack([np.asarray(y) / cell + margin, np.asarray(x) / cell + margin])
            out += amp * ndimage.map_coordinates(coeffs, pos, order=3, mode="mirror", prefilter=False)
        out /= self.total
        if self.hi <= self.lo:
            return np.zeros_like(out)
        return (out - self.lo) / (self.hi - self.lo)


def value_noise(height: int, width: int, scale: float, rng: np.random.Generator, octaves: int = 3) -> np.ndarray:
    """Multi-octave value noise on the pixel grid, normalized to [0, 1]."""
    return NoiseTexture(height, width, scale, rng, octaves)(*pixel_grid(height, width))


def lesion_image(height: int, width: int, lesion: Lesion, radius: float, x=None, y=None) -> np.ndarray:
    xs, ys = _coords(height, width, x, y)
    d = np.sqrt((xs - lesion.center[0]) ** 2 + (ys - lesion.center[1]) ** 2)
    return lesion.intensity / (1.0 + np.exp((d - radius) / 1.0))


def tissue_image(spec: PhantomSpec, x=None, y=None) -> np.ndarray:
    """Textured breast on the pixel grid or at sample positions ``x``, ``y``."""
    rng = np.random.default_rng(spec.texture_seed)
    level = DENSITIES.index(spec.density) if spec.density in DENSITIES else 1
    xs, ys = _coords(spec.height, spec.width, x, y)
    tex = NoiseTexture(spec.height, spec.width, spec.texture_scale, rng)(xs, ys)
    base = 0.15 + 0.05 * level
    return breast_mask(spec.height, spec.width, x=xs, y=ys) * (base + (0.5 + 0.05 * level) * tex)


def generate_phantom_pair(spec: PhantomSpec):
    """Return ``(ExamPair, true_field)`` for ``spec``; deterministic per spec."""
    H, W = spec.height, spec.width
    tfield = spec.field()
    if tfield.shape != (2, H, W):
        raise PhantomSpecError(f"true_field shape {tfield.shape} does not match {(H, W)}")
    if M.njd_percent(M.jacobian_map(tfield)) != 0.0:
        raise PhantomSpecError("true_field folds")
    xs, ys = pixel_grid(H, W)
    moved = np.any(tfield)
    cx, cy = (xs + tfield[0], ys + tfield[1]) if moved else (xs, ys)
    prior = tissue_image(spec)
    current = tissue_image(spec, cx, cy) if moved else prior.copy()
    if spec.lesion is not None:
        les = spec.lesion
        if les.radius <= 0:
            raise PhantomSpecError("lesion radius must be > 0")
        if not inside_breast(H, W, les.center[0], les.center[1], les.radius):
            raise PhantomSpecError(f"lesion at {les.center} r={les.radius} lies outside the breast")
        r1 = les.radius + les.growth_rate * spec.gap_months / 12.0
        prior = prior + lesion_image(H, W, les, les.radius)
        current = current + lesion_image(H, W, les, r1, cx, cy)
    if spec.noise_sigma > 0:
        for k, img in enumerate((prior, current)):
            noise = np.random.default_rng([spec.texture_seed, 11, k]).normal(0.0, spec.noise_sigma, (H, W))
            img += noise * breast_mask(H, W)
    prior = np.clip(prior, 0.0, 1.0)
    current = np.clip(current, 0.0, 1.0)
    label = SurvivalLabel.from_times(spec.followup_years, spec.years_to_cancer)
    pair = ExamPair(current, prior, spec.gap_months, label, spec.patient_id, spec.exam_id, spec.density)
    return pair, tfield


def random_smooth_field(height: int, width: int, rng: np.random.Generator, max_disp: float = 6.0,
                        affine_frac: float = 0.5) -> np.ndarray:
    """Smooth fold-free field: a small affine part plus low-frequency sinusoids.

    The result is rescaled so its largest displacement is ``max_disp`` pixels.
    """
    xs, ys = pixel_grid(height, width)
    xn = 2.0 * xs / (width - 1) - 1.0
    yn = 2.0 * ys / (height - 1) - 1.0
    ang = rng.uniform(-1.0, 1.0)
    scale = rng.uniform(-1.0, 1.0)
    tx, ty = rng.uniform(-1.0, 1.0, size=2)
    aff_u = scale * xn - ang * yn + tx
    aff_v = ang * xn + scale * yn + ty
    aff = np.stack([aff_u, aff_v])
    aff /= max(np.abs(aff).max(), 1e-12)

    sin = np.zeros((2, height, width))
    for k in range(2):
        for _ in range(2):
            fx, fy = rng.uniform(0.5, 1.5, size=2)
            px, py = rng.uniform(0, 2 * np.pi, size=2)
            a = rng.uniform(0.5, 1.0)
            sin[k] += a * np.sin(np.pi * fx * xn + px) * np.sin(np.pi * fy * yn + py)
    sin /= max(np.abs(sin).max(), 1e-12)

    f = affine_frac * aff + (1.0 - affine_frac) * sin
    f *= max_disp / max(np.sqrt(f[0] ** 2 + f[1] ** 2).max(), 1e-12)
    return f


def registration_phantom(seed: int, height: int = 128, width: int = 160, max_disp: float = 6.0):
    """A lesion-free pair for registration benchmarking: ``(fixed, moving, true_field)``.

    ``fixed`` (the current exam) equals ``moving`` pulled through ``true_field``.
    """
    rng = np.random.default_rng([seed, 7])
    tfield = random_smooth_field(height, width, rng, max_disp)
    spec = PhantomSpec(height, width, texture_seed=int(rng.integers(2**31)),
                       density=DENSITIES[int(rng.integers(4))], true_field=tfield)
    pair, tf = generate_phantom_pair(spec)
    return pair.current, pair.prior, tf


@dataclass
class CohortConfig:
    n_exams: int = 400
    height: int = 128
    width: int = 160
    seed: int = 0
    cancer_fraction: float = 0.35
    max_disp: float = 6.0
    texture_scale: float = 3.0
    radius_range: tuple = (5.0, 10.0)
    growth_range: tuple = (1.5, 4.0)  # pixels per year, slow (ttc 5) to fast (ttc 1)
    followup_range: tuple = (2, 8)
    gap_months_range: tuple = (12, 30)
    noise_sigma: float = 0.03
    extra: dict = dc_field(default_factory=dict)


def cohort_specs(cfg: CohortConfig) -> list:
    """Phantom specs for a cohort, one current/prior pair per patient.

    Current-exam lesion radii share one distribution across outcome groups;
    only the growth since the prior exam depends on the outcome, faster
    growth meaning an earlier diagnosis.
    """
    specs = []
    for i in range(cfg.n_exams):
        rng = np.random.default_rng([cfg.seed, i])
        H, W = cfg.height, cfg.width
        is_cancer = rng.random() < cfg.cancer_fraction
        gap = float(rng.integers(cfg.gap_months_range[0], cfg.gap_months_range[1] + 1))
        r1 = rng.uniform(*cfg.radius_range)
        if is_cancer:
            ttc = int(rng.integers(1, 6))
            lo, hi = cfg.growth_range
            rate = hi - (hi - lo) * (ttc - 1) / 4.0
            rate *= rng.uniform(0.85, 1.15)
            followup = float(max(ttc, int(rng.integers(cfg.followup_range[0], cfg.followup_range[1] + 1))))
        else:
            ttc = None
            rate = 0.0
            followup = float(rng.integers(cfg.followup_range[0], cfg.followup_range[1] + 1))
        r0 = max(r1 - rate * gap / 12.0, 1.5)
        rate = (r1 - r0) * 12.0 / gap
        for _ in range(100):
            cx = rng.uniform(0.15 * W, 0.6 * W)
            cy = rng.uniform(0.25 * H, 0.75 * H)
            if inside_breast(H, W, cx, cy, r1 + 4):
                break
        tfield = random_smooth_field(H, W, rng, cfg.max_disp)
        specs.append(PhantomSpec(
            height=H, width=W, texture_scale=cfg.texture_scale,
            texture_seed=int(rng.integers(2**31)),
            lesion=Lesion((cx, cy), r0, rate, float(rng.uniform(0.3, 0.4))),
            true_field=tfield, gap_months=gap,
            density=DENSITIES[int(rng.integers(4))],
            years_to_cancer=ttc, followup_years=followup,
            patient_id=f"P{i:04d}", exam_id=f"E{i:04d}", noise_sigma=cfg.noise_sigma,
        ))
    return specs


def generate_cohort(cfg: CohortConfig):
    """List of ``(ExamPair, true_field)`` for every spec in the cohort."""
    return [generate_phantom_pair(s) for s in cohort_specs(cfg)]
