import numpy as np
import pytest

from alignrisk import metrics as M
from alignrisk.grid import AffineTransform2D, affine_to_field, warp_bilinear, zero_field
from alignrisk.phantom import registration_phantom
from alignrisk.registration import (
    RegistrationConfig,
    RegistrationDivergenceError,
    affine_objective,
    check_gradients,
    deformable_objective,
    loss_image,
    optimize_affine,
    optimize_deformable,
    register,
)


def blobs(H=64, W=80, seed=0):
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:H, 0:W].astype(float)
    img = np.zeros((H, W))
    for _ in range(8):
        cx, cy = rng.uniform(0.2 * W, 0.8 * W), rng.uniform(0.2 * H, 0.8 * H)
        s = rng.uniform(3, 7)
        img += rng.uniform(0.3, 1) * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * s * s))
    return img / img.max()


def test_loss_image_fixtures():
    img = blobs(16, 16)
    cfg = RegistrationConfig(gamma=1.0, lambda_jd=1e-5)
    total, terms = loss_image(img, img, img, zero_field(16, 16), cfg)
    assert total == pytest.approx(0.0, abs=1e-12)
    ys, xs = np.mgrid[0:16, 0:16].astype(float)
    steep = np.stack([2.0 * xs, np.zeros_like(xs)])
    assert loss_image(img, img, img, steep, cfg)[0] == pytest.approx(4.0, abs=1e-12)
    total, terms = loss_image(img, img, 1.0 - img, zero_field(16, 16), cfg)
    assert total == pytest.approx(2.0, abs=1e-12)
    assert terms["ncc_final"] == pytest.approx(-1.0)


def test_gradient_check_on_quadratic():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    obj = lambda x: (0.5 * x @ A @ x + x.sum(), A @ x + 1.0)  # noqa: E731
    assert check_gradients(obj, np.array([0.3, -0.7])) < 1e-8


def test_gradient_check_detects_a_wrong_gradient():
    obj = lambda x: (float(np.sum(x ** 2)), 3.0 * x)  # noqa: E731
    assert check_gradients(obj, np.array([0.5, 0.2])) > 0.1


def kink_distance(field):
    """Smallest distance from any sample position to a grid line, where bilinear sampling has kinks."""
    H, W = field.shape[1:]
    ys, xs = np.mgrid[0:H, 0:W].astype(float)
    pos = np.concatenate([(xs + field[0]).ravel(), (ys + field[1]).ravel()])
    return float(np.min(np.abs(pos - np.round(pos))))


def smooth_point(draw, clearance, tries=500):
    # central differences are only meaningful where the objective is smooth at the step scale
    for i in range(tries):
        x, field = draw(np.random.default_rng(i))
        if kink_distance(field) > clearance:
            return x
    raise AssertionError("no kink-free point found")


def test_deformable_objective_gradient_on_eight_by_eight():
    fixed, moving = blobs(8, 8, 1), blobs(8, 8, 2)
    cfg = RegistrationConfig(gamma=1.0, lambda_jd=0.5)

    def draw(rng):
        f = rng.normal(0, 0.7, (2, 8, 8))
        return f, f

    field = smooth_point(draw, 1e-3)
    assert M.njd_percent(M.jacobian_map(field)) > 0
    obj = deformable_objective(fixed, moving, cfg, ncc_affine=0.9)
    assert check_gradients(obj, field) < 1e-4


def test_affine_objective_gradient_on_sixteen_by_sixteen():
    fixed, moving = blobs(16, 16, 3), blobs(16, 16, 4)

    def draw(rng):
        theta = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]) + rng.normal(0, 0.05, 6)
        return theta, affine_to_field(AffineTransform2D.from_params(theta), 16, 16)

    theta = smooth_point(draw, 3e-3)
    assert check_gradients(affine_objective(fixed, moving), theta) < 1e-4


def test_affine_of_identical_pair_stays_identity():
    img = blobs()
    aff = optimize_affine(img, img)
    assert np.allclose(aff.params, AffineTransform2D.identity().params, atol=1e-3)


def test_affine_recovers_translation():
    H, W = 64, 80
    fixed = blobs(H, W)
    shift = np.zeros((2, H, W))
    shift[0] = 5.0
    moving = warp_bilinear(fixed, -shift)  # moving(p) = fixed(p - 5)
    aff = optimize_affine(fixed, moving, RegistrationConfig(affine_iters=400))
    f = affine_to_field(aff, H, W)
    inner = (slice(10, -10), slice(10, -10))
    assert np.mean(np.abs(f[0][inner] - 5.0)) < 0.5
    assert np.mean(np.abs(f[1][inner])) < 0.5


def test_affine_recovers_rotation():
    H, W = 64, 64
    fixed = blobs(H, W, 5)
    th = np.deg2rad(5.0)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    moving = warp_bilinear(fixed, affine_to_field(AffineTransform2D(rot.T, np.zeros(2)), H, W))
    aff = optimize_affine(fixed, moving, RegistrationConfig(affine_iters=400))
    m = aff.matrix
    angle = np.rad2deg(np.arctan2(m[1, 0] - m[0, 1], m[0, 0] + m[1, 1]))
    assert abs(angle - 5.0) < 1.0


def test_deformable_on_identical_pair_barely_moves():
    img = blobs()
    f = optimize_deformable(img, img)
    assert np.mean(np.hypot(f[0], f[1])) < 0.2
    assert M.njd_percent(M.jacobian_map(f)) == 0.0


def test_register_identical_pair():
    img = blobs()
    q = register(img, img).quality
    assert q.ncc_before == pytest.approx(1.0, abs=1e-6)
    assert q.ncc_affine == pytest.approx(1.0, abs=1e-6)
    assert q.ncc_final == pytest.approx(1.0, abs=1e-6)
    assert q.njd_percent == 0.0


def test_register_phantom_pair_recovers_field():
    fixed, moving, tf = registration_phantom(3)
    r = register(fixed, moving)
    q = r.quality
    assert q.ncc_before < q.ncc_affine < q.ncc_final
    assert q.njd_percent <= 0.1
    assert np.mean(np.hypot(*(r.final_field - tf))) <= 1.5
    assert r.final_field.shape == (2,) + fixed.shape
    for stage in ("affine", "deformable"):
        assert r.loss_trace[stage] and min(r.loss_trace[stage]) <= r.loss_trace[stage][0]


def test_register_is_deterministic():
    fixed, moving, _ = registration_phantom(5, 32, 40)
    a = register(fixed, moving)
    b = register(fixed, moving)
    assert np.array_equal(a.final_field, b.final_field)
    assert a.quality == b.quality


def test_stronger_regularization_gives_smoother_field():
    fixed, moving, _ = registration_phantom(1, 64, 80)
    warped = warp_bilinear(moving, affine_to_field(optimize_affine(fixed, moving), 64, 80))
    energies = [M.smoothness_energy(optimize_deformable(fixed, warped, RegistrationConfig(gamma=g)))
                for g in (0.03, 0.3, 3.0)]
    assert energies[0] > energies[1] > energies[2]


def test_config_validation():
    with pytest.raises(ValueError):
        RegistrationConfig(gamma=-1)
    with pytest.raises(ValueError):
        RegistrationConfig(deformable_levels=0)
    with pytest.raises(ValueError):
        RegistrationConfig.from_dict({"gamma": 1.0, "bogus": 2})
    assert RegistrationConfig.from_dict({"gamma": 2.0}).gamma == 2.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_the_stage():
    fixed = blobs(16, 16)
    bad = fixed.copy()
    with pytest.raises(RegistrationDivergenceError, match="deformable"):
        optimize_deformable(fixed, bad, RegistrationConfig(deformable_levels=1, gamma=float("inf")))
