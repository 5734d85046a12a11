import numpy as np
import pytest

from alignrisk.preprocess import PreprocessingError, largest_component_mask, preprocess_image


def disc(H, W, cx, cy, r):
    ys, xs = np.mgrid[0:H, 0:W]
    return ((xs - cx) ** 2 + (ys - cy) ** 2 <= r * r).astype(float)


def bbox(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1


def test_text_artifact_is_removed():
    img = 0.8 * disc(80, 60, 25, 40, 18)
    img[5:9, 45:57] = 1.0  # burnt-in label, disconnected from the breast
    mask = largest_component_mask(img)
    assert not mask[5:9, 45:57].any()
    out = preprocess_image(img, target=(60, 80))
    assert out.max() == 1.0 and out.min() == 0.0
    # a lone disc fills the 60-wide canvas; a surviving label would widen the bbox vertically
    h, w = bbox(out > 0.05)
    assert w == 60 and abs(h - 60) <= 1


def test_clean_full_frame_image_is_preserved():
    rng = np.random.default_rng(0)
    body = 0.5 + 0.5 * rng.random((40, 30))
    img = np.pad(body, 1)
    out = preprocess_image(img, target=(30, 40))
    assert out.shape == (40, 30)
    want = (body - body.min()) / (body.max() - body.min())
    assert np.allclose(out, want, atol=1e-6)


def test_circle_stays_a_circle():
    img = disc(120, 90, 40, 70, 30)
    out = preprocess_image(img, target=(166, 204))
    h, w = bbox(out > 0.5)
    assert abs(w / h - 1.0) <= 0.02
    assert out.shape == (204, 166)


def test_default_canvas_size():
    out = preprocess_image(disc(64, 52, 20, 30, 15))
    assert out.shape == (2048, 1664)


def test_empty_foreground_errors():
    with pytest.raises(PreprocessingError):
        preprocess_image(np.zeros((10, 10)))
