"""Raw mammogram clean-up: keep the largest foreground region and fit it into a fixed canvas."""

from __future__ import annotations

import numpy as np
from PIL import Image
from scipy import ndimage

from .grid import as_image

TARGET_SIZE = (1664, 2048)  # width, height


class PreprocessingError(ValueError):
    pass


def largest_component_mask(image: np.ndarray, threshold: float = 0.1) -> np.ndarray:
    """Mask of the largest 8-connected region above ``threshold`` of the intensity range."""
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        raise PreprocessingError("image has no foreground (constant intensity)")
    fg = image > lo + threshold * (hi - lo)
    lab, n = ndimage.label(fg, structure=np.ones((3, 3)))
    if n == 0:
        raise PreprocessingError("no foreground above threshold")
    sizes = np.bincount(lab.ravel())[1:]
    return lab == (int(np.argmax(sizes)) + 1)


def _resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    pil = Image.fromarray(img.astype(np.float32), mode="F")
    return np.asarray(pil.resize((width, height), Image.BILINEAR), dtype=np.float64)


def preprocess_image(raw, target=TARGET_SIZE, threshold: float = 0.1) -> np.ndarray:
    """Background-zeroed, aspect-preserving fit of the largest region into a ``target`` (w, h) canvas.

    The region's bounding box is scaled to touch the canvas on one axis and
    centred on the other; output intensities span [0, 1].
    """
    img = as_image(raw)
    if img.size == 0:
        raise PreprocessingError("empty image")
    mask = largest_component_mask(img, threshold)
    clean = np.where(mask, img, 0.0)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    crop = clean[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    tw, th = target
    scale = min(th / crop.shape[0], tw / crop.shape[1])
    nh = max(1, min(th, int(round(crop.shape[0] * scale))))
    nw = max(1, min(tw, int(round(crop.shape[1] * scale))))
    resized = _resize(crop, nh, nw)
    canvas = np.zeros((th, tw))
    y0, x0 = (th - nh) // 2, (tw - nw) // 2
    canvas[y0:y0 + nh, x0:x0 + nw] = resized
    lo, hi = canvas.min(), canvas.max()
    if hi <= lo:
        if hi != 0:
            return np.ones_like(canvas)  # flat region that fills the canvas
        raise PreprocessingError("foreground vanished after resizing")
    return (canvas - lo) / (hi - lo)
