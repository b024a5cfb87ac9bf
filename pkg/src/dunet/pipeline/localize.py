"""Optic-disc localization by an intensity-weighted circular Hough transform."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.signal import fftconvolve
from skimage.filters import threshold_otsu


class LocalizationError(ValueError):
    pass


@dataclass(frozen=True)
class RoiBox:
    cx: float
    cy: float
    R: float
    side: int

    def __post_init__(self):
        if self.side <= 0 or self.R <= 0:
            raise LocalizationError(f"degenerate ROI box: R={self.R} side={self.side}")

    @classmethod
    def around(cls, cx: float, cy: float, R: float, shape: tuple[int, int], factor: float = 3.0):
        """Box of side ``factor * R`` (capped at the larger image extent)."""
        side = int(round(factor * R))
        side = max(1, min(side, max(shape[:2])))
        return cls(float(cx), float(cy), float(R), side)

    def corner(self) -> tuple[int, int]:
        """(row, col) of the top-left crop pixel."""
        return (int(round(self.cy - self.side / 2 + 0.5)), int(round(self.cx - self.side / 2 + 0.5)))


def to_gray(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 4:
        img = img[0]
        img = img.mean(axis=0) if img.shape[0] > 1 else img[0]
    elif img.ndim == 3:
        img = img.mean(axis=-1) if img.shape[-1] in (3, 4) else img.mean(axis=0)
    return img


def suppress_vessels(gray: np.ndarray, size: int = 7) -> np.ndarray:
    """Median filter that removes thin dark structures before edge detection."""
    return ndimage.median_filter(gray, size=size, mode="nearest")


def localize_od(image, r_min: int, r_max: int, smooth_sigma: float = 2.0,
                vessel_suppression: bool = False) -> RoiBox:
    """Return the centre and radius of the brightest roughly circular structure.

    Edges come from a Sobel magnitude thresholded with Otsu's method. Each
    edge pixel votes, for every radius, at the point ``r`` pixels along its
    gradient (bright discs have gradients pointing inwards). Votes are
    weighted by edge strength and normalized by circumference. Each
    (centre, radius) cell is then scaled by how much brighter that circle is
    than its surroundings, so bright structures win. Both factors ignore
    constant intensity offsets.
    """
    gray = to_gray(image)
    h, w = gray.shape
    if not (0 < r_min < r_max <= min(h, w) / 2):
        raise ValueError(f"need 0 < r_min < r_max <= min(H,W)/2, got {r_min}, {r_max} for {gray.shape}")
    if vessel_suppression:
        gray = suppress_vessels(gray)
    sm = ndimage.gaussian_filter(gray, smooth_sigma, mode="nearest")
    gx = ndimage.sobel(sm, axis=1, mode="nearest")
    gy = ndimage.sobel(sm, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 1e-9 * max(1.0, np.abs(gray).max()):
        raise LocalizationError("no circular structure: image has no edges")
    edges = mag > threshold_otsu(mag)
    ys, xs = np.nonzero(edges)
    if ys.size == 0:
        raise LocalizationError("no circular structure: empty edge map")
    wts = mag[ys, xs] / peak
    ux, uy = gx[ys, xs] / mag[ys, xs], gy[ys, xs] / mag[ys, xs]

    radii = np.arange(int(r_min), int(r_max) + 1)
    acc = np.zeros((radii.size, h, w))
    for k, r in enumerate(radii):
        cx = np.rint(xs + r * ux).astype(np.intp)
        cy = np.rint(ys + r * uy).astype(np.intp)
        ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        np.add.at(acc[k], (cy[ok], cx[ok]), wts[ok])
        acc[k] /= 2 * math.pi * r
    acc = ndimage.gaussian_filter(acc, (1.0, 1.5, 1.5), mode="constant")
    acc *= disc_contrast(gray, radii)
    k, cy, cx = np.unravel_index(int(np.argmax(acc)), acc.shape)
    return RoiBox.around(float(cx), float(cy), float(radii[k]), (h, w))


def disc_contrast(gray: np.ndarray, radii, ring: float = 1.5) -> np.ndarray:
    """Mean intensity inside a circle of each radius minus the mean over the
    surrounding annulus out to ``ring * r``, clipped at zero and scaled to a
    maximum of one. Differences of means are blind to constant offsets."""
    out = np.empty((len(radii),) + gray.shape)
    for k, r in enumerate(radii):
        ro = int(math.ceil(ring * r))
        yy, xx = np.mgrid[-ro:ro + 1, -ro:ro + 1]
        d2 = xx ** 2 + yy ** 2
        inner = (d2 <= r * r).astype(np.float64)
        outer = ((d2 > r * r) & (d2 <= (ring * r) ** 2)).astype(np.float64)
        kernel = inner / inner.sum() - outer / outer.sum()
        out[k] = fftconvolve(gray - gray.mean(), kernel, mode="same")
    np.maximum(out, 0, out=out)
    hi = out.max()
    return out / hi if hi > 0 else np.ones_like(out)


def crop_padded(image: np.ndarray, top: int, left: int, side: int) -> np.ndarray:
    """Square crop that zero-fills whatever falls outside the image."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    out = np.zeros((side, side) + img.shape[2:], dtype=img.dtype)
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + side, h), min(left + side, w)
    if y0 >= y1 or x0 >= x1:
        raise LocalizationError("ROI box does not intersect the image")
    out[y0 - top:y1 - top, x0 - left:x1 - left] = img[y0:y1, x0:x1]
    return out


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    """Half-pixel-centred bilinear resize of (H, W) or (H, W, C) arrays."""
    out_w = out_h if out_w is None else out_w
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    if img.ndim == 3:
        fy, fx = fy[..., None], fx[..., None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def extract_roi(image, box: RoiBox, out_size: int) -> np.ndarray:
    """Crop a ``box.side`` square centred on the box (zero-padded) and resize it."""
    if out_size < 1:
        raise LocalizationError(f"out_size must be >= 1, got {out_size}")
    top, left = box.corner()
    crop = crop_padded(np.asarray(image), top, left, box.side)
    return resize_bilinear(crop, out_size)
