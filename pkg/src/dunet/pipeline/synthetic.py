"""Synthetic fundus and ultrasound images with exact ground truth.

Fundus samples: a reddish textured background, a bright optic disc, a darker
cup strictly inside the disc, and dark vessel curves drawn over both.
Ultrasound samples: speckle background and a bright elliptical skull rim
with a few angular gaps.

Sample ``i`` of a dataset is drawn from its own child seed, so it does not
depend on how many samples were requested.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..geometry import Ellipse, ellipse_inside, rasterize_ellipse_mask

TASKS = ("fundus", "ultrasound")


@dataclass
class Sample:
    id: str
    image: np.ndarray               # (H, W, 3) fundus or (H, W) ultrasound, float32 in [0, 1]
    mask: np.ndarray                # bool (H, W): disc or head
    ellipse: Ellipse                # the shape behind ``mask``
    cup: np.ndarray | None = None   # bool (H, W), fundus only
    cup_ellipse: Ellipse | None = None
    pixel_size_mm: float | None = None


def _soft_inside(e: Ellipse, shape, width: float = 1.0) -> np.ndarray:
    """Smooth indicator of ``e``, 0.5 on the boundary, ~``width`` px ramp."""
    d = np.sqrt(ellipse_inside(e, shape))
    return 1.0 / (1.0 + np.exp(np.clip((d - 1.0) * min(e.a, e.b) / width, -50, 50)))


def _smooth_noise(rng, shape, sigma, amp):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return amp * n / (n.std() + 1e-12)


def _vessels(rng, shape, origin, count, reach):
    """Darkening map of ``count`` quadratic Bezier curves leaving ``origin``."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dark = np.zeros(shape)
    t = np.linspace(0, 1, 64)[:, None]
    for _ in range(count):
        ang = rng.uniform(0, 2 * math.pi)
        bend = rng.uniform(-0.8, 0.8)
        p0 = np.asarray(origin) + rng.normal(0, 2, 2)
        p2 = p0 + reach * rng.uniform(0.8, 1.4) * np.array([math.cos(ang), math.sin(ang)])
        p1 = (p0 + p2) / 2 + reach * bend * np.array([-math.sin(ang), math.cos(ang)])
        pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
        width = rng.uniform(0.8, 1.8)
        dist = np.full(shape, np.inf)
        for x, y in pts:
            dist = np.minimum(dist, (xx - x) ** 2 + (yy - y) ** 2)
        dark = np.maximum(dark, np.exp(-dist / (2 * width ** 2)))
    return dark


def fundus_sample(rng: np.random.Generator, size: int, idx: int = 0) -> Sample:
    shape = (size, size)
    r = rng.uniform(0.12, 0.16) * size
    cx, cy = rng.uniform(0.35, 0.65, 2) * size
    disc = Ellipse(cx, cy, r, r * rng.uniform(0.85, 1.0), rng.uniform(0, math.pi)).canonical()
    k = rng.uniform(0.4, 0.6)
    slack = (1 - k) * disc.b * 0.4
    off = rng.uniform(-1, 1, 2) * slack
    cup = Ellipse(cx + off[0], cy + off[1], disc.a * k, disc.b * k * rng.uniform(0.85, 1.0),
                  disc.theta + rng.uniform(-0.3, 0.3)).canonical()

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    rr = np.hypot(xx - size / 2, yy - size / 2) / size
    vignette = 1.0 - 0.6 * rr ** 2
    base = np.array([0.55, 0.25, 0.12]) * rng.uniform(0.85, 1.15)
    texture = _smooth_noise(rng, shape, size / 24, 0.05)
    img = (vignette[..., None] * base) * (1 + texture[..., None])

    img += _soft_inside(disc, shape)[..., None] * np.array([0.35, 0.40, 0.30])
    img -= _soft_inside(cup, shape)[..., None] * np.array([0.15, 0.18, 0.12])

    dark = _vessels(rng, shape, (cx, cy), int(rng.integers(3, 6)), 0.5 * size)
    img *= (1 - 0.5 * dark)[..., None]
    img += rng.normal(0, 0.02, img.shape)
    img = np.clip(img, 0, 1).astype(np.float32)

    disc_mask = rasterize_ellipse_mask(disc, shape)
    cup_mask = rasterize_ellipse_mask(cup, shape) & disc_mask
    return Sample(f"fundus_{idx:04d}", img, disc_mask, disc, cup_mask, cup)


def ultrasound_sample(rng: np.random.Generator, size: int, idx: int = 0) -> Sample:
    shape = (size, size)
    a = rng.uniform(0.25, 0.38) * size
    head = Ellipse(*(size / 2 + rng.uniform(-0.06, 0.06, 2) * size),
                   a, a * rng.uniform(0.7, 0.9), rng.uniform(0, math.pi)).canonical()

    speckle = rng.rayleigh(1.0, shape)
    speckle = ndimage.gaussian_filter(speckle, 0.7) / 1.25
    img = 0.12 * speckle

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = (xx - head.cx) * math.cos(head.theta) + (yy - head.cy) * math.sin(head.theta)
    v = -(xx - head.cx) * math.sin(head.theta) + (yy - head.cy) * math.cos(head.theta)
    phi = np.arctan2(v / head.b, u / head.a)
    d = np.sqrt(ellipse_inside(head, shape))
    thick = rng.uniform(1.5, 2.5) / head.b
    rim = np.exp(-0.5 * ((d - 1.0) / thick) ** 2)
    for _ in range(int(rng.integers(2, 4))):
        centre, half = rng.uniform(-math.pi, math.pi), math.radians(rng.uniform(10, 20))
        gap = np.abs(np.angle(np.exp(1j * (phi - centre)))) < half
        rim[gap] *= 0.15
    img += 0.7 * rim * speckle.clip(0.3, 2.0)
    img += 0.08 * (d < 1.0) * speckle        # brain tissue slightly brighter
    img = np.clip(img, 0, 1).astype(np.float32)
    px = float(rng.uniform(0.1, 0.25))
    return Sample(f"us_{idx:04d}", img, rasterize_ellipse_mask(head, shape), head,
                  pixel_size_mm=round(px, 6))


def generate_synthetic_dataset(n: int, seed: int, task: str = "fundus", size: int = 128) -> list[Sample]:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    make = fundus_sample if task == "fundus" else ultrasound_sample
    children = np.random.SeedSequence(seed).spawn(n)
    return [make(np.random.default_rng(c), size, i) for i, c in enumerate(children)]
