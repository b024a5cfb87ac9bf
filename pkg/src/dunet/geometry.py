"""Ellipse type and mask rasterization.

Coordinates follow image conventions: ``x`` is the column index, ``y`` the
row index, pixel centres sit on integer coordinates, and ``theta`` is the
angle of the major axis measured from +x towards +y.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    theta: float = 0.0

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"ellipse semi-axes must be positive, got a={self.a} b={self.b}")

    def canonical(self) -> "Ellipse":
        """Same ellipse with a >= b and theta in [0, pi)."""
        a, b, theta = self.a, self.b, self.theta
        if a < b:
            a, b, theta = b, a, theta + math.pi / 2
        theta = math.fmod(theta, math.pi)
        if theta < 0:
            theta += math.pi
        if theta >= math.pi:  # fmod rounding at the upper edge
            theta = 0.0
        return Ellipse(self.cx, self.cy, a, b, theta)

    def scaled(self, k: float) -> "Ellipse":
        return Ellipse(self.cx * k, self.cy * k, self.a * k, self.b * k, self.theta)

    def area(self) -> float:
        return math.pi * self.a * self.b


def ellipse_inside(e: Ellipse, shape: tuple[int, int]) -> np.ndarray:
    """Value of the canonical ellipse inequality at every pixel centre."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - e.cx, yy - e.cy
    c, s = math.cos(e.theta), math.sin(e.theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / e.a) ** 2 + (v / e.b) ** 2


def rasterize_ellipse_mask(e: Ellipse, shape: tuple[int, int]) -> np.ndarray:
    """Boolean mask of pixels whose centre lies inside or on ``e``."""
    return ellipse_inside(e, shape) <= 1.0
