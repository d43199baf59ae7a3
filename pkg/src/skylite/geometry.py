"""Polyline geometry and reproducible scalar math for the simulation core.

Everything the world stepper touches numerically lives here and is restricted
to IEEE-754 double add/sub/mul/div/sqrt plus fixed-coefficient rational
approximations with a hardcoded evaluation order. Platform libm
transcendentals (math.sin, math.atan2, ...) are banned from this module so
that two machines stepping the same scenario produce bit-identical state.
"""

from __future__ import annotations

import math
from bisect import bisect_right

PI = 3.141592653589793
HALF_PI = 1.5707963267948966
QUARTER_PI = 0.7853981633974483

# Rational minimax approximation of atan on [0, 0.66] (classic double-precision
# coefficients, ~1 ulp). Evaluated strictly by Horner's rule, innermost first.
_ATAN_P = (
    -8.750608600031904122785e-01,
    -1.615753718733365076637e01,
    -7.500855792314704667340e01,
    -1.228866684490136173410e02,
    -6.485021904942025371773e01,
)
_ATAN_Q = (
    2.485846490142306297962e01,
    1.650270098316988542046e02,
    4.328810604912902668951e02,
    4.853903996359136964868e02,
    1.945506571482613964425e02,
)
_TAN_3PI_8 = 2.41421356237309504880


def _atan_poly(x: float) -> float:
    # |x| <= 0.66 here; y = x + x * z * P(z)/Q(z), z = x*x
    z = x * x
    p = ((((_ATAN_P[0] * z + _ATAN_P[1]) * z + _ATAN_P[2]) * z + _ATAN_P[3]) * z
         + _ATAN_P[4])
    q = (((((z + _ATAN_Q[0]) * z + _ATAN_Q[1]) * z + _ATAN_Q[2]) * z + _ATAN_Q[3]) * z
         + _ATAN_Q[4])
    return x + x * (z * p / q)


def det_atan(x: float) -> float:
    """arctangent via fixed rational approximation; bit-stable across machines."""
    if x < 0.0:
        return -det_atan(-x)
    if x > _TAN_3PI_8:
        return HALF_PI - _atan_poly(1.0 / x)
    if x > 0.66:
        return QUARTER_PI + _atan_poly((x - 1.0) / (x + 1.0))
    return _atan_poly(x)


def det_atan2(y: float, x: float) -> float:
    """Quadrant-correct arctangent. Signed zeros are not distinguished."""
    if x > 0.0:
        return det_atan(y / x)
    if x < 0.0:
        if y >= 0.0:
            return det_atan(y / x) + PI
        return det_atan(y / x) - PI
    # x == 0
    if y > 0.0:
        return HALF_PI
    if y < 0.0:
        return -HALF_PI
    return 0.0


def det_hypot(dx: float, dy: float) -> float:
    # plain sqrt form: fine for the coordinate magnitudes this sim uses
    return math.sqrt(dx * dx + dy * dy)


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi] using only arithmetic and comparisons."""
    while a > PI:
        a -= 2.0 * PI
    while a <= -PI:
        a += 2.0 * PI
    return a


class Polyline:
    """Arc-length parameterized polyline with left-positive lateral offsets."""

    __slots__ = ("points", "cum", "seg_len", "seg_dir")

    def __init__(self, points: list[tuple[float, float]]):
        if len(points) < 2:
            raise ValueError("polyline needs at least 2 points")
        self.points = [(float(x), float(y)) for x, y in points]
        self.cum = [0.0]
        self.seg_len: list[float] = []
        self.seg_dir: list[tuple[float, float]] = []
        for (x0, y0), (x1, y1) in zip(self.points, self.points[1:]):
            dx, dy = x1 - x0, y1 - y0
            L = det_hypot(dx, dy)
            if L <= 0.0:
                raise ValueError("consecutive polyline points must be distinct")
            self.seg_len.append(L)
            self.seg_dir.append((dx / L, dy / L))
            self.cum.append(self.cum[-1] + L)

    @property
    def length(self) -> float:
        return self.cum[-1]

    def _segment(self, s: float) -> tuple[int, float]:
        """Segment index and residual arc length for s clamped to [0, length]."""
        if s <= 0.0:
            return 0, 0.0
        if s >= self.cum[-1]:
            return len(self.seg_len) - 1, self.seg_len[-1]
        i = bisect_right(self.cum, s) - 1
        if i >= len(self.seg_len):
            i = len(self.seg_len) - 1
        return i, s - self.cum[i]

    def direction_at(self, s: float) -> tuple[float, float]:
        i, _ = self._segment(s)
        return self.seg_dir[i]

    def point_at(self, s: float, d: float = 0.0) -> tuple[float, float]:
        """Point at arc length s with lateral offset d (positive = left)."""
        i, r = self._segment(s)
        x0, y0 = self.points[i]
        ux, uy = self.seg_dir[i]
        # left normal of (ux, uy) is (-uy, ux)
        return x0 + ux * r - uy * d, y0 + uy * r + ux * d

    def heading_at(self, s: float) -> float:
        ux, uy = self.direction_at(s)
        return det_atan2(uy, ux)

    def project(self, x: float, y: float) -> tuple[float, float, float]:
        """Closest point on the polyline.

        Returns (s, d, dist) where d is the signed lateral offset (left
        positive) and dist = |d| is the projection residual.
        """
        best_s = 0.0
        best_d = 0.0
        best_dist = float("inf")
        for i, (L, (ux, uy)) in enumerate(zip(self.seg_len, self.seg_dir)):
            x0, y0 = self.points[i]
            t = (x - x0) * ux + (y - y0) * uy
            if t < 0.0:
                t = 0.0
            elif t > L:
                t = L
            px, py = x0 + ux * t, y0 + uy * t
            dist = det_hypot(x - px, y - py)
            if dist < best_dist:
                # signed offset: positive when (x, y) lies left of travel
                best_dist = dist
                best_d = -(x - px) * uy + (y - py) * ux
                best_s = self.cum[i] + t
        return best_s, best_d, best_dist
