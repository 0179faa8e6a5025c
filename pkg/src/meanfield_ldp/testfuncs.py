"""Smooth compactly supported test functions for pairings and residuals.

Every kind is a scalar profile g(t, x) times a canonical direction e_k
(vector use) or used as-is (scalar use for continuity-equation residuals).
All kinds carry a smooth time window built from the standard exp(-1/z)
bump, which equals 1 exactly on its plateau, so pairings over [0, T] are
unaffected by a window whose plateau covers [0, T].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np


def _psi(z: np.ndarray) -> np.ndarray:
    out = np.zeros_like(z)
    pos = z > 0
    with np.errstate(over="ignore", divide="ignore"):
        out[pos] = np.exp(-1.0 / z[pos])
    return out


def _smoothstep(z: np.ndarray) -> np.ndarray:
    """0 for z<=0, 1 for z>=1, smooth monotone in between."""
    z = np.asarray(z, dtype=float)
    a = _psi(z)
    b = _psi(1.0 - z)
    with np.errstate(invalid="ignore"):
        s = np.where(a + b > 0, a / np.where(a + b > 0, a + b, 1.0), 0.0)
    return np.where(z >= 1.0, 1.0, np.where(z <= 0.0, 0.0, s))


def _smoothstep_deriv(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    inside = (z > 0.0) & (z < 1.0)
    out = np.zeros_like(z)
    zi = z[inside]
    a = _psi(zi)
    b = _psi(1.0 - zi)
    da = a / zi**2
    db = b / (1.0 - zi) ** 2
    out[inside] = (da * b + a * db) / (a + b) ** 2
    return out


@dataclass(frozen=True)
class SmoothWindow:
    """C^inf window: 0 outside (t_lo, t_hi), exactly 1 on [t_lo+rise, t_hi-fall]."""

    t_lo: float
    t_hi: float
    rise: float
    fall: float

    def __post_init__(self):
        if self.rise <= 0 or self.fall <= 0:
            raise ValueError("rise and fall must be positive")
        if self.t_lo + self.rise > self.t_hi - self.fall:
            raise ValueError("window has no plateau")

    def value(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return _smoothstep((t - self.t_lo) / self.rise) * _smoothstep((self.t_hi - t) / self.fall)

    def deriv(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        up = _smoothstep((t - self.t_lo) / self.rise)
        dn = _smoothstep((self.t_hi - t) / self.fall)
        dup = _smoothstep_deriv((t - self.t_lo) / self.rise) / self.rise
        ddn = -_smoothstep_deriv((self.t_hi - t) / self.fall) / self.fall
        return dup * dn + up * ddn


def plateau_window(a: float, b: float, horizon: float) -> SmoothWindow:
    """Window vanishing outside (a, b) and identically 1 on [0, horizon]."""
    return SmoothWindow(t_lo=a, t_hi=b, rise=-a, fall=b - horizon)


def interior_window(horizon: float, margin: float = 0.02, ramp: float = 0.1) -> SmoothWindow:
    """Window compactly supported strictly inside (0, horizon)."""
    return SmoothWindow(
        t_lo=margin * horizon,
        t_hi=(1.0 - margin) * horizon,
        rise=ramp * horizon,
        fall=ramp * horizon,
    )


@dataclass(frozen=True)
class SingleMode:
    """Windowed real or imaginary part of the basis mode e^k_{n, xi}."""

    n: int
    xi: np.ndarray
    direction: int
    a: float
    b: float
    window: SmoothWindow
    part: str = "re"  # "re" -> cosine, "im" -> sine
    amplitude: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "xi", np.atleast_1d(np.asarray(self.xi, dtype=float)))
        if self.part not in ("re", "im"):
            raise ValueError("part must be 're' or 'im'")

    @property
    def d(self) -> int:
        return self.xi.shape[0]

    def _phase(self, t, x):
        return 2.0 * np.pi * (self.n * np.asarray(t) / (self.b - self.a) + x @ self.xi)

    def profile(self, t, x) -> np.ndarray:
        th = self._phase(t, x)
        osc = np.cos(th) if self.part == "re" else np.sin(th)
        return self.amplitude * self.window.value(t) * osc / (self.b - self.a)

    def grad_x(self, t, x) -> np.ndarray:
        th = self._phase(t, x)
        dosc = -np.sin(th) if self.part == "re" else np.cos(th)
        scale = self.amplitude * self.window.value(t) * 2.0 * np.pi / (self.b - self.a)
        return (scale * dosc)[..., None] * self.xi

    def dt_profile(self, t, x) -> np.ndarray:
        th = self._phase(t, x)
        osc = np.cos(th) if self.part == "re" else np.sin(th)
        dosc = -np.sin(th) if self.part == "re" else np.cos(th)
        w = self.window.value(t)
        dw = self.window.deriv(t)
        rate = 2.0 * np.pi * self.n / (self.b - self.a)
        return self.amplitude * (dw * osc + w * dosc * rate) / (self.b - self.a)


@dataclass(frozen=True)
class GaussianBump:
    """Windowed space-time Gaussian bump, direction k."""

    t_center: float
    t_width: float
    x_center: np.ndarray
    x_width: float
    window: SmoothWindow
    direction: int = 0
    amplitude: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "x_center", np.atleast_1d(np.asarray(self.x_center, dtype=float)))
        if self.t_width <= 0 or self.x_width <= 0:
            raise ValueError("widths must be positive")

    @property
    def d(self) -> int:
        return self.x_center.shape[0]

    def _gt(self, t):
        t = np.asarray(t, dtype=float)
        return np.exp(-((t - self.t_center) ** 2) / (2.0 * self.t_width**2))

    def _gx(self, x):
        r2 = ((x - self.x_center) ** 2).sum(axis=-1)
        return np.exp(-r2 / (2.0 * self.x_width**2))

    def profile(self, t, x) -> np.ndarray:
        return self.amplitude * self.window.value(t) * self._gt(t) * self._gx(x)

    def grad_x(self, t, x) -> np.ndarray:
        g = self.profile(t, x)
        return g[..., None] * (-(x - self.x_center) / self.x_width**2)

    def dt_profile(self, t, x) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        w = self.window.value(t)
        dw = self.window.deriv(t)
        gt = self._gt(t)
        dgt = gt * (-(t - self.t_center) / self.t_width**2)
        return self.amplitude * (dw * gt + w * dgt) * self._gx(x)


@dataclass(frozen=True)
class PolynomialInX:
    """Windowed polynomial in one coordinate, p(x_axis) = sum_k c_k x^k."""

    coeffs: np.ndarray
    window: SmoothWindow
    axis: int = 0
    direction: int = 0
    amplitude: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "coeffs", np.atleast_1d(np.asarray(self.coeffs, dtype=float)))

    def _p(self, z):
        out = np.zeros_like(z)
        for c in self.coeffs[::-1]:
            out = out * z + c
        return out

    def _dp(self, z):
        out = np.zeros_like(z)
        c = self.coeffs
        for k in range(len(c) - 1, 0, -1):
            out = out * z + k * c[k]
        return out

    def profile(self, t, x) -> np.ndarray:
        return self.amplitude * self.window.value(t) * self._p(x[..., self.axis])

    def grad_x(self, t, x) -> np.ndarray:
        out = np.zeros_like(x)
        out[..., self.axis] = self.amplitude * self.window.value(t) * self._dp(x[..., self.axis])
        return out

    def dt_profile(self, t, x) -> np.ndarray:
        return self.amplitude * self.window.deriv(t) * self._p(x[..., self.axis])


TestFunction = Union[SingleMode, GaussianBump, PolynomialInX]


def residual_battery(horizon: float, d: int = 1, spread: float = 1.5) -> list[GaussianBump]:
    """Fixed 12-bump stencil used by the continuity-equation residual checks.

    Centers on a 3 (time) x 4 (space, leading coordinate) grid, widths tied
    to the horizon so higher time-derivatives stay quadrature-friendly.
    """
    win = interior_window(horizon, margin=0.02, ramp=0.1)
    bumps = []
    for tc in (0.3, 0.5, 0.7):
        for xc in (-1.0, -0.25, 0.5, 1.25):
            center = np.zeros(d)
            center[0] = xc * spread / 1.5
            bumps.append(
                GaussianBump(
                    t_center=tc * horizon,
                    t_width=0.18 * horizon,
                    x_center=center,
                    x_width=0.6 * spread / 1.5,
                    window=win,
                )
            )
    return bumps
