"""Deterministic hydrodynamic limit and controlled continuity equations.

All measure-valued equations here are first-order transport problems, so
they are solved by characteristics: K particles carry the measure, and
there is nothing to discretize in space.  The mean-field drift couples the
characteristics through their empirical mean, which is re-evaluated at
every Runge-Kutta stage from the stage states.

The limit current of a flow is accumulated with the same midpoint
increment rule used for stochastic ensembles, so a noise-free simulation
and a limit solve on matched grids produce the same discrete coefficients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .currents import DEFAULT_MEMORY_CAP, CurrentCoefficients, ModeGrid, increment_mode_sums
from .models import CoefficientModel, EmpiricalMeasure, InitialEnsemble
from .simulate import DIVERGENCE_GUARD, SimulationDivergedError
from .testfuncs import TestFunction

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LimitFlow:
    """Deterministic characteristics xi_j(t) with node velocities."""

    trajectories: np.ndarray  # (K, M+1, d)
    velocities: np.ndarray  # (K, M+1, d)
    times: np.ndarray  # (M+1,)

    @property
    def n(self) -> int:
        return self.trajectories.shape[0]

    @property
    def steps(self) -> int:
        return self.trajectories.shape[1] - 1

    @property
    def d(self) -> int:
        return self.trajectories.shape[2]

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def marginal(self, i: int) -> EmpiricalMeasure:
        if not 0 <= i <= self.steps:
            raise IndexError(f"step index {i} out of range")
        return EmpiricalMeasure(self.trajectories[:, i, :])

    def terminal_mean(self) -> np.ndarray:
        return self.trajectories[:, -1, :].mean(axis=0)

    @classmethod
    def static(cls, points: np.ndarray, horizon: float, steps: int) -> "LimitFlow":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        k, d = pts.shape
        traj = np.repeat(pts[:, None, :], steps + 1, axis=1)
        vel = np.zeros_like(traj)
        times = np.linspace(0.0, horizon, steps + 1)
        return cls(traj, vel, times)


@dataclass(frozen=True)
class AffineField:
    """Velocity field h(t, x) = alpha(t) + beta(t) x, piecewise constant on bins."""

    alpha: np.ndarray  # (bins, d)
    beta: np.ndarray  # (bins, d, d)
    horizon: float

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        b = np.asarray(self.beta, dtype=float)
        if a.ndim != 2 or b.ndim != 3 or b.shape[:2] != (a.shape[0], a.shape[1]):
            raise ValueError("alpha must be (bins, d) and beta (bins, d, d)")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)

    @property
    def bins(self) -> int:
        return self.alpha.shape[0]

    def bin_of(self, t) -> np.ndarray:
        idx = np.floor(np.asarray(t, dtype=float) / self.horizon * self.bins).astype(int)
        return np.clip(idx, 0, self.bins - 1)

    def at(self, t, x: np.ndarray) -> np.ndarray:
        """Evaluate the field; t broadcasts against the leading axes of x."""
        k = self.bin_of(t)
        if np.ndim(k) == 0:
            return self.alpha[k] + x @ self.beta[k].T
        a = self.alpha[k]  # t-shaped + (d,)
        b = self.beta[k]  # t-shaped + (d, d)
        return a + np.einsum("...ij,...j->...i", b, x)


class GriddedField:
    """Velocity field on a (time x space) lattice, multilinear interpolation.

    Queries outside the lattice box are clipped to its boundary, which
    realizes constant extrapolation; the first clipped query logs a warning.
    """

    def __init__(self, times: np.ndarray, axes: Sequence[np.ndarray], values: np.ndarray):
        self.times = np.asarray(times, dtype=float)
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        self.values = np.asarray(values, dtype=float)
        d = len(self.axes)
        expected = (self.times.size, *[a.size for a in self.axes], d)
        if self.values.shape != expected:
            raise ValueError(f"values must have shape {expected}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("gridded field must be finite")
        self._interp = RegularGridInterpolator(
            (self.times, *self.axes), self.values, method="linear", bounds_error=True
        )
        self._warned = False

    @property
    def d(self) -> int:
        return len(self.axes)

    def at(self, t, x: np.ndarray) -> np.ndarray:
        tq = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
        pts = np.concatenate([tq[..., None], x], axis=-1).reshape(-1, 1 + self.d)
        lo = np.array([self.times[0], *[a[0] for a in self.axes]])
        hi = np.array([self.times[-1], *[a[-1] for a in self.axes]])
        clipped = np.clip(pts, lo, hi)
        if not self._warned and not np.allclose(clipped, pts):
            logger.warning("gridded velocity field queried outside its box; extrapolating constantly")
            self._warned = True
        return self._interp(clipped).reshape(*x.shape[:-1], self.d)


VelocityField = Union[AffineField, GriddedField]


def _guard(x: np.ndarray, step: int) -> None:
    bad = ~np.isfinite(x).all(axis=1) | (np.abs(x).max(axis=1) > DIVERGENCE_GUARD)
    if bad.any():
        raise SimulationDivergedError(step=step, particle=int(np.nonzero(bad)[0][0]))


def solve_limit_flow(
    model: CoefficientModel, init: InitialEnsemble, horizon: float, steps: int
) -> LimitFlow:
    """Integrate d(xi_j)/dt = b(xi_j, V(t)) with classical RK4.

    V(t) is the empirical measure of all characteristics; every stage
    re-evaluates the coupled mean from the stage states.
    """
    if init.d != model.d:
        raise ValueError("initial ensemble dimension does not match model")
    dt = horizon / steps
    k, d = init.n, init.d

    def rhs(xs: np.ndarray) -> np.ndarray:
        return model.drift_from_mean(xs, xs.mean(axis=0))

    traj = np.empty((k, steps + 1, d))
    vel = np.empty((k, steps + 1, d))
    x = init.points.copy()
    traj[:, 0] = x
    vel[:, 0] = rhs(x)
    for i in range(steps):
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * dt * k1)
        k3 = rhs(x + 0.5 * dt * k2)
        k4 = rhs(x + dt * k3)
        x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _guard(x, i + 1)
        traj[:, i + 1] = x
        vel[:, i + 1] = rhs(x)
    times = np.linspace(0.0, horizon, steps + 1)
    return LimitFlow(traj, vel, times)


def limit_current_coefficients(
    flow: LimitFlow, grid: ModeGrid, memory_cap: int = DEFAULT_MEMORY_CAP
) -> CurrentCoefficients:
    """Coefficients of the limit current J = b(., V) V along the flow.

    Uses the midpoint increment rule on the characteristics (the increments
    are the time integrals of the velocity), which matches the stochastic
    pipeline discretely on equal grids.
    """
    coeffs = increment_mode_sums(flow.times, flow.trajectories, grid, memory_cap)
    return CurrentCoefficients(coeffs=coeffs, grid=grid, provenance="limit")


def solve_controlled_continuity(
    model: Optional[CoefficientModel],
    init: InitialEnsemble,
    horizon: float,
    steps: int,
    field: VelocityField,
    as_control: bool = False,
    grid: Optional[ModeGrid] = None,
    memory_cap: int = DEFAULT_MEMORY_CAP,
) -> tuple[LimitFlow, Optional[CurrentCoefficients]]:
    """Push characteristics by a velocity field or a Dirac control.

    With ``as_control=False`` the flow solves d(xi)/dt = h(t, xi) (pure
    continuity transport; ``model`` may be None).  With ``as_control=True``
    the field supplies the control value v(t, x) and the flow solves
    d(xi)/dt = b(xi, V) + sigma(V) v(t, xi), which requires a diffusion
    that depends on the state only through the measure.
    """
    if as_control:
        if model is None:
            raise ValueError("as_control=True requires a model")
        if not model.sigma_measure_only:
            raise ValueError("controlled continuity requires sigma(mu)-only diffusion")
        if init.d != model.d:
            raise ValueError("initial ensemble dimension does not match model")

        def rhs(t: float, xs: np.ndarray) -> np.ndarray:
            mean = xs.mean(axis=0)
            sig = model.sigma_from_mean(mean)
            return model.drift_from_mean(xs, mean) + field.at(t, xs) @ sig.T

    else:

        def rhs(t: float, xs: np.ndarray) -> np.ndarray:
            return field.at(t, xs)

    dt = horizon / steps
    k, d = init.n, init.d
    traj = np.empty((k, steps + 1, d))
    vel = np.empty((k, steps + 1, d))
    x = init.points.copy()
    traj[:, 0] = x
    vel[:, 0] = rhs(0.0, x)
    for i in range(steps):
        t = i * dt
        k1 = rhs(t, x)
        k2 = rhs(t + 0.5 * dt, x + 0.5 * dt * k1)
        k3 = rhs(t + 0.5 * dt, x + 0.5 * dt * k2)
        k4 = rhs(t + dt, x + dt * k3)
        x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _guard(x, i + 1)
        traj[:, i + 1] = x
        vel[:, i + 1] = rhs(min(t + dt, horizon), x)
    times = np.linspace(0.0, horizon, steps + 1)
    flow = LimitFlow(traj, vel, times)
    cur = None
    if grid is not None:
        coeffs = increment_mode_sums(times, traj, grid, memory_cap)
        cur = CurrentCoefficients(coeffs=coeffs, grid=grid, provenance="limit")
    return flow, cur


@dataclass(frozen=True)
class ResidualReport:
    residuals: tuple
    max_abs: float


_SIMPSON = {
    2: np.array([1.0, 4.0, 1.0]) / 6.0,
    4: np.array([1.0, 4.0, 2.0, 4.0, 1.0]) / 12.0,
    8: np.array([1.0, 4.0, 2.0, 4.0, 2.0, 4.0, 2.0, 4.0, 1.0]) / 24.0,
}


def vlasov_residual(
    flow: LimitFlow,
    field: Optional[VelocityField],
    phis: Sequence[TestFunction],
    refine: int = 4,
) -> ResidualReport:
    """Distributional continuity-equation residual along characteristics.

    For each scalar test function computes

        int <V(t), d_t phi> dt + int <V(t), grad phi . h> dt

    by cubic-Hermite refinement of the characteristics (node positions and
    velocities) and composite Simpson quadrature with ``refine``
    subintervals per step.  Zero field means h = 0.
    """
    if refine not in _SIMPSON:
        raise ValueError(f"refine must be one of {sorted(_SIMPSON)}")
    w_sub = _SIMPSON[refine]
    s = np.linspace(0.0, 1.0, refine + 1)
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2

    t = flow.times
    dt = t[1] - t[0]
    x0 = flow.trajectories[:, :-1, None, :]
    x1 = flow.trajectories[:, 1:, None, :]
    v0 = flow.velocities[:, :-1, None, :]
    v1 = flow.velocities[:, 1:, None, :]
    pos = (
        h00[None, None, :, None] * x0
        + h01[None, None, :, None] * x1
        + dt * (h10[None, None, :, None] * v0 + h11[None, None, :, None] * v1)
    )  # (K, M, Q, d)
    tau = t[:-1][:, None] + dt * s[None, :]  # (M, Q)

    hvals = None
    if field is not None:
        hvals = field.at(tau, pos)  # (K, M, Q, d) via broadcast

    residuals = []
    for phi in phis:
        integrand = phi.dt_profile(tau, pos)
        if hvals is not None:
            integrand = integrand + (phi.grad_x(tau, pos) * hvals).sum(axis=-1)
        per_particle = integrand.mean(axis=0)  # (M, Q)
        residuals.append(float((per_particle @ w_sub).sum() * dt))
    arr = np.array(residuals)
    return ResidualReport(residuals=tuple(arr.tolist()), max_abs=float(np.abs(arr).max()))


def fit_affine_field(flow: LimitFlow, bins: int) -> AffineField:
    """Least-squares affine velocity field per time bin from node data.

    Fits alpha_B + beta_B x to the flow's (position, velocity) pairs over
    the left nodes of every step in bin B; exact when the flow was
    transported by an affine field on the same bins.
    """
    k, steps, d = flow.n, flow.steps, flow.d
    horizon = flow.horizon
    alpha = np.zeros((bins, d))
    beta = np.zeros((bins, d, d))
    step_bins = np.clip(
        np.floor(flow.times[:-1] / horizon * bins).astype(int), 0, bins - 1
    )
    for b in range(bins):
        steps_in = np.nonzero(step_bins == b)[0]
        if steps_in.size == 0:
            continue
        xs = flow.trajectories[:, steps_in, :].reshape(-1, d)
        vs = flow.velocities[:, steps_in, :].reshape(-1, d)
        design = np.concatenate([np.ones((xs.shape[0], 1)), xs], axis=1)
        params, *_ = np.linalg.lstsq(design, vs, rcond=None)
        alpha[b] = params[0]
        beta[b] = params[1:].T
    return AffineField(alpha=alpha, beta=beta, horizon=horizon)
