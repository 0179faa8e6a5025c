"""Quadratic-control rate function on particle-represented ensembles.

A controlled ensemble carries K deterministic characteristics together
with the Dirac controls v_j(t_i) that generated them through

    d(xi_j)/dt = b(xi_j, V) + sigma(V) v_j(t).

Two cost functionals are evaluated on it:

* ``control_energy_cost``: (1/K) sum_j (1/2) int |v_j|^2 dt, the direct
  quadratic energy of the Dirac controls.
* ``velocity_field_cost``: the explicit velocity-field form
  (1/2) int < V(t), |sigma^{-1}(V)(h - b)|^2 > dt, where h averages the
  per-particle velocities over coincident positions.

For pairwise-distinct trajectories the two agree identically (no averaging
happens and sigma^{-1} sigma v = v); coincident particles with opposing
controls expose the Jensen gap of the averaged form.

``optimize_rate`` minimizes the energy over piecewise-constant affine
velocity fields with a quadratic constraint penalty, which is exact for
the linear catalog (LQR structure) and an upper bound otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .models import CoefficientModel, InitialEnsemble
from .simulate import AffineControl
from .testfuncs import TestFunction
from .vlasov import (
    AffineField,
    LimitFlow,
    fit_affine_field,
    solve_controlled_continuity,
    solve_limit_flow,
)

COINCIDENCE_TOL = 1e-12
RESIDUAL_ACCEPT = 1e-3


class RateEvaluationError(RuntimeError):
    """Velocity-field cost is not defined for this model/ensemble."""


@dataclass(frozen=True)
class ControlledEnsemble:
    """Particle representation of a controlled path/control measure."""

    flow: LimitFlow
    controls: np.ndarray  # (K, M, m)
    model: CoefficientModel

    def __post_init__(self):
        v = np.asarray(self.controls, dtype=float)
        if v.shape[0] != self.flow.n or v.shape[1] != self.flow.steps:
            raise ValueError("controls must have shape (K, steps, m)")
        if not np.all(np.isfinite(v)):
            raise ValueError("control energy must be finite")
        object.__setattr__(self, "controls", v)

    @property
    def dt(self) -> float:
        return self.flow.horizon / self.flow.steps

    @classmethod
    def from_controls(
        cls,
        model: CoefficientModel,
        init: InitialEnsemble,
        horizon: float,
        steps: int,
        controls: np.ndarray,
    ) -> "ControlledEnsemble":
        """Integrate the controlled characteristics for given step controls.

        Controls are piecewise constant on steps; each step is advanced by
        RK4 with the step's control value frozen, which is the canonical
        construction the dynamics-residual check re-runs.
        """
        controls = np.asarray(controls, dtype=float)
        if controls.shape != (init.n, steps, model.m):
            raise ValueError(f"controls must have shape {(init.n, steps, model.m)}")
        dt = horizon / steps
        traj = np.empty((init.n, steps + 1, model.d))
        vel = np.empty_like(traj)
        x = init.points.copy()
        traj[:, 0] = x

        def rhs(xs: np.ndarray, v: np.ndarray) -> np.ndarray:
            mean = xs.mean(axis=0)
            return model.drift_from_mean(xs, mean) + v @ model.sigma_from_mean(mean).T

        vel[:, 0] = rhs(x, controls[:, 0])
        for i in range(steps):
            v = controls[:, i]
            k1 = rhs(x, v)
            k2 = rhs(x + 0.5 * dt * k1, v)
            k3 = rhs(x + 0.5 * dt * k2, v)
            k4 = rhs(x + dt * k3, v)
            x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            traj[:, i + 1] = x
            vel[:, i + 1] = rhs(x, controls[:, min(i + 1, steps - 1)])
        times = np.linspace(0.0, horizon, steps + 1)
        return cls(flow=LimitFlow(traj, vel, times), controls=controls, model=model)

    def dynamics_residual(self) -> float:
        """Max per-step defect of the flow under re-integration."""
        rebuilt = ControlledEnsemble.from_controls(
            self.model,
            InitialEnsemble(self.flow.trajectories[:, 0, :], "re-integration"),
            self.flow.horizon,
            self.flow.steps,
            self.controls,
        )
        return float(np.abs(rebuilt.flow.trajectories - self.flow.trajectories).max())


def control_energy_cost(ce: ControlledEnsemble) -> float:
    """(1/K) sum_j (1/2) sum_i |v_j(t_i)|^2 dt."""
    return float(0.5 * (ce.controls**2).sum(axis=(1, 2)).mean() * ce.dt)


def _group_means(x: np.ndarray, y: np.ndarray, tol: float) -> np.ndarray:
    """Average y over groups of rows of x equal within tol."""
    key = np.round(x / tol) * tol
    _, inverse = np.unique(key, axis=0, return_inverse=True)
    n_groups = inverse.max() + 1
    sums = np.zeros((n_groups, y.shape[1]))
    counts = np.zeros(n_groups)
    np.add.at(sums, inverse, y)
    np.add.at(counts, inverse, 1.0)
    return (sums / counts[:, None])[inverse]


def velocity_field_cost(ce: ControlledEnsemble, tol: float = COINCIDENCE_TOL) -> float:
    """Velocity-field form of the cost with coincident-position averaging.

    Requires m = d and an invertible measure-only diffusion along the flow.
    """
    model = ce.model
    if model.m != model.d:
        raise RateEvaluationError("velocity-field cost requires m = d")
    if not model.sigma_measure_only:
        raise RateEvaluationError("velocity-field cost requires sigma(mu)-only diffusion")
    dt = ce.dt
    total = 0.0
    for i in range(ce.flow.steps):
        x = ce.flow.trajectories[:, i, :]
        mean = x.mean(axis=0)
        sig = model.sigma_from_mean(mean)
        if np.linalg.cond(sig) > 1e12:
            raise RateEvaluationError(f"singular diffusion at step {i}")
        b = model.drift_from_mean(x, mean)
        y = ce.controls[:, i] @ sig.T + b
        h = _group_means(x, y, tol)
        w = np.linalg.solve(sig, (h - b).T).T
        total += 0.5 * float((w**2).sum(axis=1).mean()) * dt
    return total


def ensemble_current_pairing(ce: ControlledEnsemble, phi: TestFunction) -> float:
    """Pairing of the ensemble's induced current with a vector test function.

    (1/K) sum_j sum_i phi(t_i, xi_j) . [b + sigma v_j] dt at left nodes.
    """
    dt = ce.dt
    total = 0.0
    k = phi.direction
    for i in range(ce.flow.steps):
        t = ce.flow.times[i]
        x = ce.flow.trajectories[:, i, :]
        mean = x.mean(axis=0)
        sig = ce.model.sigma_from_mean(mean)
        y = ce.model.drift_from_mean(x, mean) + ce.controls[:, i] @ sig.T
        g = phi.profile(t, x)
        total += float((g * y[:, k]).mean()) * dt
    return total


@dataclass(frozen=True)
class TerminalMeanTarget:
    """Constrain the terminal mean of the controlled flow."""

    delta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "delta", np.atleast_1d(np.asarray(self.delta, dtype=float)))

    def describe(self) -> str:
        return f"terminal-mean={np.array2string(self.delta, separator=',')}"


@dataclass(frozen=True)
class TerminalPairingTarget:
    """Constrain the pairing of the induced current with a test function."""

    phi: TestFunction
    value: float

    def describe(self) -> str:
        return f"current-pairing={self.value!r}"


RateTarget = Union[TerminalMeanTarget, TerminalPairingTarget]


@dataclass(frozen=True)
class RateResult:
    cost: float
    cost_field: Optional[float]
    control: AffineControl
    constraint_residual: float
    iterations: int
    converged: bool
    target_description: str

    def csv_row(self) -> dict:
        return {
            "target": self.target_description,
            "cost": repr(self.cost),
            "cost_field": "" if self.cost_field is None else repr(self.cost_field),
            "residual": repr(self.constraint_residual),
            "iterations": self.iterations,
            "converged": int(self.converged),
        }


class _BatchObjective:
    """Penalized objective over batches of affine-field parameter vectors."""

    def __init__(self, model, init, horizon, steps, bins, target):
        self.model = model
        self.init = init
        self.horizon = horizon
        self.steps = steps
        self.bins = bins
        self.target = target
        self.d = model.d
        self.n_params = bins * self.d + bins * self.d * self.d

    def unpack(self, params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        b, d = self.bins, self.d
        alpha = params[..., : b * d].reshape(*params.shape[:-1], b, d)
        beta = params[..., b * d :].reshape(*params.shape[:-1], b, d, d)
        return alpha, beta

    @property
    def constraint_dim(self) -> int:
        return self.d if isinstance(self.target, TerminalMeanTarget) else 1

    def evaluate(
        self, params: np.ndarray, lam: float, multiplier: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Returns (objective, residual vector) for a (B, n_params) batch.

        objective = energy + multiplier . r + lam |r|^2 with r the signed
        constraint defect; the multiplier is the augmented-Lagrangian
        estimate updated between penalty restarts.
        """
        alphas, betas = self.unpack(params)
        nb = params.shape[0]
        dt = self.horizon / self.steps
        x = np.broadcast_to(self.init.points, (nb, *self.init.points.shape)).copy()
        energy = np.zeros(nb)
        pairing = np.zeros(nb)
        steps_per_bin = self.steps // self.bins
        for i in range(self.steps):
            kb = i // steps_per_bin
            a_i = alphas[:, kb][:, None, :]
            b_i = betas[:, kb]

            def field(xs):
                return a_i + np.einsum("bij,bkj->bki", b_i, xs)

            h_left = field(x)
            means = x.mean(axis=1)
            drift = self.model.drift_from_mean(x, means)
            sig = self.model.sigma_from_mean(means)
            u = np.linalg.solve(sig, (h_left - drift).transpose(0, 2, 1)).transpose(0, 2, 1)
            energy += 0.5 * (u**2).sum(axis=2).mean(axis=1) * dt
            if isinstance(self.target, TerminalPairingTarget):
                g = self.target.phi.profile(i * dt, x)
                pairing += (g * h_left[..., self.target.phi.direction]).mean(axis=1) * dt
            k1 = h_left
            k2 = field(x + 0.5 * dt * k1)
            k3 = field(x + 0.5 * dt * k2)
            k4 = field(x + dt * k3)
            x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if isinstance(self.target, TerminalMeanTarget):
            resid = x.mean(axis=1) - self.target.delta
        else:
            resid = (pairing - self.target.value)[:, None]
        objective = energy + resid @ multiplier + lam * (resid**2).sum(axis=1)
        return objective, resid


def optimize_rate(
    model: CoefficientModel,
    init: InitialEnsemble,
    horizon: float,
    steps: int,
    target: RateTarget,
    bins: int = 16,
    iterations: int = 500,
    restarts: int = 3,
    penalty0: float = 10.0,
    fd_step: float = 1e-5,
    step0: float = 0.05,
    tol: float = 1e-8,
) -> tuple[RateResult, ControlledEnsemble]:
    """Minimize the control energy subject to a terminal constraint.

    Searches piecewise-constant affine velocity fields (alpha(t), beta(t)
    on ``bins`` time bins) by finite-difference gradient descent with an
    adaptive step, under a quadratic penalty whose weight grows tenfold per
    restart.  The search starts from the field fitted to the uncontrolled
    drift along the limit flow, so the zero-deviation target costs ~0.
    Results are exact for the linear catalog and upper bounds otherwise;
    non-convergence is reported, never silently absorbed.
    """
    if steps % bins != 0:
        raise ValueError(f"steps ({steps}) must be a multiple of bins ({bins})")
    if model.m != model.d:
        raise RateEvaluationError("rate optimization requires m = d (invertible sigma)")
    objective = _BatchObjective(model, init, horizon, steps, bins, target)

    base_flow = solve_limit_flow(model, init, horizon, steps)
    init_field = fit_affine_field(base_flow, bins)
    params = np.concatenate([init_field.alpha.ravel(), init_field.beta.ravel()])

    n_params = objective.n_params
    eye = np.eye(n_params) * fd_step
    total_iters = 0
    lr = step0
    multiplier = np.zeros(objective.constraint_dim)
    for restart in range(restarts):
        lam = penalty0 * 10.0**restart
        f_curr, _ = objective.evaluate(params[None, :], lam, multiplier)
        f_curr = float(f_curr[0])
        for _ in range(iterations):
            batch = np.concatenate([params[None, :], params[None, :] + eye], axis=0)
            f_batch, _ = objective.evaluate(batch, lam, multiplier)
            grad = (f_batch[1:] - f_batch[0]) / fd_step
            gnorm = np.linalg.norm(grad)
            if gnorm == 0.0:
                break
            factors = np.array([1.0, 0.5, 0.25, 0.125, 0.0625])
            improved = False
            for _ in range(4):
                cands = params[None, :] - (lr * factors)[:, None] * grad[None, :]
                f_c, _ = objective.evaluate(cands, lam, multiplier)
                j = int(np.argmin(f_c))
                if f_c[j] < f_curr:
                    params = cands[j]
                    gain = f_curr - float(f_c[j])
                    f_curr = float(f_c[j])
                    lr = lr * factors[j] * 1.3
                    improved = True
                    break
                lr /= 16.0
            total_iters += 1
            if not improved or gain < tol:
                break
        # Augmented-Lagrangian multiplier update between penalty restarts;
        # the pure penalty schedule alone leaves a residual ~ |grad cost|/2 lam,
        # which the growing-lambda sweep cannot push below the acceptance
        # threshold within the iteration budget.
        _, r_now = objective.evaluate(params[None, :], lam, multiplier)
        multiplier = multiplier + 2.0 * lam * r_now[0]

    alpha, beta = objective.unpack(params)

    def build_canonical(alpha_arr: np.ndarray):
        """Extract step controls from the field and rebuild the canonical ensemble."""
        field = AffineField(alpha=alpha_arr, beta=beta, horizon=horizon)
        flow, _ = solve_controlled_continuity(None, init, horizon, steps, field, as_control=False)
        dt = horizon / steps
        controls = np.empty((init.n, steps, model.m))
        for i in range(steps):
            x = flow.trajectories[:, i, :]
            mean = x.mean(axis=0)
            sig = model.sigma_from_mean(mean)
            h = field.at(i * dt, x)
            drift = model.drift_from_mean(x, mean)
            controls[:, i] = np.linalg.solve(sig, (h - drift).T).T
        ce = ControlledEnsemble.from_controls(model, init, horizon, steps, controls)
        if isinstance(target, TerminalMeanTarget):
            r = ce.flow.terminal_mean() - target.delta
        else:
            r = np.array([ensemble_current_pairing(ce, target.phi) - target.value])
        return ce, r

    # The optimizer integrates the transport form of the controlled
    # dynamics; the reported object re-integrates with piecewise-constant
    # controls, whose O(dt^2) integrator offset shows up as a constraint
    # defect.  A secant pass on uniform alpha shifts removes it.
    ce, r_vec = build_canonical(alpha)
    for _ in range(2):
        if np.linalg.norm(r_vec) <= 1e-9:
            break
        h_fd = 1e-4
        jac = np.empty((r_vec.size, model.d))
        for c in range(model.d):
            shifted = alpha.copy()
            shifted[:, c] += h_fd
            _, r_pert = build_canonical(shifted)
            jac[:, c] = (r_pert - r_vec) / h_fd
        shift, *_ = np.linalg.lstsq(jac, -r_vec, rcond=None)
        alpha = alpha + shift[None, :]
        ce, r_vec = build_canonical(alpha)

    cost = control_energy_cost(ce)
    try:
        cost_field = velocity_field_cost(ce)
    except RateEvaluationError:
        cost_field = None
    resid = float(np.linalg.norm(r_vec))
    result = RateResult(
        cost=cost,
        cost_field=cost_field,
        control=AffineControl(alpha=alpha, beta=beta, velocity_field=True),
        constraint_residual=resid,
        iterations=total_iters,
        converged=resid <= RESIDUAL_ACCEPT,
        target_description=target.describe(),
    )
    return result, ce
