"""Euler-Maruyama integration of the interacting particle systems.

The uncontrolled step is

    X_{i+1} = X_i + b(X_i, V_i) dt + eps * sigma(X_i, V_i) dW_i,

with V_i the empirical measure of all particles at the start of the step
(explicit scheme) and dW_i ~ N(0, dt I_m) drawn from the counter-based
generator keyed on (master_seed, replica, particle, step).  The controlled
variant adds sigma(X_i, V_i) u_j(t_i) dt.  Diffusions in the catalog are
state-independent, so the Milstein correction vanishes and fixed-step
Euler is the consistent choice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import rng
from .models import CoefficientModel, EmpiricalMeasure, InitialEnsemble

DIVERGENCE_GUARD = 1e12


class SimulationDivergedError(RuntimeError):
    def __init__(self, step: int, particle: int):
        self.step = step
        self.particle = particle
        super().__init__(f"simulation diverged at step {step}, particle {particle}")


class DiagnosticsError(ValueError):
    """Path ensemble contains non-finite states."""


@dataclass(frozen=True)
class SimConfig:
    """Particle count, grid, noise level, and RNG keys for one simulation."""

    n: int
    horizon: float
    steps: int
    epsilon: float = 0.0
    eps_rule: str = "explicit"  # or "powerlaw"; then epsilon = n**(-alpha)
    alpha: Optional[float] = None
    master_seed: int = 0
    replica_index: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.eps_rule == "powerlaw":
            if self.alpha is None:
                raise ValueError("powerlaw rule requires alpha")
            object.__setattr__(self, "epsilon", float(self.n) ** (-self.alpha))
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def ldp_speed(self) -> float:
        """a_N = N / eps_N^2, the exponential decay scale."""
        if self.epsilon == 0.0:
            return math.inf
        return self.n / self.epsilon**2

    def replica(self, index: int) -> "SimConfig":
        return replace(self, replica_index=index)


@dataclass(frozen=True)
class OpenLoopControl:
    """Per-particle controls u_j(t_i) given directly on the time grid."""

    values: np.ndarray  # (N, M, m)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3:
            raise ValueError("open-loop control must have shape (N, M, m)")
        if not np.all(np.isfinite(v)):
            raise ValueError("control energy must be finite")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class AffineControl:
    """Piecewise-constant-in-time affine field alpha(t) + beta(t) x.

    With ``velocity_field=False`` the raw field value is the control.  With
    ``velocity_field=True`` the field is a target velocity and the applied
    control is pinv(sigma) (alpha + beta x - b(x, V)), so the controlled
    drift becomes the field itself; rate evaluations use this form.
    """

    alpha: np.ndarray  # (bins, m) raw / (bins, d) velocity-field
    beta: np.ndarray  # (bins, m, d) raw / (bins, d, d) velocity-field
    velocity_field: bool = False

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        b = np.asarray(self.beta, dtype=float)
        if a.ndim != 2 or b.ndim != 3 or a.shape[0] != b.shape[0] or b.shape[1] != a.shape[1]:
            raise ValueError("alpha must be (bins, m) and beta (bins, m, d)")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("control field must be finite")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)

    @property
    def bins(self) -> int:
        return self.alpha.shape[0]

    def bin_index(self, t: float, horizon: float) -> int:
        return min(int(self.bins * t / horizon), self.bins - 1)

    def field(self, t: float, x: np.ndarray, horizon: float) -> np.ndarray:
        k = self.bin_index(t, horizon)
        return self.alpha[k] + x @ self.beta[k].T


ControlSpec = Union[None, OpenLoopControl, AffineControl]


@dataclass(frozen=True)
class PathEnsemble:
    """N discrete-time trajectories plus the noise and controls that made them."""

    states: np.ndarray  # (N, M+1, d)
    noise_increments: np.ndarray  # (N, M, m)
    controls: np.ndarray  # (N, M, m)
    config: SimConfig
    model: CoefficientModel

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def steps(self) -> int:
        return self.states.shape[1] - 1

    @property
    def d(self) -> int:
        return self.states.shape[2]

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.config.horizon, self.steps + 1)

    def control_energy(self) -> float:
        """(1/N) sum_j int |u_j|^2 dt on the grid."""
        dt = self.config.horizon / self.steps
        return float((self.controls**2).sum(axis=(1, 2)).mean() * dt)


def _resolve_control(
    ctrl: ControlSpec,
    model: CoefficientModel,
    t: float,
    x: np.ndarray,
    mean: np.ndarray,
    drift: np.ndarray,
    sigma: np.ndarray,
    step: int,
    horizon: float,
) -> np.ndarray | None:
    if ctrl is None:
        return None
    if isinstance(ctrl, OpenLoopControl):
        return ctrl.values[:, step, :]
    if isinstance(ctrl, AffineControl):
        h = ctrl.field(t, x, horizon)
        if not ctrl.velocity_field:
            return h
        return (h - drift) @ np.linalg.pinv(sigma).T
    raise TypeError(f"unsupported control spec {type(ctrl)!r}")


def _integrate(
    model: CoefficientModel,
    init: InitialEnsemble,
    cfg: SimConfig,
    ctrl: ControlSpec,
) -> PathEnsemble:
    if init.n != cfg.n:
        raise ValueError(f"initial ensemble size {init.n} != config n {cfg.n}")
    if init.d != model.d:
        raise ValueError("initial ensemble dimension does not match model")
    if isinstance(ctrl, OpenLoopControl) and ctrl.values.shape[:2] != (cfg.n, cfg.steps):
        raise ValueError(
            f"control grid {ctrl.values.shape[:2]} incompatible with (N, M) = {(cfg.n, cfg.steps)}"
        )
    n, m, d, steps = cfg.n, model.m, model.d, cfg.steps
    dt = cfg.dt
    sqdt = math.sqrt(dt)
    dw = rng.normal_increments(cfg.master_seed, cfg.replica_index, n, steps, m) * sqdt
    states = np.empty((n, steps + 1, d))
    controls = np.zeros((n, steps, m))
    x = init.points.copy()
    states[:, 0] = x
    for i in range(steps):
        t = i * dt
        mean = x.mean(axis=0)
        drift = model.drift_from_mean(x, mean)
        sigma = model.sigma_from_mean(mean)
        u = _resolve_control(ctrl, model, t, x, mean, drift, sigma, i, cfg.horizon)
        x = x + drift * dt + cfg.epsilon * (dw[:, i] @ sigma.T)
        if u is not None:
            controls[:, i] = u
            x = x + (u @ sigma.T) * dt
        bad = ~np.isfinite(x).all(axis=1) | (np.abs(x).max(axis=1) > DIVERGENCE_GUARD)
        if bad.any():
            raise SimulationDivergedError(step=i + 1, particle=int(np.nonzero(bad)[0][0]))
        states[:, i + 1] = x
    return PathEnsemble(states=states, noise_increments=dw, controls=controls, config=cfg, model=model)


def simulate(model: CoefficientModel, init: InitialEnsemble, cfg: SimConfig) -> PathEnsemble:
    """Integrate the uncontrolled N-particle system on the fixed grid."""
    return _integrate(model, init, cfg, None)


def simulate_controlled(
    model: CoefficientModel, init: InitialEnsemble, cfg: SimConfig, ctrl: ControlSpec
) -> PathEnsemble:
    """Integrate the controlled system; ctrl=None reduces bit-exactly to simulate."""
    return _integrate(model, init, cfg, ctrl)


def time_marginal(ens: PathEnsemble, i: int) -> EmpiricalMeasure:
    """Equal-weight empirical measure of the particle states at step i."""
    if not 0 <= i <= ens.steps:
        raise IndexError(f"step index {i} out of range [0, {ens.steps}]")
    return EmpiricalMeasure(ens.states[:, i, :])


@dataclass(frozen=True)
class MomentReport:
    sup_moment: float
    control_energy: float
    initial_second_moment: float
    bound_constant: float
    bound: float
    satisfied: bool


def moment_diagnostics(ens: PathEnsemble) -> MomentReport:
    """Check the a-priori second-moment estimate for the controlled system.

    Compares (1/N) sum_j sup_i |X_j(t_i)|^2 against
    c (1 + (1/N) sum |x_j|^2 + energy) with c = 24 (L^2 T + 1) e^{24 L^2 T^2};
    the constant is huge by design, so a violation flags a genuine bug or a
    diverging configuration rather than a sharp inequality failure.
    """
    if not np.all(np.isfinite(ens.states)):
        raise DiagnosticsError("path ensemble contains non-finite states")
    sup_moment = float((ens.states**2).sum(axis=2).max(axis=1).mean())
    energy = ens.control_energy()
    init_m2 = float((ens.states[:, 0, :] ** 2).sum(axis=1).mean())
    L = ens.model.declared_l
    T = ens.config.horizon
    c = 24.0 * (L**2 * T + 1.0) * math.exp(min(24.0 * L**2 * T**2, 700.0))
    bound = c * (1.0 + init_m2 + energy)
    return MomentReport(
        sup_moment=sup_moment,
        control_energy=energy,
        initial_second_moment=init_m2,
        bound_constant=c,
        bound=bound,
        satisfied=sup_moment <= bound,
    )


def save_paths(ens: PathEnsemble, path: str | Path) -> None:
    """Dump states as flat little-endian float64, row-major (j, i, coordinate).

    A sidecar ``<path>.header.txt`` documents the exact layout.
    """
    path = Path(path)
    flat = np.ascontiguousarray(ens.states, dtype="<f8")
    flat.tofile(path)
    header = (
        "meanfield-ldp path dump\n"
        "layout: flat little-endian float64, row-major (particle, step, coordinate)\n"
        f"particles: {ens.n}\nsteps: {ens.steps}\ndim: {ens.d}\n"
        f"horizon: {ens.config.horizon!r}\nepsilon: {ens.config.epsilon!r}\n"
        f"master_seed: {ens.config.master_seed}\nreplica: {ens.config.replica_index}\n"
        f"rng: {rng.ALGORITHM}\n"
    )
    Path(str(path) + ".header.txt").write_text(header)


def load_paths(path: str | Path) -> np.ndarray:
    header = Path(str(path) + ".header.txt").read_text().splitlines()
    fields = dict(line.split(": ", 1) for line in header[2:] if ": " in line)
    n, steps, d = int(fields["particles"]), int(fields["steps"]), int(fields["dim"])
    flat = np.fromfile(path, dtype="<f8")
    return flat.reshape(n, steps + 1, d)
