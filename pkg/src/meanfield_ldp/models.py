"""Coefficient catalog, initial ensembles, and empirical measures.

Two drift/diffusion families are supported:

* ``LinearInteraction``: drift A x + B mean(mu) + c with diffusion
  Sigma0 + tanh(mean_gain * mean(mu)[0]) * Sigma1.
* ``GradientPotential``: drift -U'(x_i) - kappa (x_i - mean(mu)_i) per
  coordinate for a scalar polynomial well U (degree <= 4), with constant
  diffusion Sigma0.

In both families the diffusion depends on the state only through the
empirical measure, and its Frobenius norm must stay below the declared
Lipschitz/bound constant ``declared_l``.  ``validate_model`` probes the
joint Lipschitz inequality

    |b(x,mu)-b(y,nu)| + |sigma(x,mu)-sigma(y,nu)| <= L (|x-y| + W1(mu,nu))

on random pairs; polynomial wells with an active cubic term fail it on
unbounded probe sets, so a finite ``probe_radius`` certifies only local
Lipschitz behaviour on the stated ball.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .wasserstein import wasserstein1


class ModelValidationError(ValueError):
    """A coefficient model violates one of its declared bounds."""


class DimensionMismatchError(ValueError):
    """Input dimensions are inconsistent with the model."""


def _as_matrix(a, rows, cols, name) -> np.ndarray:
    out = np.asarray(a, dtype=float)
    if out.shape != (rows, cols):
        raise DimensionMismatchError(f"{name} must have shape {(rows, cols)}, got {out.shape}")
    return out


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Equal-weight atomic probability measure on R^d."""

    atoms: np.ndarray

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        if atoms.ndim != 2 or atoms.shape[0] < 1:
            raise ValueError("atoms must be a nonempty (K, d) array")
        if not np.all(np.isfinite(atoms)):
            raise ValueError("atoms must be finite")
        object.__setattr__(self, "atoms", atoms)

    @classmethod
    def dirac(cls, x) -> "EmpiricalMeasure":
        return cls(np.atleast_1d(np.asarray(x, dtype=float))[None, :])

    @property
    def d(self) -> int:
        return self.atoms.shape[1]

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    def mean(self) -> np.ndarray:
        return self.atoms.mean(axis=0)

    def first_moment(self) -> float:
        """Mean Euclidean norm of the atoms, int |y| mu(dy)."""
        return float(np.linalg.norm(self.atoms, axis=1).mean())


@dataclass(frozen=True)
class InitialEnsemble:
    """Deterministic initial particle positions x_1..x_N."""

    points: np.ndarray
    source_description: str = "unspecified"

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if not np.all(np.isfinite(pts)):
            raise ValueError("initial points must be finite")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def second_moment(self) -> float:
        """(1/N) sum |x_j|^2, recorded for the moment diagnostics."""
        return float((self.points**2).sum(axis=1).mean())

    def measure(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.points)

    @classmethod
    def dirac(cls, x, n: int, description: str = "replicated point mass") -> "InitialEnsemble":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(np.tile(x, (n, 1)), description)

    @classmethod
    def gaussian_stencil(cls, n: int, mean: float = 0.0, std: float = 1.0) -> "InitialEnsemble":
        """Deterministic 1-d Gaussian quantile stencil x_j = F^{-1}((j-1/2)/n)."""
        from scipy.special import ndtri

        q = (np.arange(n) + 0.5) / n
        pts = (mean + std * ndtri(q))[:, None]
        return cls(pts, f"gaussian quantile stencil n={n} mean={mean} std={std}")

    @classmethod
    def gaussian_sample(cls, n: int, mean, cov, seed: int) -> "InitialEnsemble":
        """Sample once with a fixed seed and freeze (initial data stays deterministic)."""
        rng = np.random.default_rng(seed)
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        pts = rng.multivariate_normal(mean, cov, size=n)
        return cls(pts, f"frozen gaussian sample n={n} seed={seed}")


@dataclass(frozen=True)
class LinearInteraction:
    """Drift A x + B mean(mu) + c; diffusion Sigma0 + tanh(g * mean(mu)_1) Sigma1."""

    a_matrix: np.ndarray
    b_matrix: np.ndarray
    c_vector: np.ndarray
    sigma0: np.ndarray
    sigma1: np.ndarray
    mean_gain: float = 0.0
    declared_l: float = 1.0

    family = "linear"

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a_matrix, dtype=float))
        d = a.shape[0]
        object.__setattr__(self, "a_matrix", _as_matrix(a, d, d, "A"))
        object.__setattr__(self, "b_matrix", _as_matrix(self.b_matrix, d, d, "B"))
        c = np.atleast_1d(np.asarray(self.c_vector, dtype=float))
        if c.shape != (d,):
            raise DimensionMismatchError(f"c must have shape ({d},)")
        object.__setattr__(self, "c_vector", c)
        s0 = np.atleast_2d(np.asarray(self.sigma0, dtype=float))
        m = s0.shape[1]
        object.__setattr__(self, "sigma0", _as_matrix(s0, d, m, "Sigma0"))
        object.__setattr__(self, "sigma1", _as_matrix(self.sigma1, d, m, "Sigma1"))
        if self.declared_l <= 0:
            raise ModelValidationError("declared_l must be positive")

    @property
    def d(self) -> int:
        return self.a_matrix.shape[0]

    @property
    def m(self) -> int:
        return self.sigma0.shape[1]

    @property
    def sigma_measure_only(self) -> bool:
        return True

    def drift_from_mean(self, x: np.ndarray, mean: np.ndarray) -> np.ndarray:
        """Vectorized drift; x broadcasts over a particle axis against mean."""
        interaction = mean @ self.b_matrix.T + self.c_vector
        if x.ndim > np.ndim(mean):
            interaction = np.expand_dims(interaction, -2)
        return x @ self.a_matrix.T + interaction

    def sigma_from_mean(self, mean: np.ndarray) -> np.ndarray:
        gain = np.tanh(self.mean_gain * np.asarray(mean)[..., 0])
        if np.ndim(gain) == 0:
            return self.sigma0 + gain * self.sigma1
        return self.sigma0 + gain[..., None, None] * self.sigma1


@dataclass(frozen=True)
class GradientPotential:
    """Coordinatewise polynomial well with mean-reverting interaction.

    drift_i = -U'(x_i) - kappa (x_i - mean(mu)_i), U(z) = sum_k coeffs[k] z^k.
    """

    potential_coeffs: np.ndarray
    kappa: float
    sigma0: np.ndarray
    declared_l: float = 1.0

    family = "gradient"

    def __post_init__(self):
        coeffs = np.atleast_1d(np.asarray(self.potential_coeffs, dtype=float))
        if coeffs.ndim != 1 or coeffs.size > 5:
            raise ModelValidationError("potential degree must be <= 4")
        nz = np.nonzero(coeffs)[0]
        if nz.size and nz[-1] % 2 != 0:
            raise ModelValidationError("leading potential term must have even degree")
        object.__setattr__(self, "potential_coeffs", coeffs)
        if self.kappa < 0:
            raise ModelValidationError("kappa must be >= 0")
        s0 = np.atleast_2d(np.asarray(self.sigma0, dtype=float))
        object.__setattr__(self, "sigma0", s0)
        if self.declared_l <= 0:
            raise ModelValidationError("declared_l must be positive")

    @property
    def d(self) -> int:
        return self.sigma0.shape[0]

    @property
    def m(self) -> int:
        return self.sigma0.shape[1]

    @property
    def sigma_measure_only(self) -> bool:
        return True

    def _u_prime(self, z: np.ndarray) -> np.ndarray:
        c = self.potential_coeffs
        out = np.zeros_like(z)
        for k in range(len(c) - 1, 0, -1):
            out = out * z + k * c[k]
        return out

    def drift_from_mean(self, x: np.ndarray, mean: np.ndarray) -> np.ndarray:
        if x.ndim > np.ndim(mean):
            mean = np.expand_dims(mean, -2)
        return -self._u_prime(x) - self.kappa * (x - mean)

    def sigma_from_mean(self, mean: np.ndarray) -> np.ndarray:
        if np.ndim(mean) > 1:
            return np.broadcast_to(self.sigma0, (*np.asarray(mean).shape[:-1], *self.sigma0.shape))
        return self.sigma0


CoefficientModel = Union[LinearInteraction, GradientPotential]


def drift_eval(model: CoefficientModel, x, mu: EmpiricalMeasure) -> np.ndarray:
    """b(x, mu) for a single state x."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (model.d,):
        raise DimensionMismatchError(f"x must have shape ({model.d},), got {x.shape}")
    if mu.d != model.d:
        raise DimensionMismatchError("measure dimension does not match model")
    return model.drift_from_mean(x, mu.mean())


def diffusion_eval(model: CoefficientModel, x, mu: EmpiricalMeasure) -> np.ndarray:
    """sigma(x, mu); catalog diffusions never depend on x."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (model.d,):
        raise DimensionMismatchError(f"x must have shape ({model.d},), got {x.shape}")
    if mu.d != model.d:
        raise DimensionMismatchError("measure dimension does not match model")
    sig = model.sigma_from_mean(mu.mean())
    norm = float(np.linalg.norm(sig))
    if norm > model.declared_l * (1 + 1e-12):
        raise ModelValidationError(
            f"|sigma| = {norm:.6g} exceeds declared bound L = {model.declared_l:.6g}"
        )
    return sig


@dataclass(frozen=True)
class ValidationReport:
    passed: bool
    max_ratio: float
    witness: tuple | None
    probes: int
    probe_radius: float | None
    sigma_bound_ok: bool
    max_sigma_norm: float
    messages: tuple = field(default_factory=tuple)


def _random_probe(rng, d: int, radius: float):
    x = rng.normal(size=d) * radius / 3.0
    r = np.linalg.norm(x)
    if r > radius:
        x *= radius / r
    k = rng.integers(1, 9)
    atoms = rng.normal(size=(k, d)) * radius / 3.0
    norms = np.linalg.norm(atoms, axis=1)
    over = norms > radius
    atoms[over] *= (radius / norms[over])[:, None]
    return x, EmpiricalMeasure(atoms)


def validate_model(
    model: CoefficientModel,
    probe_count: int = 200,
    seed: int = 0,
    probe_radius: float | None = 10.0,
) -> ValidationReport:
    """Check the joint Lipschitz inequality with constant declared_l on probe pairs.

    Pass iff the maximum observed ratio is <= 1.  With probe_radius=None the
    probes include deterministic far-out near-pairs, so super-linear drifts
    (active cubic terms) are caught even when random sampling misses them.
    """
    if probe_count < 2:
        raise ValueError("probe_count must be >= 2")
    rng = np.random.default_rng(seed)
    d = model.d
    radius = probe_radius if probe_radius is not None else 10.0
    pairs = []
    for _ in range(probe_count):
        pairs.append((_random_probe(rng, d, radius), _random_probe(rng, d, radius)))
    delta = 0.5 if probe_radius is not None else 1.0
    hi = radius if probe_radius is not None else radius + delta
    for axis in range(d):
        e = np.zeros(d)
        e[axis] = 1.0
        mu = EmpiricalMeasure.dirac(np.zeros(d))
        pairs.append(((hi * e, mu), ((hi - delta) * e, mu)))
        pairs.append(((-hi * e, mu), ((-hi + delta) * e, mu)))

    L = model.declared_l
    max_ratio = 0.0
    witness = None
    max_sigma = 0.0
    for (x, mu), (y, nu) in pairs:
        db = np.linalg.norm(model.drift_from_mean(x, mu.mean()) - model.drift_from_mean(y, nu.mean()))
        ds = np.linalg.norm(model.sigma_from_mean(mu.mean()) - model.sigma_from_mean(nu.mean()))
        denom = L * (np.linalg.norm(x - y) + wasserstein1(mu, nu))
        max_sigma = max(
            max_sigma,
            float(np.linalg.norm(model.sigma_from_mean(mu.mean()))),
            float(np.linalg.norm(model.sigma_from_mean(nu.mean()))),
        )
        if denom < 1e-14:
            continue
        ratio = float((db + ds) / denom)
        if ratio > max_ratio:
            max_ratio = ratio
            witness = (x.copy(), mu.atoms.copy(), y.copy(), nu.atoms.copy())
    sigma_ok = max_sigma <= L * (1 + 1e-12)
    passed = max_ratio <= 1.0 + 1e-9 and sigma_ok
    messages = []
    if not sigma_ok:
        messages.append(f"diffusion norm {max_sigma:.6g} exceeds declared L={L:.6g}")
    if max_ratio > 1.0 + 1e-9:
        messages.append(f"Lipschitz ratio {max_ratio:.6g} > 1 at witness pair")
    return ValidationReport(
        passed=passed,
        max_ratio=max_ratio,
        witness=witness if not passed else None,
        probes=len(pairs),
        probe_radius=probe_radius,
        sigma_bound_ok=sigma_ok,
        max_sigma_norm=max_sigma,
        messages=tuple(messages),
    )


def ornstein_uhlenbeck(
    rate: float = 1.0, noise: float = 1.0, declared_l: float = 2.0
) -> LinearInteraction:
    """1-d linear model dX = -rate X dt + eps * noise dW, the workhorse test model."""
    return LinearInteraction(
        a_matrix=[[-rate]],
        b_matrix=[[0.0]],
        c_vector=[0.0],
        sigma0=[[noise]],
        sigma1=[[0.0]],
        mean_gain=0.0,
        declared_l=declared_l,
    )


def mean_field_ou(
    rate: float = 1.0, pull: float = 1.0, noise: float = 1.0, declared_l: float = 3.0
) -> LinearInteraction:
    """1-d model dX = (-rate X + pull * mean) dt + eps * noise dW."""
    return LinearInteraction(
        a_matrix=[[-rate]],
        b_matrix=[[pull]],
        c_vector=[0.0],
        sigma0=[[noise]],
        sigma1=[[0.0]],
        mean_gain=0.0,
        declared_l=declared_l,
    )
