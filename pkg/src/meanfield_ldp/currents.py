"""Stochastic currents: pairings, Fourier coefficients, dual pseudo-norms.

A current pairs a vector test function phi with the ensemble of paths,

    <J, phi> = (1/N) sum_j int phi(t, X_j) o dX_j,

discretized with the midpoint (Stratonovich-consistent) rule.  Its pathwise
realization is handled through truncated Fourier coefficients on the mode
family

    e^k_{n,xi}(t, x) = exp(2 pi i n t/(b-a)) exp(2 pi i xi.x) e_k / (b-a),

and distances are measured in the truncated dual pseudo-norm

    ||J||^2 ~ sum_k sum_n int |Jhat(k,n,xi)|^2 (1+n^2)^{-s1} (1+|xi|^2)^{-s2} dxi,

which is norm-equivalent (with support-dependent constants that are never
computed) to the true dual Sobolev norm for compactly supported currents.
All comparisons in this package are therefore pseudo-norm against
pseudo-norm, never against an absolute dual norm.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .simulate import PathEnsemble
from .testfuncs import GaussianBump, SingleMode, TestFunction

DEFAULT_MEMORY_CAP = 512 * 1024 * 1024  # bytes


class SizingError(MemoryError):
    """Requested mode grid exceeds the configured memory cap."""


class GridMismatchError(ValueError):
    """Two coefficient sets live on different mode grids."""


class UnsupportedTestFunctionError(ValueError):
    """Norm mode not available for this test-function kind."""


@dataclass(frozen=True)
class SobolevIndex:
    """Index pair (s1, s2) with s1 in (1/2, 1) and s2 > d/2 + 1."""

    s1: float
    s2: float

    def validate_for_dim(self, d: int) -> None:
        if not 0.5 < self.s1 < 1.0:
            raise ValueError(f"s1 = {self.s1} outside (1/2, 1)")
        if not self.s2 > d / 2 + 1:
            raise ValueError(f"s2 = {self.s2} must exceed d/2 + 1 = {d / 2 + 1}")

    @classmethod
    def default(cls, d: int) -> "SobolevIndex":
        return cls(s1=0.75, s2=d / 2 + 1.25)


@dataclass(frozen=True)
class ModeGrid:
    """Truncated (n, xi) mode grid with ambient time interval (a, b)."""

    d: int
    n_max: int = 8
    xi_max: float = 4.0
    xi_points: int = 17
    a: float = -0.25
    b: float = 1.25
    horizon: float = 1.0

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.xi_points < 3 or self.xi_points % 2 == 0:
            raise ValueError("xi_points must be odd and >= 3")
        if not (self.a < 0.0 < self.horizon < self.b):
            raise ValueError("need a < 0 < horizon < b")

    @classmethod
    def default(cls, d: int, horizon: float) -> "ModeGrid":
        return cls(d=d, a=-horizon / 4.0, b=1.25 * horizon, horizon=horizon)

    @property
    def n_values(self) -> np.ndarray:
        return np.arange(-self.n_max, self.n_max + 1)

    @property
    def xi_axis(self) -> np.ndarray:
        return np.linspace(-self.xi_max, self.xi_max, self.xi_points)

    @property
    def xi_spacing(self) -> float:
        return 2.0 * self.xi_max / (self.xi_points - 1)

    @property
    def xi_flat(self) -> np.ndarray:
        axes = [self.xi_axis] * self.d
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.d)

    @property
    def xi_weights(self) -> np.ndarray:
        """Flat tensor-product trapezoid quadrature weights on the xi grid."""
        w1 = np.full(self.xi_points, self.xi_spacing)
        w1[0] = w1[-1] = self.xi_spacing / 2.0
        w = w1
        for _ in range(self.d - 1):
            w = np.multiply.outer(w, w1)
        return w.reshape(-1)

    @property
    def n_count(self) -> int:
        return 2 * self.n_max + 1

    @property
    def mode_count(self) -> int:
        return self.d * self.n_count * self.xi_points**self.d

    def xi_index(self, xi, tol: float = 1e-9) -> int:
        """Flat index of a xi vector that lies on the grid."""
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        idx = 0
        for axis_val in xi:
            j = int(round((axis_val + self.xi_max) / self.xi_spacing))
            if not 0 <= j < self.xi_points:
                raise ValueError(f"xi component {axis_val} outside grid")
            if abs(self.xi_axis[j] - axis_val) > tol:
                raise ValueError(f"xi component {axis_val} not on grid")
            idx = idx * self.xi_points + j
        return idx

    def matches(self, other: "ModeGrid") -> bool:
        return (
            self.d == other.d
            and self.n_max == other.n_max
            and self.xi_points == other.xi_points
            and np.isclose(self.xi_max, other.xi_max)
            and np.isclose(self.a, other.a)
            and np.isclose(self.b, other.b)
            and np.isclose(self.horizon, other.horizon)
        )


@dataclass(frozen=True)
class CurrentCoefficients:
    """Truncated Fourier coefficients Jhat(k, n, xi) of a current."""

    coeffs: np.ndarray  # complex, shape (d, n_count, xi_points**d)
    grid: ModeGrid
    provenance: str  # "stochastic" | "limit" | "controlled"

    def __post_init__(self):
        expected = (self.grid.d, self.grid.n_count, self.grid.xi_points**self.grid.d)
        if self.coeffs.shape != expected:
            raise ValueError(f"coefficient array must have shape {expected}")

    def conjugate_symmetry_defect(self) -> float:
        """max |c(k, -n, -xi) - conj(c(k, n, xi))|; ~0 for real currents."""
        flipped = self.coeffs[:, ::-1, ::-1]
        return float(np.abs(flipped - np.conj(self.coeffs)).max())

    def scaled(self, factor: complex) -> "CurrentCoefficients":
        return CurrentCoefficients(self.coeffs * factor, self.grid, self.provenance)


def _estimate_bytes(grid: ModeGrid, n_particles: int) -> int:
    pd = grid.xi_points**grid.d
    return 16 * (grid.d * grid.n_count * pd + 2 * n_particles * pd)


def increment_mode_sums(
    times: np.ndarray, states: np.ndarray, grid: ModeGrid, memory_cap: int = DEFAULT_MEMORY_CAP
) -> np.ndarray:
    """Midpoint-rule mode sums of a path family against the basis modes.

    Returns (1/N) sum_j sum_i e^{2 pi i n t_mid/(b-a)} e^{2 pi i xi.X_mid}
    (dX_i)_k / (b-a); shape (d, n_count, xi_points**d).  Shared by the
    stochastic, controlled, and deterministic-limit pipelines so that
    matched runs produce the same discrete object.
    """
    n_particles, n_nodes, d = states.shape
    if d != grid.d:
        raise ValueError("state dimension does not match grid")
    need = _estimate_bytes(grid, n_particles)
    if need > memory_cap:
        raise SizingError(
            f"mode grid needs ~{need / 1e6:.0f} MB (> cap {memory_cap / 1e6:.0f} MB); "
            f"d={grid.d}, xi_points={grid.xi_points}, particles={n_particles}"
        )
    xi = grid.xi_flat  # (Pd, d)
    nvals = grid.n_values
    span = grid.b - grid.a
    coeffs = np.zeros((d, grid.n_count, xi.shape[0]), dtype=complex)
    for i in range(n_nodes - 1):
        t_mid = 0.5 * (times[i] + times[i + 1])
        x_mid = 0.5 * (states[:, i, :] + states[:, i + 1, :])
        dx = states[:, i + 1, :] - states[:, i, :]
        ex = np.exp(2j * np.pi * (x_mid @ xi.T))  # (N, Pd)
        s = ex.T @ dx  # (Pd, d)
        et = np.exp(2j * np.pi * nvals * t_mid / span)  # (n_count,)
        coeffs += et[None, :, None] * s.T[:, None, :]
    coeffs /= n_particles * span
    return coeffs


def current_fourier_coefficients(
    ens: PathEnsemble, grid: ModeGrid, memory_cap: int = DEFAULT_MEMORY_CAP
) -> CurrentCoefficients:
    """Truncated coefficients of the ensemble's stochastic current."""
    coeffs = increment_mode_sums(ens.times, ens.states, grid, memory_cap)
    provenance = "controlled" if np.any(ens.controls) else "stochastic"
    return CurrentCoefficients(coeffs=coeffs, grid=grid, provenance=provenance)


def current_pairing_stratonovich(ens: PathEnsemble, phi: TestFunction) -> float:
    """Midpoint discretization of (1/N) sum_j int phi(t, X_j) o dX_j."""
    t = ens.times
    t_mid = 0.5 * (t[:-1] + t[1:])
    x_mid = 0.5 * (ens.states[:, :-1, :] + ens.states[:, 1:, :])
    dx = ens.states[:, 1:, :] - ens.states[:, :-1, :]
    g = phi.profile(t_mid, x_mid)  # (N, M)
    return float((g * dx[..., phi.direction]).sum() / ens.n)


def current_pairing_ito_corrected(ens: PathEnsemble, phi: TestFunction) -> float:
    """Left-endpoint Ito sum plus the explicit trace correction.

    The correction, (eps^2 / 2N) sum_j sum_i sum_l d(phi_k)/dx_l
    (sigma sigma^T)_{lk} dt, converts the Ito pairing back to Stratonovich
    up to O(dt); it vanishes for eps = 0 or phi constant in x.
    """
    t = ens.times
    t_left = t[:-1]
    x_left = ens.states[:, :-1, :]
    dx = ens.states[:, 1:, :] - ens.states[:, :-1, :]
    g = phi.profile(t_left, x_left)
    ito = (g * dx[..., phi.direction]).sum() / ens.n
    eps = ens.config.epsilon
    if eps == 0.0:
        return float(ito)
    grad = phi.grad_x(t_left, x_left)  # (N, M, d)
    dt = ens.config.dt
    k = phi.direction
    corr = 0.0
    for i in range(ens.steps):
        mean = ens.states[:, i, :].mean(axis=0)
        sig = ens.model.sigma_from_mean(mean)
        a_col = (sig @ sig.T)[:, k]  # (d,)
        corr += float((grad[:, i, :] * a_col).sum())
    corr *= eps**2 * dt / (2.0 * ens.n)
    return float(ito + corr)


def dual_pseudo_norm(cur: CurrentCoefficients, s: SobolevIndex) -> float:
    """Truncated negative-Sobolev pseudo-norm of a coefficient set."""
    s.validate_for_dim(cur.grid.d)
    wn = (1.0 + cur.grid.n_values.astype(float) ** 2) ** (-s.s1)
    xi_sq = (cur.grid.xi_flat**2).sum(axis=1)
    wxi = cur.grid.xi_weights * (1.0 + xi_sq) ** (-s.s2)
    total = np.einsum("knp,n,p->", np.abs(cur.coeffs) ** 2, wn, wxi)
    return float(np.sqrt(total))


def current_distance(cur_a: CurrentCoefficients, cur_b: CurrentCoefficients, s: SobolevIndex) -> float:
    """Pseudo-norm of the coefficient difference; requires identical grids."""
    if not cur_a.grid.matches(cur_b.grid):
        raise GridMismatchError("coefficient sets live on different mode grids")
    diff = CurrentCoefficients(cur_a.coeffs - cur_b.coeffs, cur_a.grid, "stochastic")
    return dual_pseudo_norm(diff, s)


def predicted_mode_pairing(cur: CurrentCoefficients, phi: SingleMode) -> float:
    """Pairing of a windowed single mode read off the coefficient array.

    Valid when the window plateau covers [0, horizon]: the real (imaginary)
    part of Jhat at the mode equals the pairing with the cosine (sine) mode.
    """
    if abs(phi.n) > cur.grid.n_max:
        raise ValueError("time mode outside grid")
    n_idx = phi.n + cur.grid.n_max
    p_idx = cur.grid.xi_index(phi.xi)
    c = cur.coeffs[phi.direction, n_idx, p_idx]
    val = c.real if phi.part == "re" else c.imag
    return float(phi.amplitude * val)


def _gaussian_hat_on_grid(phi: GaussianBump, grid: ModeGrid) -> np.ndarray:
    """phi_hat(n, xi) = <e^k_{-n,-xi}, phi> on the grid, shape (n_count, Pd)."""
    span = grid.b - grid.a
    nt = 2049
    tq = np.linspace(phi.window.t_lo, phi.window.t_hi, nt)
    gt = phi.amplitude * phi.window.value(tq) * np.exp(-((tq - phi.t_center) ** 2) / (2 * phi.t_width**2))
    kernel = np.exp(-2j * np.pi * np.outer(grid.n_values, tq) / span)
    ghat_t = np.trapezoid(kernel * gt[None, :], tq, axis=1)  # (n_count,)
    xi = grid.xi_flat
    s2w = phi.x_width**2
    ghat_x = (
        (2.0 * np.pi * s2w) ** (grid.d / 2.0)
        * np.exp(-2.0 * np.pi**2 * s2w * (xi**2).sum(axis=1))
        * np.exp(-2j * np.pi * (xi @ phi.x_center))
    )
    return np.outer(ghat_t, ghat_x) / span


def test_function_sobolev_norm(
    phi: TestFunction,
    s: SobolevIndex,
    grid: ModeGrid,
    mode: str = "fourier",
    x_box: tuple[float, float] | None = None,
    x_points: int = 257,
    t_points: int = 161,
) -> float:
    """Positive-index Sobolev norm of a test function.

    ``fourier`` evaluates the mode-sum norm truncated to the grid;
    ``gagliardo1d`` (d = 1 only) evaluates the double-integral fractional
    form by nested trapezoid quadrature on a stated box, excluding the
    diagonal band |u - v| < one time spacing from the singular kernel.
    Both are truncated objects, meant for ratio and inequality tests.
    """
    s.validate_for_dim(grid.d)
    wn = (1.0 + grid.n_values.astype(float) ** 2) ** s.s1
    xi_sq = (grid.xi_flat**2).sum(axis=1)
    wxi_quad = grid.xi_weights
    wxi_pow = (1.0 + xi_sq) ** s.s2

    if mode == "fourier":
        if isinstance(phi, SingleMode):
            if phi.amplitude == 0.0:
                return 0.0
            n_idx = phi.n + grid.n_max
            if not 0 <= n_idx < grid.n_count:
                raise ValueError("time mode outside grid")
            p_idx = grid.xi_index(phi.xi)
            self_conjugate = phi.n == 0 and p_idx == grid.xi_index(-phi.xi)
            if self_conjugate:
                if phi.part == "im":
                    return 0.0
                masses = [(n_idx, p_idx, phi.amplitude)]
            else:
                masses = [
                    (n_idx, p_idx, phi.amplitude / 2.0),
                    (grid.n_count - 1 - n_idx, grid.xi_index(-phi.xi), phi.amplitude / 2.0),
                ]
            total = 0.0
            for ni, pi, mass in masses:
                total += mass**2 / wxi_quad[pi] * wn[ni] * wxi_pow[pi]
            return float(np.sqrt(total))
        if isinstance(phi, GaussianBump):
            if phi.amplitude == 0.0:
                return 0.0
            ghat = _gaussian_hat_on_grid(phi, grid)  # (n_count, Pd)
            total = np.einsum("np,n,p,p->", np.abs(ghat) ** 2, wn, wxi_quad, wxi_pow)
            return float(np.sqrt(total))
        raise UnsupportedTestFunctionError(f"fourier norm not defined for {type(phi).__name__}")

    if mode == "gagliardo1d":
        if grid.d != 1:
            raise UnsupportedTestFunctionError("gagliardo1d requires d = 1")
        if getattr(phi, "amplitude", 1.0) == 0.0:
            return 0.0
        if x_box is None:
            x_box = (-4.0 * grid.xi_max, 4.0 * grid.xi_max)
        tq = np.linspace(grid.a, grid.b, t_points)
        xq = np.linspace(x_box[0], x_box[1], x_points)
        vals = phi.profile(tq[:, None], xq[None, :, None])  # (Q, R)
        # spatial Fourier transform by quadrature on the stated box
        dxq = xq[1] - xq[0]
        wx = np.full(x_points, dxq)
        wx[0] = wx[-1] = dxq / 2.0
        kernel = np.exp(-2j * np.pi * np.outer(xq, grid.xi_axis))  # (R, P)
        fhat = (vals * wx[None, :]) @ kernel  # (Q, P)
        wxi = grid.xi_weights * (1.0 + grid.xi_axis**2) ** s.s2
        g = fhat * np.sqrt(wxi)[None, :]
        sq_norms = (np.abs(g) ** 2).sum(axis=1)  # ||phi(t_q, .)||_{s2}^2
        dt = tq[1] - tq[0]
        wt = np.full(t_points, dt)
        wt[0] = wt[-1] = dt / 2.0
        term_l2 = float((wt * sq_norms).sum())
        gram = g @ np.conj(g).T
        d2 = sq_norms[:, None] + sq_norms[None, :] - 2.0 * gram.real
        sep = np.abs(tq[:, None] - tq[None, :])
        mask = sep >= dt * (1.0 - 1e-12)
        with np.errstate(divide="ignore"):
            kern = np.where(mask, 1.0 / np.where(mask, sep, 1.0) ** (1.0 + 2.0 * s.s1), 0.0)
        seminorm = float((wt[:, None] * wt[None, :] * d2 * kern).sum())
        return float(np.sqrt(term_l2 + seminorm))

    raise ValueError(f"unknown norm mode {mode!r}")


def save_coefficients(cur: CurrentCoefficients, path: str | Path) -> None:
    """Text header plus flat interleaved little-endian complex array."""
    path = Path(path)
    g = cur.grid
    header = (
        "meanfield-ldp current coefficients\n"
        f"provenance: {cur.provenance}\n"
        f"d: {g.d}\nn_max: {g.n_max}\nxi_max: {g.xi_max!r}\nxi_points: {g.xi_points}\n"
        f"a: {g.a!r}\nb: {g.b!r}\nhorizon: {g.horizon!r}\n"
        "layout: complex128 little-endian, C-order (component, time-mode, flat-xi)\n"
    )
    Path(str(path) + ".header.txt").write_text(header)
    np.ascontiguousarray(cur.coeffs, dtype="<c16").tofile(path)


def load_coefficients(path: str | Path) -> CurrentCoefficients:
    header = Path(str(path) + ".header.txt").read_text().splitlines()
    fields = dict(line.split(": ", 1) for line in header[1:] if ": " in line)
    grid = ModeGrid(
        d=int(fields["d"]),
        n_max=int(fields["n_max"]),
        xi_max=float(fields["xi_max"]),
        xi_points=int(fields["xi_points"]),
        a=float(fields["a"]),
        b=float(fields["b"]),
        horizon=float(fields["horizon"]),
    )
    flat = np.fromfile(path, dtype="<c16")
    coeffs = flat.reshape(grid.d, grid.n_count, grid.xi_points**grid.d)
    return CurrentCoefficients(coeffs=coeffs, grid=grid, provenance=fields["provenance"])
