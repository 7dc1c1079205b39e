"""Linearized response of the perturbed correlation system around the
homogeneous equilibrium: the four linear operators acting on correlation
trajectories, their quadratic companions, per-frequency response blocks,
Neumann inversion of (1 - L3 - L4), and the fixed-point defect diagnostic.

All time integrals are trapezoidal on a shared uniform grid with the causal
kernel cut at tau = t.  The operators are exact Fourier multipliers in the
base point x, so they decompose into independent blocks per lattice frequency
zeta; frequency shifts xi -> xi + zeta wrap circularly, matching the torus
dynamics exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .equilibrium import (
    DispersionRelation,
    EquilibriumCorrelation,
    InteractionPotential,
    MomentumDistribution,
)
from .lattice import Grid, translate_values
from .dynamics import build_separations, correlation_kernel, equilibrium_modes


class InvertibilityError(RuntimeError):
    """Neumann inversion not certified: operator norm at or above one."""

    def __init__(self, norm: float):
        super().__init__(
            f"response operator norm {norm!r} >= 1; inversion not certified"
        )
        self.norm = norm


class NumericalDegeneracyError(RuntimeError):
    """Power iteration failed to converge within the step budget."""


class IncompleteInputError(ValueError):
    """A trajectory is missing data the diagnostic requires."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform quadrature grid 0 = t_0 < ... < t_{n_t} = T."""

    T: float
    n_t: int

    def __post_init__(self):
        if self.T <= 0 or self.n_t < 1:
            raise ValueError("time grid requires T > 0 and n_t >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.n_t

    @cached_property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_t + 1)

    @cached_property
    def causal_weights(self) -> np.ndarray:
        """W[n, m]: trapezoid weight of node m in the integral over [0, t_n]."""
        n = self.n_t + 1
        w = np.zeros((n, n))
        for row in range(1, n):
            w[row, : row + 1] = self.dt
            w[row, 0] = w[row, row] = 0.5 * self.dt
        return w

    @classmethod
    def from_times(cls, times) -> "TimeGrid":
        times = np.asarray(times, dtype=float)
        if times.size < 2 or abs(times[0]) > 1e-12:
            raise IncompleteInputError("need at least two checkpoints starting at t=0")
        steps = np.diff(times)
        if np.max(np.abs(steps - steps[0])) > 1e-9 * max(steps[0], 1e-30):
            raise IncompleteInputError("checkpoint times are not uniform")
        return cls(float(times[-1]), times.size - 1)


def _sep_key(z) -> tuple:
    return tuple(round(float(c), 9) for c in np.atleast_1d(z))


@dataclass
class VTrajectory:
    """Correlation perturbation V(x, z, t) sampled on lattice x, separation set z,
    uniform times t; values shape (n_t + 1, n_z) + grid.shape in position x."""

    grid: Grid
    separations: tuple
    time_grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        self.separations = tuple(
            tuple(float(c) for c in np.atleast_1d(z)) for z in self.separations
        )
        expected = (self.time_grid.n_t + 1, len(self.separations)) + self.grid.shape
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != expected:
            raise ValueError(f"V values shape {self.values.shape} != {expected}")

    @cached_property
    def hat(self) -> np.ndarray:
        """Transform over the base point x, same layout as ``values``."""
        return self.grid.forward_values(self.values)

    def sep_index(self, z) -> int:
        key = _sep_key(z)
        for i, s in enumerate(self.separations):
            if _sep_key(s) == key:
                return i
        raise KeyError(f"separation {z} not in trajectory")

    def with_values(self, values: np.ndarray) -> "VTrajectory":
        return VTrajectory(self.grid, self.separations, self.time_grid, values)

    def zeros_like(self) -> "VTrajectory":
        return self.with_values(np.zeros_like(self.values))

    def hermitian_defect(self) -> float:
        """Deviation from the Fourier reflection relation
        conj(Vhat(zeta, y)) = Vhat(-zeta, -y) e^{-i zeta . y}."""
        grid = self.grid
        vh = self.hat
        worst = 0.0
        for i, y in enumerate(self.separations):
            j = self.sep_index(tuple(-c for c in y))
            refl = vh[:, j]
            for axis in range(grid.d):
                refl = np.flip(refl, axis=axis - grid.d)
                refl = np.roll(refl, 1, axis=axis - grid.d)
            phase = np.exp(-1j * np.tensordot(np.asarray(y), grid.xi, axes=(0, 0)))
            worst = max(worst, float(np.max(np.abs(vh[:, i].conj() - refl * phase))))
        return worst


def vtrajectory_from_states(
    states, eq: EquilibriumCorrelation, separations, time_grid: TimeGrid | None = None
) -> VTrajectory:
    """Sample the correlation perturbation of checkpointed states."""
    if time_grid is None:
        time_grid = TimeGrid.from_times([s.t for s in states])
    grid = states[0].grid
    vals = np.stack(
        [correlation_kernel(s, eq, separations).values for s in states]
    )
    return VTrajectory(grid, separations, time_grid, vals)


def synthetic_v(
    grid: Grid,
    separations,
    time_grid: TimeGrid,
    seed: int,
    n_terms: int = 4,
    hermitian: bool = False,
) -> VTrajectory:
    """Smooth random trajectory for operator tests, samplable on any time grid."""
    rng = np.random.default_rng(seed)
    separations = tuple(tuple(float(c) for c in np.atleast_1d(z)) for z in separations)
    n_z = len(separations)
    kmax = min(4, grid.N // 4)
    raw = np.zeros((time_grid.n_t + 1, n_z) + grid.shape, dtype=complex)
    for _ in range(n_terms):
        mode = tuple(int(rng.integers(-kmax, kmax + 1)) for _ in range(grid.d))
        omega = rng.uniform(-2.0, 2.0)
        damp = rng.uniform(0.0, 0.5)
        amps = rng.normal(size=n_z) + 1j * rng.normal(size=n_z)
        pw = grid.plane_wave(mode)
        tprof = np.exp((1j * omega - damp) * time_grid.times)
        raw += np.einsum("t,z,...->tz...", tprof, amps, pw)
    if not hermitian:
        return VTrajectory(grid, separations, time_grid, raw)
    traj = VTrajectory(grid, separations, time_grid, raw)
    sym = np.empty_like(raw)
    for i, z in enumerate(separations):
        j = traj.sep_index(tuple(-c for c in z))
        shifted = translate_values(grid, raw[:, j], np.asarray(z))
        sym[:, i] = raw[:, i] + shifted.conj()
    return VTrajectory(grid, separations, time_grid, sym)


# -- Galilei-type propagator -----------------------------------------------------


@dataclass(frozen=True)
class GalileiPropagator:
    """Frequency-shifted group: multiplier exp(-i t (theta(. + xi) - theta - theta(xi))).

    Composed with the free group S it satisfies the exact lattice identity
    e^{i theta(xi) t} S(t)(e^{i xi x} U) = e^{i xi x} T_xi(t) S(t) U.
    """

    theta: DispersionRelation
    mode: tuple

    @cached_property
    def _shifted_minus_theta(self) -> np.ndarray:
        shift = np.roll(
            self.theta.theta, tuple(-m for m in self.mode), axis=tuple(range(self.theta.grid.d))
        )
        return shift - self.theta.theta

    def symbol(self, t: float) -> np.ndarray:
        return np.exp(
            -1j * t * (self._shifted_minus_theta - self.theta.theta[self.mode])
        )

    def apply(self, values: np.ndarray, t: float) -> np.ndarray:
        grid = self.theta.grid
        axes = tuple(range(-grid.d, 0))
        return np.fft.ifftn(self.symbol(t) * np.fft.fftn(values, axes=axes), axes=axes)


# -- mode-coefficient trajectories (random-field valued outputs) -----------------


@dataclass
class ModeFieldTrajectory:
    """Random-field trajectory in the finite-rank representation: one complex
    coefficient field per unit-variance Gaussian mode.

    ``modes[k]`` is the lattice index of the equilibrium mode the coefficient
    multiplies, or None for an independent perturbation mode.
    """

    grid: Grid
    time_grid: TimeGrid
    modes: tuple
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        expected = (len(self.modes), self.time_grid.n_t + 1) + self.grid.shape
        if self.values.shape != expected:
            raise ValueError(f"mode trajectory shape {self.values.shape} != {expected}")

    def l2_omega(self) -> np.ndarray:
        """Pointwise sqrt(E|.|^2), shape (n_t + 1,) + grid.shape."""
        return np.sqrt(np.sum(np.abs(self.values) ** 2, axis=0))

    def with_values(self, values) -> "ModeFieldTrajectory":
        return ModeFieldTrajectory(self.grid, self.time_grid, self.modes, values)


def trajectory_l2_norms(grid: Grid, diff: np.ndarray, dt: float) -> dict:
    """sup-in-time and L2-in-time of the l2(omega, x) norm of a mode-stacked
    difference array of shape (n_modes, n_t + 1) + grid.shape."""
    per_time = np.sqrt(
        grid.dx**grid.d
        * np.sum(np.abs(diff) ** 2, axis=(0,) + tuple(range(-grid.d, 0)))
    )
    l2t = float(np.sqrt(np.sum(dt * per_time**2)))
    return {"sup_t": float(per_time.max()), "l2_t": l2t, "curve": per_time}


# -- internal helpers -------------------------------------------------------------


def _mass_list(w: InteractionPotential):
    if w.density is not None:
        raise ValueError(
            "response operators take point-mass potentials; tabulate the density "
            "part as extra point masses if it must enter"
        )
    return [(np.asarray(y, dtype=float), a) for y, a in w.point_masses]


def _causal_apply(weights: np.ndarray, kernel_slices, source: np.ndarray) -> np.ndarray:
    """out[n] = sum_{m <= n} W[n, m] kernel[n - m] source[m] along the first axis."""
    n = weights.shape[0]
    tail = np.broadcast_shapes(kernel_slices.shape[1:], source.shape[1:])
    out = np.zeros((n,) + tail, dtype=complex)
    for row in range(1, n):
        wf = weights[row, : row + 1]
        seg = kernel_slices[row::-1]
        out[row] = np.einsum("m,m...->...", wf, seg * source[: row + 1])
    return out


def _free_multiplier_table(theta_vals: np.ndarray, times: np.ndarray) -> np.ndarray:
    return np.exp(-1j * np.multiply.outer(times, theta_vals))


# -- L1 / L2: field-valued linear terms -------------------------------------------


def _field_linear_term(
    V: VTrajectory,
    w: InteractionPotential,
    g: MomentumDistribution,
    theta: DispersionRelation,
    modes,
    which: str,
    formula: bool,
) -> ModeFieldTrajectory:
    grid = V.grid
    tg = V.time_grid
    axes = tuple(range(-grid.d, 0))
    weights = tg.causal_weights
    occ = g.occupations

    if which == "L1":
        sym = w.conv_symbol(grid)
        src_pos = np.fft.ifftn(
            sym * np.fft.fftn(V.values[:, V.sep_index((0.0,) * grid.d)], axes=axes),
            axes=axes,
        )
        sources = [(1.0, src_pos)]
        sign = -1j
    elif which == "L2":
        sources = []
        for y, a in _mass_list(w):
            sources.append((a, V.values[:, V.sep_index(y)], y))
        sign = 1j
    else:
        raise ValueError(which)

    out = np.zeros((len(modes), tg.n_t + 1) + grid.shape, dtype=complex)
    theta_free = _free_multiplier_table(theta.theta, tg.times)
    for ki, mode in enumerate(modes):
        mode = tuple(mode)
        nk = occ[mode]
        pw = grid.plane_wave(mode)
        th_k = theta.theta[mode]
        shifted = np.roll(theta.theta, tuple(-m for m in mode), axis=tuple(range(grid.d)))
        acc = np.zeros((tg.n_t + 1,) + grid.shape, dtype=complex)
        for entry in sources:
            if which == "L1":
                a, src = entry
                zphase = 1.0
            else:
                a, src, y = entry
                zphase = np.exp(1j * float(np.dot(grid.mode_xi(mode), y)))
            if formula:
                # combined multiplier of T_xi(s) S(s): exp(-i s (theta(. + xi) - theta(xi)))
                table = _free_multiplier_table(shifted - th_k, tg.times)
                fsrc = np.fft.fftn(src, axes=axes)
                conv_hat = _causal_apply(weights, table, fsrc)
                term = np.fft.ifftn(conv_hat, axes=axes)
                term = np.einsum("t,t...->t...", np.exp(-1j * th_k * tg.times), term)
                acc += a * zphase * pw * term
            else:
                # direct Duhamel: S(t - tau) applied to the modulated product
                prod = np.einsum(
                    "t,t...->t...", np.exp(-1j * th_k * tg.times), src
                ) * pw
                fsrc = np.fft.fftn(prod, axes=axes)
                conv_hat = _causal_apply(weights, theta_free, fsrc)
                acc += a * zphase * np.fft.ifftn(conv_hat, axes=axes)
        out[ki] = sign * np.sqrt(nk) * acc
    return ModeFieldTrajectory(grid, tg, tuple(tuple(m) for m in modes), out)


def apply_L1(V, w, g, theta, modes=None) -> ModeFieldTrajectory:
    """Field response to the diagonal correlation through the direct potential,
    evaluated with the frequency-shifted propagator representation."""
    modes = modes if modes is not None else equilibrium_modes(g)
    return _field_linear_term(V, w, g, theta, modes, "L1", formula=True)


def apply_L2(V, w, g, theta, modes=None) -> ModeFieldTrajectory:
    """Field response to the off-diagonal correlation through the exchange
    kernel, evaluated with the frequency-shifted propagator representation."""
    modes = modes if modes is not None else equilibrium_modes(g)
    return _field_linear_term(V, w, g, theta, modes, "L2", formula=True)


def duhamel_L1(V, w, g, theta, modes=None) -> ModeFieldTrajectory:
    """Independent evaluation of the same integral as :func:`apply_L1` with the
    free group acting on the modulated product."""
    modes = modes if modes is not None else equilibrium_modes(g)
    return _field_linear_term(V, w, g, theta, modes, "L1", formula=False)


def duhamel_L2(V, w, g, theta, modes=None) -> ModeFieldTrajectory:
    modes = modes if modes is not None else equilibrium_modes(g)
    return _field_linear_term(V, w, g, theta, modes, "L2", formula=False)


# -- L3 / L4: correlation-valued linear terms --------------------------------------


def _difference_kernels(
    g: MomentumDistribution,
    theta: DispersionRelation,
    zeta_index: tuple,
    phases: np.ndarray,
    times: np.ndarray,
) -> np.ndarray:
    """K[p, s] = dxi^d sum_xi (g(xi + zeta) - g(xi)) e^{-i (theta(xi+zeta) - theta(xi)) t_s}
    phase_p(xi), for a family of xi-phase rows ``phases`` (p indexes them)."""
    grid = g.grid
    ax = tuple(range(grid.d))
    shift = tuple(-int(c) for c in zeta_index)
    dg = (np.roll(g.values, shift, axis=ax) - g.values).ravel()
    dth = (np.roll(theta.theta, shift, axis=ax) - theta.theta).ravel()
    osc = np.exp(-1j * np.multiply.outer(times, dth))
    return grid.dxi**grid.d * np.einsum("px,sx->ps", phases * dg, osc)


def _sep_phase_rows(grid: Grid, rows) -> np.ndarray:
    """Rows exp(i xi . v) over the flattened lattice for each vector v."""
    xi_flat = grid.xi.reshape(grid.d, -1)
    mat = np.asarray(rows, dtype=float)
    return np.exp(1j * mat @ xi_flat)


def _l34_zeta_kernels(w, g, theta, time_grid, separations, zeta_index):
    """Per-zeta causal kernels of L3 and L4 against V(zeta, z, tau).

    Returns (mass locations+weights, K) where K[y_out, z_in, s] multiplies the
    source at separation z_in; column 0 is the diagonal (L3) channel.
    """
    grid = g.grid
    what = w.hat(grid)
    masses = _mass_list(w)
    seps = [np.asarray(z, dtype=float) for z in separations]
    rows = []
    channels = [("diag", None, 1j * (2 * np.pi) ** (grid.d / 2.0) * what[tuple(zeta_index)])]
    for y, a in masses:
        channels.append(("mass", y, -1j * a))
    for yv in seps:
        for _, zv, _ in channels:
            rows.append((-yv) if zv is None else (zv - yv))
    phases = _sep_phase_rows(grid, rows)
    K = _difference_kernels(g, theta, zeta_index, phases, time_grid.times)
    K = K.reshape(len(seps), len(channels), time_grid.n_t + 1)
    return channels, K


def _apply_l34(V: VTrajectory, w, g, theta, include=("L3", "L4")) -> VTrajectory:
    grid = V.grid
    tg = V.time_grid
    weights = tg.causal_weights
    vhat = V.hat
    zero_idx = V.sep_index((0.0,) * grid.d)
    out_hat = np.zeros_like(vhat)
    for zeta_index in np.ndindex(*grid.shape):
        channels, K = _l34_zeta_kernels(w, g, theta, tg, V.separations, zeta_index)
        col = (slice(None),) + zeta_index
        acc = np.zeros((tg.n_t + 1, len(V.separations)), dtype=complex)
        for ci, (kind, zv, coeff) in enumerate(channels):
            if kind == "diag" and "L3" not in include:
                continue
            if kind == "mass" and "L4" not in include:
                continue
            src = vhat[:, zero_idx][col] if kind == "diag" else vhat[:, V.sep_index(zv)][col]
            conv = _causal_apply(weights, K[:, ci].T, src[:, None])
            acc += coeff * conv * 1.0
        out_hat[(slice(None), slice(None)) + zeta_index] = acc
    return V.with_values(grid.inverse_values(out_hat))


def apply_L3(V, w, g, theta) -> VTrajectory:
    """Correlation response through the direct channel: acts on V(., 0, .)."""
    return _apply_l34(V, w, g, theta, include=("L3",))


def apply_L4(V, w, g, theta) -> VTrajectory:
    """Correlation response through the exchange channel: acts on V at the
    separations carrying the potential's point masses."""
    return _apply_l34(V, w, g, theta, include=("L4",))


def apply_L3_plus_L4(V, w, g, theta) -> VTrajectory:
    return _apply_l34(V, w, g, theta)


def pair_with_equilibrium(
    q: ModeFieldTrajectory, g: MomentumDistribution, theta: DispersionRelation, separations
) -> VTrajectory:
    """E[conj(Y(x+y)) q(x)] + E[conj(q(x+y)) Y(x)] in the finite-rank representation.

    Used to lift field-valued terms (L1/L2 outputs, quadratic terms) to
    correlation space; only equilibrium modes pair with the Gaussian
    amplitudes of Y.
    """
    grid = q.grid
    tg = q.time_grid
    occ = g.occupations
    out = np.zeros((tg.n_t + 1, len(separations)) + grid.shape, dtype=complex)
    for ki, mode in enumerate(q.modes):
        if mode is None:
            continue
        nk = occ[tuple(mode)]
        if nk == 0.0:
            continue
        pw = grid.plane_wave(mode)
        ycoef = np.sqrt(nk) * np.einsum(
            "t,...->t...", np.exp(-1j * theta.theta[tuple(mode)] * tg.times), pw
        )
        qk = q.values[ki]
        for iy, y in enumerate(separations):
            yv = np.asarray(y, dtype=float)
            out[:, iy] += translate_values(grid, ycoef, yv).conj() * qk
            out[:, iy] += translate_values(grid, qk, yv).conj() * ycoef
    dummy = VTrajectory(
        grid,
        separations,
        tg,
        out,
    )
    return dummy


# -- quadratic terms ----------------------------------------------------------------


def apply_Q(k: int, Z: ModeFieldTrajectory, V: VTrajectory, w, g, theta):
    """Quadratic Duhamel terms: k in {1, 2} returns a field trajectory, k in
    {3, 4} the paired correlation trajectory."""
    if k not in (1, 2, 3, 4):
        raise ValueError("quadratic term index must be 1..4")
    if k in (3, 4):
        inner = apply_Q(k - 2, Z, V, w, g, theta)
        return pair_with_equilibrium(inner, g, theta, V.separations)

    grid = Z.grid
    tg = Z.time_grid
    if abs(tg.T - V.time_grid.T) > 1e-12 or tg.n_t != V.time_grid.n_t:
        raise IncompleteInputError("Z and V live on different time grids")
    axes = tuple(range(-grid.d, 0))
    weights = tg.causal_weights
    table = _free_multiplier_table(theta.theta, tg.times)

    if k == 1:
        sym = w.conv_symbol(grid)
        conv = np.fft.ifftn(
            sym * np.fft.fftn(V.values[:, V.sep_index((0.0,) * grid.d)], axes=axes),
            axes=axes,
        )
        sign = -1j
    else:
        sign = 1j

    out = np.zeros_like(Z.values)
    for j in range(len(Z.modes)):
        zj = Z.values[j]
        if k == 1:
            prod = conv * zj
        else:
            prod = np.zeros_like(zj)
            for y, a in _mass_list(w):
                prod += a * V.values[:, V.sep_index(y)] * translate_values(grid, zj, y)
        fsrc = np.fft.fftn(prod, axes=axes)
        conv_hat = _causal_apply(weights, table, fsrc)
        out[j] = sign * np.fft.ifftn(conv_hat, axes=axes)
    return Z.with_values(out)


# -- response blocks, operator norm, Neumann inversion ------------------------------


@dataclass(frozen=True)
class ResponseBlock:
    """Matrix of the correlation response at one base-point frequency zeta,
    acting on the stacked vector V(zeta, z, t) with index z * (n_t+1) + t."""

    zeta_index: tuple
    zeta: tuple
    matrix: np.ndarray
    tag: str = "L3+L4"


def assemble_response_block(
    zeta_index,
    w: InteractionPotential,
    g: MomentumDistribution,
    theta: DispersionRelation,
    time_grid: TimeGrid,
    separations,
    tag: str = "L3+L4",
) -> ResponseBlock:
    grid = g.grid
    zeta_index = tuple(int(c) for c in zeta_index)
    separations = tuple(tuple(float(c) for c in np.atleast_1d(z)) for z in separations)
    n_t1 = time_grid.n_t + 1
    n_z = len(separations)
    weights = time_grid.causal_weights
    channels, K = _l34_zeta_kernels(w, g, theta, time_grid, separations, zeta_index)
    zero_col = next(
        i for i, z in enumerate(separations) if max(abs(c) for c in z) < 1e-12
    )
    keys = [_sep_key(z) for z in separations]
    mat = np.zeros((n_z * n_t1, n_z * n_t1), dtype=complex)
    for ci, (kind, zv, coeff) in enumerate(channels):
        if kind == "diag" and "L3" not in tag:
            continue
        if kind == "mass" and "L4" not in tag:
            continue
        col = zero_col if kind == "diag" else keys.index(_sep_key(zv))
        # out[y, n] += coeff * W[n, m] K[y, ci, n - m] src[col, m]
        for iy in range(n_z):
            block = np.zeros((n_t1, n_t1), dtype=complex)
            for n in range(1, n_t1):
                block[n, : n + 1] = weights[n, : n + 1] * K[iy, ci, n::-1]
            mat[iy * n_t1 : (iy + 1) * n_t1, col * n_t1 : (col + 1) * n_t1] += (
                coeff * block
            )
    zeta = tuple(float(c) for c in grid.mode_xi(zeta_index))
    return ResponseBlock(zeta_index, zeta, mat, tag)


def _power_iteration_norm(mat: np.ndarray, tol: float = 1e-8, max_iter: int = 10_000) -> float:
    n = mat.shape[1]
    fro = float(np.linalg.norm(mat))
    if fro == 0.0:
        return 0.0
    v = np.ones(n) + 1e-3 * np.arange(n) / n
    v = v / np.linalg.norm(v)
    lam_prev = 0.0
    for _ in range(max_iter):
        bv = mat @ v
        mv = mat.conj().T @ bv
        lam = float(np.real(np.vdot(v, mv)))
        nrm = np.linalg.norm(mv)
        if nrm == 0.0:
            return 0.0
        v = mv / nrm
        if abs(lam - lam_prev) <= tol * max(lam, 1e-300):
            return float(np.sqrt(max(lam, 0.0)))
        lam_prev = lam
    raise NumericalDegeneracyError(
        f"power iteration did not converge within {max_iter} steps"
    )


@dataclass(frozen=True)
class OperatorNormReport:
    norm: float
    per_zeta: tuple  # rows (zeta_index, |zeta|, block norm)


def response_operator_norm(
    w, g, theta, time_grid: TimeGrid, separations, tol: float = 1e-8
) -> OperatorNormReport:
    """max over zeta of the spectral norm of the L3 + L4 block."""
    rows = []
    worst = 0.0
    for zeta_index in np.ndindex(*g.grid.shape):
        block = assemble_response_block(zeta_index, w, g, theta, time_grid, separations)
        nrm = _power_iteration_norm(block.matrix, tol=tol)
        rows.append((zeta_index, float(np.linalg.norm(block.zeta)), nrm))
        worst = max(worst, nrm)
    return OperatorNormReport(worst, tuple(rows))


def _flat_norm(values: np.ndarray) -> float:
    return float(np.linalg.norm(values.ravel()))


@dataclass(frozen=True)
class InversionResult:
    solution: VTrajectory
    terms: int
    residual: float
    operator_norm: float


def invert_response(
    rhs: VTrajectory,
    w,
    g,
    theta,
    max_terms: int = 200,
    increment_tol: float = 1e-10,
    residual_tol: float = 1e-8,
) -> InversionResult:
    """Solve (1 - L3 - L4) V = rhs by the Neumann series.

    Requires the computed operator norm below one (the discrete contraction
    surrogate of the smallness regime); raises otherwise.  The certified
    relative residual of the returned solution is below ``residual_tol``.
    """
    report = response_operator_norm(w, g, theta, rhs.time_grid, rhs.separations)
    if report.norm >= 1.0:
        raise InvertibilityError(report.norm)
    scale = _flat_norm(rhs.values)
    if scale == 0.0:
        return InversionResult(rhs.zeros_like(), 0, 0.0, report.norm)
    acc = rhs.values.copy()
    term = rhs
    terms = 0
    for terms in range(1, max_terms + 1):
        term = _apply_l34(term, w, g, theta)
        acc += term.values
        if _flat_norm(term.values) <= increment_tol * scale:
            break
    solution = rhs.with_values(acc)
    applied = _apply_l34(solution, w, g, theta)
    residual = _flat_norm(solution.values - applied.values - rhs.values) / scale
    if residual > residual_tol:
        raise NumericalDegeneracyError(
            f"Neumann residual {residual!r} above tolerance after {terms} terms"
        )
    return InversionResult(solution, terms, residual, report.norm)


# -- fixed-point defect ---------------------------------------------------------------


def _free_evolution(grid: Grid, theta, fields0: np.ndarray, times: np.ndarray) -> np.ndarray:
    """S(t) applied to each initial coefficient field, stacked over times."""
    axes = tuple(range(-grid.d, 0))
    hat0 = np.fft.fftn(fields0, axes=axes)
    table = np.exp(-1j * np.multiply.outer(times, theta.theta))
    return np.fft.ifftn(hat0[:, None] * table[None], axes=axes)


@dataclass(frozen=True)
class FixedPointReport:
    """Defect of the coupled fixed-point identities on a stored trajectory.

    ``z_defect``/``v_defect`` measure the full identities; the ``*_linear``
    variants omit the quadratic terms, so they track the size of the
    quadratic contribution itself.
    """

    z_defect: dict
    z_defect_linear: dict
    v_defect: dict
    v_defect_linear: dict
    quadratic_norm: float


def fixed_point_residual(
    states,
    w: InteractionPotential,
    g: MomentumDistribution,
    theta: DispersionRelation,
    eq: EquilibriumCorrelation,
    separations,
) -> FixedPointReport:
    """Evaluate both sides of the coupled Duhamel identities on checkpoints.

    The defect is pure discretization error (trajectory integrator plus
    trapezoid quadrature of the memory integrals) and shrinks under time-grid
    refinement.
    """
    from .dynamics import perturbation_coefficients

    if not states:
        raise IncompleteInputError("no checkpoints supplied")
    grid = states[0].grid
    tg = TimeGrid.from_times([s.t for s in states])
    modes = states[0].eq_modes
    if all(m is None for m in modes):
        raise IncompleteInputError("states carry no equilibrium mode bookkeeping")

    coeffs = np.stack([perturbation_coefficients(s, theta) for s in states], axis=1)
    Z = ModeFieldTrajectory(grid, tg, modes, coeffs)
    V = vtrajectory_from_states(states, eq, separations, tg)

    # field-side identity
    free_z = _free_evolution(grid, theta, coeffs[:, 0], tg.times)
    eq_mode_list = [m for m in modes if m is not None]
    l1 = apply_L1(V, w, g, theta, eq_mode_list)
    l2 = apply_L2(V, w, g, theta, eq_mode_list)
    linear_z = np.zeros_like(coeffs)
    for src in (l1, l2):
        for ki, mode in enumerate(src.modes):
            j = modes.index(mode)
            linear_z[j] += src.values[ki]
    q1 = apply_Q(1, Z, V, w, g, theta)
    q2 = apply_Q(2, Z, V, w, g, theta)
    quad_z = q1.values + q2.values

    resid_linear = coeffs - free_z - linear_z
    resid_total = resid_linear - quad_z
    z_defect = trajectory_l2_norms(grid, resid_total, tg.dt)
    z_defect_linear = trajectory_l2_norms(grid, resid_linear, tg.dt)

    # correlation-side identity
    zcoef0 = ModeFieldTrajectory(grid, tg, modes, _free_evolution(grid, theta, coeffs[:, 0], tg.times))
    free_v = pair_with_equilibrium(zcoef0, g, theta, V.separations)
    l34 = apply_L3_plus_L4(V, w, g, theta)
    q3 = apply_Q(3, Z, V, w, g, theta)
    q4 = apply_Q(4, Z, V, w, g, theta)
    zz = np.zeros_like(V.values)
    for iy, y in enumerate(V.separations):
        yv = np.asarray(y, dtype=float)
        shifted = np.stack([translate_values(grid, cj, yv) for cj in coeffs])
        zz[:, iy] = np.einsum("jt...,jt...->t...", shifted.conj(), coeffs)

    vres_linear = V.values - free_v.values - l34.values - zz
    vres_total = vres_linear - q3.values - q4.values
    v_defect = trajectory_l2_norms(grid, np.moveaxis(vres_total, 1, 0), tg.dt)
    v_defect_linear = trajectory_l2_norms(grid, np.moveaxis(vres_linear, 1, 0), tg.dt)

    quad_norm = trajectory_l2_norms(grid, quad_z, tg.dt)["sup_t"]
    return FixedPointReport(
        {k: v for k, v in z_defect.items() if k != "curve"},
        {k: v for k, v in z_defect_linear.items() if k != "curve"},
        {k: v for k, v in v_defect.items() if k != "curve"},
        {k: v for k, v in v_defect_linear.items() if k != "curve"},
        quad_norm,
    )
