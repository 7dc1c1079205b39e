"""Nonlinear evolution of the mean-field equation with direct and exchange
terms, in two backends: a finite-rank orbital ensemble (exact expectations)
and a Monte Carlo realization ensemble (sampled expectations).

Time stepping is Strang splitting: exact kinetic multiplier half-steps around
a potential step that freezes the density and correlation kernel at a
midpoint prediction and applies the Cayley (implicit midpoint) propagator of
the frozen self-adjoint operator.  The Cayley step is exactly unitary, so
per-orbital mass and pairwise inner products are conserved to solver
tolerance; accuracy is second order and limited by the single midpoint sweep.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .equilibrium import (
    DispersionRelation,
    EquilibriumCorrelation,
    InteractionPotential,
    MomentumDistribution,
)
from .lattice import Grid, translate_values

_CHUNK_BUDGET = 1 << 21  # complex entries per pairwise-product block


class BlowUpError(RuntimeError):
    """Evolution produced non-finite values or a diverging potential step."""

    def __init__(self, message: str, last_good_time: float):
        super().__init__(f"{message} (last good time t={last_good_time!r})")
        self.last_good_time = last_good_time


@dataclass(frozen=True)
class OrbitalState:
    """Finite-rank ensemble: orbitals u_j with occupations n_j.

    ``eq_modes[j]`` records the lattice mode index of orbitals that started as
    equilibrium plane waves (None for perturbation orbitals); it is what lets
    diagnostics reconstruct the perturbation relative to the freely rotating
    equilibrium.
    """

    grid: Grid
    t: float
    orbitals: np.ndarray
    occupations: np.ndarray
    eq_modes: tuple = ()

    def __post_init__(self):
        orb = np.asarray(self.orbitals, dtype=complex)
        occ = np.atleast_1d(np.asarray(self.occupations, dtype=float))
        if orb.shape != (occ.size,) + self.grid.shape:
            raise ValueError("orbital stack shape does not match occupations/grid")
        if np.any(occ < 0):
            raise ValueError("occupations must be nonnegative")
        object.__setattr__(self, "orbitals", orb)
        object.__setattr__(self, "occupations", occ)
        modes = self.eq_modes or (None,) * occ.size
        if len(modes) != occ.size:
            raise ValueError("eq_modes length does not match orbital count")
        object.__setattr__(self, "eq_modes", tuple(modes))

    @property
    def fields(self) -> np.ndarray:
        return self.orbitals

    def with_fields(self, fields: np.ndarray, t: float) -> "OrbitalState":
        return replace(self, orbitals=fields, t=t)


@dataclass(frozen=True)
class RealizationState:
    """Monte Carlo ensemble of field realizations sharing one seed lineage."""

    grid: Grid
    t: float
    realizations: np.ndarray
    seed: int

    def __post_init__(self):
        re = np.asarray(self.realizations, dtype=complex)
        if re.ndim != self.grid.d + 1 or re.shape[1:] != self.grid.shape:
            raise ValueError("realization stack shape does not match grid")
        object.__setattr__(self, "realizations", re)

    @property
    def M(self) -> int:
        return self.realizations.shape[0]

    @property
    def fields(self) -> np.ndarray:
        return self.realizations

    @property
    def occupations(self) -> np.ndarray:
        return np.full(self.M, 1.0 / self.M)

    def with_fields(self, fields: np.ndarray, t: float) -> "RealizationState":
        return replace(self, realizations=fields, t=t)


def density(state) -> np.ndarray:
    """rho(x): occupation-weighted ensemble density."""
    return np.einsum("j,j...->...", state.occupations, np.abs(state.fields) ** 2)


def total_mass(state) -> float:
    """dx^d sum_x rho(x), the conserved total mass."""
    g = state.grid
    return float(g.dx**g.d * np.sum(density(state)))


def orbital_masses(state) -> np.ndarray:
    g = state.grid
    return g.dx**g.d * np.sum(np.abs(state.fields) ** 2, axis=tuple(range(-g.d, 0)))


class MeanFieldOperator:
    """Frozen mean-field potential operator: direct multiplier minus exchange.

    The exchange part applies the kernel w(x-y) k(x,y) built from the frozen
    effective fields; for realization ensembles larger than the lattice the
    empirical kernel is eigendecomposed first, which is algebraically exact.
    """

    def __init__(self, grid: Grid, conv_symbol: np.ndarray, eff_fields, eff_occ):
        self.grid = grid
        self.conv_symbol = conv_symbol
        self.eff_fields = eff_fields
        self.eff_occ = eff_occ
        rho = np.einsum("j,j...->...", eff_occ, np.abs(eff_fields) ** 2)
        fft_axes = tuple(range(-grid.d, 0))
        self.direct = np.fft.ifftn(
            conv_symbol * np.fft.fftn(rho, axes=fft_axes), axes=fft_axes
        ).real

    def exchange(self, targets: np.ndarray, workers: int = 1) -> np.ndarray:
        """Exchange term applied to a stack of target fields."""
        grid = self.grid
        axes = tuple(range(-grid.d, 0))
        targets = np.asarray(targets)
        single = targets.ndim == grid.d
        tgt = targets[None] if single else targets
        n_eff = self.eff_fields.shape[0]
        chunk = max(1, _CHUNK_BUDGET // max(1, n_eff * grid.nsites))
        starts = list(range(0, tgt.shape[0], chunk))

        def run(start):
            block = tgt[start : start + chunk]
            prod = self.eff_fields.conj()[:, None] * block[None]
            conv = np.fft.ifftn(
                self.conv_symbol * np.fft.fftn(prod, axes=axes), axes=axes
            )
            return np.einsum("j,j...,jm...->m...", self.eff_occ, self.eff_fields, conv)

        if workers > 1 and len(starts) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                blocks = list(pool.map(run, starts))
        else:
            blocks = [run(s) for s in starts]
        out = np.concatenate(blocks, axis=0)
        return out[0] if single else out

    def apply(self, targets: np.ndarray, workers: int = 1) -> np.ndarray:
        """(w * rho) u - exchange(u) for each target field u."""
        return self.direct * targets - self.exchange(targets, workers)


def _effective_ensemble(state) -> tuple:
    fields, occ = state.fields, state.occupations
    if isinstance(state, RealizationState) and state.M > state.grid.nsites:
        flat = fields.reshape(state.M, -1)
        kernel = flat.T @ flat.conj() / state.M
        kernel = 0.5 * (kernel + kernel.conj().T)
        lam, vecs = np.linalg.eigh(kernel)
        keep = lam > 1e-14 * max(lam[-1], 0.0)
        occ = lam[keep]
        fields = np.ascontiguousarray(vecs[:, keep].T).reshape((-1,) + state.grid.shape)
    return fields, occ


def mean_field_operator(state, potential: InteractionPotential) -> MeanFieldOperator:
    sym = potential.conv_symbol(state.grid)
    eff_fields, eff_occ = _effective_ensemble(state)
    return MeanFieldOperator(state.grid, sym, eff_fields, eff_occ)


def direct_term(state, potential: InteractionPotential) -> np.ndarray:
    """(w * rho)(x) for the state's ensemble density."""
    return mean_field_operator(state, potential).direct


def exchange_apply(state, potential: InteractionPotential, target: np.ndarray) -> np.ndarray:
    """Exchange term sum_j n_j u_j(x) [w * (conj(u_j) target)](x)."""
    return mean_field_operator(state, potential).exchange(target)


def _cayley_step(
    op: MeanFieldOperator,
    dt: float,
    fields: np.ndarray,
    t_ref: float,
    workers: int,
    tol: float = 1e-14,
    max_iter: int = 200,
) -> np.ndarray:
    """Solve (1 + i dt/2 A) u+ = (1 - i dt/2 A) u by fixed-point iteration.

    The Cayley transform of the self-adjoint frozen operator is exactly
    unitary; divergence of the iteration signals a time step too large for
    the potential magnitude and is reported as a blow-up.
    """
    half = 0.5j * dt
    rhs = fields - half * op.apply(fields, workers)
    out = rhs
    scale = float(np.sqrt(np.sum(np.abs(rhs) ** 2))) or 1.0
    prev_inc = math.inf
    growth = 0
    for _ in range(max_iter):
        nxt = rhs - half * op.apply(out, workers)
        inc = float(np.sqrt(np.sum(np.abs(nxt - out) ** 2)))
        out = nxt
        if inc <= tol * scale:
            return out
        if inc > prev_inc and inc > 100 * tol * scale:
            growth += 1
            if growth >= 3:
                raise BlowUpError(
                    "potential step iteration diverges; reduce dt", t_ref
                )
        else:
            growth = 0
        prev_inc = inc
    raise BlowUpError("potential step iteration failed to converge", t_ref)


def step_strang(state, potential: InteractionPotential, dt: float, workers: int = 1):
    """One Strang step: exact kinetic half-steps around a unitary potential step."""
    if dt == 0 or not np.isfinite(dt):
        raise ValueError("dt must be a nonzero finite real number")
    grid = state.grid
    axes = tuple(range(-grid.d, 0))
    kin_half = np.exp(-0.5j * dt * grid.xi_sq)

    fields = np.fft.ifftn(kin_half * np.fft.fftn(state.fields, axes=axes), axes=axes)
    if not potential.is_zero:
        op0 = mean_field_operator(state.with_fields(fields, state.t), potential)
        mid = _cayley_step(op0, dt / 2.0, fields, state.t, workers)
        op_mid = mean_field_operator(state.with_fields(mid, state.t), potential)
        fields = _cayley_step(op_mid, dt, fields, state.t, workers)
    fields = np.fft.ifftn(kin_half * np.fft.fftn(fields, axes=axes), axes=axes)
    return state.with_fields(fields, state.t + dt)


@dataclass
class Trajectory:
    """Checkpointed states plus observer time series from one evolution."""

    grid: Grid
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    observer_rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def record(self, state, observers: dict) -> None:
        self.times.append(state.t)
        self.states.append(state)
        for name in sorted(observers):
            self.observer_rows.append((state.t, name, float(observers[name](state))))

    def series(self, name: str) -> np.ndarray:
        rows = [(t, v) for t, n, v in self.observer_rows if n == name]
        return np.array(rows)


def evolve(
    state,
    potential: InteractionPotential,
    T: float,
    dt: float,
    observers: dict | None = None,
    stride: int = 1,
    workers: int = 1,
) -> Trajectory:
    """Evolve to time t0 + T recording checkpoints every ``stride`` steps.

    dt may be negative (time-reversed evolution); T and dt must describe an
    integer number of steps.  Non-finite field values raise a blow-up error
    carrying the last checkpointed time.
    """
    n_steps = int(round(T / dt))
    if n_steps < 0 or abs(n_steps * dt - T) > 1e-9 * max(abs(T), abs(dt)):
        raise ValueError(f"T={T} is not an integer multiple of dt={dt}")
    observers = observers or {}
    traj = Trajectory(state.grid, meta={"dt": dt, "T": T, "stride": stride})
    traj.record(state, observers)
    last_good = t0 = state.t
    for step in range(1, n_steps + 1):
        state = step_strang(state, potential, dt, workers)
        # rebuild the clock from t0 so checkpoint grids stay exactly uniform
        state = state.with_fields(state.fields, t0 + step * dt)
        if not np.all(np.isfinite(state.fields.view(float))):
            raise BlowUpError("non-finite field values", last_good)
        if step % stride == 0 or step == n_steps:
            traj.record(state, observers)
            last_good = state.t
    return traj


# -- equilibrium states and perturbations --------------------------------------


def equilibrium_modes(g: MomentumDistribution, cutoff: float = 0.0) -> list:
    """Lattice mode indices with occupation above cutoff, in deterministic order."""
    occ = g.occupations
    top = float(occ.max())
    return [idx for idx in np.ndindex(*g.grid.shape) if occ[idx] > cutoff * top]


def equilibrium_state(g: MomentumDistribution, cutoff: float = 0.0) -> OrbitalState:
    """Plane-wave orbital ensemble realizing the equilibrium kernel of g.

    With cutoff > 0 low-occupation modes are dropped; pair with
    ``truncate_distribution`` so that reference kernels stay consistent.
    """
    grid = g.grid
    modes = equilibrium_modes(g, cutoff)
    occ = np.array([g.occupations[m] for m in modes])
    orbitals = np.stack([grid.plane_wave(m) for m in modes])
    return OrbitalState(grid, 0.0, orbitals, occ, tuple(modes))


def truncate_distribution(g: MomentumDistribution, cutoff: float) -> MomentumDistribution:
    """Zero occupations below cutoff * max, keeping the grid and family tag."""
    occ = g.occupations
    mask = occ > cutoff * float(occ.max())
    return MomentumDistribution(g.grid, np.where(mask, g.values, 0.0), g.family, g.params)


def perturb_orbital(state: OrbitalState, orbital_mode, bump_mode, amplitude) -> OrbitalState:
    """Add amplitude * exp(i xi x) of ``bump_mode`` to the orbital of ``orbital_mode``.

    This perturbs the field on the shared Gaussian amplitude of that mode, so
    the two-point correlation perturbation is first order in the amplitude.
    """
    orbital_mode = tuple(int(v) for v in np.atleast_1d(orbital_mode))
    try:
        j = state.eq_modes.index(orbital_mode)
    except ValueError as exc:
        raise ValueError(f"no equilibrium orbital at mode {orbital_mode}") from exc
    orbitals = state.orbitals.copy()
    orbitals[j] = orbitals[j] + complex(amplitude) * state.grid.plane_wave(bump_mode)
    return replace(state, orbitals=orbitals)


def add_orbital(state: OrbitalState, field_values: np.ndarray, occupation: float) -> OrbitalState:
    """Append an independent perturbation orbital (its own Gaussian amplitude)."""
    orbitals = np.concatenate([state.orbitals, np.asarray(field_values, complex)[None]])
    occ = np.concatenate([state.occupations, [float(occupation)]])
    return OrbitalState(state.grid, state.t, orbitals, occ, state.eq_modes + (None,))


def realizations_from_orbitals(
    state: OrbitalState, M: int, seed: int
) -> RealizationState:
    """Sample X = sum_j sqrt(n_j) a_j u_j with independent complex Gaussians a_j."""
    weights = np.sqrt(state.occupations)
    flat = state.orbitals.reshape(len(weights), -1)
    out = np.empty((M, flat.shape[1]), dtype=complex)
    for m in range(M):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(m,)))
        a = (
            rng.standard_normal(len(weights)) + 1j * rng.standard_normal(len(weights))
        ) / np.sqrt(2.0)
        out[m] = (a * weights) @ flat
    return RealizationState(state.grid, state.t, out.reshape((M,) + state.grid.shape), seed)


def perturbation_coefficients(state: OrbitalState, theta: DispersionRelation) -> np.ndarray:
    """Coefficient fields of the perturbation per unit-variance Gaussian mode.

    Equilibrium orbitals contribute sqrt(n_j) (u_j(t) - e^{-i theta_d t} e_j);
    perturbation orbitals contribute sqrt(n_j) u_j.  Shape (n_orb,) + grid.shape.
    """
    grid = state.grid
    out = np.empty_like(state.orbitals)
    for j, mode in enumerate(state.eq_modes):
        w = np.sqrt(state.occupations[j])
        if mode is None:
            out[j] = w * state.orbitals[j]
        else:
            ref = grid.plane_wave(mode) * np.exp(-1j * theta.theta[mode] * state.t)
            out[j] = w * (state.orbitals[j] - ref)
    return out


def perturbation_norm(state: OrbitalState, theta: DispersionRelation) -> float:
    """l2(omega, x) norm of the perturbation field."""
    grid = state.grid
    coeff = perturbation_coefficients(state, theta)
    return float(np.sqrt(grid.dx**grid.d * np.sum(np.abs(coeff) ** 2)))


# -- correlation kernels --------------------------------------------------------


@dataclass(frozen=True)
class CorrelationKernel:
    """Perturbed two-point correlation V(x, z) on a finite separation set."""

    grid: Grid
    separations: tuple
    values: np.ndarray
    t: float

    def hermitian_defect(self) -> float:
        """max over paired separations of |conj(V(x,z)) - V(x+z,-z)|.

        The shifted kernel is evaluated by spectral interpolation, exact for
        band-limited kernels; for rough data prefer the state-based check
        :func:`kernel_hermitian_defect`.
        """
        worst = 0.0
        seps = [np.asarray(z, float) for z in self.separations]
        for i, z in enumerate(seps):
            for j, zm in enumerate(seps):
                if np.max(np.abs(z + zm)) < 1e-12:
                    shifted = translate_values(self.grid, self.values[j], z)
                    worst = max(worst, float(np.max(np.abs(self.values[i].conj() - shifted))))
                    break
        return worst


def build_separations(potential: InteractionPotential, extras=()) -> tuple:
    """Point-mass locations of w plus the origin plus extras, closed under negation."""
    d = None
    for y, _ in potential.point_masses:
        d = y.size
        break
    vecs = []

    def push(v):
        v = np.atleast_1d(np.asarray(v, dtype=float))
        for u in vecs:
            if u.size == v.size and np.max(np.abs(u - v)) < 1e-12:
                return
        vecs.append(v)

    if d is not None:
        push(np.zeros(d))
    for y, _ in potential.point_masses:
        push(y)
        push(-y)
    for z in extras:
        push(z)
        push(-np.atleast_1d(np.asarray(z, dtype=float)))
    if not vecs:
        raise ValueError("no separations; supply extras or a potential with point masses")
    if all(np.max(np.abs(v)) > 1e-12 for v in vecs):
        vecs.insert(0, np.zeros_like(vecs[0]))
    return tuple(tuple(float(c) for c in v) for v in vecs)


def kernel_hermitian_defect(state, eq: EquilibriumCorrelation, separations) -> float:
    """Exact check of conj(V(x, z)) = V(x+z, -z) on the finite-rank kernel.

    The right side is rebuilt from translated orbital products, so the
    identity is algebraic and holds to roundoff for any state.
    """
    grid = state.grid
    kernel = correlation_kernel(state, eq, separations)
    fields, occ = state.fields, state.occupations
    worst = 0.0
    for i, z in enumerate(kernel.separations):
        zv = np.asarray(z, dtype=float)
        shifted = np.stack([translate_values(grid, f, zv) for f in fields])
        rhs = np.einsum("j,j...,j...->...", occ, shifted, fields.conj())
        rhs -= eq.at(tuple(-c for c in z))
        worst = max(worst, float(np.max(np.abs(kernel.values[i].conj() - rhs))))
    return worst


def correlation_kernel(
    state, eq: EquilibriumCorrelation, separations
) -> CorrelationKernel:
    """V(x, z) = sum_j n_j u_j(x) conj(u_j(x+z)) - K_eq(z) on the separation set."""
    grid = state.grid
    fields, occ = state.fields, state.occupations
    values = np.empty((len(separations),) + grid.shape, dtype=complex)
    for i, z in enumerate(separations):
        shifted = np.stack([translate_values(grid, f, z) for f in fields])
        values[i] = np.einsum("j,j...,j...->...", occ, fields, shifted.conj())
        values[i] -= eq.at(z)
    return CorrelationKernel(grid, tuple(map(tuple, np.atleast_2d(separations))), values, state.t)


# -- standard observers ---------------------------------------------------------


def standard_observers(
    potential: InteractionPotential,
    theta: DispersionRelation | None = None,
    eq: EquilibriumCorrelation | None = None,
    separations=None,
    initial_mass: float | None = None,
) -> dict:
    obs = {"mass_total": total_mass}
    if initial_mass is not None and initial_mass > 0:

        def drift(state, m0=initial_mass):
            return abs(total_mass(state) - m0) / m0

        obs["mass_drift_rel"] = drift
    if theta is not None:
        obs["z_l2"] = lambda state: perturbation_norm(state, theta)
    if eq is not None and separations is not None:

        def vsup(state):
            return float(
                np.max(np.abs(correlation_kernel(state, eq, separations).values))
            )

        obs["v_sup"] = vsup
    return obs
