"""Interaction potentials, momentum distributions, the dispersion relation of
the homogeneous mean-field equilibrium, and Monte Carlo sampling of the
Gaussian equilibrium field.

The equilibrium is a superposition of plane waves with independent complex
Gaussian amplitudes; mode xi carries occupation n = g(xi) dxi^d and rotates at
the dispersion phase theta(xi) = |xi|^2 + theta_tilde(xi) + theta0, where
theta_tilde is (minus) the exchange multiplier generated by the potential and
theta0 the constant direct shift.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import integrate, special

from .lattice import Grid


class EvennessError(ValueError):
    """Interaction potential is not even under y -> -y."""


class ResolutionWarning(UserWarning):
    """The lattice truncates a non-negligible fraction of the continuum mass."""


def index_negation(values: np.ndarray, d: int) -> np.ndarray:
    """values at -x on the lattice: out[j] = in[(-j) mod N] along the last d axes."""
    out = values
    for axis in range(-d, 0):
        out = np.roll(np.flip(out, axis=axis), 1, axis=axis)
    return out


@dataclass(frozen=True)
class InteractionPotential:
    """Even finite signed measure: point masses plus an optional lattice density.

    Point masses are pairs (location, weight); locations need not sit on the
    lattice.  The density part is a real field sampled on a grid's position
    lattice.  Evenness is validated at construction so that the Fourier
    transform is guaranteed real.
    """

    point_masses: tuple = ()
    density: np.ndarray | None = None
    density_grid: Grid | None = None

    def __post_init__(self):
        masses = []
        for loc, a in self.point_masses:
            masses.append((np.atleast_1d(np.asarray(loc, dtype=float)), float(a)))
        object.__setattr__(self, "point_masses", tuple(masses))
        self._check_even()

    def _check_even(self, tol: float = 1e-12) -> None:
        unmatched = list(range(len(self.point_masses)))
        while unmatched:
            i = unmatched.pop(0)
            yi, ai = self.point_masses[i]
            if np.max(np.abs(yi), initial=0.0) <= tol:
                continue
            for j in list(unmatched):
                yj, aj = self.point_masses[j]
                if np.max(np.abs(yi + yj)) <= tol and abs(ai - aj) <= tol:
                    unmatched.remove(j)
                    break
            else:
                raise EvennessError(
                    f"point mass at {yi} (weight {ai}) has no mirror at {-yi}"
                )
        if self.density is not None:
            if self.density_grid is None:
                raise ValueError("density requires density_grid")
            dens = np.asarray(self.density, dtype=float)
            if dens.shape != self.density_grid.shape:
                raise ValueError("density shape does not match grid")
            mirrored = index_negation(dens, self.density_grid.d)
            if np.max(np.abs(dens - mirrored)) > tol * max(1.0, np.max(np.abs(dens))):
                raise EvennessError("density is not even under x -> -x")

    @property
    def is_zero(self) -> bool:
        return not self.point_masses and self.density is None

    def total_mass(self, grid: Grid | None = None) -> float:
        """Signed total integral of the measure."""
        total = sum(a for _, a in self.point_masses)
        if self.density is not None:
            total += self.density_grid.dx**self.density_grid.d * float(
                np.sum(self.density)
            )
        return float(total)

    def conv_symbol(self, grid: Grid) -> np.ndarray:
        """Multiplier s(xi) with (w * h) = ifft(s . fft(h)); equals (2 pi)^{d/2} what(xi).

        Real for even potentials; asserted and stored as a real array.
        """
        sym = np.zeros(grid.shape, dtype=complex)
        for y, a in self.point_masses:
            if y.shape != (grid.d,):
                raise ValueError(f"point mass location {y} has wrong dimension")
            sym += a * np.exp(-1j * np.tensordot(y, grid.xi, axes=(0, 0)))
        if self.density is not None:
            if self.density_grid.shape != grid.shape or self.density_grid.L != grid.L:
                raise ValueError("density grid does not match target grid")
            sym += grid.dx**grid.d * np.fft.fftn(self.density)
        scale = max(1.0, float(np.max(np.abs(sym))))
        if np.max(np.abs(sym.imag)) > 1e-10 * scale:
            raise EvennessError("Fourier transform of w is not real; w is not even")
        return sym.real

    def hat(self, grid: Grid) -> np.ndarray:
        """what(xi) on the frequency lattice, real by evenness."""
        return (2.0 * np.pi) ** (-grid.d / 2.0) * self.conv_symbol(grid)


def delta_potential(weight: float, d: int = 1) -> InteractionPotential:
    """Single point mass at the origin, w = a delta_0."""
    return InteractionPotential(point_masses=(((0.0,) * d, weight),))


@dataclass(frozen=True)
class MomentumDistribution:
    """Nonnegative occupation density g on the frequency lattice."""

    grid: Grid
    values: np.ndarray
    family: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise ValueError("g shape does not match grid")
        if np.min(vals) < -1e-14 * max(1.0, np.max(np.abs(vals))):
            raise ValueError("g must be nonnegative (g = f^2)")
        object.__setattr__(self, "values", np.maximum(vals, 0.0))

    @property
    def total_mass(self) -> float:
        """dxi^d sum g, the spatial density of the equilibrium."""
        return float(self.grid.dxi**self.grid.d * np.sum(self.values))

    @property
    def occupations(self) -> np.ndarray:
        """Per-mode occupations n_k = g(xi_k) dxi^d."""
        return self.grid.dxi**self.grid.d * self.values


def _fermi_base(grid: Grid, T: float, mu: float) -> np.ndarray:
    expo = np.minimum((grid.xi_sq - mu) / T, 700.0)
    return 1.0 / (np.exp(expo) + 1.0)


def _fermi_continuum_mass(d: int, T: float, mu: float) -> float:
    """Integral of 1/(exp((r^2 - mu)/T) + 1) over R^d by radial quadrature."""
    sphere = 2.0 * np.pi ** (d / 2.0) / special.gamma(d / 2.0)

    def radial(r):
        return r ** (d - 1) / (np.exp(min((r * r - mu) / T, 700.0)) + 1.0)

    upper = np.sqrt(max(mu, 0.0) + 800.0 * T)
    val, _ = integrate.quad(radial, 0.0, upper, limit=200)
    return sphere * val


def fermi_dirac(grid: Grid, rho: float, T: float, mu: float) -> MomentumDistribution:
    """Fermi gas occupation at density rho, temperature T, chemical potential mu.

    The normalization constant is fixed on the lattice so that dxi^d sum g = rho
    exactly; the continuum integral is used only to detect under-resolution.
    """
    if T <= 0:
        raise ValueError(f"temperature T={T} must be positive")
    if rho <= 0:
        raise ValueError(f"density rho={rho} must be positive")
    base = _fermi_base(grid, T, mu)
    lattice_mass = grid.dxi**grid.d * float(np.sum(base))
    continuum_mass = _fermi_continuum_mass(grid.d, T, mu)
    deficit = (continuum_mass - lattice_mass) / continuum_mass
    if deficit > 1e-6:
        warnings.warn(
            f"frequency lattice truncates {deficit:.2e} of the continuum mass; "
            "increase N or shrink L",
            ResolutionWarning,
        )
    values = rho * base / lattice_mass
    c_lattice = T ** (grid.d / 2.0) / lattice_mass
    return MomentumDistribution(
        grid, values, "fermi_dirac", {"rho": rho, "T": T, "mu": mu, "C": c_lattice}
    )


def gaussian_distribution(grid: Grid, rho: float, sigma: float) -> MomentumDistribution:
    """Gaussian occupation of width sigma normalized to total density rho."""
    if sigma <= 0 or rho <= 0:
        raise ValueError("rho and sigma must be positive")
    base = np.exp(-grid.xi_sq / (2.0 * sigma**2))
    values = rho * base / (grid.dxi**grid.d * np.sum(base))
    return MomentumDistribution(grid, values, "gaussian", {"rho": rho, "sigma": sigma})


@dataclass(frozen=True)
class DispersionRelation:
    """theta(xi) = |xi|^2 + theta_tilde(xi) + theta0 and its derived quantities."""

    grid: Grid
    theta_tilde: np.ndarray
    theta0: float

    @cached_property
    def theta(self) -> np.ndarray:
        return self.grid.xi_sq + self.theta_tilde + self.theta0

    @cached_property
    def _tilde_coeffs(self) -> np.ndarray:
        return np.fft.fftn(self.theta_tilde)

    def tilde_derivative(self, alpha) -> np.ndarray:
        """Spectral derivative of theta_tilde by multi-index alpha on the xi lattice."""
        mult = np.ones(self.grid.shape, dtype=complex)
        for axis, order in enumerate(alpha):
            if order:
                mult = mult * (1j * self.grid.x_signed[axis]) ** order
        out = np.fft.ifftn(mult * self._tilde_coeffs)
        return out.real

    @cached_property
    def hessian(self) -> np.ndarray:
        """Hessian of theta per lattice site, shape (d, d) + grid.shape."""
        d = self.grid.d
        hess = np.empty((d, d) + self.grid.shape)
        for i in range(d):
            for j in range(i, d):
                alpha = [0] * d
                alpha[i] += 1
                alpha[j] += 1
                block = self.tilde_derivative(alpha)
                if i == j:
                    block = block + 2.0
                hess[i, j] = block
                hess[j, i] = block
        return hess

    @cached_property
    def lambda_star(self) -> float:
        """Uniform ellipticity constant: min over sites of the least Hessian eigenvalue."""
        d = self.grid.d
        if d == 1:
            return float(np.min(self.hessian[0, 0]))
        mats = np.moveaxis(self.hessian.reshape(d, d, -1), -1, 0)
        return float(np.min(np.linalg.eigvalsh(mats)))

    @cached_property
    def gradient(self) -> np.ndarray:
        """Group velocity grad theta = 2 xi + grad theta_tilde, shape (d,) + shape."""
        d = self.grid.d
        grad = np.empty((d,) + self.grid.shape)
        for i in range(d):
            alpha = [0] * d
            alpha[i] = 1
            grad[i] = 2.0 * self.grid.xi[i] + self.tilde_derivative(alpha)
        return grad

    def propagator(self, t: float) -> np.ndarray:
        """Multiplier of the linear group S(t) = exp(-i t theta(D))."""
        return np.exp(-1j * t * self.theta)


def free_dispersion(grid: Grid) -> DispersionRelation:
    return DispersionRelation(grid, np.zeros(grid.shape), 0.0)


def dispersion_relation(
    w: InteractionPotential, g: MomentumDistribution
) -> DispersionRelation:
    """Dispersion relation of the equilibrium with potential w and occupation g.

    theta_tilde = -(2 pi)^{d/2} (what * g) as a circular lattice convolution in
    xi, which matches exactly the exchange term the discrete dynamics applies
    to plane waves; theta0 = (2 pi)^d what(0) ghat(0) = (total w) (total g).
    """
    grid = g.grid
    sym = w.conv_symbol(grid)
    conv = np.fft.ifftn(np.fft.fftn(sym) * np.fft.fftn(g.values))
    theta_tilde = -(grid.dxi**grid.d) * conv.real
    theta0 = w.total_mass(grid) * g.total_mass
    return DispersionRelation(grid, theta_tilde, theta0)


@dataclass(frozen=True)
class EquilibriumCorrelation:
    """Exact two-point kernel of the equilibrium, K(z) = sum_k n_k exp(-i xi_k z)."""

    grid: Grid
    occupations: np.ndarray

    @cached_property
    def values(self) -> np.ndarray:
        """Kernel tabulated on the separation lattice (FFT order)."""
        return np.fft.fftn(self.occupations.astype(complex))

    def at(self, z) -> complex:
        """Kernel at an arbitrary separation vector."""
        z = np.broadcast_to(np.asarray(z, dtype=float), (self.grid.d,))
        phase = np.exp(-1j * np.tensordot(z, self.grid.xi, axes=(0, 0)))
        return complex(np.sum(self.occupations * phase))


def equilibrium_correlation(g: MomentumDistribution) -> EquilibriumCorrelation:
    return EquilibriumCorrelation(g.grid, g.occupations)


@dataclass(frozen=True)
class EquilibriumEnsemble:
    """Monte Carlo realizations of the Gaussian equilibrium field.

    Amplitudes are circularly symmetric complex Gaussians with E|a|^2 = 1,
    independent across modes and realizations, drawn from per-realization
    counter-based streams so the ensemble is reproducible regardless of how
    sampling work is scheduled.
    """

    grid: Grid
    occupations: np.ndarray
    M: int
    seed: int
    amplitudes: np.ndarray

    def fields(self, t: float = 0.0, theta: DispersionRelation | None = None) -> np.ndarray:
        """Realization fields at time t, shape (M,) + grid.shape."""
        coeff = np.sqrt(self.occupations) * self.amplitudes
        if t != 0.0:
            if theta is None:
                raise ValueError("time evolution requires a dispersion relation")
            coeff = coeff * np.exp(-1j * t * theta.theta)
        return self.grid.synthesis(coeff)

    def empirical_correlation(self) -> np.ndarray:
        """Sample mean of conj(Y(x)) Y(y), shape (nsites, nsites)."""
        ymat = self.fields().reshape(self.M, -1)
        return ymat.conj().T @ ymat / self.M


def _amplitudes(grid: Grid, M: int, seed: int) -> np.ndarray:
    out = np.empty((M,) + grid.shape, dtype=complex)
    root = np.random.SeedSequence(seed)
    for m in range(M):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(m,)))
        z = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
        out[m] = z / np.sqrt(2.0)
    return out


def sample_equilibrium(g: MomentumDistribution, M: int, seed: int) -> EquilibriumEnsemble:
    """Draw M realizations of the equilibrium field with occupation density g."""
    if M < 1:
        raise ValueError("M must be at least 1")
    return EquilibriumEnsemble(g.grid, g.occupations, M, seed, _amplitudes(g.grid, M, seed))
