"""Trajectory norms (mixed Lebesgue/Sobolev and dyadic-shell Besov analogues
on the lattice), pointwise dispersive-decay measurement for the linear group,
and scattering-state extraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .equilibrium import DispersionRelation
from .lattice import Grid, shell_masks
from .linear_response import ModeFieldTrajectory


class WrapWindowError(RuntimeError):
    """Requested times extend past the torus wrap-around window."""

    def __init__(self, t_max: float, t_wrap: float):
        super().__init__(
            f"decay window t <= {t_max!r} exceeds the wrap time {t_wrap!r}; "
            "enlarge the box or shorten the window"
        )
        self.t_wrap = t_wrap


@dataclass(frozen=True)
class NormReport:
    """One computed norm with enough metadata to be replotted."""

    kind: str
    value: float
    exponents: dict
    meta: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {"kind": self.kind, "value": self.value}
        out.update(self.exponents)
        out.update(self.meta)
        return out


def _omega_l2(values: np.ndarray) -> np.ndarray:
    """Exact expectation layer: sqrt(sum_modes |.|^2) over the leading axis."""
    return np.sqrt(np.sum(np.abs(values) ** 2, axis=0))


def _space_norm(grid: Grid, m: np.ndarray, q) -> np.ndarray:
    axes = tuple(range(-grid.d, 0))
    if q == np.inf:
        return np.max(m, axis=axes)
    return (grid.dx**grid.d * np.sum(m**q, axis=axes)) ** (1.0 / q)


def _time_norm(values: np.ndarray, times: np.ndarray, p) -> float:
    if p == np.inf:
        return float(np.max(values))
    if times.size == 1:
        return float(values[0])
    return float(np.trapezoid(values**p, times) ** (1.0 / p))


def mixed_norm(traj: ModeFieldTrajectory, p, q, s: float = 0.0) -> float:
    """L^p in time of the spatial l^q norm of <grad>^s u, with the expectation
    layer computed exactly from the mode coefficients."""
    if (p != np.inf and p < 1) or (q != np.inf and q < 1):
        raise ValueError("exponents must satisfy p, q >= 1")
    grid = traj.grid
    axes = tuple(range(-grid.d, 0))
    vals = traj.values
    if s != 0.0:
        mult = (1.0 + grid.xi_sq) ** (s / 2.0)
        vals = np.fft.ifftn(mult * np.fft.fftn(vals, axes=axes), axes=axes)
    m = _omega_l2(vals)
    per_time = _space_norm(grid, m, q)
    return _time_norm(per_time, traj.time_grid.times, p)


def sobolev_h_norm(traj: ModeFieldTrajectory, s: float) -> np.ndarray:
    """H^s norm per checkpoint via the frequency-sum definition (oracle route)."""
    grid = traj.grid
    axes = tuple(range(-grid.d, 0))
    hat = grid.forward_values(traj.values)
    weight = (1.0 + grid.xi_sq) ** s
    return np.sqrt(
        grid.dxi**grid.d * np.sum(weight * np.abs(hat) ** 2, axis=(0,) + axes)
    )


def besov_shell_values(grid: Grid, values: np.ndarray, q) -> dict:
    """||P_j u||_{l^q_x l^2_omega} per dyadic shell, modes on the leading axis."""
    axes = tuple(range(-grid.d, 0))
    hat = np.fft.fftn(values, axes=axes)
    out = {}
    for j, mask in shell_masks(grid).items():
        piece = np.fft.ifftn(np.where(mask, hat, 0.0), axes=axes)
        out[j] = _space_norm(grid, _omega_l2(piece), q)
    return out


def besov_norm(
    traj: ModeFieldTrajectory,
    q,
    s_low: float,
    s_high: float,
    time_l2: bool = True,
    p: float = 2.0,
) -> float:
    """Dyadic-shell norm with low shells weighted 2^{2 j s_low} and high shells
    2^{2 j s_high}; trajectories are reduced by an l^p time quadrature
    (default p = 2, ``time_l2=False`` takes the sup instead)."""
    shells = besov_shell_values(traj.grid, traj.values, q)
    sq = None
    for j, vals in shells.items():
        w = 2.0 ** (2 * j * s_low) if j < 0 else 2.0 ** (2 * j * s_high)
        contrib = w * np.asarray(vals) ** 2
        sq = contrib if sq is None else sq + contrib
    per_time = np.sqrt(sq)
    times = traj.time_grid.times
    if not time_l2 or np.ndim(per_time) == 0 or per_time.size == 1:
        return float(np.max(per_time))
    return _time_norm(per_time, times, p)


def z_spatial_norms(grid: Grid, coeffs: np.ndarray) -> dict:
    """Instantaneous spatial norms of one checkpoint's perturbation coefficients."""
    from .hypotheses import critical_regularity
    from .linear_response import TimeGrid

    d = grid.d
    s_c = critical_regularity(d)
    p = 2.0 * (d + 2.0) / d
    q = 4.0 * d / (d + 1.0)
    tr = ModeFieldTrajectory(
        grid, TimeGrid(1.0, 1), (None,) * coeffs.shape[0], np.repeat(coeffs[:, None], 2, axis=1)
    )
    return {
        "H_sc": mixed_norm(tr, np.inf, 2, s_c),
        "W_sc_p": mixed_norm(tr, np.inf, p, s_c),
        "L_d+2_x": mixed_norm(tr, np.inf, d + 2.0, 0.0),
        "B_q_0_quarter": besov_norm(tr, q, 0.0, 0.25, time_l2=False),
        "Lq_x": mixed_norm(tr, np.inf, q, 0.0),
    }


def z_norm_components(traj: ModeFieldTrajectory) -> dict:
    """The trajectory norms entering the perturbation-space bookkeeping.

    The fourth component is stated in two inequivalent ways in the source
    conventions (a shell-weighted and a plain Lebesgue time-space norm), so
    both are computed and reported side by side.
    """
    from .hypotheses import critical_regularity

    d = traj.grid.d
    s_c = critical_regularity(d)
    p = 2.0 * (d + 2.0) / d
    q = 4.0 * d / (d + 1.0)
    return {
        "Linf_t_H_sc": mixed_norm(traj, np.inf, 2, s_c),
        "Lp_t_W_sc_p": mixed_norm(traj, p, p, s_c),
        "L_d+2_t_x": mixed_norm(traj, d + 2.0, d + 2.0, 0.0),
        "L4_t_B_q_0_quarter": besov_norm(traj, q, 0.0, 0.25, p=4.0),
        "L4_t_Lq_x": mixed_norm(traj, 4.0, q, 0.0),
    }


# -- dispersive decay ------------------------------------------------------------


@dataclass(frozen=True)
class DecayFit:
    """Least-squares slope of log sup_x |S(t) P_shell delta| against log t."""

    shell: int
    slope: float
    intercept: float
    times: np.ndarray
    sup_values: np.ndarray
    t_wrap: float


def wrap_time(theta: DispersionRelation, mask: np.ndarray) -> float:
    """Half box length over the peak group speed on the masked modes."""
    speed = np.sqrt(np.sum(theta.gradient**2, axis=0))
    vmax = float(np.max(np.where(mask, speed, 0.0)))
    if vmax == 0.0:
        return np.inf
    return 0.5 * theta.grid.L / vmax


def dispersive_decay_fit(
    theta: DispersionRelation,
    shell: int,
    t_min: float,
    t_max: float,
    n_samples: int = 24,
) -> DecayFit:
    """Fit the pointwise decay exponent of the shell-localized point source.

    Valid only inside the pre-wrap window of the torus; violating it raises
    the window error rather than fitting revival artifacts.
    """
    if not 0 < t_min < t_max:
        raise ValueError("need 0 < t_min < t_max")
    grid = theta.grid
    from .lattice import shell_index_map

    mask = shell_index_map(grid) == shell
    if not mask.any():
        raise ValueError(f"shell {shell} is empty on this grid")
    t_wrap = wrap_time(theta, mask)
    if t_max > t_wrap:
        raise WrapWindowError(t_max, t_wrap)
    times = np.geomspace(t_min, t_max, n_samples)
    u0_hat = mask.astype(complex)
    sups = np.empty(n_samples)
    for i, t in enumerate(times):
        fieldvals = np.fft.ifftn(np.exp(-1j * t * theta.theta) * u0_hat)
        sups[i] = float(np.max(np.abs(fieldvals)))
    slope, intercept = np.polyfit(np.log(times), np.log(sups), 1)
    return DecayFit(shell, float(slope), float(intercept), times, sups, t_wrap)


# -- scattering extraction ---------------------------------------------------------


@dataclass(frozen=True)
class ScatteringReport:
    """Candidate asymptotic datum and its backwards-propagated residual curve."""

    T: float
    z_infinity: np.ndarray
    times: np.ndarray
    residuals: np.ndarray
    stability_gap: float


def _free_propagate(grid: Grid, theta: DispersionRelation, coeffs: np.ndarray, t: float):
    axes = tuple(range(-grid.d, 0))
    return np.fft.ifftn(
        np.exp(-1j * t * theta.theta) * np.fft.fftn(coeffs, axes=axes), axes=axes
    )


def extract_scattering_state(
    Z: ModeFieldTrajectory, theta: DispersionRelation, T: float | None = None
) -> ScatteringReport:
    """Z_inf = S(-T) Z(T) with the residual r(t) = ||Z(t) - S(t) Z_inf|| over all
    stored checkpoints and a stability gap against extraction at T/2."""
    grid = Z.grid
    times = Z.time_grid.times
    if T is None:
        T = float(times[-1])
    if T > times[-1] + 1e-12:
        raise ValueError(f"trajectory ends at {times[-1]!r}, before T={T!r}")
    idx = int(np.argmin(np.abs(times - T)))
    if abs(times[idx] - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"no checkpoint at extraction time T={T!r}")

    def extract(i):
        return _free_propagate(grid, theta, Z.values[:, i], -times[i])

    z_inf = extract(idx)
    half = int(np.argmin(np.abs(times - T / 2.0)))
    z_half = extract(half)
    quad = grid.dx**grid.d
    gap = float(np.sqrt(quad * np.sum(np.abs(z_inf - z_half) ** 2)))
    residuals = np.empty(times.size)
    for n, t in enumerate(times):
        pred = _free_propagate(grid, theta, z_inf, t)
        residuals[n] = np.sqrt(quad * np.sum(np.abs(Z.values[:, n] - pred) ** 2))
    return ScatteringReport(float(times[idx]), z_inf, times, residuals, gap)
