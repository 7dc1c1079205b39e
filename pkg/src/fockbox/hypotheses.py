"""Certification of the stability hypotheses for a potential/distribution pair:
weighted total-variation and discrete Sobolev norms, the uniform ellipticity
constant, and the smallness product, bundled into a machine-readable
certificate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .equilibrium import DispersionRelation, InteractionPotential, MomentumDistribution
from .lattice import Grid

MAX_SOBOLEV_ORDER = 4


class UnsupportedOrderError(ValueError):
    """Requested Sobolev order exceeds the supported differentiation cap."""


class HypothesisViolationError(RuntimeError):
    """An operation required a hypothesis (e.g. ellipticity) that fails."""


def japanese_bracket(r2: np.ndarray) -> np.ndarray:
    """<y> = sqrt(1 + |y|^2) from squared radii."""
    return np.sqrt(1.0 + r2)


def weighted_tv_norm(w: InteractionPotential, m: int, grid: Grid | None = None) -> float:
    """Total variation of <y>^m w: point masses exactly, density by lattice sum.

    Density distances use the centered torus representatives in [-L/2, L/2)^d.
    """
    if m not in (0, 1, 2):
        raise ValueError(f"moment order m={m} must be 0, 1 or 2")
    total = 0.0
    for y, a in w.point_masses:
        total += abs(a) * japanese_bracket(float(np.dot(y, y))) ** m
    if w.density is not None:
        dg = w.density_grid
        r2 = np.sum(dg.x_signed**2, axis=0)
        total += dg.dx**dg.d * float(
            np.sum(np.abs(w.density) * japanese_bracket(r2) ** m)
        )
    return float(total)


def multi_indices(d: int, k: int):
    """All alpha in N^d with |alpha| <= k, lexicographic."""
    return [a for a in product(range(k + 1), repeat=d) if sum(a) <= k]


def _lp_norm(grid: Grid, values: np.ndarray, p, weight: float) -> float:
    a = np.abs(values)
    if p == np.inf or p == "inf":
        return float(a.max())
    p = float(p)
    return float((weight**grid.d * np.sum(a**p)) ** (1.0 / p))


def _derivatives(grid: Grid, values: np.ndarray, alphas, domain: str) -> dict:
    """Spectral derivatives d^alpha of a lattice function for each multi-index.

    Functions of xi are differentiated with the dual (position) coordinates,
    functions of x with the frequency coordinates; both are exact for
    band-limited lattice data.
    """
    if domain == "frequency":
        dual = grid.x_signed
    elif domain == "position":
        dual = grid.xi
    else:
        raise ValueError(f"unknown domain {domain!r}")
    coeffs = np.fft.fftn(values)

    def synth(mult):
        return np.fft.ifftn(mult * coeffs)
    out = {}
    for alpha in alphas:
        if not any(alpha):
            out[alpha] = values
            continue
        mult = np.ones(grid.shape, dtype=complex)
        for axis, order in enumerate(alpha):
            if order:
                mult = mult * (1j * dual[axis]) ** order
        deriv = synth(mult)
        out[alpha] = deriv.real if np.isrealobj(values) else deriv
    return out


def discrete_sobolev_norm(
    grid: Grid,
    values: np.ndarray,
    k: int,
    p,
    weight_exponent: float = 0.0,
    domain: str = "frequency",
) -> float:
    """W^{k,p} norm: sum over |alpha| <= k of the l^p norm of d^alpha(<.>^w f).

    Quadrature weight is dxi^d on the frequency lattice and dx^d on the
    position lattice.
    """
    if k > MAX_SOBOLEV_ORDER:
        raise UnsupportedOrderError(f"order k={k} exceeds cap {MAX_SOBOLEV_ORDER}")
    if p != np.inf and p != "inf" and p < 1:
        raise ValueError("p must be >= 1 or inf")
    field_vals = np.asarray(values)
    if weight_exponent:
        r2 = grid.xi_sq if domain == "frequency" else np.sum(grid.x_signed**2, axis=0)
        field_vals = japanese_bracket(r2) ** weight_exponent * field_vals
    quad = grid.dxi if domain == "frequency" else grid.dx
    derivs = _derivatives(grid, field_vals, multi_indices(grid.d, k), domain)
    return float(sum(_lp_norm(grid, dv, p, quad) for dv in derivs.values()))


def gradient_sobolev_norm(
    grid: Grid, values: np.ndarray, k: int, p, domain: str = "frequency"
) -> float:
    """Norm of the gradient field, summed over components: sum_i ||d_i f||_{W^{k,p}}."""
    total = 0.0
    for i in range(grid.d):
        alpha = [0] * grid.d
        alpha[i] = 1
        grad_i = _derivatives(grid, np.asarray(values), [tuple(alpha)], domain)[tuple(alpha)]
        total += discrete_sobolev_norm(grid, grad_i, k, p, domain=domain)
    return float(total)


def third_derivative_sup(theta: DispersionRelation) -> float:
    """sup norm of the third derivative tensor of theta_tilde (max over entries)."""
    d = theta.grid.d
    worst = 0.0
    for alpha in multi_indices(d, 3):
        if sum(alpha) != 3:
            continue
        worst = max(worst, float(np.max(np.abs(theta.tilde_derivative(alpha)))))
    return worst


def ellipticity_constant(theta: DispersionRelation) -> float:
    """Least Hessian eigenvalue of theta over the lattice; positivity is the verdict."""
    return theta.lambda_star


@dataclass(frozen=True)
class StabilityCertificate:
    """Hypothesis check results for one (w, g) pair."""

    grid_meta: dict
    lambda_star: float
    norms: dict
    smallness_lhs: float
    smallness_threshold: float
    threshold_mode: str
    verdicts: dict
    notes: tuple = ()

    @property
    def passed(self) -> bool:
        return all(v != "fail" for v in self.verdicts.values())

    @property
    def has_warnings(self) -> bool:
        return bool(self.notes) or any(v == "warning" for v in self.verdicts.values())

    def to_dict(self) -> dict:
        flat = {
            "lambda_star": self.lambda_star,
            "smallness_lhs": self.smallness_lhs,
            "smallness_threshold": self.smallness_threshold,
            "threshold_mode": self.threshold_mode,
            "passed": self.passed,
        }
        flat.update({f"grid.{k}": v for k, v in self.grid_meta.items()})
        flat.update({f"norm.{k}": v for k, v in self.norms.items()})
        flat.update({f"verdict.{k}": v for k, v in self.verdicts.items()})
        flat["notes"] = list(self.notes)
        return flat

    def table(self) -> str:
        rows = [("lambda_star", f"{self.lambda_star!r}", self.verdicts["ellipticity"])]
        for key, val in self.norms.items():
            rows.append((key, f"{val!r}", ""))
        rows.append(
            (
                "smallness lhs / threshold",
                f"{self.smallness_lhs!r} / {self.smallness_threshold!r}",
                self.verdicts["smallness"],
            )
        )
        width = max(len(r[0]) for r in rows)
        lines = [f"{name:<{width}}  {val:<28} {verdict}" for name, val, verdict in rows]
        for note in self.notes:
            lines.append(f"note: {note}")
        lines.append("overall: " + ("pass" if self.passed else "fail"))
        return "\n".join(lines)


def critical_regularity(d: int) -> float:
    """Critical Sobolev index s_c = d/2 - 1 of the cubic dispersive problem."""
    return d / 2.0 - 1.0


def norms_table(
    w: InteractionPotential, g: MomentumDistribution, theta: DispersionRelation
) -> dict:
    grid = g.grid
    sc_weight = 2 * int(np.ceil(critical_regularity(grid.d)))
    reg_order = min(grid.d + 2, MAX_SOBOLEV_ORDER)
    return {
        "w_tv": weighted_tv_norm(w, 0, grid),
        "w_tv_weighted": weighted_tv_norm(w, 1, grid),
        "g_W3_1": discrete_sobolev_norm(grid, g.values, 3, 1),
        "g_W3_inf": discrete_sobolev_norm(grid, g.values, 3, np.inf),
        "g_weighted_W2_1": discrete_sobolev_norm(
            grid, g.values, 2, 1, weight_exponent=sc_weight
        ),
        "grad_g_W2_1": gradient_sobolev_norm(grid, g.values, 2, 1),
        "theta_tilde_Wreg_inf": discrete_sobolev_norm(
            grid, theta.theta_tilde, reg_order, np.inf
        ),
        "theta_tilde_reg_order": float(reg_order),
        "theta_tilde_W4_1": discrete_sobolev_norm(grid, theta.theta_tilde, 4, 1),
        "third_deriv_theta_tilde_sup": third_derivative_sup(theta),
    }


def smallness_report(
    w: InteractionPotential,
    g: MomentumDistribution,
    theta: DispersionRelation,
    threshold_mode: str = "configured",
    threshold: float | None = None,
    response_params: dict | None = None,
    notes: tuple = (),
) -> StabilityCertificate:
    """Evaluate every hypothesis and produce a certificate.

    The smallness left-hand side is ||<y> w||_M ||grad g||_{W^{2,1}}.  In
    ``configured`` mode it is compared against a fixed threshold; in
    ``operator_norm`` mode the verdict is the contraction surrogate
    ||L3 + L4|| < 1 on the discretized response, and the reported threshold is
    the lhs value at which that norm would reach one under joint rescaling.
    """
    grid = g.grid
    norms = norms_table(w, g, theta)
    lam = theta.lambda_star
    lhs = norms["w_tv_weighted"] * norms["grad_g_W2_1"]

    verdicts = {
        "evenness": "pass",
        "nonnegativity": "pass",
        "regularity": "pass"
        if all(np.isfinite(v) for v in norms.values())
        else "fail",
        "ellipticity": "pass" if lam > 0 else "fail",
    }

    if threshold_mode == "configured":
        if threshold is None:
            raise ValueError("configured threshold mode requires a threshold value")
        thresh = float(threshold)
        verdicts["smallness"] = "pass" if lhs <= thresh else "fail"
    elif threshold_mode == "operator_norm":
        if lam <= 0:
            raise HypothesisViolationError(
                f"operator-norm threshold requires ellipticity; lambda*={lam!r}"
            )
        from . import linear_response

        params = dict(response_params or {})
        time_grid = linear_response.TimeGrid(
            T=params.get("T", 4.0), n_t=params.get("n_t", 32)
        )
        seps = linear_response.build_separations(w, params.get("extra_separations", ()))
        nu = linear_response.response_operator_norm(w, g, theta, time_grid, seps).norm
        thresh = lhs / nu if nu > 0 else np.inf
        verdicts["smallness"] = "pass" if nu < 1.0 else "fail"
        norms["response_operator_norm"] = nu
    else:
        raise ValueError(f"unknown threshold mode {threshold_mode!r}")

    grid_meta = {"d": grid.d, "N": grid.N, "L": grid.L}
    return StabilityCertificate(
        grid_meta, lam, norms, float(lhs), float(thresh), threshold_mode, verdicts, notes
    )
