"""Run configuration: a flat TOML file with one section per concern, parsed
into a normalized mapping that round-trips bit-identically through the
canonical serializer."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli

from .equilibrium import (
    InteractionPotential,
    MomentumDistribution,
    ResolutionWarning,
    dispersion_relation,
    equilibrium_correlation,
    fermi_dirac,
    free_dispersion,
    gaussian_distribution,
)
from .dynamics import (
    OrbitalState,
    add_orbital,
    build_separations,
    equilibrium_state,
    perturb_orbital,
    realizations_from_orbitals,
    truncate_distribution,
)
from .lattice import Grid


class ConfigError(ValueError):
    """Malformed run configuration; carries the offending field path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"config field [{field}]: {message}")
        self.field = field


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt_value(x) for x in v) + "]"
    raise ConfigError("?", f"unserializable value {v!r}")


def dumps(config: dict) -> str:
    """Canonical TOML text: sorted sections and keys, round-trip floats."""
    lines = []
    for section in sorted(config):
        body = config[section]
        if not isinstance(body, dict):
            raise ConfigError(section, "top level must contain sections only")
        lines.append(f"[{section}]")
        for key in sorted(body):
            lines.append(f"{key} = {_fmt_value(body[key])}")
        lines.append("")
    return "\n".join(lines)


def loads(text: str) -> dict:
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("<syntax>", str(exc)) from exc


def load_file(path) -> tuple:
    text = Path(path).read_text()
    return loads(text), text


def _get(config: dict, section: str, key: str, kind, default=...):
    body = config.get(section)
    if body is None:
        if default is not ...:
            return default
        raise ConfigError(section, "missing section")
    if key not in body:
        if default is not ...:
            return default
        raise ConfigError(f"{section}.{key}", "missing field")
    value = body[key]
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind):
        raise ConfigError(
            f"{section}.{key}", f"expected {kind.__name__}, got {type(value).__name__}"
        )
    return value


def build_grid(config: dict) -> Grid:
    d = _get(config, "grid", "d", int)
    n = _get(config, "grid", "N", int)
    length = _get(config, "grid", "L", float)
    try:
        return Grid(d, n, length)
    except ValueError as exc:
        raise ConfigError("grid", str(exc)) from exc


def build_potential(config: dict, grid: Grid) -> InteractionPotential:
    body = config.get("potential", {})
    masses = []
    for i, row in enumerate(body.get("point_masses", [])):
        if len(row) != grid.d + 1:
            raise ConfigError(
                f"potential.point_masses[{i}]",
                f"expected {grid.d} location components plus a weight",
            )
        masses.append((tuple(float(c) for c in row[:-1]), float(row[-1])))
    density = None
    profile = body.get("density")
    if profile is not None:
        if profile != "gaussian":
            raise ConfigError("potential.density", f"unknown profile {profile!r}")
        amp = _get(config, "potential", "density_amplitude", float)
        width = _get(config, "potential", "density_width", float)
        r2 = np.sum(grid.x_signed**2, axis=0)
        density = amp * np.exp(-r2 / (2.0 * width**2))
    try:
        return InteractionPotential(
            point_masses=tuple(masses),
            density=density,
            density_grid=grid if density is not None else None,
        )
    except ValueError as exc:
        raise ConfigError("potential", str(exc)) from exc


def build_distribution(config: dict, grid: Grid) -> tuple:
    """Returns (distribution, notes) where notes carry resolution warnings."""
    family = _get(config, "distribution", "family", str)
    notes = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ResolutionWarning)
        if family == "fermi_dirac":
            g = fermi_dirac(
                grid,
                _get(config, "distribution", "rho", float),
                _get(config, "distribution", "T", float),
                _get(config, "distribution", "mu", float),
            )
        elif family == "gaussian":
            g = gaussian_distribution(
                grid,
                _get(config, "distribution", "rho", float),
                _get(config, "distribution", "sigma", float),
            )
        elif family == "none":
            g = MomentumDistribution(grid, np.zeros(grid.shape), "none")
        else:
            raise ConfigError("distribution.family", f"unknown family {family!r}")
    notes.extend(str(w.message) for w in caught)
    cutoff = _get(config, "distribution", "occupation_cutoff", float, 0.0)
    if cutoff > 0 and g.values.max() > 0:
        g = truncate_distribution(g, cutoff)
    return g, notes


@dataclass
class RunSetup:
    """Everything a subcommand needs, assembled from one config mapping."""

    config: dict
    grid: Grid
    potential: InteractionPotential
    distribution: MomentumDistribution
    theta: object
    notes: tuple

    @property
    def seed(self) -> int:
        return _get(self.config, "run", "seed", int, 0)

    @property
    def workers(self) -> int:
        return _get(self.config, "run", "workers", int, 1)


def build_setup(config: dict) -> RunSetup:
    grid = build_grid(config)
    potential = build_potential(config, grid)
    g, notes = build_distribution(config, grid)
    theta = (
        dispersion_relation(potential, g)
        if g.values.max() > 0
        else free_dispersion(grid)
    )
    return RunSetup(config, grid, potential, g, theta, tuple(notes))


def build_initial_state(setup: RunSetup) -> OrbitalState:
    """Initial orbital ensemble: equilibrium plus configured perturbations, or
    a standalone wavepacket."""
    config = setup.config
    kind = _get(config, "initial", "kind", str, "equilibrium")
    grid = setup.grid
    if kind == "wavepacket":
        center = _get(config, "initial", "center", float, 0.0)
        width = _get(config, "initial", "width", float, 1.0)
        amp = _get(config, "initial", "amplitude", float, 1.0)
        r2 = np.sum((grid.x_signed - center) ** 2, axis=0)
        packet = amp * np.exp(-r2 / (2.0 * width**2))
        state = OrbitalState(grid, 0.0, packet[None].astype(complex), [1.0])
        return state
    if kind != "equilibrium":
        raise ConfigError("initial.kind", f"unknown kind {kind!r}")
    if setup.distribution.values.max() <= 0:
        raise ConfigError(
            "distribution.family", "equilibrium initial data needs a distribution"
        )
    state = equilibrium_state(setup.distribution)
    body = config.get("perturbation", {})
    for i, row in enumerate(body.get("orbital_bumps", [])):
        if len(row) != 2 * grid.d + 2:
            raise ConfigError(
                f"perturbation.orbital_bumps[{i}]",
                "expected [orbital mode, bump mode, re, im]",
            )
        omode = tuple(int(c) for c in row[: grid.d])
        bmode = tuple(int(c) for c in row[grid.d : 2 * grid.d])
        amp = complex(float(row[-2]), float(row[-1]))
        try:
            state = perturb_orbital(state, omode, bmode, amp)
        except ValueError as exc:
            raise ConfigError(f"perturbation.orbital_bumps[{i}]", str(exc)) from exc
    packet = body.get("packet_amplitude")
    if packet is not None:
        width = _get(config, "perturbation", "packet_width", float, 1.0)
        r2 = np.sum(setup.grid.x_signed**2, axis=0)
        fieldvals = float(packet) * np.exp(-r2 / (2.0 * width**2))
        state = add_orbital(state, fieldvals.astype(complex), 1.0)
    return state


def build_backend_state(setup: RunSetup):
    kind = _get(setup.config, "backend", "kind", str, "orbital")
    base = build_initial_state(setup)
    if kind == "orbital":
        return base
    if kind == "monte_carlo":
        m = _get(setup.config, "backend", "M", int)
        if m < 1:
            raise ConfigError("backend.M", "need at least one realization")
        return realizations_from_orbitals(base, m, setup.seed)
    raise ConfigError("backend.kind", f"unknown backend {kind!r}")


def build_run_separations(setup: RunSetup):
    extras = setup.config.get("linear_response", {}).get("extra_separations", [])
    extras = [tuple(float(c) for c in np.atleast_1d(z)) for z in extras]
    if setup.potential.point_masses or extras:
        return build_separations(setup.potential, extras)
    return ((0.0,) * setup.grid.d,)


def build_equilibrium_kernel(setup: RunSetup):
    return equilibrium_correlation(setup.distribution)
