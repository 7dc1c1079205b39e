"""Configuration-driven command line binding the library into reproducible
runs: hypothesis certification, evolution, linear response, scattering
extraction, and dispersive-decay measurement.

Exit codes: 0 success; 2 hypothesis failure; 3 passed with warnings; 4
blow-up; 5 invertibility not certified; 6 wrap-window violation; 7 invalid
module input (e.g. trajectory too short); 64 malformed configuration.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfg
from . import diagnostics, dynamics, hypotheses, linear_response, reporting, storage
from .equilibrium import free_dispersion

EXIT_OK = 0
EXIT_HYPOTHESIS_FAIL = 2
EXIT_WARNINGS = 3
EXIT_BLOWUP = 4
EXIT_NOT_CERTIFIED = 5
EXIT_WRAP_WINDOW = 6
EXIT_MODULE_INPUT = 7
EXIT_CONFIG = 64


def _out_dir(args, config, subcommand) -> Path:
    # FOCKBOX_OUT is the only environment override; explicit --out wins
    if args.out:
        out = Path(args.out)
    else:
        base = os.environ.get("FOCKBOX_OUT") or config.get("run", {}).get(
            "out", "fockbox_out"
        )
        out = Path(base) / subcommand
    out.mkdir(parents=True, exist_ok=True)
    return out


def _apply_overrides(config, args) -> None:
    if args.seed is not None:
        config.setdefault("run", {})["seed"] = args.seed
    if args.workers is not None:
        config.setdefault("run", {})["workers"] = args.workers


def cmd_check_hypotheses(args, config, text) -> int:
    setup = cfg.build_setup(config)
    body = config.get("hypotheses", {})
    mode = body.get("threshold_mode", "configured")
    threshold = body.get("threshold")
    params = {
        "T": float(body.get("response_T", 4.0)),
        "n_t": int(body.get("response_n_t", 24)),
    }
    try:
        cert = hypotheses.smallness_report(
            setup.potential,
            setup.distribution,
            setup.theta,
            threshold_mode=mode,
            threshold=threshold,
            response_params=params,
            notes=setup.notes,
        )
    except (ValueError, hypotheses.HypothesisViolationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODULE_INPUT
    out = _out_dir(args, config, "check-hypotheses")
    reporting.write_json(out / "certificate.json", cert.to_dict())
    if not args.no_figures:
        reporting.plot_certificate(cert, out / "certificate.png")
    print(cert.table())
    if not cert.passed:
        return EXIT_HYPOTHESIS_FAIL
    if cert.has_warnings:
        return EXIT_WARNINGS
    return EXIT_OK


def cmd_evolve(args, config, text) -> int:
    setup = cfg.build_setup(config)
    state = cfg.build_backend_state(setup)
    T = cfg._get(config, "time", "T", float)
    dt = cfg._get(config, "time", "dt", float)
    stride = cfg._get(config, "time", "checkpoint_stride", int, 1)
    out = _out_dir(args, config, "evolve")

    has_equilibrium = setup.distribution.values.max() > 0
    seps = cfg.build_run_separations(setup)
    eq_kernel = cfg.build_equilibrium_kernel(setup) if has_equilibrium else None
    observers = dynamics.standard_observers(
        setup.potential,
        theta=setup.theta if (has_equilibrium and isinstance(state, dynamics.OrbitalState)) else None,
        eq=eq_kernel,
        separations=seps if eq_kernel is not None else None,
        initial_mass=dynamics.total_mass(state),
    )
    try:
        traj = dynamics.evolve(
            state,
            setup.potential,
            T,
            dt,
            observers=observers,
            stride=stride,
            workers=setup.workers,
        )
    except dynamics.BlowUpError as exc:
        storage.write_trajectory(
            out,
            dynamics.Trajectory(setup.grid, [state.t], [state], [], {"dt": dt, "T": T}),
            config_text=text,
            seed=setup.seed,
            extra_meta={"status": "blow-up", "last_good_time": exc.last_good_time},
        )
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    vkernels = None
    if eq_kernel is not None:
        vkernels = np.stack(
            [
                dynamics.correlation_kernel(s, eq_kernel, seps).values
                for s in traj.states
            ]
        )
    storage.write_trajectory(
        out,
        traj,
        config_text=text,
        seed=setup.seed,
        vkernels=vkernels,
        separations=seps,
        extra_meta={"status": "completed"},
    )
    if has_equilibrium and isinstance(state, dynamics.OrbitalState):
        _write_norm_series(out, traj, setup)
    if not args.no_figures and traj.observer_rows:
        reporting.plot_observers(traj.observer_rows, out / "observers.png")
    print(f"trajectory written to {out} ({len(traj.times)} checkpoints)")
    return EXIT_OK


def _write_norm_series(out: Path, traj, setup) -> None:
    """Per-checkpoint perturbation norms, one CSV row per (time, norm)."""
    rows = []
    for s in traj.states:
        coeffs = dynamics.perturbation_coefficients(s, setup.theta)
        for name, value in diagnostics.z_spatial_norms(setup.grid, coeffs).items():
            rows.append((s.t, name, value))
    reporting.write_csv(out / "znorms.csv", ["time", "norm", "value"], rows)


def _load_v_for_response(args, config, setup):
    body = config.get("linear_response", {})
    source = body.get("source", "synthetic")
    if source == "trajectory":
        traj_dir = args.trajectory or body.get("trajectory")
        if not traj_dir:
            raise cfg.ConfigError("linear_response.trajectory", "missing field")
        states, manifest, vkernels, seps = storage.read_trajectory(traj_dir)
        if vkernels is None:
            raise linear_response.IncompleteInputError(
                "trajectory stores no correlation kernels"
            )
        tg = linear_response.TimeGrid.from_times([s.t for s in states])
        return linear_response.VTrajectory(setup.grid, seps, tg, vkernels)
    if source != "synthetic":
        raise cfg.ConfigError("linear_response.source", f"unknown source {source!r}")
    tg = linear_response.TimeGrid(
        float(body.get("T", 2.0)), int(body.get("n_t", 32))
    )
    seps = cfg.build_run_separations(setup)
    return linear_response.synthetic_v(
        setup.grid,
        seps,
        tg,
        int(body.get("synthetic_seed", 1)),
        hermitian=bool(body.get("hermitian", True)),
    )


def cmd_linear_response(args, config, text) -> int:
    setup = cfg.build_setup(config)
    out = _out_dir(args, config, "linear-response")
    try:
        V = _load_v_for_response(args, config, setup)
    except linear_response.IncompleteInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODULE_INPUT
    report = linear_response.response_operator_norm(
        setup.potential, setup.distribution, setup.theta, V.time_grid, V.separations
    )
    reporting.write_csv(
        out / "block_norms.csv",
        ["zeta_index", "zeta_abs", "block_norm"],
        [(";".join(map(str, zi)), mag, nrm) for zi, mag, nrm in report.per_zeta],
    )
    if not args.no_figures:
        reporting.plot_block_norms(report.per_zeta, out / "block_norms.png")
    verdict = {
        "operator_norm": report.norm,
        "separations": [list(z) for z in V.separations],
        "time_grid": {"T": V.time_grid.T, "n_t": V.time_grid.n_t},
    }
    tols = config.get("tolerances", {})
    try:
        result = linear_response.invert_response(
            V,
            setup.potential,
            setup.distribution,
            setup.theta,
            increment_tol=float(tols.get("neumann_increment", 1e-10)),
            residual_tol=float(tols.get("neumann_residual", 1e-8)),
        )
    except linear_response.InvertibilityError as exc:
        verdict.update({"invertible": False, "verdict": "not-certified"})
        reporting.write_json(out / "response.json", verdict)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CERTIFIED
    verdict.update(
        {
            "invertible": True,
            "verdict": "trivially-invertible" if report.norm < 1e-10 else "invertible",
            "neumann_terms": result.terms,
            "residual": result.residual,
        }
    )
    reporting.write_json(out / "response.json", verdict)
    print(
        f"operator norm {report.norm!r}; {verdict['verdict']} "
        f"({result.terms} terms, residual {result.residual!r})"
    )
    return EXIT_OK


def cmd_scatter(args, config, text) -> int:
    setup = cfg.build_setup(config)
    out = _out_dir(args, config, "scatter")
    body = config.get("scatter", {})
    traj_dir = args.trajectory or body.get("trajectory")
    if not traj_dir:
        print("error: config field [scatter.trajectory]: missing field", file=sys.stderr)
        return EXIT_CONFIG
    states, manifest, _, _ = storage.read_trajectory(traj_dir)
    t_extract = body.get("T_extract")
    try:
        tg = linear_response.TimeGrid.from_times([s.t for s in states])
        coeffs = np.stack(
            [dynamics.perturbation_coefficients(s, setup.theta) for s in states], axis=1
        )
        Z = linear_response.ModeFieldTrajectory(
            setup.grid, tg, states[0].eq_modes, coeffs
        )
        report = diagnostics.extract_scattering_state(
            Z, setup.theta, float(t_extract) if t_extract is not None else None
        )
    except (ValueError, linear_response.IncompleteInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODULE_INPUT
    reporting.write_csv(
        out / "residuals.csv",
        ["time", "residual"],
        list(zip(report.times, report.residuals)),
    )
    reporting.write_json(
        out / "scattering.json",
        {
            "T": report.T,
            "stability_gap": report.stability_gap,
            "final_residual": float(report.residuals[-1]),
            "max_residual": float(report.residuals.max()),
            "z_infinity_l2": float(
                np.sqrt(
                    setup.grid.dx**setup.grid.d
                    * np.sum(np.abs(report.z_infinity) ** 2)
                )
            ),
        },
    )
    if not args.no_figures:
        reporting.plot_residual_curve(report.times, report.residuals, out / "residuals.png")
    print(f"scattering state extracted at T={report.T!r}; gap {report.stability_gap!r}")
    return EXIT_OK


def cmd_decay(args, config, text) -> int:
    body = config.get("decay", {})
    d = int(body.get("d", cfg._get(config, "grid", "d", int, 1)))
    try:
        grid = cfg.build_grid(
            {"grid": {"d": d, "N": int(body.get("N", 2048)), "L": float(body.get("L", 200.0))}}
        )
    except cfg.ConfigError:
        raise
    mode = body.get("potential", "free")
    if mode == "free":
        theta = free_dispersion(grid)
    elif mode == "configured":
        sub = {
            "grid": {"d": grid.d, "N": grid.N, "L": grid.L},
            "potential": config.get("potential", {}),
            "distribution": config.get("distribution", {}),
        }
        theta = cfg.build_setup(sub).theta
    else:
        print(f"error: config field [decay.potential]: unknown mode {mode!r}", file=sys.stderr)
        return EXIT_CONFIG
    out = _out_dir(args, config, "decay")
    try:
        fit = diagnostics.dispersive_decay_fit(
            theta,
            int(body.get("shell", 1)),
            float(body.get("t_min", 1.0)),
            float(body.get("t_max", 10.0)),
            n_samples=int(body.get("n_samples", 24)),
        )
    except diagnostics.WrapWindowError as exc:
        reporting.write_json(
            out / "decay.json", {"error": str(exc), "t_wrap": exc.t_wrap}
        )
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_WRAP_WINDOW
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODULE_INPUT
    expected = -grid.d / 2.0
    payload = {
        "slope": fit.slope,
        "expected": expected,
        "relative_deviation": abs(fit.slope - expected) / abs(expected),
        "t_wrap": fit.t_wrap,
        "shell": fit.shell,
        "grid": {"d": grid.d, "N": grid.N, "L": grid.L},
    }
    reporting.write_json(out / "decay.json", payload)
    reporting.write_csv(
        out / "decay_samples.csv", ["time", "sup_amplitude"], list(zip(fit.times, fit.sup_values))
    )
    if not args.no_figures:
        reporting.plot_decay(fit, out / "decay.png")
    print(f"decay slope {fit.slope!r} (expected {expected!r})")
    return EXIT_OK


_COMMANDS = {
    "check-hypotheses": cmd_check_hypotheses,
    "evolve": cmd_evolve,
    "linear-response": cmd_linear_response,
    "scatter": cmd_scatter,
    "decay": cmd_decay,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fockbox",
        description="periodic mean-field simulator and certification toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="path to the run configuration (TOML)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--trajectory", default=None, help="trajectory directory")
        p.add_argument("--no-figures", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config, text = cfg.load_file(args.config)
        _apply_overrides(config, args)
        return _COMMANDS[args.command](args, config, text)
    except cfg.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODULE_INPUT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
