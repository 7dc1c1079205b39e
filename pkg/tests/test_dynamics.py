import numpy as np
import pytest

from fockbox.dynamics import (
    BlowUpError,
    OrbitalState,
    RealizationState,
    add_orbital,
    build_separations,
    correlation_kernel,
    density,
    direct_term,
    equilibrium_state,
    evolve,
    exchange_apply,
    orbital_masses,
    perturb_orbital,
    perturbation_coefficients,
    perturbation_norm,
    realizations_from_orbitals,
    standard_observers,
    step_strang,
    total_mass,
    truncate_distribution,
)
from fockbox.equilibrium import (
    InteractionPotential,
    delta_potential,
    dispersion_relation,
    equilibrium_correlation,
    gaussian_distribution,
)
from fockbox.lattice import Grid, translate_values


def random_state(grid, n_orb, rng, occupations=None):
    fields = rng.normal(size=(n_orb,) + grid.shape) + 1j * rng.normal(
        size=(n_orb,) + grid.shape
    )
    occ = occupations if occupations is not None else rng.uniform(0.1, 1.0, n_orb)
    return OrbitalState(grid, 0.0, fields, occ)


class TestMeanFieldTerms:
    def test_direct_zero_potential(self, rng):
        grid = Grid(1, 32, 8.0)
        st = random_state(grid, 2, rng)
        assert np.max(np.abs(direct_term(st, InteractionPotential()))) == 0.0

    def test_direct_delta_is_pointwise_density(self, rng):
        grid = Grid(1, 32, 8.0)
        st = random_state(grid, 1, rng, occupations=[1.0])
        out = direct_term(st, delta_potential(1.0, d=1))
        rho = np.abs(st.orbitals[0]) ** 2
        assert np.max(np.abs(out - rho)) < 1e-12 * rho.max()

    def test_direct_at_equilibrium_is_constant_shift(self, small_setup):
        st = small_setup["state"]
        w, g = small_setup["w"], small_setup["g"]
        out = direct_term(st, w)
        expected = w.total_mass(st.grid) * g.total_mass
        assert np.max(np.abs(out - expected)) < 1e-12 * max(1.0, abs(expected))

    def test_exchange_delta_equals_direct_action(self, rng):
        grid = Grid(1, 32, 8.0)
        st = random_state(grid, 3, rng)
        a = 1.7
        w = delta_potential(a, d=1)
        tgt = st.orbitals[1]
        ex = exchange_apply(st, w, tgt)
        assert np.max(np.abs(ex - a * density(st) * tgt)) < 1e-12 * np.max(np.abs(ex))

    def test_exchange_zero_occupations(self, rng):
        grid = Grid(1, 32, 8.0)
        st = random_state(grid, 2, rng, occupations=[0.0, 0.0])
        out = exchange_apply(st, delta_potential(1.0, d=1), st.orbitals[0])
        assert np.max(np.abs(out)) == 0.0

    def test_exchange_on_plane_wave_matches_multiplier(self, small_setup):
        # exchange acting on an equilibrium plane wave is the exchange
        # multiplier -theta_tilde at that mode
        st = small_setup["state"]
        th = small_setup["theta"]
        w = small_setup["w"]
        mode = st.eq_modes[3]
        target = st.grid.plane_wave(mode)
        out = exchange_apply(st, w, target)
        expected = -th.theta_tilde[mode] * target
        assert np.max(np.abs(out - expected)) < 1e-11 * max(np.max(np.abs(expected)), 1e-9)


class TestStrangStep:
    def test_free_composition_is_exact_propagator(self, rng):
        grid = Grid(1, 64, 11.0)
        st = random_state(grid, 1, rng, occupations=[1.0])
        w = InteractionPotential()
        traj = evolve(st, w, T=0.5, dt=0.01, stride=10**9)
        ref = np.fft.ifft(np.exp(-1j * 0.5 * grid.xi_sq) * np.fft.fft(st.orbitals[0]))
        assert np.max(np.abs(traj.states[-1].orbitals[0] - ref)) < 1e-12

    def test_free_gaussian_wavepacket_oracle(self):
        grid = Grid(1, 256, 40.0)
        x = grid.x_signed[0]
        u0 = np.exp(-(x**2) / 2.0).astype(complex)
        st = OrbitalState(grid, 0.0, u0[None], [1.0])
        traj = evolve(st, InteractionPotential(), T=1.0, dt=1e-3, stride=10**9)
        ref = np.fft.ifft(np.exp(-1j * grid.xi_sq) * np.fft.fft(u0))
        err = np.linalg.norm(traj.states[-1].orbitals[0] - ref) / np.linalg.norm(ref)
        assert err < 1e-6

    def test_second_order_self_convergence(self):
        grid = Grid(1, 32, 10.0)
        x = grid.x_signed[0]
        u0 = np.exp(-(x**2)) * (1 + 0.3 * np.exp(1j * x))
        u1 = np.exp(-((x - 1.5) ** 2) / 2) * np.exp(-2j * x)
        st = OrbitalState(grid, 0.0, np.stack([u0, u1]).astype(complex), [0.7, 0.5])
        w = InteractionPotential(point_masses=(((1.25,), 1.0), ((-1.25,), 1.0)))
        ref = evolve(st, w, T=0.5, dt=0.5 / 2048, stride=10**9).states[-1].orbitals
        errs = []
        for nsteps in (32, 64, 128):
            fin = evolve(st, w, T=0.5, dt=0.5 / nsteps, stride=10**9).states[-1].orbitals
            errs.append(np.linalg.norm(fin - ref))
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(np.abs(orders - 2.0) < 0.1)

    def test_dt_validation(self, rng):
        grid = Grid(1, 16, 4.0)
        st = random_state(grid, 1, rng)
        with pytest.raises(ValueError):
            step_strang(st, InteractionPotential(), 0.0)


class TestEvolve:
    def test_equilibrium_stationarity(self, small_setup):
        st = small_setup["state"]
        w, th = small_setup["w"], small_setup["theta"]
        traj = evolve(st, w, T=0.5, dt=1e-3, stride=500)
        fin = traj.states[-1]
        grid = st.grid
        for j, mode in enumerate(fin.eq_modes):
            coeff = np.fft.fft(fin.orbitals[j]) / grid.N
            c = coeff[mode]
            assert abs(abs(c) - 1.0) < 1e-10
            phase = np.angle(c) + th.theta[mode] * fin.t
            phase = (phase + np.pi) % (2 * np.pi) - np.pi
            assert abs(phase) < 1e-8
            off = np.delete(coeff, mode)
            assert np.max(np.abs(off)) < 1e-10

    def test_mass_conservation_and_inner_products(self, small_setup):
        st = perturb_orbital(small_setup["state"], (2,), (5,), 1e-2)
        w = small_setup["w"]
        traj = evolve(st, w, T=1.0, dt=5e-3, stride=50)
        m0 = total_mass(st)
        for s in traj.states:
            assert abs(total_mass(s) - m0) / m0 < 1e-10 * max(1.0, s.t)
        om0 = orbital_masses(st)
        omT = orbital_masses(traj.states[-1])
        assert np.max(np.abs(omT - om0) / om0) < 1e-10
        ips0 = st.grid.dx * (st.orbitals @ st.orbitals.conj().T)
        fin = traj.states[-1].orbitals
        ipsT = st.grid.dx * (fin @ fin.conj().T)
        assert np.max(np.abs(ipsT - ips0)) < 1e-8

    def test_small_data_stays_small(self, small_setup):
        eps = 1e-3
        st = small_setup["state"]
        th = small_setup["theta"]
        mode_occ = small_setup["g"].occupations[2]
        amp = eps / np.sqrt(mode_occ * st.grid.L)
        pert = perturb_orbital(st, (2,), (5,), amp)
        assert abs(perturbation_norm(pert, th) - eps) < 1e-12
        obs = {"z": lambda s: perturbation_norm(s, th)}
        traj = evolve(pert, small_setup["w"], T=5.0, dt=5e-3, stride=100, observers=obs)
        series = traj.series("z")
        assert series[:, 1].max() <= 10.0 * eps

    def test_time_reversibility(self, small_setup):
        pert = perturb_orbital(small_setup["state"], (2,), (5,), 1e-3)
        w = small_setup["w"]
        fwd = evolve(pert, w, T=0.5, dt=1e-3, stride=10**9)
        back = evolve(fwd.states[-1], w, T=-0.5, dt=-1e-3, stride=10**9)
        assert np.max(np.abs(back.states[-1].orbitals - pert.orbitals)) < 1e-6
        # free case is exact to roundoff
        st = OrbitalState(
            pert.grid, 0.0, pert.orbitals[:1], [1.0]
        )
        f = evolve(st, InteractionPotential(), T=0.5, dt=1e-2, stride=10**9)
        b = evolve(f.states[-1], InteractionPotential(), T=-0.5, dt=-1e-2, stride=10**9)
        assert np.max(np.abs(b.states[-1].orbitals - st.orbitals)) < 1e-8

    def test_translation_equivariance(self, small_setup):
        grid = small_setup["grid"]
        w = small_setup["w"]
        pert = perturb_orbital(small_setup["state"], (2,), (5,), 1e-2)
        z = (3 * grid.dx,)
        shifted = OrbitalState(
            grid,
            0.0,
            np.stack([translate_values(grid, f, z) for f in pert.orbitals]),
            pert.occupations,
            pert.eq_modes,
        )
        a = evolve(shifted, w, T=0.1, dt=5e-3, stride=10**9).states[-1].orbitals
        b = evolve(pert, w, T=0.1, dt=5e-3, stride=10**9).states[-1].orbitals
        b = np.stack([translate_values(grid, f, z) for f in b])
        assert np.max(np.abs(a - b)) < 1e-12

    def test_blow_up_dt_too_large(self, rng):
        grid = Grid(1, 32, 10.0)
        x = grid.x_signed[0]
        u = np.exp(-(x**2)).astype(complex)
        st = OrbitalState(grid, 0.0, np.stack([u, np.roll(u, 5)]), [1.0, 1.0])
        w = delta_potential(2000.0, d=1)
        with pytest.raises(BlowUpError) as err:
            evolve(st, w, T=1.0, dt=0.25, stride=1)
        assert err.value.last_good_time == 0.0

    def test_evolve_validates_step_count(self, small_setup):
        with pytest.raises(ValueError):
            evolve(small_setup["state"], small_setup["w"], T=1.0, dt=0.3)


class TestCorrelationKernel:
    def test_equilibrium_vanishes(self, small_setup):
        ck = correlation_kernel(
            small_setup["state"], small_setup["eq"], small_setup["seps"]
        )
        assert np.max(np.abs(ck.values)) < 1e-10

    def test_hermitian_relation_exact(self, small_setup, rng):
        from fockbox.dynamics import kernel_hermitian_defect

        st = perturb_orbital(small_setup["state"], (2,), (5,), 0.3)
        st = add_orbital(st, rng.normal(size=st.grid.shape) + 0j, 0.4)
        defect = kernel_hermitian_defect(st, small_setup["eq"], small_setup["seps"])
        scale = max(np.max(np.abs(density(st))), 1.0)
        assert defect < 1e-12 * scale
        # the interpolated kernel relation holds for band-limited states
        smooth = perturb_orbital(small_setup["state"], (2,), (5,), 0.3)
        ck = correlation_kernel(smooth, small_setup["eq"], small_setup["seps"])
        assert ck.hermitian_defect() < 1e-10 * max(np.max(np.abs(ck.values)), 1e-30)

    def test_mc_kernel_clt_rate(self, small_setup):
        st = small_setup["state"]
        errs = []
        for M in (64, 256, 1024):
            mc = realizations_from_orbitals(st, M, seed=2026)
            ck = correlation_kernel(mc, small_setup["eq"], small_setup["seps"])
            errs.append(np.max(np.abs(ck.values)))
        slope = np.polyfit(np.log([64, 256, 1024]), np.log(errs), 1)[0]
        assert abs(slope + 0.5) < 0.15


class TestMonteCarloBackend:
    def test_realizations_reproducible(self, small_setup):
        a = realizations_from_orbitals(small_setup["state"], 8, seed=3)
        b = realizations_from_orbitals(small_setup["state"], 8, seed=3)
        assert np.array_equal(a.realizations, b.realizations)

    def test_density_matches_orbital_backend(self, small_setup):
        # the random-field and density-matrix formulations agree to O(M^-1/2)
        grid = small_setup["grid"]
        w = small_setup["w"]
        orb = perturb_orbital(small_setup["state"], (2,), (5,), 0.05)
        M = 4096
        mc = realizations_from_orbitals(orb, M, seed=11)
        tr_o = evolve(orb, w, T=0.04, dt=0.02, stride=1)
        tr_m = evolve(mc, w, T=0.04, dt=0.02, stride=1)
        for so, sm in zip(tr_o.states, tr_m.states):
            rho_o = density(so)
            rho_m = density(sm)
            pseudo = np.abs(
                np.einsum("j,j...,j...->...", so.occupations, so.orbitals, so.orbitals)
            )
            std = np.sqrt(rho_o**2 + pseudo**2)
            assert np.all(np.abs(rho_m - rho_o) <= 5.0 * std / np.sqrt(M))

    def test_ensemble_mass_conserved(self, small_setup):
        mc = realizations_from_orbitals(small_setup["state"], 32, seed=5)
        traj = evolve(mc, small_setup["w"], T=0.1, dt=0.02, stride=1)
        m0 = total_mass(mc)
        for s in traj.states:
            assert abs(total_mass(s) - m0) / m0 < 1e-10


class TestPerturbationBookkeeping:
    def test_coefficients_vanish_at_equilibrium(self, small_setup):
        coeffs = perturbation_coefficients(small_setup["state"], small_setup["theta"])
        assert np.max(np.abs(coeffs)) == 0.0

    def test_perturb_unknown_mode_raises(self, small_setup):
        with pytest.raises(ValueError):
            perturb_orbital(small_setup["state"], (15,), (0,), 0.1)

    def test_separations_closed_under_negation(self, small_setup):
        seps = small_setup["seps"]
        assert (0.0,) in seps
        for z in seps:
            assert tuple(-c for c in z) in seps
