"""Tests for the QMUPL integrator, centre-of-mass reduction and Gaussian solutions"""

import math

import numpy as np
import pytest

from collapsar.config import build_sampler, outcome_weights, preset
from collapsar.core import NoiseStream, ParticleSpec, SpatialGrid, gaussian_state, product_state
from collapsar.errors import ConfigurationError, StepSizeError
from collapsar.ensemble import run_ensemble
from collapsar.hamiltonian import HamiltonianSpec
from collapsar.qmupl import (
    GaussianConfig,
    GaussianSampler,
    QmuplConfig,
    QmuplSampler,
    born_statistics,
    check_step_size,
    com_split,
    com_spread,
    gaussian_width_oracle,
    integrate_batch,
    make_output_times,
    mass_proportional_rates,
    qmupl_step,
    run_gaussian_trajectory,
    run_qmupl_trajectory,
    stationary_covariance,
    stationary_gaussian,
    stationary_mean_variance,
    stationary_width,
    stationary_width_parameter,
    variance_crossover_time,
    width_moments,
)


@pytest.fixture
def grid():
    return SpatialGrid(-4.0, 4.0, 128)


class TestStepSize:
    """Collapse-term guards"""

    def test_accuracy_guard_uses_guard_length(self, grid):
        with pytest.raises(StepSizeError):
            check_step_size(grid, [1.0], 1e-3)
        check_step_size(grid, [1.0], 1e-3, guard_length=2.0)

    def test_stability_guard_ignores_guard_length(self, grid):
        with pytest.raises(StepSizeError):
            check_step_size(grid, [1.0], 0.2, guard_length=0.01)

    def test_no_collapse_needs_only_positive_dt(self, grid):
        check_step_size(grid, [0.0], 10.0)
        with pytest.raises(StepSizeError):
            check_step_size(grid, [0.0], 0.0)

    def test_mass_proportional_rates(self):
        rates = mass_proportional_rates([ParticleSpec(1.0), ParticleSpec(4.0)], 0.5, m0=2.0)
        assert rates == [0.25, 1.0]


class TestGridIntegration:
    """Euler-Maruyama trajectories on the grid"""

    def test_step_keeps_unit_norm(self, grid):
        psi = gaussian_state(grid, 0.0, 0.5)
        out = qmupl_step(psi, HamiltonianSpec.none(), [1.0], np.array([0.01]), 1e-4, guard_length=2.0)
        assert out.norm_squared() == pytest.approx(1.0)

    def test_zero_rate_is_pure_schrodinger(self, grid):
        psi = gaussian_state(grid, 0.0, 0.5)
        out = qmupl_step(psi, HamiltonianSpec.none(), [0.0], np.array([0.3]), 1e-3)
        assert np.allclose(out.amplitudes, psi.amplitudes)

    def test_stationary_gaussian_keeps_its_width(self):
        grid = SpatialGrid(-8.0, 8.0, 256)
        config = QmuplConfig(grid=grid, particles=[ParticleSpec(1.0)], lambda0_sim=1.0, dt=2e-4, horizon=0.2,
                             initial_state=stationary_gaussian(grid, 0.0, 1.0, 1.0), output_every=100,
                             guard_length=2.0)
        log = run_qmupl_trajectory(config, NoiseStream(3, 0))
        assert len(log.times) == 11
        assert np.allclose(log.series["sigma_q"], stationary_width(1.0, 1.0), rtol=2e-2)
        assert np.max(np.abs(log.series["norm_drift"])) < 1e-3

    @pytest.mark.slow
    def test_wide_packet_relaxes_to_oracle_width(self):
        """The plateau follows the width oracle and scales as lambda^(-1/4)"""
        grid = SpatialGrid(-12.0, 12.0, 256)
        lambdas = [0.5, 1.0, 2.0, 4.0]
        plateaus = []
        for k, lam in enumerate(lambdas):
            config = QmuplConfig(grid=grid, particles=[ParticleSpec(1.0)], lambda0_sim=lam, dt=2e-4, horizon=8.0,
                                 initial_state=gaussian_state(grid, 0.0, 1.5), output_every=4000,
                                 guard_length=3.0, comoving=True)
            log = run_qmupl_trajectory(config, NoiseStream(17, k))
            oracle = gaussian_width_oracle(complex(1.0 / (4.0 * 1.5 ** 2)), lam, 1.0, 0.0, log.times)
            expected = np.sqrt(width_moments(oracle)[0])
            late = log.times >= 4.0
            assert np.allclose(log.series["sigma_q"][late], expected[late], rtol=0.02)
            assert log.series["sigma_q"][-1] == pytest.approx(stationary_width(lam, 1.0), rel=0.02)
            plateaus.append(log.series["sigma_q"][-1])
        exponent = np.polyfit(np.log(lambdas), np.log(plateaus), 1)[0]
        assert exponent == pytest.approx(-0.25, abs=0.03)

    @pytest.mark.slow
    def test_weak_first_order_in_dt(self):
        """Halving dt roughly halves the bias of the ensemble-mean squared width"""
        grid = SpatialGrid(-6.0, 6.0, 64)
        lam, horizon, dt_fine, n, block = 1.0, 1.0, 0.01, 20000, 5000
        exact = 1.0 / (4.0 * (1.0 + lam * horizon))
        fine = NoiseStream(23, 0).wiener(dt_fine, (n, 100, 1))
        coarse = fine[:, 0::2, :] + fine[:, 1::2, :]
        errors = []
        for dt, increments in ((2 * dt_fine, coarse), (dt_fine, fine)):
            config = QmuplConfig(grid=grid, particles=[ParticleSpec(1.0)], lambda0_sim=lam, dt=dt, horizon=horizon,
                                 initial_state=gaussian_state(grid, 0.0, 0.5), hamiltonian=HamiltonianSpec.none(),
                                 output_every=increments.shape[1], guard_length=0.7)
            config.validate()
            total = 0.0
            for start in range(0, n, block):
                series, _, _ = integrate_batch(config, increments[start:start + block])
                total += float(np.sum(series["sigma_q"][:, -1] ** 2))
            errors.append(abs(total / n - exact))
        assert 1.5 <= errors[0] / errors[1] <= 3.0

    def test_reproducible_and_chunk_independent(self):
        grid = SpatialGrid(-4.0, 4.0, 64)
        config = QmuplConfig(grid=grid, particles=[ParticleSpec(1.0)], lambda0_sim=1.0, dt=1e-3, horizon=0.1,
                             initial_state=gaussian_state(grid, 0.0, 0.5), hamiltonian=HamiltonianSpec.none(),
                             output_every=10, guard_length=2.0)
        sampler = QmuplSampler(config)
        both, _, _ = sampler.simulate([0, 1], 4)
        second, _, _ = sampler.simulate([1], 4)
        assert np.allclose(both["mean_q"][1], second["mean_q"][0], rtol=0, atol=1e-12)

    def test_validation_collects_problems(self, grid):
        with pytest.raises(ConfigurationError) as info:
            QmuplConfig(grid=grid, particles=[ParticleSpec(1.0), ParticleSpec(1.0)], lambda0_sim=-1.0,
                        dt=3e-3, horizon=0.01, initial_state=gaussian_state(grid, 0.0, 0.5),
                        comoving=True).validate()
        assert len(info.value.problems) == 4

    def test_density_series_is_a_state(self):
        grid = SpatialGrid(-4.0, 4.0, 32)
        config = QmuplConfig(grid=grid, particles=[ParticleSpec(1.0)], lambda0_sim=0.5, dt=1e-3, horizon=0.05,
                             initial_state=gaussian_state(grid, 0.0, 0.7), hamiltonian=HamiltonianSpec.none(),
                             output_every=10, guard_length=2.0)
        states = QmuplSampler(config).density_series(16, 2, chunk_size=5)
        assert len(states) == 6
        rho = states[-1].matrix
        assert np.allclose(rho, rho.conj().T)
        assert np.real(np.trace(rho)) == pytest.approx(1.0)
        with pytest.raises(ConfigurationError):
            QmuplSampler(QmuplConfig(grid=SpatialGrid(-4.0, 4.0, 128), particles=[ParticleSpec(1.0)],
                                     lambda0_sim=0.5, dt=1e-3, horizon=0.01,
                                     initial_state=gaussian_state(SpatialGrid(-4.0, 4.0, 128), 0.0, 0.7),
                                     hamiltonian=HamiltonianSpec.none(), guard_length=2.0)).density_series(2, 0)

    @pytest.mark.slow
    def test_born_frequencies(self):
        config = preset("born_default")
        stats = run_ensemble(build_sampler(config), 400, 21)
        summary = born_statistics(stats.records, outcome_weights(config))
        plus = summary["basins"][0]
        assert plus["frequency"] == pytest.approx(0.3, abs=4 * plus["standard_error"])


class TestCentreOfMass:
    """Reduction of composite bodies"""

    def test_split_two_particles(self):
        split = com_split([ParticleSpec(1.0), ParticleSpec(3.0)], 2.0)
        assert split.total_mass == 4.0
        assert split.lambdas == (2.0, 6.0)
        assert split.lambda_cm == 8.0
        assert split.reduced_mass == pytest.approx(0.75)
        assert split.lambda_rel == pytest.approx(1.5)

    def test_com_config_carries_total_rate(self, grid):
        split = com_split([ParticleSpec(1.0)] * 5, 0.2)
        config = split.com_config(grid, 1e-3, 0.1, gaussian_state(grid, 0.0, 0.5), guard_length=1.0)
        assert config.lambdas == pytest.approx([1.0])
        assert config.particles[0].mass == 5.0
        assert split.reduced_mass is None

    def test_com_spread_of_product_state(self):
        grid = SpatialGrid(-8.0, 8.0, 64)
        psi = product_state(gaussian_state(grid, -1.0, 1.0), gaussian_state(grid, 1.0, 1.0))
        mean, sigma = com_spread(psi, [1.0, 1.0])
        assert mean == pytest.approx(0.0, abs=1e-9)
        assert sigma == pytest.approx(math.sqrt(0.5), rel=1e-4)
        with pytest.raises(ConfigurationError):
            com_split([], 1.0)


class TestGaussianSolutions:
    """Closed-form widths, oracle and the Gaussian sampler"""

    def test_stationary_parameter_is_a_fixed_point(self):
        a = stationary_width_parameter(2.0, 3.0)
        values = gaussian_width_oracle(a, 2.0, 3.0, 0.0, [0.0, 1.0, 5.0])
        assert np.allclose(values, a, rtol=1e-8)
        var_q, cov, _ = width_moments(a)
        assert var_q == pytest.approx(stationary_width(2.0, 3.0) ** 2)
        assert cov == pytest.approx(stationary_covariance())

    def test_oracle_converges_from_a_wide_packet(self):
        a = gaussian_width_oracle(complex(0.05), 1.0, 1.0, 0.0, [0.0, 30.0])
        assert math.sqrt(width_moments(a)[0][-1]) == pytest.approx(stationary_width(1.0, 1.0), rel=1e-3)
        with pytest.raises(ConfigurationError):
            gaussian_width_oracle(complex(1.0), 1.0, 1.0, 0.0, [1.0, 0.5])

    def test_crossover_balances_linear_and_cubic_terms(self):
        lam, m = 0.3, 2.0
        t = variance_crossover_time(lam, m)
        sigma2, c = stationary_width(lam, m) ** 2, stationary_covariance()
        assert sigma2 ** 2 * t == pytest.approx(c ** 2 * t ** 3 / (3 * m ** 2))
        assert stationary_mean_variance(0.0, lam, m) == 0.0

    def test_output_times(self):
        linear = make_output_times(2.0, 4)
        assert np.allclose(linear, [0.0, 0.5, 1.0, 1.5, 2.0])
        log = make_output_times(100.0, 3, "log", t_min=1.0)
        assert np.allclose(log, [0.0, 1.0, 10.0, 100.0])
        with pytest.raises(ConfigurationError):
            make_output_times(1.0, 2, "cubic")

    def test_noiseless_oscillator_follows_classical_path(self):
        config = GaussianConfig(lambda_sim=0.0, omega=1.0, q0=1.0, width0=0.5, horizon=1.0, n_outputs=10)
        log = run_gaussian_trajectory(config, NoiseStream(0, 0))
        assert np.allclose(log.series["mean_q"], np.cos(log.times), atol=1e-2)

    def test_mean_variance_matches_closed_form(self):
        config = GaussianConfig(lambda_sim=1.0, horizon=1.0, n_outputs=10)
        series, records, flags = GaussianSampler(config).simulate(list(range(2000)), 5)
        observed = np.var(series["mean_q"][:, -1])
        assert observed == pytest.approx(float(stationary_mean_variance(1.0, 1.0, 1.0)), rel=0.12)
        assert records == [] and flags == 0

    def test_validation(self):
        with pytest.raises(ConfigurationError) as info:
            GaussianConfig(mass=0.0, lambda_sim=0.0, substeps=0).validate()
        assert len(info.value.problems) == 3
