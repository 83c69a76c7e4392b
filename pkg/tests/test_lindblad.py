"""Tests for density operators and the grid master equation"""

import logging

import numpy as np
import pytest

from collapsar.core import ParticleSpec, SpatialGrid, gaussian_state, superposition
from collapsar.errors import ConfigurationError, ShapeError, StepSizeError
from collapsar.hamiltonian import HamiltonianSpec
from collapsar.lindblad import (
    DensityOperator,
    LindbladGenerator,
    coherence_closed_form,
    coherence_decay_rate,
    ensemble_density,
    evolve_lindblad,
    lindblad_observables,
    lindblad_series,
    lindblad_step,
    momentum_matrix,
    purity,
    to_rows,
    trace_distance,
)
from collapsar.qmupl import QmuplConfig, QmuplSampler


@pytest.fixture
def small_grid():
    return SpatialGrid(-2.0, 2.0, 16)


class TestDensityOperator:
    """Validation and basic functionals"""

    def test_rejects_invalid_matrices(self):
        with pytest.raises(ShapeError):
            DensityOperator(np.ones((2, 3)))
        with pytest.raises(ShapeError):
            DensityOperator(np.array([[0.5, 0.3], [0.1, 0.5]]))
        with pytest.raises(ShapeError):
            DensityOperator(np.eye(2))

    def test_purity_and_trace_distance(self):
        up = DensityOperator.from_vector([1.0, 0.0])
        down = DensityOperator.from_vector([0.0, 1.0])
        mixed = DensityOperator(np.eye(2) / 2)
        assert purity(up) == pytest.approx(1.0)
        assert purity(mixed) == pytest.approx(0.5)
        assert trace_distance(up, down) == pytest.approx(1.0)
        assert trace_distance(up, up) == pytest.approx(0.0)
        assert trace_distance(up, mixed) == pytest.approx(0.5)
        with pytest.raises(ShapeError):
            trace_distance(up, DensityOperator(np.eye(3) / 3))

    def test_pure_grid_state(self, small_grid):
        rho = DensityOperator.pure(gaussian_state(small_grid, 0.0, 0.5))
        assert rho.trace == pytest.approx(1.0)
        assert purity(rho) == pytest.approx(1.0)
        assert rho.is_positive()

    def test_ensemble_density_counts_batch_rows(self, small_grid):
        a = gaussian_state(small_grid, -1.0, 0.3)
        b = gaussian_state(small_grid, 1.0, 0.3)
        rho = ensemble_density([a, b])
        assert purity(rho) == pytest.approx(0.5, abs=1e-3)
        with pytest.raises(ConfigurationError):
            ensemble_density([])

    def test_csv_rows(self, small_grid):
        rows = to_rows(DensityOperator.pure(gaussian_state(small_grid, 0.0, 0.5)))
        assert len(rows) == 256
        assert set(rows[0]) == {"i", "j", "re", "im"}


class TestMasterEquation:
    """RK4 integration of the Lindblad equation"""

    def test_coherence_decay_matches_closed_form(self, small_grid):
        rho0 = DensityOperator.pure(gaussian_state(small_grid, 0.0, 0.8))
        generator = LindbladGenerator.for_grid(small_grid, HamiltonianSpec.none(), [1.0])
        times, states = evolve_lindblad(rho0, generator, 1e-3, 500, every=100)
        assert len(states) == 6
        assert times[-1] == pytest.approx(0.5)
        exact = coherence_closed_form(rho0, 1.0, 0.5).matrix
        assert np.allclose(states[-1].matrix, exact, rtol=1e-6, atol=1e-12)

    def test_pure_collapse_keeps_populations(self, small_grid):
        rho0 = DensityOperator.pure(superposition(small_grid, [-1.0, 1.0], [0.5, 0.5], 0.3))
        rho = lindblad_step(rho0, HamiltonianSpec.none(), [2.0], 1e-3)
        assert np.allclose(rho.populations, rho0.populations)
        assert purity(rho) < purity(rho0)
        assert rho.is_positive()

    def test_warns_when_positivity_is_lost(self, caplog):
        generator = LindbladGenerator(np.zeros((2, 2)), [np.array([0.0, 1.0])], [1.0])
        with caplog.at_level(logging.WARNING, logger="collapsar.lindblad"):
            evolve_lindblad(DensityOperator.from_vector(np.array([0.6, 0.8])), generator, 0.01, 10)
            assert not caplog.records
            _, states = evolve_lindblad(DensityOperator(np.diag([1.2, -0.2])), generator, 0.01, 10)
        assert not states[-1].is_positive()
        assert "lost positivity" in caplog.text

    def test_decay_rate(self):
        assert coherence_decay_rate(2.0, 0.5) == 1.0
        with pytest.raises(ConfigurationError):
            coherence_decay_rate(1.0, -1.0)

    def test_step_guard(self, small_grid):
        generator = LindbladGenerator.for_grid(small_grid, HamiltonianSpec.none(), [100.0])
        with pytest.raises(StepSizeError):
            generator.check_step(1.0)
        with pytest.raises(StepSizeError):
            generator.check_step(0.0)

    def test_grid_generator_limits(self, small_grid):
        with pytest.raises(ConfigurationError):
            LindbladGenerator.for_grid(small_grid, HamiltonianSpec.free(1.0, 1.0), [1.0, 1.0])
        with pytest.raises(ConfigurationError):
            lindblad_step(DensityOperator(np.eye(2) / 2), HamiltonianSpec.none(), [1.0], 1e-3)
        with pytest.raises(ConfigurationError):
            LindbladGenerator(np.zeros((2, 2)), [np.array([1.0, -1.0])], [-1.0])

    def test_explicit_basis_generator(self):
        generator = LindbladGenerator(np.zeros((2, 2)), [np.array([1.0, -1.0])], [0.25])
        rho0 = DensityOperator(np.full((2, 2), 0.5))
        rho = lindblad_step(rho0, generator, dt=0.01)
        # damping of the off-diagonal element is (rate/2)(a_0 - a_1)^2 = 0.5
        assert rho.matrix[0, 1].real == pytest.approx(0.5 * np.exp(-0.5 * 0.01), rel=1e-9)


class TestObservables:
    """Linear observables of grid density operators"""

    def test_momentum_of_boosted_packet(self):
        grid = SpatialGrid(-8.0, 8.0, 64)
        rho = DensityOperator.pure(gaussian_state(grid, 1.0, 1.0, momentum=2.0))
        observed = lindblad_observables(rho, HamiltonianSpec.free())
        assert observed["mean_q"] == pytest.approx(1.0, abs=1e-8)
        assert observed["mean_p"] == pytest.approx(2.0, abs=1e-6)
        # <p^2>/2m = (p0^2 + 1/(4 sigma^2)) / 2
        assert observed["energy"] == pytest.approx(0.5 * (4.0 + 0.25), rel=1e-6)
        m = momentum_matrix(grid)
        assert np.allclose(m, m.conj().T)

    def test_series_alignment(self, small_grid):
        rho0 = DensityOperator.pure(gaussian_state(small_grid, 0.0, 0.5))
        times, series, states = lindblad_series(rho0, HamiltonianSpec.free(), [1.0], 1e-3, 20, every=5)
        assert np.allclose(times, [0.0, 0.005, 0.01, 0.015, 0.02])
        assert set(series) == {"mean_q", "mean_p", "energy", "second_q"}
        assert len(states) == len(times)


class TestUnravelling:
    """Trajectory ensembles average to the master-equation solution"""

    def test_qmupl_ensemble_matches_lindblad(self):
        grid = SpatialGrid(-2.0, 2.0, 32)
        psi0 = superposition(grid, [-1.0, 1.0], [0.5, 0.5], 0.3)
        config = QmuplConfig(grid=grid, particles=[ParticleSpec(1.0)], lambda0_sim=4.0, dt=1e-3, horizon=0.25,
                             initial_state=psi0, hamiltonian=HamiltonianSpec.none(), output_every=50,
                             guard_length=1.0)
        ensemble = QmuplSampler(config).density_series(400, 13)
        _, _, exact = lindblad_series(DensityOperator.pure(psi0), HamiltonianSpec.none(), [4.0], 1e-3, 250,
                                      every=50)
        assert len(ensemble) == len(exact)
        assert trace_distance(ensemble[-1], exact[-1]) < 0.1
        assert trace_distance(exact[0], exact[-1]) > 0.3

    @pytest.mark.slow
    def test_free_particle_ensemble_tracks_master_equation(self):
        """Ten thousand free-particle trajectories stay within 0.02 of the master equation at every output"""
        grid = SpatialGrid(-4.0, 4.0, 16)
        psi0 = superposition(grid, [-1.5, 1.5], [0.5, 0.5], 0.6)
        h = HamiltonianSpec.free()
        config = QmuplConfig(grid=grid, particles=[ParticleSpec(1.0)], lambda0_sim=1.0, dt=1e-3, horizon=1.0,
                             initial_state=psi0, hamiltonian=h, output_every=200, guard_length=2.0)
        ensemble = QmuplSampler(config).density_series(10000, 21, chunk_size=500)
        _, _, exact = lindblad_series(DensityOperator.pure(psi0), h, [1.0], 1e-3, 1000, every=200)
        assert len(ensemble) == len(exact) == 6
        distances = [trace_distance(a, b) for a, b in zip(ensemble[1:], exact[1:])]
        assert max(distances) <= 0.02, distances
        _, _, unitary = lindblad_series(DensityOperator.pure(psi0), h, [0.0], 1e-3, 1000, every=200)
        assert trace_distance(ensemble[-1], unitary[-1]) > 0.1
