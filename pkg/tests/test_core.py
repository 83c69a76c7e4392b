"""Tests for grids, wavefunctions, collapse parameters and noise streams"""

import math

import numpy as np
import pytest

from collapsar.core import (
    CollapseParams,
    GridWavefunction,
    NoiseStream,
    ParticleSpec,
    SpatialGrid,
    boundary_fraction,
    check_norm,
    coupling_constant,
    csl_gamma,
    expectation_momentum,
    expectation_position,
    gaussian_state,
    grw_rate,
    make_grid,
    normalize,
    product_state,
    spread_momentum,
    spread_position,
    superposition,
)
from collapsar.errors import ConfigurationError, DegenerateStateError, ShapeError


class TestSpatialGrid:
    """Grid construction and geometry"""

    def test_spacing_and_points(self):
        grid = make_grid(-4, 4, 128)
        assert grid.dx == pytest.approx(8 / 128)
        assert grid.x[0] == -4.0
        assert grid.x[-1] == pytest.approx(4 - 8 / 128)
        assert grid.half_width == 4.0

    def test_rejects_bad_bounds_and_sizes(self):
        with pytest.raises(ConfigurationError):
            SpatialGrid(1.0, -1.0, 64)
        with pytest.raises(ConfigurationError):
            SpatialGrid(-1.0, 1.0, 100)
        with pytest.raises(ConfigurationError) as info:
            SpatialGrid(1.0, 1.0, 3)
        assert len(info.value.problems) == 2

    def test_minimum_image_displacement(self):
        grid = SpatialGrid(-1.0, 1.0, 16)
        assert grid.displacement(np.array([0.9]), -0.9)[0] == pytest.approx(-0.2)
        assert grid.contains(-1.0)
        assert not grid.contains(1.0)


class TestGridWavefunction:
    """Normalization, moments and constructors"""

    def test_gaussian_moments(self):
        grid = SpatialGrid(-10.0, 10.0, 256)
        psi = gaussian_state(grid, 1.0, 0.5, momentum=2.0)
        assert psi.norm_squared() == pytest.approx(1.0)
        assert expectation_position(psi) == pytest.approx(1.0, abs=1e-10)
        assert spread_position(psi) == pytest.approx(0.5, rel=1e-6)
        assert expectation_momentum(psi) == pytest.approx(2.0, abs=1e-6)
        # minimum uncertainty
        assert spread_momentum(psi) == pytest.approx(1.0, rel=1e-6)

    def test_normalize_preserves_phase(self):
        grid = SpatialGrid(-5.0, 5.0, 64)
        psi = gaussian_state(grid, 0.0, 1.0)
        scaled = psi.with_amplitudes(3j * psi.amplitudes)
        back = normalize(scaled)
        assert np.allclose(back.amplitudes, 1j * psi.amplitudes)

    def test_normalize_zero_state_raises(self):
        grid = SpatialGrid(-5.0, 5.0, 64)
        with pytest.raises(DegenerateStateError):
            normalize(GridWavefunction(grid, np.zeros(64)))

    def test_check_norm(self):
        grid = SpatialGrid(-5.0, 5.0, 64)
        psi = gaussian_state(grid, 0.0, 1.0)
        check_norm(psi)
        with pytest.raises(DegenerateStateError):
            check_norm(psi.with_amplitudes(1.01 * psi.amplitudes))

    def test_superposition_weights(self):
        grid = SpatialGrid(-8.0, 8.0, 256)
        psi = superposition(grid, [-3.0, 3.0], [0.3, 0.7], 0.4)
        density = psi.marginal(0)
        left = np.sum(density[grid.x < 0]) * grid.dx
        assert left == pytest.approx(0.3, abs=1e-6)

    def test_batched_rows_are_independent(self):
        grid = SpatialGrid(-8.0, 8.0, 128)
        rows = np.stack([gaussian_state(grid, c, 0.5).amplitudes for c in (-2.0, 0.0, 2.0)])
        psi = GridWavefunction(grid, rows)
        assert psi.batch_shape == (3,)
        assert np.allclose(expectation_position(psi), [-2.0, 0.0, 2.0], atol=1e-9)
        assert psi.select(1).batch_shape == ()

    def test_product_state_marginals(self):
        grid = SpatialGrid(-8.0, 8.0, 64)
        psi = product_state(gaussian_state(grid, -1.0, 0.5), gaussian_state(grid, 2.0, 0.7))
        assert psi.n_particles == 2
        assert psi.norm_squared() == pytest.approx(1.0)
        assert expectation_position(psi, 1) == pytest.approx(2.0, abs=1e-8)
        assert spread_position(psi, 1) == pytest.approx(0.7, rel=1e-5)

    def test_particle_limits(self):
        grid = SpatialGrid(-8.0, 8.0, 128)
        with pytest.raises(ConfigurationError):
            GridWavefunction(grid, np.zeros(8), n_particles=3)
        with pytest.raises(ShapeError):
            GridWavefunction(grid, np.zeros(100))

    def test_boundary_fraction(self):
        grid = SpatialGrid(-8.0, 8.0, 128)
        assert boundary_fraction(gaussian_state(grid, 0.0, 0.5)) < 1e-12
        assert boundary_fraction(gaussian_state(grid, 7.5, 0.5)) > 1e-3


class TestCollapseParams:
    """Parameter validation and mass proportionality"""

    def test_si_defaults(self):
        params = CollapseParams.si_defaults()
        assert params.grw_lambda == 1e-16
        assert params.alpha == 1e14
        assert params.gamma == pytest.approx(csl_gamma(1e-16, 1e14))

    def test_rejects_non_positive(self):
        with pytest.raises(ConfigurationError) as info:
            CollapseParams(grw_lambda=-1.0, alpha=0.0, qmupl_lambda0=1.0, m0=1.0)
        assert len(info.value.problems) == 2

    def test_mass_proportional_rates(self):
        params = CollapseParams.simulation(2.0)
        heavy = ParticleSpec(10.0)
        assert coupling_constant(heavy, params) == pytest.approx(20.0)
        assert grw_rate(heavy, params) == pytest.approx(20.0)
        assert csl_gamma(1.0, 4 * math.pi) == pytest.approx(1.0)


class TestNoiseStream:
    """Reproducible per-trajectory randomness"""

    def test_same_key_same_draws(self):
        a = NoiseStream(42, 3).wiener(0.01, 100)
        b = NoiseStream(42, 3).wiener(0.01, 100)
        assert np.array_equal(a, b)

    def test_distinct_trajectories_and_substreams(self):
        base = NoiseStream(42, 3).wiener(0.01, 50)
        assert not np.array_equal(base, NoiseStream(42, 4).wiener(0.01, 50))
        assert not np.array_equal(base, NoiseStream(42, 3).child(1).wiener(0.01, 50))

    def test_wiener_variance(self):
        draws = NoiseStream(1, 0).wiener(0.04, 20000)
        assert np.mean(draws) == pytest.approx(0.0, abs=5 * 0.2 / math.sqrt(20000))
        assert np.var(draws) == pytest.approx(0.04, rel=0.05)

    def test_counter_and_seed_range(self):
        stream = NoiseStream(0, 0)
        stream.wiener(0.1, (4, 5))
        stream.uniform()
        assert stream.counter == 21
        with pytest.raises(ConfigurationError):
            NoiseStream(-1, 0)
        with pytest.raises(ConfigurationError):
            NoiseStream(2 ** 64, 0)
