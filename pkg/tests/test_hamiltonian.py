"""Tests for Hamiltonians, the split-step propagator and the comoving frame"""

import numpy as np
import pytest

from collapsar.core import (GridWavefunction, SpatialGrid, expectation_momentum, expectation_position,
                            gaussian_state, spread_position)
from collapsar.errors import ConfigurationError, ShapeError, StepSizeError
from collapsar.hamiltonian import (
    ComovingFrame,
    HamiltonianKind,
    HamiltonianSpec,
    SplitStepPropagator,
    energy_expectation,
    evolve_schrodinger,
    max_kinetic_eigenvalue,
)


@pytest.fixture
def grid():
    return SpatialGrid(-20.0, 20.0, 256)


class TestHamiltonianSpec:
    """Construction and closed-form helpers"""

    def test_invalid_values_collected(self):
        with pytest.raises(ConfigurationError) as info:
            HamiltonianSpec(HamiltonianKind.HARMONIC, masses=(-1.0,), omega=-2.0)
        assert len(info.value.problems) == 2

    def test_without_coupling_keeps_levels(self):
        h = HamiltonianSpec.measurement(1.0, 600.0)
        off = h.without_coupling()
        assert off.kind == HamiltonianKind.MEASUREMENT
        assert off.coupling == 0.0
        assert HamiltonianSpec.free().without_coupling() == HamiltonianSpec.free()

    def test_dense_matrix_is_hermitian(self):
        small = SpatialGrid(-4.0, 4.0, 32)
        m = HamiltonianSpec.harmonic(1.0).matrix(small)
        assert np.allclose(m, m.conj().T)
        with pytest.raises(ShapeError):
            HamiltonianSpec.free().matrix(SpatialGrid(-4.0, 4.0, 128))

    def test_classical_paths(self):
        t = np.linspace(0, 1, 5)
        q, p = HamiltonianSpec.harmonic(2.0).classical_path(1.0, 0.0, t)
        assert np.allclose(q, np.cos(2.0 * t))
        q, p = HamiltonianSpec.linear(9.8).classical_path(0.0, 0.0, t)
        assert np.allclose(p, -9.8 * t)


class TestSplitStep:
    """Unitary evolution"""

    def test_free_packet_moves_ballistically(self, grid):
        psi = gaussian_state(grid, -5.0, 1.0, momentum=2.0)
        h = HamiltonianSpec.free()
        prop = SplitStepPropagator(grid, h, 0.002)
        for _ in range(1000):
            psi = prop.apply(psi)
        assert psi.norm_squared() == pytest.approx(1.0, abs=1e-12)
        assert expectation_position(psi) == pytest.approx(-1.0, abs=1e-6)
        # free spreading sigma(t)^2 = sigma0^2 + (t / (2 m sigma0))^2
        assert spread_position(psi) == pytest.approx(np.sqrt(1.0 + 1.0), rel=1e-6)

    def test_energy_conserved_in_oscillator(self, grid):
        h = HamiltonianSpec.harmonic(1.0)
        psi = gaussian_state(grid, 2.0, 0.8)
        e0 = energy_expectation(psi, h)
        for _ in range(1500):
            psi = evolve_schrodinger(psi, h, 0.002)
        assert energy_expectation(psi, h) == pytest.approx(e0, rel=1e-4)
        assert expectation_position(psi) == pytest.approx(2.0 * np.cos(3.0), abs=1e-3)

    def test_second_order_in_dt(self):
        """Halving dt cuts the error of <q> against the classical path about fourfold"""
        grid = SpatialGrid(-10.0, 10.0, 64)
        h = HamiltonianSpec.harmonic(1.0)
        horizon = 1.6
        q_exact = h.classical_path(2.0, 0.0, np.array([horizon]))[0][0]
        errors = []
        for dt in (0.008, 0.004):
            psi = gaussian_state(grid, 2.0, np.sqrt(0.5))
            prop = SplitStepPropagator(grid, h, dt)
            for _ in range(int(round(horizon / dt))):
                psi = prop.apply(psi)
            errors.append(abs(float(expectation_position(psi)) - q_exact))
        assert 3.5 <= errors[0] / errors[1] <= 4.5

    def test_kinetic_guard(self, grid):
        t_max = max_kinetic_eigenvalue(grid, HamiltonianSpec.free())
        with pytest.raises(StepSizeError):
            SplitStepPropagator(grid, HamiltonianSpec.free(), 0.6 / t_max)
        with pytest.raises(StepSizeError):
            SplitStepPropagator(grid, HamiltonianSpec.free(), 0.0)

    def test_measurement_coupling_separates_branches(self):
        grid = SpatialGrid(-4.0, 4.0, 256)
        h = HamiltonianSpec.measurement(1.0, 100.0)
        phi = gaussian_state(grid, 0.0, 0.2).amplitudes
        psi = GridWavefunction(grid, np.stack([phi, phi]) / np.sqrt(2.0), levels=2)
        prop = SplitStepPropagator(grid, h, 1e-3)
        for _ in range(1000):
            psi = prop.apply(psi)
        plus = GridWavefunction(grid, np.sqrt(2.0) * psi.amplitudes[0])
        minus = GridWavefunction(grid, np.sqrt(2.0) * psi.amplitudes[1])
        assert expectation_position(plus) == pytest.approx(1.0, abs=1e-6)
        assert expectation_position(minus) == pytest.approx(-1.0, abs=1e-6)

    def test_levels_mismatch(self, grid):
        prop = SplitStepPropagator(grid, HamiltonianSpec.measurement(1.0, 1.0), 1e-3)
        with pytest.raises(ShapeError):
            prop.apply(gaussian_state(grid, 0.0, 1.0))


class TestComovingFrame:
    """Whole-cell translation and boosts"""

    def test_recenter_tracks_physical_position(self, grid):
        frame = ComovingFrame(grid, HamiltonianSpec.free())
        psi = gaussian_state(grid, 12.0, 1.0)
        shifted = frame.recenter(psi)
        assert abs(expectation_position(shifted)) < grid.dx
        assert expectation_position(shifted) + frame.x_offset == pytest.approx(12.0, abs=1e-9)

    def test_boost_tracks_momentum(self, grid):
        frame = ComovingFrame(grid, HamiltonianSpec.free())
        k_max = np.pi / grid.dx
        p = 0.5 * k_max
        psi = gaussian_state(grid, 0.0, 1.0, momentum=p)
        boosted = frame.recenter(psi)
        assert expectation_momentum(boosted) + frame.k_offset == pytest.approx(p, abs=1e-6)

    def test_rejects_potentials(self, grid):
        with pytest.raises(ConfigurationError):
            ComovingFrame(grid, HamiltonianSpec.harmonic(1.0))
