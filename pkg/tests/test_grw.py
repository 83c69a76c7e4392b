"""Tests for the GRW jump process"""

import math

import numpy as np
import pytest

from collapsar.core import (
    CollapseParams,
    NoiseStream,
    ParticleSpec,
    SpatialGrid,
    gaussian_state,
    product_state,
    spread_position,
    superposition,
)
from collapsar.errors import ConfigurationError, DegenerateJumpError, FitError
from collapsar.grw import (
    GrwConfig,
    GrwSampler,
    amplification_exponent,
    apply_jump,
    collapse_time,
    jump_position_density,
    minority_weight,
    sample_jump_center,
    sample_jump_times,
    simulate_grw,
)
from collapsar.hamiltonian import HamiltonianSpec, SplitStepPropagator


@pytest.fixture
def wide_grid():
    return SpatialGrid(-16.0, 16.0, 1024)


class TestJumpTimes:
    """Poisson event times"""

    def test_zero_rate_has_no_events(self):
        assert sample_jump_times(0.0, 10.0, NoiseStream(0, 0)) == []

    def test_count_matches_rate(self):
        times = sample_jump_times(5.0, 200.0, NoiseStream(1, 0))
        assert len(times) == pytest.approx(1000, abs=3 * math.sqrt(1000))
        assert times == sorted(times)
        assert 0.0 < times[0] and times[-1] <= 200.0

    def test_invalid_arguments(self):
        with pytest.raises(ConfigurationError):
            sample_jump_times(-1.0, 1.0, NoiseStream(0, 0))
        with pytest.raises(ConfigurationError):
            sample_jump_times(1.0, 0.0, NoiseStream(0, 0))


class TestJump:
    """Localization operator and center sampling"""

    def test_post_jump_variance(self, wide_grid):
        psi, record = apply_jump(gaussian_state(wide_grid, 0.0, 1.0), 0, 0.0, 1.0)
        # 1/var = 1/sigma^2 + 2 alpha
        assert spread_position(psi) ** 2 == pytest.approx(1.0 / 3.0, rel=1e-6)
        assert psi.norm_squared() == pytest.approx(1.0)
        assert record.spread_before == pytest.approx(1.0, rel=1e-6)
        assert record.spread_after < record.spread_before

    def test_jump_acts_on_one_particle(self):
        grid = SpatialGrid(-8.0, 8.0, 64)
        psi = product_state(gaussian_state(grid, 0.0, 1.0), gaussian_state(grid, 0.0, 1.0))
        jumped, record = apply_jump(psi, 1, 0.0, 1.0)
        assert record.particle == 1
        assert spread_position(jumped, 0) == pytest.approx(1.0, rel=1e-4)
        assert spread_position(jumped, 1) == pytest.approx(math.sqrt(1.0 / 3.0), rel=1e-3)

    def test_jump_without_support_raises(self, wide_grid):
        psi = gaussian_state(wide_grid, -10.0, 0.1)
        with pytest.raises(DegenerateJumpError):
            apply_jump(psi, 0, 10.0, 100.0)
        with pytest.raises(ConfigurationError):
            apply_jump(psi, 0, 20.0, 1.0)

    def test_center_density_is_normalized(self, wide_grid):
        psi = superposition(wide_grid, [-3.0, 3.0], [0.5, 0.5], 0.5)
        density = jump_position_density(psi, 0, 2.0)
        assert np.all(density >= 0.0)
        assert np.sum(density) * wide_grid.dx == pytest.approx(1.0)
        with pytest.raises(ConfigurationError):
            jump_position_density(psi, 0, 0.0)

    def test_center_sampling_follows_density(self):
        grid = SpatialGrid(-1.0, 1.0, 16)
        density = np.zeros(16)
        density[10] = 1.0 / grid.dx
        for u in (0.0, 0.3, 0.999):
            assert sample_jump_center(grid, density, u) == grid.x[10]


class TestSimulation:
    """Event-driven trajectories"""

    def test_reproducible_given_noise(self, wide_grid):
        psi0 = gaussian_state(wide_grid, 0.0, 2.0)
        params = CollapseParams.simulation(1.0)
        args = (psi0, HamiltonianSpec.none(), [ParticleSpec(1.0)], params, 5.0)
        a, jumps_a, _ = simulate_grw(*args, NoiseStream(9, 2))
        b, jumps_b, _ = simulate_grw(*args, NoiseStream(9, 2))
        assert [j.to_dict() for j in jumps_a] == [j.to_dict() for j in jumps_b]
        assert np.array_equal(a.amplitudes, b.amplitudes)

    def test_snapshots_at_requested_times(self):
        psi0 = gaussian_state(SpatialGrid(-8.0, 8.0, 128), 0.0, 1.0)
        times = [0.0, 0.5, 1.0]
        _, _, snapshots = simulate_grw(psi0, HamiltonianSpec.free(), [ParticleSpec(1.0)],
                                       CollapseParams.simulation(0.5), 1.0, NoiseStream(0, 0),
                                       dt=1e-3, output_times=times)
        assert [t for t, _ in snapshots] == times
        assert np.array_equal(snapshots[0][1].amplitudes, psi0.amplitudes)

    def test_steps_restart_at_each_event(self):
        """An output between grid steps ends its interval with one short remainder step"""
        grid = SpatialGrid(-8.0, 8.0, 128)
        psi0 = gaussian_state(grid, 0.0, 1.0, momentum=1.0)
        h = HamiltonianSpec.free()
        _, jumps, snapshots = simulate_grw(psi0, h, [ParticleSpec(1.0)], CollapseParams.simulation(1e-9), 0.01,
                                           NoiseStream(0, 0), dt=1e-3, output_times=[0.0025])
        assert jumps == []
        full = SplitStepPropagator(grid, h, 1e-3)
        expected = SplitStepPropagator(grid, h, 5e-4).apply(full.apply(full.apply(psi0)))
        assert np.allclose(snapshots[0][1].amplitudes, expected.amplitudes, atol=1e-12)

    def test_free_evolution_needs_dt(self, wide_grid):
        with pytest.raises(ConfigurationError):
            simulate_grw(gaussian_state(wide_grid, 0.0, 1.0), HamiltonianSpec.free(), [ParticleSpec(1.0)],
                         CollapseParams.simulation(1.0), 1.0, NoiseStream(0, 0))

    def test_observer_sees_every_jump(self, wide_grid):
        seen = []
        _, jumps, _ = simulate_grw(gaussian_state(wide_grid, 0.0, 2.0), HamiltonianSpec.none(),
                                   [ParticleSpec(1.0)], CollapseParams.simulation(2.0), 3.0, NoiseStream(4, 0),
                                   observer=lambda t, psi, record: seen.append(record))
        assert seen == jumps


class TestCollapseTime:
    """Macroscopic superpositions and amplification"""

    def test_first_jump_collapses_distant_lobes(self):
        grid = SpatialGrid(-8.0, 8.0, 256)
        psi0 = superposition(grid, [-3.0, 3.0], [0.5, 0.5], 0.3)
        assert minority_weight(psi0, 0.0) == pytest.approx(0.5, abs=1e-9)
        params = CollapseParams.simulation(1.0)
        t = collapse_time(psi0, ParticleSpec(1.0), params, 50.0, NoiseStream(3, 0))
        _, jumps = simulate_grw(psi0, HamiltonianSpec.none(), [ParticleSpec(1.0)], params, 50.0,
                                NoiseStream(3, 0))[:2]
        assert t == jumps[0].time

    def test_heavier_objects_collapse_sooner(self):
        grid = SpatialGrid(-8.0, 8.0, 256)
        psi0 = superposition(grid, [-3.0, 3.0], [0.5, 0.5], 0.3)
        params = CollapseParams.simulation(1.0)
        light = [collapse_time(psi0, ParticleSpec(1.0), params, 100.0, NoiseStream(0, i)) for i in range(40)]
        heavy = [collapse_time(psi0, ParticleSpec(10.0), params, 100.0, NoiseStream(0, i)) for i in range(40)]
        assert np.mean(heavy) < np.mean(light)

    def test_amplification_exponent(self):
        sizes = [1.0, 10.0, 100.0]
        assert amplification_exponent(sizes, [5.0 / n for n in sizes]) == pytest.approx(-1.0)
        with pytest.raises(FitError):
            amplification_exponent([1.0], [1.0])


class TestGrwSampler:
    """Ensemble adapter"""

    def make_config(self, **overrides):
        grid = SpatialGrid(-8.0, 8.0, 128)
        values = dict(grid=grid, particles=[ParticleSpec(1.0)], params=CollapseParams.simulation(1.0),
                      horizon=2.0, initial_state=gaussian_state(grid, 0.0, 1.0), n_outputs=4)
        values.update(overrides)
        return GrwConfig(**values)

    def test_block_shapes_and_records(self):
        sampler = GrwSampler(self.make_config())
        series, records, flags = sampler.simulate([0, 1], 5)
        assert series["sigma_q"].shape == (2, 5)
        assert sampler.times[-1] == 2.0
        assert {r["index"] for r in records} <= {0, 1}
        assert flags == 0
        assert sampler.describe()["model"] == "grw"

    def test_validation(self):
        with pytest.raises(ConfigurationError) as info:
            GrwSampler(self.make_config(horizon=0.0, hamiltonian=HamiltonianSpec.free()))
        assert len(info.value.problems) == 2
