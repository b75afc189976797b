"""Drift-diffusion integration: slopes, enhancement, conservation checks."""

import numpy as np
import pytest
from scipy import stats

from scalehom import particle as pa
from scalehom.corrector import sample_stream_function
from scalehom.fieldsim import TorusGrid
from scalehom.rng import stream


@pytest.fixture(scope="module")
def drift_env():
    grid = TorusGrid.for_cutoff(16.0, 512, 2.0)
    coef = sample_stream_function(grid, 0.4, 16.0, stream(3, "env"))
    return pa.DriftField.from_stream(coef.psi, grid)


class TestDriftField:
    def test_divergence_free_spectrally(self, drift_env):
        assert drift_env.max_divergence() < 1e-10

    def test_finite_amplitude(self, drift_env):
        assert np.isfinite(drift_env.sup_norm())
        assert drift_env.sup_norm() > 0.0

    def test_interpolation_exact_on_nodes(self, drift_env):
        h = drift_env.grid.spacing
        idx = np.array([[3, 7], [100, 200], [511, 0]])
        pos = idx * h
        vals = drift_env.at(pos.astype(float))
        for (i, j), v in zip(idx, vals):
            assert np.allclose(v, drift_env.b[:, i, j], atol=1e-12)

    def test_interpolation_wraps(self, drift_env):
        box = drift_env.grid.box_len
        a = drift_env.at(np.array([[0.3, 0.7]]))
        b = drift_env.at(np.array([[0.3 + 5 * box, 0.7 - 3 * box]]))
        assert np.allclose(a, b, atol=1e-9)


class TestPureDiffusion:
    def test_slope_two_per_component(self):
        grid = TorusGrid(32, 20.0)
        est = pa.euler_maruyama(pa.DriftField.zero(grid), 0.1, 20.0, 200_000,
                                stream(0, "b0"))
        slope = est.msd[:, -1] / est.times[-1]
        assert np.all(np.abs(slope - 2.0) < 0.02)

    def test_msd_linear_across_times(self):
        grid = TorusGrid(32, 20.0)
        est = pa.euler_maruyama(pa.DriftField.zero(grid), 0.1, 50.0, 100_000,
                                stream(1, "b1"))
        z = np.abs(est.total - 4.0 * est.times) / est.total_se
        assert np.max(z) < 4.0


class TestEulerMaruyama:
    def test_rejects_coarse_step(self, drift_env):
        with pytest.raises(ValueError):
            pa.euler_maruyama(drift_env, 0.2, 10.0, 100, stream(2, "x"))

    def test_monotone_within_noise(self, drift_env):
        est = pa.euler_maruyama(drift_env, 0.1, 50.0, 20_000, stream(4, "m"))
        est.validate()
        assert np.all(est.msd >= 0.0)

    def test_enhancement_direction(self, drift_env):
        est = pa.euler_maruyama(drift_env, 0.1, 100.0, 40_000, stream(5, "e"))
        ratio = est.total / (4.0 * est.times)
        z_floor = (ratio - 1.0) * 4.0 * est.times / est.total_se
        assert np.all(z_floor > -3.0)
        assert ratio[-1] > 1.05   # visible enhancement at this amplitude

    def test_step_refinement_consistent(self, drift_env):
        t_check = np.array([96.0])
        a = pa.euler_maruyama(drift_env, 0.1, 96.0, 60_000, stream(6, "r1"),
                              sample_times=t_check)
        b = pa.euler_maruyama(drift_env, 0.05, 96.0, 60_000, stream(7, "r2"),
                              sample_times=t_check)
        gap = abs(a.total[0] - b.total[0])
        assert gap < 2.0 * np.hypot(a.total_se[0], b.total_se[0])


class TestGrowthRatio:
    def _fake(self, times, level, n=1000):
        times = np.asarray(times, dtype=float)
        msd = np.tile(level * times, (2, 1)) / 2.0
        se = 0.01 * msd + 1e-12
        return pa.MsdEstimate(np.asarray(times, dtype=float), msd, se, n)

    def test_equal_ranges_give_unit_ratio(self):
        t = np.array([10.0, 50.0, 200.0])
        r, se, tc = pa.msd_growth_ratio(self._fake(t, 2.0), self._fake(t, 2.0), 16.0)
        assert r == pytest.approx(1.0) and tc == 200.0
        assert abs(r - 1.0) <= se * 3

    def test_saturation_cap_selects_time(self):
        t = np.array([10.0, 50.0, 200.0, 400.0])
        _, _, tc = pa.msd_growth_ratio(self._fake(t, 2.0), self._fake(t, 2.2), 16.0)
        assert tc == 200.0   # largest common time <= 256

    def test_disjoint_times_rejected(self):
        with pytest.raises(ValueError):
            pa.msd_growth_ratio(self._fake([10.0], 2.0),
                                self._fake([20.0], 2.0), 16.0)

    def test_monotone_infrared_enhancement(self):
        times = pa.default_sample_times(0.1, 100.0)
        lo = pa.annealed_msd(0.4, 8.0, 256, 0.1, 100.0, n_envs=6,
                             paths_per_env=4096, seed=8, sample_times=times)
        hi = pa.annealed_msd(0.4, 32.0, 1024, 0.1, 100.0, n_envs=6,
                             paths_per_env=4096, seed=9, sample_times=times)
        r, se, _ = pa.msd_growth_ratio(lo.as_estimate(), hi.as_estimate(), 8.0)
        assert r > 1.0 - 3.0 * se


class TestOccupancy:
    def test_uniform_law_preserved(self, drift_env):
        counts = pa.occupancy_counts(drift_env, 0.1, 30.0, 120_000,
                                     stream(10, "occ"), n_cells=8)
        expected = counts.sum() / counts.size
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        p = stats.chi2.sf(chi2, counts.size - 1)
        assert p > 1e-4
