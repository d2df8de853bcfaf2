import math

import numpy as np
import pytest

from fockherald import correlate, model, simgen, stats
from fockherald.correlate import CubeAxes, CoincidenceCube, Histogram
from fockherald.events import CHANNEL_A, CHANNEL_B

from conftest import make_rng_streams


def poisson_times(rng, rate, duration_s):
    n = rng.poisson(rate * duration_s)
    return np.sort(rng.integers(0, int(duration_s * 1e12), n))


class TestG2Unheralded:
    def test_independent_streams_are_flat(self):
        rng = np.random.default_rng(0)
        t_a = poisson_times(rng, 5e4, 10.0)
        t_b = poisson_times(rng, 5e4, 10.0)
        curve = stats.g2_unheralded(t_a, t_b, 0.5e-6, 10e-6, duration=10.0)
        assert np.all(np.abs(curve.g2 - 1.0) < 4.5 * curve.stderr)
        assert abs(curve.g2.mean() - 1.0) < 0.01

    def test_zero_is_a_bin_center(self):
        rng = np.random.default_rng(1)
        t_a = poisson_times(rng, 1e4, 1.0)
        curve = stats.g2_unheralded(t_a, t_a + 100, 0.5e-6, 8e-6, duration=1.0)
        assert 0 in curve.tau_ps.tolist()

    def test_bunching_against_prediction(self):
        phys = model.SpectrumParams(zlp_sigma=0.255, photon_energy=0.9,
                                    coupling=model.CouplingSpec(0.32, 0.0))
        cfg = simgen.ExperimentConfig(
            electron_rate=2e6, duration=2.0, physics=phys, seed=3,
            channel_a=simgen.ChannelConfig(efficiency=0.5, jitter_fwhm=0.1e-9,
                                           dead_time=0.0, dark_rate=0.0),
            channel_b=simgen.ChannelConfig(efficiency=0.5, jitter_fwhm=0.1e-9,
                                           dead_time=0.0, dark_rate=0.0))
        stream, _, _ = simgen.generate(cfg, pixels=False)
        curve = stats.g2_unheralded(stream.photon_times(CHANNEL_A),
                                    stream.photon_times(CHANNEL_B),
                                    0.5e-6, 8e-6, duration=2.0)
        g0, err = curve.at_zero()
        assert g0 == pytest.approx(model.predicted_bunching(2e6, 0.5e-6), rel=0.05)

    def test_empty_baseline_rejected(self):
        with pytest.raises(ValueError):
            stats.g2_unheralded(np.array([], dtype=np.int64), np.array([], dtype=np.int64),
                                1e-6, 1e-5)

    def test_stderr_scales_with_duration(self):
        rng = np.random.default_rng(4)
        errs = []
        for duration in (4.0, 8.0):
            t_a = poisson_times(rng, 1e5, duration)
            t_b = poisson_times(rng, 1e5, duration)
            curve = stats.g2_unheralded(t_a, t_b, 0.5e-6, 8e-6, duration=duration)
            errs.append(curve.at_zero()[1])
        assert errs[0] / errs[1] == pytest.approx(math.sqrt(2), rel=0.1)


def factorizable_cube(rng, n_e=250_000):
    """Cube whose pairings are independent by construction (dense photon
    streams + coarse tau bins so every cell carries real statistics)."""
    duration = int(5e10)  # 50 ms at high rates
    t_el = np.sort(rng.integers(0, duration, n_e))
    e_el = rng.normal(0.9, 0.2, n_e).astype(np.float32)
    t_a = np.sort(rng.integers(0, duration, 60_000))
    t_b = np.sort(rng.integers(0, duration, 60_000))
    rec = correlate.match_coincidences((t_el, e_el), t_a, t_b)
    axes = correlate.CubeAxes.default(tau_bin=10e-9, tau_halfspan=100e-9)
    return correlate.build_cube(rec, axes), rec


class TestHeraldedSurface:
    def test_factorizable_cube_is_unity(self):
        cube, _ = factorizable_cube(np.random.default_rng(5))
        surface = stats.g2_heralded_surface(cube, (0.4, 1.4))
        vals = surface.values[np.isfinite(surface.values)]
        errs = surface.stderr[np.isfinite(surface.values)]
        assert np.nanmean(vals) == pytest.approx(1.0, abs=0.05)
        assert np.all(np.abs(vals - 1.0) < 5.5 * errs)

    def test_shuffled_pairing_collapses_to_unity(self, paper_records):
        # randomize the electron-photon pairing (full column permutation,
        # absences included): all structure lives in the pairing
        rec = paper_records.copy()
        rng = np.random.default_rng(6)
        rec["tau_a"] = rng.permutation(rec["tau_a"])
        rec["tau_b"] = rng.permutation(rec["tau_b"])
        cube = correlate.build_cube(rec)
        surface = stats.g2_heralded_surface(cube, (0.45, 1.35))
        finite = np.isfinite(surface.values)
        assert np.nanmean(surface.values[finite]) == pytest.approx(1.0, abs=0.1)
        errs = surface.stderr[finite]
        assert np.nanmax(np.abs(surface.values[finite] - 1.0) / errs) < 6.0

    def test_empty_window_rejected(self):
        cube, _ = factorizable_cube(np.random.default_rng(7), n_e=1000)
        with pytest.raises(ValueError):
            stats.g2_heralded_surface(cube, (30.0, 31.0))


class TestTimeAveraged:
    def test_factorizable_cube_is_unity(self):
        cube, _ = factorizable_cube(np.random.default_rng(8))
        curve = stats.g2_time_averaged(cube, (0.4, 1.4), coincidence_halfwidth=10e-9)
        finite = np.isfinite(curve.g2)
        assert np.nanmean(curve.g2[finite]) == pytest.approx(1.0, abs=0.08)


class TestG2Discrete:
    def test_independent_channels_flat(self):
        rng = np.random.default_rng(9)
        n = 300_000
        rec = np.zeros(n, dtype=correlate.TRIPLE_DTYPE)
        rec["t_el"] = np.arange(n) * 10_000
        rec["e_el"] = 0.9
        for ch in ("a", "b"):
            hit = rng.random(n) < 0.02
            rec[f"tau_{ch}"] = np.where(hit, rng.integers(-3000, 3000, n), correlate.ABSENT)
            rec[f"true_{ch}"] = hit
        qs, g2, err = stats.g2_discrete(rec, None, coincidence_window=5e-9, q_max=10)
        assert np.all(np.abs(g2 - 1.0) < 4.5 * err)

    def test_window_filters_successes(self):
        rec = np.zeros(4, dtype=correlate.TRIPLE_DTYPE)
        rec["t_el"] = [0, 100, 200, 300]
        rec["e_el"] = [0.9, 0.9, 0.9, 5.0]
        rec["tau_a"] = [100, correlate.ABSENT, 100, 100]
        rec["tau_b"] = [200, 50_000, correlate.ABSENT, 200]
        rec["true_a"] = [True, False, True, True]
        rec["true_b"] = [True, True, False, True]
        qs, g2, _ = stats.g2_discrete(rec, (0.45, 1.35), coincidence_window=5e-9, q_max=2)
        # herald 0: A+B success; herald at 100: tau_b too far; herald at 200: A only;
        # electron at 5 eV excluded by the window
        n_e, n_a, n_b = 3, 2, 1
        assert g2[0] == pytest.approx(1 * n_e / (n_a * n_b))

    def test_no_successes_rejected(self):
        rec = np.zeros(3, dtype=correlate.TRIPLE_DTYPE)
        rec["e_el"] = 0.9
        rec["tau_a"] = correlate.ABSENT
        rec["tau_b"] = correlate.ABSENT
        with pytest.raises(ValueError):
            stats.g2_discrete(rec, None, 5e-9)


class TestCar:
    def hist(self, counts, width=1000.0):
        edges = np.arange(len(counts) + 1) * width - len(counts) * width / 2
        return Histogram(np.asarray(counts), [("tau", edges)])

    def test_direct_arithmetic(self):
        # signal window of 1 bin holding 100 counts over a floor of 2/bin
        counts = np.full(101, 2)
        counts[50] = 100
        h = self.hist(counts)
        res = stats.car(h, {"tau": (-400, 400)},
                        [{"tau": (-50_000, -10_000)}, {"tau": (10_000, 50_000)}])
        assert res.car == pytest.approx(49.0)
        assert res.signal_counts == 100
        assert res.accidental_estimate == pytest.approx(2.0)

    def test_time_translation_invariance(self):
        counts = np.full(101, 3)
        counts[50] = 60
        h1 = self.hist(counts)
        edges2 = h1.axes[0][1] + 7_000_000.0
        h2 = Histogram(counts, [("tau", edges2)])
        r1 = stats.car(h1, {"tau": (-400, 400)}, [{"tau": (10_000, 50_000)}])
        r2 = stats.car(h2, {"tau": (7_000_000 - 400, 7_000_000 + 400)},
                       [{"tau": (7_010_000, 7_050_000)}])
        assert r1.car == pytest.approx(r2.car)

    def test_rate_scaling_invariance(self):
        counts = np.full(101, 4)
        counts[50] = 80
        r1 = stats.car(self.hist(counts), {"tau": (-400, 400)}, [{"tau": (10_000, 50_000)}])
        r2 = stats.car(self.hist(counts * 10), {"tau": (-400, 400)},
                       [{"tau": (10_000, 50_000)}])
        assert r2.car == pytest.approx(r1.car)

    def test_zero_accidentals_flagged_infinite(self):
        counts = np.zeros(101, dtype=int)
        counts[50] = 10
        res = stats.car(self.hist(counts), {"tau": (-400, 400)}, [{"tau": (10_000, 50_000)}])
        assert res.infinite and math.isinf(res.car)

    def test_overlapping_windows_rejected(self):
        counts = np.full(101, 2)
        with pytest.raises(ValueError):
            stats.car(self.hist(counts), {"tau": (-400, 400)}, [{"tau": (-5000, 5000)}])


class TestHeraldingEfficiency:
    def test_hand_evaluation(self):
        res = stats.heralding_efficiency(10, 1000, 0.02, 1.0)
        assert res.eta == pytest.approx(0.5)
        assert not res.inconsistent

    def test_perfect_channel_identity(self):
        res = stats.heralding_efficiency(1000, 1000, 1.0, 1.0)
        assert res.eta == pytest.approx(1.0)

    def test_inconsistent_calibration_flagged(self):
        res = stats.heralding_efficiency(100, 1000, 0.05, 1.0)
        assert res.eta == pytest.approx(2.0)
        assert res.inconsistent

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            stats.heralding_efficiency(1, 0, 0.5)
        with pytest.raises(ValueError):
            stats.heralding_efficiency(1, 10, 0.0)

    def test_binomial_error_scaling(self):
        small = stats.heralding_efficiency(50, 1000, 0.5)
        large = stats.heralding_efficiency(100, 2000, 0.5)
        assert small.stderr / large.stderr == pytest.approx(math.sqrt(2), rel=0.05)


class TestCsiGamma:
    def _quantum_stream(self, seed, duration):
        phys = model.SpectrumParams(zlp_sigma=0.255, photon_energy=0.9,
                                    coupling=model.CouplingSpec(0.32, 0.0),
                                    continuum_prob=0.3, continuum_decay=2.0)
        cfg = simgen.ExperimentConfig(
            electron_rate=2e6, duration=duration, physics=phys, seed=seed,
            channel_a=simgen.ChannelConfig(efficiency=0.3, jitter_fwhm=0.22e-9,
                                           dead_time=0.0, dark_rate=0.0),
            channel_b=simgen.ChannelConfig(efficiency=0.3, jitter_fwhm=0.22e-9,
                                           dead_time=0.0, dark_rate=0.0))
        stream, _, _ = simgen.generate(cfg, pixels=False)
        return cfg, stream

    def test_violation_on_quantum_stream(self):
        cfg, stream = self._quantum_stream(10, 1.0)
        curve = stats.csi_gamma(stream, 0.2e-6, 2e-6, duration=cfg.duration)
        g0 = curve.gamma[np.argmin(np.abs(curve.tau_ps))]
        e0 = curve.stderr[np.argmin(np.abs(curve.tau_ps))]
        assert (g0 - 1.0) / e0 > 5.0

    def test_decorrelation_at_large_delay(self):
        cfg, stream = self._quantum_stream(11, 1.0)
        curve = stats.csi_gamma(stream, 0.2e-6, 3e-6, duration=cfg.duration)
        far = np.abs(curve.tau_ps) > 1.5e6
        # cross-correlation decays to the uncorrelated level 1/g2(0)
        assert np.allclose(curve.gamma[far] * curve.g2_zero, 1.0, atol=0.08)

    def test_photon_shift_by_whole_bins(self):
        cfg, stream = self._quantum_stream(12, 0.5)
        bin_s = 0.2e-6
        shift_bins = 3
        recs = stream.records.copy()
        is_ph = recs["kind"] == 1
        recs["time"][is_ph] += int(shift_bins * bin_s * 1e12)
        order = np.argsort(recs["time"], kind="stable")
        from fockherald.events import EventStream
        shifted = EventStream(recs[order])
        a = stats.csi_gamma(stream, bin_s, 3e-6, duration=cfg.duration + 1e-6)
        b = stats.csi_gamma(shifted, bin_s, 3e-6, duration=cfg.duration + shift_bins * bin_s)
        # normalizations are unchanged; the curve translates by the shift
        assert b.g_e2 == pytest.approx(a.g_e2, rel=1e-6)
        assert b.g2_zero == pytest.approx(a.g2_zero, rel=1e-3)
        k = shift_bins
        assert np.allclose(b.gamma[k + 2: -2], a.gamma[2: -2 - k], rtol=0.03, atol=0.02)

    def test_no_inelastic_signal_rejected(self):
        from fockherald.events import EVENT_DTYPE, EventStream
        recs = np.zeros(100, dtype=EVENT_DTYPE)
        recs["time"] = np.arange(100) * 10**9
        recs["kind"] = np.tile([0, 1], 50)
        with pytest.raises(ValueError):
            stats.csi_gamma(EventStream(recs), 1e-6, 5e-6, duration=0.1)


class TestErrorScaling:
    """Doubling the data shrinks every stderr by sqrt(2)."""

    def test_car_stderr(self):
        edges = np.arange(102) * 1000.0 - 50_500.0
        base = np.full(101, 40)
        base[50] = 400
        r1 = stats.car(Histogram(base, [("tau", edges)]), {"tau": (-400, 400)},
                       [{"tau": (10_000, 50_000)}])
        r2 = stats.car(Histogram(base * 2, [("tau", edges)]), {"tau": (-400, 400)},
                       [{"tau": (10_000, 50_000)}])
        assert r1.stderr / r2.stderr == pytest.approx(math.sqrt(2), rel=0.1)

    def test_csi_stderr(self):
        phys = model.SpectrumParams(zlp_sigma=0.255, photon_energy=0.9,
                                    coupling=model.CouplingSpec(0.32, 0.0))
        errs = []
        for duration, seed in ((1.0, 30), (2.0, 31)):
            cfg = simgen.ExperimentConfig(
                electron_rate=2e6, duration=duration, physics=phys, seed=seed,
                channel_a=simgen.ChannelConfig(efficiency=0.45, dead_time=0.0, dark_rate=0.0),
                channel_b=simgen.ChannelConfig(efficiency=0.45, dead_time=0.0, dark_rate=0.0))
            stream, _, _ = simgen.generate(cfg, pixels=False)
            curve = stats.csi_gamma(stream, 0.2e-6, 1e-6, duration=duration)
            errs.append(curve.stderr[np.argmin(np.abs(curve.tau_ps))])
        assert errs[0] / errs[1] == pytest.approx(math.sqrt(2), rel=0.12)

    def test_discrete_g2_stderr(self):
        rng = np.random.default_rng(33)
        errs = []
        for n in (100_000, 200_000):
            rec = np.zeros(n, dtype=correlate.TRIPLE_DTYPE)
            rec["t_el"] = np.arange(n) * 10_000
            rec["e_el"] = 0.9
            for ch in ("a", "b"):
                hit = rng.random(n) < 0.05
                rec[f"tau_{ch}"] = np.where(hit, 100, correlate.ABSENT)
                rec[f"true_{ch}"] = hit
            _, _, err = stats.g2_discrete(rec, None, 5e-9, q_max=3)
            errs.append(err[1])
        assert errs[0] / errs[1] == pytest.approx(math.sqrt(2), rel=0.12)


class TestCouplingFromCoincidences:
    def _run(self, g0, eff, seed, transmission=1.0, zlp=0.1, q=0.0):
        phys = model.SpectrumParams(zlp_sigma=zlp, photon_energy=0.9,
                                    coupling=model.CouplingSpec(g0, 0.0),
                                    continuum_prob=q, continuum_decay=2.0)
        cfg = simgen.ExperimentConfig(
            electron_rate=5e5, duration=4.0, physics=phys, seed=seed,
            channel_a=simgen.ChannelConfig(efficiency=eff, jitter_fwhm=0.22e-9,
                                           dead_time=0.0, dark_rate=0.0),
            channel_b=simgen.ChannelConfig(efficiency=eff, jitter_fwhm=0.22e-9,
                                           dead_time=0.0, dark_rate=0.0),
            electron_chain=simgen.ElectronChainConfig(transmission=transmission))
        stream, _, _ = simgen.generate(cfg, pixels=False)
        rec = correlate.dedupe_true_coincidences(correlate.match_stream(stream))
        p_a = cfg.splitter_ratio * eff
        p_b = (1 - cfg.splitter_ratio) * eff
        return stats.coupling_from_coincidences(
            rec, p_a, p_b, (0.45, 1.35), (1.35, 2.25), 5e-9)

    def test_lossless_round_trip(self):
        est = self._run(0.3, 1.0, 20)
        assert est.g0 == pytest.approx(0.30, abs=0.01)
        assert not est.low_statistics

    def test_zero_efficiency_rejected(self):
        rec = np.zeros(1, dtype=correlate.TRIPLE_DTYPE)
        with pytest.raises(ValueError):
            stats.coupling_from_coincidences(rec, 0.0, 0.1, (0.45, 1.35), (1.35, 2.25))

    def test_low_statistics_flagged(self):
        est = self._run(0.1, 0.05, 21)
        assert est.low_statistics
