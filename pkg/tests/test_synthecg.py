import numpy as np
import pytest
from scipy.signal import periodogram

from biolock import sigproc, synthecg
from biolock.errors import ConfigurationError
from biolock.synthecg import (McSharryParams, StressScale, apply_stress,
                              generate_ecg, limit_cycle_radius, mix_at_snr,
                              sample_population, synth_noise, wave_stress)

FS = 256.0


class TestGenerateEcg:
    def test_zero_amplitudes_baseline_only(self):
        params = McSharryParams(a=(0.0, 0.0, 0.0, 0.0, 0.0))
        sig = generate_ecg(params, 10.0, seed=4)
        assert np.max(np.abs(sig.samples)) <= params.baseline_amp_mv + 1e-3

    def test_rr_interval_matches_heart_rate(self):
        sig = generate_ecg(McSharryParams(), 20.0, seed=5)
        peaks = sigproc.detect_r_peaks(sigproc.bandpass_fir(sig))
        rr = np.diff(peaks) / FS
        assert abs(np.mean(rr) - 1.0) < 0.02

    def test_wave_order_and_r_dominance(self):
        # Extrema-ordering oracle on a single clean beat.
        sig = generate_ecg(McSharryParams(baseline_amp_mv=0.0), 12.0, seed=6)
        peaks = sigproc.detect_r_peaks(sigproc.bandpass_fir(sig))
        segs = sigproc.segment_beats(sig, peaks)
        beat = segs[2].samples
        r = segs[2].r_index
        assert beat[r] == np.max(beat)
        p_idx = np.argmax(beat[:r - 10])
        q_idx = r - 10 + np.argmin(beat[r - 10:r])
        s_idx = r + np.argmin(beat[r:r + 12])
        t_idx = s_idx + 5 + np.argmax(beat[s_idx + 5:])
        assert p_idx < q_idx < r < s_idx < t_idx

    def test_deterministic_per_seed(self):
        a = generate_ecg(McSharryParams(), 4.0, seed=7).samples
        b = generate_ecg(McSharryParams(), 4.0, seed=7).samples
        c = generate_ecg(McSharryParams(), 4.0, seed=8).samples
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_duration_guard(self):
        with pytest.raises(ConfigurationError):
            generate_ecg(McSharryParams(), 1.0)

    def test_limit_cycle_stays_on_unit_circle(self):
        radii = limit_cycle_radius(McSharryParams(), 4.0, seed=1)
        after = radii[int(2 * FS):]
        assert np.all(np.abs(after - 1.0) <= 0.01)

    def test_limit_cycle_attracts(self):
        radii = limit_cycle_radius(McSharryParams(), 8.0, seed=2,
                                   initial_radius=0.5)
        assert abs(radii[-1] - 1.0) < 0.01
        assert np.all(np.diff(radii[: int(4 * FS)]) > -1e-9)

    def test_param_validation(self):
        with pytest.raises(ConfigurationError):
            McSharryParams(b=(0.25, 0.1, -0.1, 0.1, 0.4))
        with pytest.raises(ConfigurationError):
            McSharryParams(theta=(0.5, -0.26, 0.0, 0.26, 1.57))


class TestSynthNoise:
    def test_bw_band_occupancy(self):
        sig = synth_noise("BW", int(60 * FS), FS, seed=0)
        f, p = periodogram(sig.samples, fs=FS)
        assert p[f < 1.0].sum() / p.sum() >= 0.95

    def test_ma_band_occupancy(self):
        sig = synth_noise("MA", int(60 * FS), FS, seed=1)
        f, p = periodogram(sig.samples, fs=FS)
        band = (f >= 5.0) & (f <= 50.0)
        assert p[band].sum() / p.sum() >= 0.90

    @pytest.mark.parametrize("kind", ["BW", "EM", "MA", "MIXED"])
    def test_unit_power(self, kind):
        sig = synth_noise(kind, int(30 * FS), FS, seed=2)
        assert abs(np.mean(sig.samples ** 2) - 1.0) < 0.01

    @pytest.mark.parametrize("kind", ["BW", "EM", "MA", "MIXED"])
    def test_determinism(self, kind):
        a = synth_noise(kind, 4096, FS, seed=3).samples
        b = synth_noise(kind, 4096, FS, seed=3).samples
        assert np.array_equal(a, b)

    def test_bad_kind(self):
        with pytest.raises(ConfigurationError):
            synth_noise("HUM", 100, FS, 0)


class TestMixAtSnr:
    @pytest.mark.parametrize("snr,ratio", [(0.0, 1.0), (-5.0, 10 ** 0.5),
                                           (30.0, 1e-3)])
    def test_power_ratio_exact(self, snr, ratio):
        clean = generate_ecg(McSharryParams(), 8.0, seed=1)
        noise = synth_noise("MIXED", len(clean), FS, seed=2)
        mixed = mix_at_snr(clean, noise, snr)
        added = mixed.samples - clean.samples
        got = np.mean(added ** 2) / np.mean(clean.samples ** 2)
        assert abs(got - ratio) < 1e-9 * max(1.0, ratio)

    def test_energy_bookkeeping(self):
        clean = generate_ecg(McSharryParams(), 6.0, seed=3)
        noise = synth_noise("BW", len(clean), FS, seed=4)
        mixed = mix_at_snr(clean, noise, 12.0)
        residual = mixed.samples - clean.samples
        scale = residual[0] / noise.samples[0]
        assert np.allclose(residual, scale * noise.samples, atol=1e-12)

    def test_zero_noise_errors(self):
        clean = generate_ecg(McSharryParams(), 4.0, seed=5)
        flat = sigproc.RawSignal(np.full(len(clean), 1e-30), FS)
        zero = sigproc.RawSignal(flat.samples * 0.0, FS)
        with pytest.raises(ConfigurationError):
            mix_at_snr(clean, zero, 10.0)


class TestStress:
    def test_identity(self):
        params = McSharryParams()
        out = apply_stress(params, StressScale("a", (1.0,) * 5))
        assert out == params

    def test_t_amplitude_halves(self):
        # The z channel is linear in the wave amplitudes, so subtracting a
        # T-less run from the same seed isolates the T component exactly.
        base = McSharryParams(baseline_amp_mv=0.0)
        stressed = apply_stress(base, wave_stress("a", ("T",), 0.5))
        t_free = McSharryParams(theta=base.theta,
                                a=base.a[:4] + (0.0,), b=base.b,
                                baseline_amp_mv=0.0)
        z_full = generate_ecg(base, 15.0, seed=11).samples
        z_half = generate_ecg(stressed, 15.0, seed=11).samples
        z_none = generate_ecg(t_free, 15.0, seed=11).samples
        full_amp = np.max(np.abs(z_full - z_none))
        half_amp = np.max(np.abs(z_half - z_none))
        assert abs(half_amp / full_amp - 0.5) < 0.10

    def test_theta_compression_moves_t_peak(self):
        # Peak-location oracle: scaled angles pull the T wave toward R.
        base = McSharryParams(baseline_amp_mv=0.0)
        squeezed = apply_stress(base, wave_stress("theta", ("P", "T"), 0.7))

        def t_offset(params):
            sig = generate_ecg(params, 15.0, seed=12)
            peaks = sigproc.detect_r_peaks(sigproc.bandpass_fir(sig))
            segs = sigproc.segment_beats(sig, peaks)
            offs = []
            for seg in segs[1:-1]:
                tail = seg.samples[seg.r_index + 20:]
                offs.append(np.argmax(tail) + 20)
            return np.median(offs)

        assert t_offset(squeezed) < t_offset(base) * 0.85

    def test_factor_bounds(self):
        with pytest.raises(ConfigurationError):
            StressScale("a", (0.4, 1.0, 1.0, 1.0, 1.0))
        with pytest.raises(ConfigurationError):
            StressScale("q", (1.0,) * 5)


class TestSamplePopulation:
    def test_reproducible(self):
        a = sample_population(2, 0.1, seed=1)
        b = sample_population(2, 0.1, seed=1)
        assert a == b

    def test_all_valid_at_52(self):
        subjects = sample_population(52, 0.1, seed=2)
        assert len(subjects) == 52
        for p in subjects:
            assert all(x < y for x, y in zip(p.theta, p.theta[1:]))
            assert all(b > 0 for b in p.b)

    def test_subjects_distinguishable_at_30db(self):
        # Distance-ratio oracle: between-subject feature distance beats
        # within-subject noise distance.
        subjects = sample_population(4, 0.1, seed=3)
        pipe = sigproc.PipelineConfig()
        vecs = []
        for i, p in enumerate(subjects):
            clean = generate_ecg(p, 14.0, seed=20 + i)
            reps = []
            for t in range(2):
                noise = synth_noise("MIXED", len(clean), FS, seed=50 + 10 * i + t)
                rows = sigproc.beat_feature_matrix(mix_at_snr(clean, noise, 30.0), pipe)
                reps.append(np.median(rows, axis=0))
            vecs.append(reps)
        intra = [np.linalg.norm(r[0] - r[1]) for r in vecs]
        inter = [np.linalg.norm(vecs[i][0] - vecs[j][0])
                 for i in range(4) for j in range(i + 1, 4)]
        assert min(inter) > max(intra)

    def test_jitter_bounds(self):
        with pytest.raises(ConfigurationError):
            sample_population(5, 0.0, seed=1)
        with pytest.raises(ConfigurationError):
            sample_population(1, 0.1, seed=1)

    def test_json_round_trip(self, tmp_path):
        subjects = sample_population(3, 0.1, seed=4)
        path = tmp_path / "pop.json"
        synthecg.population_to_json(subjects, path)
        assert synthecg.population_from_json(path) == subjects
