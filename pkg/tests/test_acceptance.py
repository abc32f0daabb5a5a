"""Acceptance suite: one test per shipped criterion, with printed verdicts.

Run with `pytest tests/test_acceptance.py -v -s` to see one PASS line per
criterion.  Criteria with stated runtime budgets assert them.
"""

import dataclasses
import itertools
import json
import time

import numpy as np
import pytest
from scipy.special import ndtr, ndtri

from biolock import bench, ecc, locknet, protocol, pufsim, quantizer, synthecg
from biolock.bench import ARM_IOMBA, ARM_NA, ExperimentConfig, derive_seed
from biolock.errors import ProtocolError
from biolock.quantizer import QuantConfig, compute_margins
from biolock.sigproc import beat_feature_matrix, validate_beats


def verdict(criterion: int, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# --- shared fixtures ---------------------------------------------------------

SNR_CFG = ExperimentConfig(n_subjects=30, trials=50, iomba_denoise=False,
                           model_snr_db=-5.0, noise_kinds=("MIXED",),
                           snr_list_db=(-5.0,), seed=20240901)


@pytest.fixture(scope="module")
def snr_prep():
    return bench.prepare(SNR_CFG, stress=False)


@pytest.fixture(scope="module")
def stress_prep():
    cfg = dataclasses.replace(SNR_CFG, trials=15, iomba_denoise=True,
                              model_snr_db=5.0)
    return bench.prepare(cfg, stress=True), cfg


def arm_mean(rows, arm, condition=None):
    vals = [r.reliability for r in rows
            if r.arm == arm and not r.flag
            and (condition is None or r.condition == condition)]
    return float(np.mean(vals)), float(np.min(vals))


class TestCriterion1:
    def test_noiseless_round_trip(self, snr_prep):
        t0 = time.time()
        checked = 0
        for arm in snr_prep.arms.values():
            for i, key in arm.keys.items():
                mean_vec = arm.enroll_rows[i].mean(axis=0)
                regen = quantizer.regenerate_key(mean_vec, arm.helpers[i])
                assert regen == key, f"subject {i} arm {arm.name}"
                checked += 1
        elapsed = time.time() - t0
        verdict(1, checked >= 30 and elapsed < 60.0,
                f"{checked} enrollment-mean regenerations exact "
                f"(reliability 100%), {elapsed:.1f}s < 60s")


class TestCriterion2:
    def test_noise_aware_robust_at_minus5(self, snr_prep):
        t0 = time.time()
        rows = bench.run_snr_sweep(SNR_CFG, snr_prep)
        elapsed = time.time() - t0
        na_mean, _ = arm_mean(rows, ARM_NA, "MIXED@-5dB")
        io_mean, _ = arm_mean(rows, ARM_IOMBA, "MIXED@-5dB")
        ok = na_mean >= 0.95 and io_mean <= na_mean - 0.10 and elapsed < 600
        verdict(2, ok,
                f"mixed -5 dB: noise-aware {na_mean:.4f} >= 0.95, "
                f"worst-case-margins {io_mean:.4f} lower by "
                f"{(na_mean - io_mean) * 100:.1f} pp >= 10 pp, "
                f"{elapsed:.0f}s < 600s")


class TestCriterion3:
    def test_reliability_monotone_in_noise(self, snr_prep):
        cfg = dataclasses.replace(SNR_CFG, trials=12,
                                  noise_kinds=("BW", "EM", "MA", "MIXED"),
                                  snr_list_db=(30.0, 20.0, 10.0, 5.0, 0.0, -5.0))
        rows = bench.run_snr_sweep(cfg, snr_prep)
        worst = 0.0
        detail = []
        for arm in (ARM_IOMBA, ARM_NA):
            for kind in cfg.noise_kinds:
                means = [arm_mean(rows, arm, f"{kind}@{snr:g}dB")[0]
                         for snr in cfg.snr_list_db]
                jumps = [b - a for a, b in zip(means, means[1:])]
                worst = max(worst, max(jumps))
                detail.append(f"{arm}/{kind}: " +
                              ">".join(f"{m:.3f}" for m in means))
        verdict(3, worst <= 0.01,
                f"largest reliability increase toward worse SNR "
                f"{worst * 100:.2f}% <= 1% | " + "; ".join(detail))


class TestCriterion4:
    def test_min_entropy_of_selected_features(self):
        cfg = dataclasses.replace(SNR_CFG, n_subjects=120, model_strips=4,
                                  skew_bound=0.5, kurtosis_bound=1.0)
        prep = bench.prepare(cfg, stress=False)
        arm = prep.arms[ARM_NA]
        aligned = quantizer.align_key_bits(
            [(arm.keys[i], arm.helpers[i]) for i in sorted(arm.keys)])
        rep = quantizer.min_entropy(aligned, min_contributors=60)
        verdict(4, len(arm.keys) >= 30 and rep.mean >= 0.9,
                f"noise-aware arm: mean per-bit min-entropy {rep.mean:.4f} "
                f">= 0.9 over {len(arm.keys)} subjects "
                f"({rep.n_positions} positions, min {rep.min:.3f}, "
                f"max {rep.max:.3f})")


class TestCriterion5:
    def test_stress_reoptimization_trade(self, stress_prep):
        prep, cfg = stress_prep
        rows = bench.run_stress_sweep(cfg, prep)
        all_higher = True
        detail = []
        for scale in cfg.stress_scales:
            cond = f"{cfg.stress_target}@{scale:g}"
            na_m, na_min = arm_mean(rows, ARM_NA, cond)
            io_m, io_min = arm_mean(rows, ARM_IOMBA, cond)
            all_higher &= na_m > io_m
            detail.append(f"{cond}: na {na_m:.3f} vs base {io_m:.3f}")
        _, na_min5 = arm_mean(rows, ARM_NA, f"{cfg.stress_target}@0.5")
        _, io_min5 = arm_mean(rows, ARM_IOMBA, f"{cfg.stress_target}@0.5")
        gap = (na_min5 - io_min5) * 100
        len_na = np.mean([len(k) for k in prep.arms[ARM_NA].keys.values()])
        len_io = np.mean([len(k) for k in prep.arms[ARM_IOMBA].keys.values()])
        verdict(5, all_higher and gap >= 10.0,
                f"noise-aware above baseline at every scale; worst-case gap "
                f"at 0.5 = {gap:.1f} pp >= 10 pp; key length changes "
                f"{len_io:.0f} -> {len_na:.0f} bits "
                f"({(len_na / len_io - 1) * 100:+.0f}%) | " + "; ".join(detail))


class TestCriterion6:
    def test_margin_solver_vs_cdf_inversion_oracle(self):
        # Independent oracle: closed-form normal quantiles via scipy.ndtri.
        sigmas = np.logspace(-3, np.log10(0.5), 10)
        betas = np.logspace(-5, -2, 5)
        depths = (1, 2)
        worst = 0.0
        points = 0
        for sigma, beta, d in itertools.product(sigmas, betas, depths):
            cfg = QuantConfig(alpha=1.0, beta=float(beta), max_bits=3)
            ms = compute_margins(cfg, float(sigma), d)
            n = 2 ** d
            thr_oracle = np.array([ndtri(k / n) for k in range(1, n)])
            worst = max(worst, np.max(np.abs(ms.thresholds - thr_oracle)))
            worst = max(worst, abs(ms.margin - (-sigma * ndtri(beta))))
            if ms.feasible and d > 1:
                inner = [ndtr(ms.band_hi[r]) - ndtr(ms.band_lo[r])
                         for r in range(1, n - 1)]
                outer_oracle = ndtri(min(1.0 * min(inner),
                                         ndtr(thr_oracle[0] - ms.margin)))
                worst = max(worst, abs(ms.band_hi[0] - outer_oracle))
            assert ms.band_hi[0] == -ms.band_lo[-1], "symmetry must be exact"
            assert np.array_equal(ms.thresholds, -ms.thresholds[::-1])
            points += 1
        verdict(6, points >= 100 and worst < 1e-6,
                f"{points} (sigma, beta, depth) points: max deviation from "
                f"CDF-inversion oracle {worst:.2e} < 1e-6; symmetry exact")


class TestCriterion7:
    @pytest.mark.parametrize("n", [3, 5])
    def test_ecc_guarantee(self, n):
        rng = np.random.default_rng(100 + n)
        key = rng.integers(0, 2, 8, dtype=np.uint8)
        helper = ecc.make_helper(key, ecc.CodeSpec(n), seed=n)
        t = (n - 1) // 2
        expanded = np.repeat(key, n)
        # every <=t pattern in every block, other blocks clean
        for block in range(key.size):
            for weight in range(t + 1):
                for flips in itertools.combinations(range(n), weight):
                    noisy = expanded.copy()
                    for f in flips:
                        noisy[block * n + f] ^= 1
                    assert np.array_equal(ecc.recover_key(noisy, helper), key)
        # simultaneous <=t errors in every block
        for trial in range(50):
            noisy = expanded.copy()
            for block in range(key.size):
                k = rng.integers(0, t + 1)
                for f in rng.choice(n, size=k, replace=False):
                    noisy[block * n + f] ^= 1
            assert np.array_equal(ecc.recover_key(noisy, helper), key)
        # t+1 errors in one block corrupt exactly that bit
        noisy = expanded.copy()
        noisy[:t + 1] ^= 1
        got = ecc.recover_key(noisy, helper)
        assert got[0] != key[0] and np.array_equal(got[1:], key[1:])
        if n == 5:
            verdict(7, True, "repetition code n in {3,5}: all <=t patterns "
                             "recover exactly, t+1 fails deterministically")


class TestCriterion8:
    def test_puf_suite(self):
        t0 = time.time()
        dists = []
        for pair in range(20):
            ch = np.random.default_rng(500 + pair).integers(
                0, 2, (1000, 64), dtype=np.uint8)
            a = pufsim.eval_puf(pufsim.make_puf(64, seed=1000 + pair), ch)
            b = pufsim.eval_puf(pufsim.make_puf(64, seed=2000 + pair), ch)
            dists.append(float(np.mean(a != b)))
        mean_dist = float(np.mean(dists))

        puf = pufsim.make_puf(64, seed=42)
        model = pufsim.train_model(pufsim.collect_crps(puf, 2000, seed=43),
                                   seed=44)

        ch = np.random.default_rng(45).integers(0, 2, (4000, 64), dtype=np.uint8)
        base = pufsim.eval_puf(puf, ch)
        rates = []
        for sigma in (0.0, 0.1, 0.25, 0.5, 1.0):
            noisy = pufsim.ArbiterPuf(puf.weights, sigma)
            rates.append(float(np.mean(
                [np.mean(pufsim.eval_puf(noisy, ch, seed=s) != base)
                 for s in range(5)])))
        monotone = all(b >= a - 1e-9 for a, b in zip(rates, rates[1:]))
        elapsed = time.time() - t0
        ok = (0.45 <= mean_dist <= 0.55 and model.train_accuracy >= 0.95
              and monotone and elapsed < 120.0)
        verdict(8, ok,
                f"inter-device distance {mean_dist:.4f} in [0.45,0.55] over "
                f"20 pairs x 1000 challenges; held-out accuracy "
                f"{model.train_accuracy:.4f} >= 0.95 at 2000 CRPs/64 stages; "
                f"flip rates {['%.4f' % r for r in rates]} monotone; "
                f"{elapsed:.0f}s < 120s")


class TestCriterion9:
    def test_obfuscation_exactness(self):
        net = locknet.build_multiplier_netlist(4)
        rng = np.random.default_rng(77)
        key = rng.integers(0, 2, len(net.luts), dtype=np.uint8)
        bs = locknet.obfuscate(net, key, seed=78)
        key = key[: bs.key_len]
        correct = locknet.functional_match(bs, key, net)

        flips_ok = True
        for k in range(bs.key_len):
            flipped = key.copy()
            flipped[k] ^= 1
            if locknet.functional_match(bs, flipped, net) >= 1.0:
                flips_ok = False
                break

        wrong_matches = []
        for t in range(50):
            wrong = np.random.default_rng(3000 + t).integers(
                0, 2, bs.key_len, dtype=np.uint8)
            if np.array_equal(wrong, key):
                continue
            wrong_matches.append(locknet.functional_match(bs, wrong, net))
        ok = (correct == 1.0 and flips_ok
              and all(m < 1.0 for m in wrong_matches))
        verdict(9, ok,
                f"correct key match {correct}; every single-bit flip "
                f"detected ({bs.key_len} bits); {len(wrong_matches)} random "
                f"wrong keys all mismatch, mean match "
                f"{np.mean(wrong_matches):.4f}")


class TestCriterion10:
    def test_protocol_end_to_end(self):
        t0 = time.time()
        cfg = dataclasses.replace(SNR_CFG, n_subjects=20, model_snr_db=5.0)
        bcfg = protocol.BlockerConfig(pipeline=cfg.pipeline(True),
                                      quant=cfg.quant())
        app = locknet.build_multiplier_netlist(4)
        artifacts = bench.build_enrollment_artifacts(cfg)
        people = synthecg.sample_population(3, cfg.jitter,
                                            derive_seed(cfg.seed, 40))
        user_a, user_b, impostor = people

        def strip(params, tag, snr_db):
            dur = max(4.0, (cfg.enroll_beats + 4) * 60.0 / params.hr_bpm)
            clean = synthecg.generate_ecg(params, dur,
                                          derive_seed(cfg.seed, 41, tag))
            noise = synthecg.synth_noise("MIXED", len(clean), clean.fs,
                                         derive_seed(cfg.seed, 42, tag))
            return synthecg.mix_at_snr(clean, noise, snr_db)

        db = protocol.DesignerDb()
        transcript = protocol.SessionTranscript()
        devices, secrets = [], []
        hygiene = []
        for idx, user in enumerate((user_a, user_b)):
            dev = protocol.make_device(f"device-{idx}",
                                       derive_seed(cfg.seed, 43, idx), bcfg)
            protocol.hardware_enroll(dev, db, bcfg,
                                     derive_seed(cfg.seed, 44, idx) % 2**31)
            hygiene += protocol.scan_device_storage(dev, db)
            signals = [strip(user, 100 * idx + k, 30.0) for k in range(2)]
            receipt = protocol.ownership_claim(dev, signals, artifacts, bcfg,
                                               transcript,
                                               seed=derive_seed(cfg.seed, 45, idx))
            rows = validate_beats(np.vstack(
                [beat_feature_matrix(s, bcfg.pipeline) for s in signals]))
            bio_key, _ = quantizer.enroll_subject(rows, artifacts.pop,
                                                  artifacts.config,
                                                  artifacts.margins)
            hygiene += protocol.scan_device_storage(dev, db, bio_key=bio_key,
                                                    template=rows[0])
            protocol.firmware_customize(db, dev, receipt.digest,
                                        receipt.key_len, app, bcfg, transcript,
                                        seed=derive_seed(cfg.seed, 46, idx))
            obs_key, _ = protocol.predict_obs_key(db.models[dev.device_id],
                                                  receipt.digest,
                                                  receipt.key_len, bcfg)
            hygiene += protocol.scan_device_storage(dev, db, bio_key=bio_key,
                                                    obs_key=obs_key,
                                                    template=rows[0])
            devices.append(dev)
            secrets.append((bio_key, obs_key, rows[0]))

        def trials(dev, person, base_tag, n=50):
            wins = 0
            for t in range(n):
                res = protocol.authenticate(
                    dev, strip(person, base_tag + t, 10.0), app, bcfg,
                    transcript, seed=derive_seed(cfg.seed, 47, base_tag, t))
                dev.power_cycle()
                wins += int(res.unlocked)
            return wins

        legit = trials(devices[0], user_a, 1000)
        imposter_wins = trials(devices[0], impostor, 2000)
        cross_wins = trials(devices[1], user_a, 3000)

        res = protocol.authenticate(devices[0], strip(user_a, 9999, 10.0),
                                    app, bcfg, transcript, seed=1)
        relock_ok = False
        if res.unlocked:
            devices[0].run_application(np.zeros(8, dtype=np.uint8))
            devices[0].power_cycle()
            try:
                devices[0].run_application(np.zeros(8, dtype=np.uint8))
            except ProtocolError:
                relock_ok = True
        hygiene += protocol.scan_device_storage(devices[0], db,
                                                bio_key=secrets[0][0],
                                                obs_key=secrets[0][1],
                                                template=secrets[0][2])
        elapsed = time.time() - t0
        ok = (legit >= 48 and imposter_wins == 0 and cross_wins == 0
              and relock_ok and not hygiene)
        verdict(10, ok,
                f"legitimate {legit}/50 >= 95% at 10 dB with bio ECC n=3; "
                f"impostor {imposter_wins}/50; cross-device {cross_wins}/50; "
                f"storage hygiene findings {hygiene}; power cycle forces "
                f"re-authentication {relock_ok}; {elapsed:.0f}s")


class TestCriterion11:
    COMMANDS = (
        ("synth-gen",),
        ("enroll",),
        ("sweep-snr",),
        ("sweep-stress",),
        ("puf-train", "--stages", "32", "--crps", "2000"),
        ("blocker-demo",),
    )

    def test_cli_determinism(self, tmp_path):
        from biolock.cli import main
        import os
        config = {
            "n_subjects": 4, "enroll_beats": 8, "verify_beats": 6,
            "trials": 2, "model_strips": 3, "noise_kinds": ["MIXED"],
            "snr_list_db": [10.0], "stress_scales": [0.9, 0.5], "seed": 777,
            "protocol": {"n_stages": 32, "enroll_crps": 3000,
                         "accuracy_threshold": 0.96, "auth_noise_sigma": 0.1,
                         "resp_ecc_n": 3, "bio_ecc_n": 3, "auth_trials": 2},
        }
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(config))

        def run_all(root):
            for i, argv in enumerate(self.COMMANDS):
                out = root / f"cmd{i}"
                main(["--config", str(cfg_path), "--out", str(out), *argv])
            # regen and report consume files produced above
            helper = next((root / "cmd1").glob("helper_s000_*.json"))
            main(["--config", str(cfg_path), "--out", str(root / "cmd6"),
                  "regen", "--helper", str(helper),
                  "--signal", str(root / "cmd0" / "ecg_s000.csv")])
            main(["--config", str(cfg_path), "--out", str(root / "cmd7"),
                  "report", "--detail", str(root / "cmd2" / "detail.csv")])

        def tree(root):
            out = {}
            for dirpath, _, files in os.walk(root):
                for name in files:
                    full = os.path.join(dirpath, name)
                    out[os.path.relpath(full, root)] = open(full, "rb").read()
            return out

        a_root, b_root = tmp_path / "a", tmp_path / "b"
        run_all(a_root)
        run_all(b_root)
        ta, tb = tree(a_root), tree(b_root)
        same = ta.keys() == tb.keys() and all(ta[k] == tb[k] for k in ta)
        diffs = [k for k in ta if k in tb and ta[k] != tb[k]]
        verdict(11, same,
                f"all 8 CLI commands rerun byte-identically "
                f"({len(ta)} files compared); diffs: {diffs}")
