import filecmp
import json
import os

import pytest

from biolock.cli import main

TINY = {
    "n_subjects": 4,
    "enroll_beats": 8,
    "verify_beats": 6,
    "trials": 2,
    "model_strips": 3,
    "noise_kinds": ["MIXED"],
    "snr_list_db": [10.0],
    "stress_scales": [0.9, 0.5],
    "seed": 4242,
    "protocol": {
        "n_stages": 32,
        "enroll_crps": 3000,
        "accuracy_threshold": 0.96,
        "auth_noise_sigma": 0.1,
        "resp_ecc_n": 3,
        "bio_ecc_n": 3,
        "auth_trials": 2,
    },
}


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def run(config_path, out, *argv):
    main(["--config", config_path, "--out", str(out), *argv])


def tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            full = os.path.join(dirpath, name)
            out[os.path.relpath(full, root)] = open(full, "rb").read()
    return out


class TestSubcommands:
    def test_synth_gen(self, config_path, tmp_path):
        run(config_path, tmp_path, "synth-gen")
        assert (tmp_path / "population.json").exists()
        assert (tmp_path / "ecg_s000.csv").exists()
        header = (tmp_path / "ecg_s000.csv").read_text().splitlines()[0]
        assert header.startswith("fs=")

    def test_enroll_and_regen(self, config_path, tmp_path):
        run(config_path, tmp_path, "enroll")
        keys = (tmp_path / "keys.csv").read_text().splitlines()
        assert keys[0] == "subject,arm,key_len,key_hex"
        assert len(keys) > 1
        run(config_path, tmp_path, "synth-gen")
        helper = next(tmp_path.glob("helper_s000_na-iomba.json"))
        run(config_path, tmp_path, "regen", "--helper", str(helper),
            "--signal", str(tmp_path / "ecg_s000.csv"))
        assert (tmp_path / "regen.txt").read_text().startswith("key_hex=")

    def test_sweep_snr_and_report(self, config_path, tmp_path):
        run(config_path, tmp_path, "sweep-snr")
        assert (tmp_path / "detail.csv").exists()
        sub = tmp_path / "re"
        run(config_path, sub, "report", "--detail", str(tmp_path / "detail.csv"))
        assert (sub / "summary.csv").read_bytes() == \
            (tmp_path / "summary.csv").read_bytes()

    def test_puf_train(self, config_path, tmp_path):
        run(config_path, tmp_path, "puf-train", "--stages", "32",
            "--crps", "2000")
        text = (tmp_path / "accuracy.txt").read_text()
        assert "holdout_accuracy=" in text
        assert (tmp_path / "model.json").exists()
        assert (tmp_path / "crps.csv").exists()

    def test_blocker_demo(self, config_path, tmp_path):
        run(config_path, tmp_path, "blocker-demo")
        report = (tmp_path / "demo_report.csv").read_text().splitlines()
        assert report[0] == "scenario,trial,unlocked,match"
        legit = [l for l in report[1:] if l.startswith("legitimate")]
        assert all(l.split(",")[2] == "1" for l in legit)
        impostor = [l for l in report[1:] if l.startswith("impostor")]
        assert all(l.split(",")[2] == "0" for l in impostor)
        transcript = json.loads((tmp_path / "transcript.json").read_text())
        assert transcript["kind"] == "session-transcript"

    def test_skip_denoise_flag(self, config_path, tmp_path):
        main(["--config", config_path, "--out", str(tmp_path),
              "--skip-denoise", "sweep-snr"])
        assert (tmp_path / "detail.csv").exists()


class TestDeterminism:
    @pytest.mark.parametrize("argv", [
        ("synth-gen",),
        ("enroll",),
        ("sweep-snr",),
        ("sweep-stress",),
        ("puf-train", "--stages", "32", "--crps", "2000"),
        ("blocker-demo",),
    ])
    def test_rerun_byte_identical(self, config_path, tmp_path, argv):
        a = tmp_path / "run_a"
        b = tmp_path / "run_b"
        run(config_path, a, *argv)
        run(config_path, b, *argv)
        ta, tb = tree_bytes(a), tree_bytes(b)
        assert ta.keys() == tb.keys()
        for name in ta:
            assert ta[name] == tb[name], f"{name} differs between reruns"
