"""Command-line entry points for the simulation toolkit.

Subcommands: synth-gen, enroll, regen, sweep-snr, sweep-stress, puf-train,
blocker-demo, report.  Global flags select a JSON config file, the master
seed, the output directory, and whether the denoising filter is skipped.
Given the same config and seed every command writes byte-identical files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import bench, locknet, protocol, pufsim, quantizer, synthecg
from .bench import ExperimentConfig, derive_seed
from .sigproc import read_signal_csv, write_signal_csv

PROTOCOL_DEFAULTS = {
    "n_stages": 64,
    "enroll_crps": 25_000,
    "accuracy_threshold": 0.995,
    "enroll_retries": 2,
    "auth_noise_sigma": 0.25,
    "resp_ecc_n": 5,
    "bio_ecc_n": 3,
    "auth_snr_db": 10.0,
    "auth_trials": 10,
    "denoise": True,
}


def load_config(path: str | None, seed: int | None,
                skip_denoise: bool) -> tuple[ExperimentConfig, dict]:
    proto = dict(PROTOCOL_DEFAULTS)
    if path:
        with open(path) as fh:
            raw = json.load(fh)
        proto.update(raw.pop("protocol", {}))
        raw.pop("version", None)
        raw.pop("kind", None)
        cfg = ExperimentConfig(**{k: tuple(v) if isinstance(v, list) else v
                                  for k, v in raw.items()})
    else:
        cfg = ExperimentConfig()
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    if skip_denoise:
        cfg = dataclasses.replace(cfg, iomba_denoise=False, na_denoise=False)
        proto["denoise"] = False
    return cfg, proto


def _blocker_config(cfg: ExperimentConfig, proto: dict) -> protocol.BlockerConfig:
    return protocol.BlockerConfig(
        n_stages=proto["n_stages"], enroll_crps=proto["enroll_crps"],
        accuracy_threshold=proto["accuracy_threshold"],
        enroll_retries=proto["enroll_retries"],
        auth_noise_sigma=proto["auth_noise_sigma"],
        resp_ecc_n=proto["resp_ecc_n"], bio_ecc_n=proto["bio_ecc_n"],
        pipeline=cfg.pipeline(proto["denoise"]), quant=cfg.quant())


def cmd_synth_gen(cfg: ExperimentConfig, proto: dict, out: str,
                  args) -> None:
    n = args.subjects or cfg.n_subjects
    subjects = synthecg.sample_population(n, cfg.jitter, derive_seed(cfg.seed, 0))
    synthecg.population_to_json(subjects, os.path.join(out, "population.json"))
    for i, params in enumerate(subjects):
        dur = max(4.0, (cfg.enroll_beats + 4) * 60.0 / params.hr_bpm)
        clean = synthecg.generate_ecg(params, dur, derive_seed(cfg.seed, 1, i))
        if args.snr_db is not None:
            noise = synthecg.synth_noise(args.kind, len(clean), clean.fs,
                                         derive_seed(cfg.seed, 2, i))
            clean = synthecg.mix_at_snr(clean, noise, args.snr_db)
        write_signal_csv(clean, os.path.join(out, f"ecg_s{i:03d}.csv"))
    print(f"wrote {n} strips + population.json to {out}")


def cmd_enroll(cfg: ExperimentConfig, proto: dict, out: str, args) -> None:
    prep = bench.prepare(cfg, stress=False)
    key_lines = ["subject,arm,key_len,key_hex"]
    metric_lines = ["subject,arm,key_len,reliability,minent_mean,minent_min,minent_max"]
    for arm in prep.arms.values():
        for i in sorted(arm.keys):
            sid = f"s{i:03d}"
            helper_path = os.path.join(out, f"helper_{sid}_{arm.name}.json")
            with open(helper_path, "w") as fh:
                fh.write(arm.helpers[i].to_json())
                fh.write("\n")
            key_lines.append(f"{sid},{arm.name},{len(arm.keys[i])},"
                             f"{arm.keys[i].to_hex()}")
            me = arm.minent[i]
            metric_lines.append(f"{sid},{arm.name},{len(arm.keys[i])},1,"
                                f"{me[0]:.10g},{me[1]:.10g},{me[2]:.10g}")
    with open(os.path.join(out, "keys.csv"), "w") as fh:
        fh.write("\n".join(key_lines) + "\n")
    with open(os.path.join(out, "enroll_metrics.csv"), "w") as fh:
        fh.write("\n".join(metric_lines) + "\n")
    print(f"enrolled {cfg.n_subjects} subjects under both arms into {out}")


def cmd_regen(cfg: ExperimentConfig, proto: dict, out: str, args) -> None:
    with open(args.helper) as fh:
        helper = quantizer.HelperData.from_json(fh.read())
    signal = read_signal_csv(args.signal)
    pipeline = cfg.pipeline(proto["denoise"])
    from .sigproc import beat_feature_matrix
    beats = beat_feature_matrix(signal, pipeline)
    if beats.shape[0] == 0:
        print("no usable beats in signal", file=sys.stderr)
        sys.exit(1)
    key = quantizer.regenerate_from_samples(beats, helper)
    line = f"key_hex={key.to_hex()} key_len={len(key)}"
    if args.expect:
        line += f" match={'yes' if key.to_hex() == args.expect else 'no'}"
    with open(os.path.join(out, "regen.txt"), "w") as fh:
        fh.write(line + "\n")
    print(line)


def cmd_sweep_snr(cfg: ExperimentConfig, proto: dict, out: str, args) -> None:
    rows = bench.run_snr_sweep(cfg)
    paths = bench.write_report(rows, out)
    print("wrote " + ", ".join(paths))


def cmd_sweep_stress(cfg: ExperimentConfig, proto: dict, out: str, args) -> None:
    rows = bench.run_stress_sweep(cfg)
    paths = bench.write_report(rows, out)
    print("wrote " + ", ".join(paths))


def cmd_puf_train(cfg: ExperimentConfig, proto: dict, out: str, args) -> None:
    stages = args.stages or proto["n_stages"]
    n_crps = args.crps or proto["enroll_crps"]
    puf = pufsim.make_puf(stages, derive_seed(cfg.seed, 30), device_id="cli-device")
    crps = pufsim.collect_crps(puf, n_crps, derive_seed(cfg.seed, 31))
    model = pufsim.train_model(crps, seed=derive_seed(cfg.seed, 32) % (2 ** 31))
    fresh = pufsim.collect_crps(puf, 10_000, derive_seed(cfg.seed, 33))
    agree = float(np.mean(model.predict(fresh.challenges) == fresh.responses))
    pufsim.crps_to_csv(crps, os.path.join(out, "crps.csv"))
    pufsim.save_model(model, os.path.join(out, "model.json"))
    with open(os.path.join(out, "accuracy.txt"), "w") as fh:
        fh.write(f"stages={stages} crps={n_crps} "
                 f"holdout_accuracy={model.train_accuracy:.6f} "
                 f"fresh_agreement={agree:.6f}\n")
    print(f"model holdout accuracy {model.train_accuracy:.4%}, "
          f"fresh-challenge agreement {agree:.4%}")


def cmd_blocker_demo(cfg: ExperimentConfig, proto: dict, out: str, args) -> None:
    bcfg = _blocker_config(cfg, proto)
    app = locknet.build_multiplier_netlist(4)
    artifacts = bench.build_enrollment_artifacts(cfg, denoise=proto["denoise"])
    people = synthecg.sample_population(3, cfg.jitter, derive_seed(cfg.seed, 40))
    user_a, user_b, impostor = people

    def strip(params, tag, snr_db):
        dur = max(4.0, (cfg.enroll_beats + 4) * 60.0 / params.hr_bpm)
        clean = synthecg.generate_ecg(params, dur, derive_seed(cfg.seed, 41, tag))
        noise = synthecg.synth_noise("MIXED", len(clean), clean.fs,
                                     derive_seed(cfg.seed, 42, tag))
        return synthecg.mix_at_snr(clean, noise, snr_db)

    db = protocol.DesignerDb()
    transcript = protocol.SessionTranscript()
    devices = {}
    for idx, (name, user) in enumerate((("device-A", user_a), ("device-B", user_b))):
        dev = protocol.make_device(name, derive_seed(cfg.seed, 43, idx), bcfg)
        protocol.hardware_enroll(dev, db, bcfg, derive_seed(cfg.seed, 44, idx) % (2 ** 31))
        signals = [strip(user, 100 * idx + k, cfg.enroll_snr_db) for k in range(2)]
        receipt = protocol.ownership_claim(dev, signals, artifacts, bcfg, transcript,
                                           seed=derive_seed(cfg.seed, 45, idx))
        protocol.firmware_customize(db, dev, receipt.digest, receipt.key_len, app,
                                    bcfg, transcript, seed=derive_seed(cfg.seed, 46, idx))
        devices[name] = dev

    lines = ["scenario,trial,unlocked,match"]
    scenarios = (("legitimate", devices["device-A"], user_a),
                 ("impostor", devices["device-A"], impostor),
                 ("cross-device", devices["device-B"], user_a))
    tallies = {}
    for s_idx, (label, dev, person) in enumerate(scenarios):
        wins = 0
        for t in range(proto["auth_trials"]):
            sample = strip(person, 1000 + 10 * s_idx + t, proto["auth_snr_db"])
            res = protocol.authenticate(dev, sample, app, bcfg, transcript,
                                        seed=derive_seed(cfg.seed, 47, s_idx, t))
            dev.power_cycle()
            wins += int(res.unlocked)
            lines.append(f"{label},{t},{int(res.unlocked)},{res.match:.10g}")
        tallies[label] = wins
    with open(os.path.join(out, "demo_report.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(out, "transcript.json"), "w") as fh:
        fh.write(transcript.to_json() + "\n")
    db.save(os.path.join(out, "designer_db.json"))
    for label, wins in tallies.items():
        print(f"{label}: {wins}/{proto['auth_trials']} unlocked")


def cmd_report(cfg: ExperimentConfig, proto: dict, out: str, args) -> None:
    rows = []
    with open(args.detail) as fh:
        header = fh.readline()
        for line in fh:
            parts = line.rstrip("\n").split(",")
            rows.append(bench.ReportRow(
                experiment=parts[0], condition=parts[1], arm=parts[2],
                subject=parts[3], key_len=int(parts[4]),
                reliability=float(parts[5]), minent_mean=float(parts[6]),
                minent_min=float(parts[7]), minent_max=float(parts[8]),
                flag=parts[9] if len(parts) > 9 else ""))
    path = os.path.join(out, "summary.csv")
    with open(path, "w") as fh:
        fh.write("\n".join(bench.summarize(rows)) + "\n")
    print(f"wrote {path}")


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(
        prog="biolock",
        description="Biometric key generation and device locking simulations")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--skip-denoise", action="store_true",
                        help="drop the bandpass stage from every pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate synthetic ECG strips")
    p.add_argument("--subjects", type=int)
    p.add_argument("--snr-db", type=float, default=None)
    p.add_argument("--kind", default="MIXED")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("enroll", help="enroll a synthetic population")
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("regen", help="regenerate a key from a signal")
    p.add_argument("--helper", required=True)
    p.add_argument("--signal", required=True)
    p.add_argument("--expect", help="expected key hex")
    p.set_defaults(func=cmd_regen)

    p = sub.add_parser("sweep-snr", help="reliability vs SNR sweep")
    p.set_defaults(func=cmd_sweep_snr)

    p = sub.add_parser("sweep-stress", help="reliability vs stress-scale sweep")
    p.set_defaults(func=cmd_sweep_stress)

    p = sub.add_parser("puf-train", help="train a designer PUF model")
    p.add_argument("--stages", type=int)
    p.add_argument("--crps", type=int)
    p.set_defaults(func=cmd_puf_train)

    p = sub.add_parser("blocker-demo", help="end-to-end lock/unlock demo")
    p.set_defaults(func=cmd_blocker_demo)

    p = sub.add_parser("report", help="recompute summary from a detail CSV")
    p.add_argument("--detail", required=True)
    p.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    cfg, proto = load_config(args.config, args.seed, args.skip_denoise)
    os.makedirs(args.out, exist_ok=True)
    args.func(cfg, proto, args.out, args)


if __name__ == "__main__":
    main()
