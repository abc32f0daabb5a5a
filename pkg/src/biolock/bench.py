"""Experiment harness: populations, sweeps, and report files.

Builds a synthetic population, enrolls every subject under two arms (the
worst-case margin baseline and the noise-aware variant that recomputes
margins from modeled noise), then measures key reliability across noise or
stress conditions.  All randomness is derived from the config seed, so a
given config file always produces byte-identical reports.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import ecc, quantizer, synthecg
from .errors import ConfigurationError, EnrollmentError
from .protocol import EnrollmentArtifacts
from .sigproc import PipelineConfig, RawSignal, beat_feature_matrix, validate_beats
from .synthecg import McSharryParams, NOISE_KINDS

log = logging.getLogger(__name__)

ARM_IOMBA = "iomba"
ARM_NA = "na-iomba"


def derive_seed(root: int, *tags: int) -> int:
    """Stable per-purpose seed; independent of execution order."""
    return int(np.random.SeedSequence((root,) + tags).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a sweep needs; JSON round-trippable, defaults overridable."""

    seed: int = 20240901
    n_subjects: int = 30
    jitter: float = 0.1
    alpha: float = 1.0
    beta: float = 1e-4
    max_bits: int = 2
    skew_bound: float = 1.0
    kurtosis_bound: float = 2.0
    band: tuple[float, float] = (1.0, 40.0)
    taps: int = 513
    window_ms: tuple[float, float] = (250.0, 400.0)
    kernel_width: int = 5
    iomba_denoise: bool = True
    na_denoise: bool = False
    enroll_snr_db: float = 30.0
    enroll_kind: str = "MIXED"
    enroll_beats: int = 20
    verify_beats: int = 16
    noise_kinds: tuple[str, ...] = NOISE_KINDS
    snr_list_db: tuple[float, ...] = (30.0, 20.0, 10.0, 5.0, 0.0, -5.0)
    model_snr_db: float = 5.0        # margin-reconstruction noise level
    model_kind: str = "MIXED"
    model_strips: int = 8            # noise realizations behind each sigma_v
    stress_target: str = "a"
    stress_waves: tuple[str, ...] = ("T",)
    stress_scales: tuple[float, ...] = (0.9, 0.8, 0.7, 0.6, 0.5)
    stress_model_scale: float = 0.7
    ecc_n: int = 1
    trials: int = 50
    force_sigma_v_equal: bool = False  # NA uses the worst-case sigma (arm check)

    def __post_init__(self):
        for kind in tuple(self.noise_kinds) + (self.enroll_kind, self.model_kind):
            if kind not in NOISE_KINDS:
                raise ConfigurationError(f"unknown noise kind {kind!r}")
        if self.ecc_n != 1 and (self.ecc_n < 1 or self.ecc_n % 2 == 0):
            raise ConfigurationError("ecc_n must be odd")

    def quant(self) -> quantizer.QuantConfig:
        return quantizer.QuantConfig(self.alpha, self.beta, self.max_bits)

    def pipeline(self, denoise: bool) -> PipelineConfig:
        return PipelineConfig(band=self.band, taps=self.taps,
                              window_ms=self.window_ms,
                              kernel_width=self.kernel_width, denoise=denoise)

    def to_json(self) -> str:
        d = asdict(self)
        d["version"] = 1
        d["kind"] = "experiment-config"
        return json.dumps(d, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        d = json.loads(text)
        d.pop("version", None)
        if d.pop("kind", "experiment-config") != "experiment-config":
            raise ConfigurationError("not an experiment-config document")
        for key in ("band", "window_ms", "noise_kinds", "snr_list_db",
                    "stress_scales", "stress_waves"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ReportRow:
    experiment: str
    condition: str
    arm: str
    subject: str
    key_len: int
    reliability: float
    minent_mean: float
    minent_min: float
    minent_max: float
    flag: str = ""


@dataclass
class ArmEnrollment:
    """One arm's enrollment products for the whole population."""

    name: str
    pipeline: PipelineConfig
    pop: quantizer.PopulationStats
    keys: dict[int, quantizer.BioKey]
    helpers: dict[int, quantizer.HelperData]
    failed: set[int]
    minent: dict[int, tuple[float, float, float]]  # per subject mean/min/max
    enroll_rows: dict[int, np.ndarray] | None = None  # per-beat feature matrices


@dataclass
class Prepared:
    """Population plus per-arm enrollment, reused across conditions."""

    config: ExperimentConfig
    subjects: list[McSharryParams]
    clean_verify: list[RawSignal]
    arms: dict[str, ArmEnrollment]


def _strip_duration(params: McSharryParams, beats: int) -> float:
    return max(4.0, (beats + 4) * 60.0 / params.hr_bpm)


def _noisy(clean: RawSignal, kind: str, snr_db: float, seed: int) -> RawSignal:
    noise = synthecg.synth_noise(kind, len(clean), clean.fs, seed)
    return synthecg.mix_at_snr(clean, noise, snr_db)


def aggregate_beats(rows: np.ndarray, limit: int) -> np.ndarray:
    """Validated per-feature median over up to `limit` beats."""
    kept = validate_beats(rows)
    return np.median(kept[:limit], axis=0)


def _sigma_v_estimate(model_strips: list[RawSignal], pipeline: PipelineConfig,
                      pop: quantizer.PopulationStats, limit: int) -> np.ndarray | None:
    """Spread of the beat-aggregated feature estimate under modeled noise.

    Each strip is one independent noise realization; its beats are
    aggregated exactly like a verification sample, and the per-feature std
    across realizations is the noise the margins must absorb.  This keeps
    detector failures and beat-to-beat noise correlation in the estimate.
    """
    estimates = []
    for strip in model_strips:
        rows = beat_feature_matrix(strip, pipeline)
        if rows.shape[0] >= 2:
            estimates.append(pop.normalize(aggregate_beats(rows, limit)))
    if len(estimates) < 2:
        return None
    sig = np.asarray(estimates).std(axis=0, ddof=1)
    return np.maximum(sig, quantizer.SIGMA_FLOOR)


def _enroll_arm(cfg: ExperimentConfig, name: str, denoise: bool,
                enroll_strips: list[RawSignal],
                model_strips: list[list[RawSignal]] | None) -> ArmEnrollment:
    """Enroll every subject; model_strips switches on the noise-aware path."""
    pipeline = cfg.pipeline(denoise)
    quant = cfg.quant()
    beats = []
    for strip in enroll_strips:
        rows = validate_beats(beat_feature_matrix(strip, pipeline))
        beats.append(rows[: cfg.enroll_beats])
    usable = [b for b in beats if b.shape[0] >= 2]
    if len(usable) < 2:
        raise EnrollmentError(f"{name}: too few subjects with usable beats")
    pop = quantizer.population_stats(np.vstack(usable), cfg.skew_bound,
                                     cfg.kurtosis_bound)

    sigma_e = np.zeros((len(beats), pop.dim))
    for i, rows in enumerate(beats):
        if rows.shape[0] >= 2:
            sigma_e[i] = quantizer.subject_stats(rows, pop).sigma
    worst = np.maximum(sigma_e.max(axis=0), quantizer.SIGMA_FLOOR)

    keys, helpers, failed, minent = {}, {}, set(), {}
    shared_table = None
    if model_strips is None or cfg.force_sigma_v_equal:
        shared_table = quantizer.margin_table(quant, worst)
    for i, rows in enumerate(beats):
        if rows.shape[0] < 2:
            failed.add(i)
            continue
        if shared_table is not None:
            table = shared_table
        else:
            sigma_v = _sigma_v_estimate(model_strips[i], pipeline, pop,
                                        cfg.verify_beats)
            if sigma_v is None:
                failed.add(i)
                continue
            table = quantizer.margin_table(quant, sigma_v)
        try:
            key, helper = quantizer.enroll_subject(rows, pop, quant, table)
        except EnrollmentError:
            failed.add(i)
            continue
        if cfg.ecc_n > 1:
            helper.ecc_helper = ecc.make_helper(
                key, ecc.CodeSpec(cfg.ecc_n), derive_seed(cfg.seed, 7, i))
        keys[i], helpers[i] = key, helper

    aligned = quantizer.align_key_bits(
        [(keys[i], helpers[i]) for i in sorted(keys)])
    # Positions need enough contributors for a meaningful max-probability
    # estimate; small test populations fall back to what they have.
    min_contrib = 10 if len(keys) >= 10 else max(2, len(keys))
    position_ent = {}
    for pos, bits in aligned.items():
        if len(bits) >= min_contrib:
            p1 = float(np.mean(bits))
            position_ent[pos] = -math.log2(max(p1, 1.0 - p1))
    for i in sorted(keys):
        vals = [position_ent[(int(j), b)]
                for j, d in zip(helpers[i].selected, helpers[i].bits_of)
                for b in range(int(d)) if (int(j), b) in position_ent]
        if vals:
            arr = np.asarray(vals)
            minent[i] = (float(arr.mean()), float(arr.min()), float(arr.max()))
        else:
            minent[i] = (float("nan"),) * 3
    return ArmEnrollment(name=name, pipeline=pipeline, pop=pop, keys=keys,
                         helpers=helpers, failed=failed, minent=minent,
                         enroll_rows={i: beats[i] for i in keys})


def _model_strips_for(cfg: ExperimentConfig, params: McSharryParams,
                      carrier: RawSignal, i: int, stress: bool) -> list[RawSignal]:
    """Noise realizations feeding one subject's sigma_v estimate.

    The clean carrier is reused; only the noise draw changes per strip.  In
    stress mode half the realizations ride on the stress-scaled dynamics at
    the model scale, so the induced feature shift shows up as spread.
    """
    strips = []
    if stress:
        stressed = synthecg.apply_stress(
            params, synthecg.wave_stress(cfg.stress_target, cfg.stress_waves,
                                         cfg.stress_model_scale))
        stressed_carrier = synthecg.generate_ecg(
            stressed, carrier.duration, derive_seed(cfg.seed, 8, i))
        half = max(1, cfg.model_strips // 2)
        for k in range(half):
            strips.append(_noisy(carrier, cfg.enroll_kind, cfg.enroll_snr_db,
                                 derive_seed(cfg.seed, 9, i, k)))
            strips.append(_noisy(stressed_carrier, cfg.enroll_kind,
                                 cfg.enroll_snr_db,
                                 derive_seed(cfg.seed, 9, i, half + k)))
    else:
        for k in range(cfg.model_strips):
            strips.append(_noisy(carrier, cfg.model_kind, cfg.model_snr_db,
                                 derive_seed(cfg.seed, 6, i, k)))
    return strips


def prepare(cfg: ExperimentConfig, stress: bool = False) -> Prepared:
    """Generate the population, enrollment strips, and both arms' keys."""
    subjects = synthecg.sample_population(cfg.n_subjects, cfg.jitter,
                                          derive_seed(cfg.seed, 0))
    enroll_strips, clean_verify, model_strips = [], [], []
    for i, params in enumerate(subjects):
        dur = _strip_duration(params, max(cfg.enroll_beats, cfg.verify_beats))
        carrier = synthecg.generate_ecg(params, dur, derive_seed(cfg.seed, 1, i))
        enroll_strips.append(_noisy(carrier, cfg.enroll_kind, cfg.enroll_snr_db,
                                    derive_seed(cfg.seed, 2, i)))
        vdur = _strip_duration(params, cfg.verify_beats)
        clean_verify.append(synthecg.generate_ecg(params, vdur,
                                                  derive_seed(cfg.seed, 3, i)))
        model_strips.append(_model_strips_for(cfg, params, carrier, i, stress))

    arms = {
        ARM_IOMBA: _enroll_arm(cfg, ARM_IOMBA, cfg.iomba_denoise,
                               enroll_strips, None),
        ARM_NA: _enroll_arm(cfg, ARM_NA, cfg.na_denoise,
                            enroll_strips, model_strips),
    }
    return Prepared(config=cfg, subjects=subjects, clean_verify=clean_verify,
                    arms=arms)


def _measure(prep: Prepared, experiment: str, condition: str,
             verify_signal_of, cond_tag: int) -> list[ReportRow]:
    """Reliability of both arms for one condition; one row per subject."""
    cfg = prep.config
    rows = []
    for arm in prep.arms.values():
        for i in range(len(prep.subjects)):
            sid = f"s{i:03d}"
            if i in arm.failed or i not in arm.keys:
                rows.append(ReportRow(experiment, condition, arm.name, sid,
                                      0, float("nan"), float("nan"),
                                      float("nan"), float("nan"),
                                      flag="enroll-failed"))
                continue
            fractions = []
            for t in range(cfg.trials):
                signal = verify_signal_of(i, t, cond_tag)
                beats = beat_feature_matrix(signal, arm.pipeline)
                if beats.shape[0] == 0:
                    fractions.append(0.0)
                    continue
                beats = validate_beats(beats)[: cfg.verify_beats]
                regen = quantizer.regenerate_from_samples(beats, arm.helpers[i])
                fractions.append(quantizer.reliability(arm.keys[i], regen))
            me = arm.minent[i]
            rows.append(ReportRow(experiment, condition, arm.name, sid,
                                  len(arm.keys[i]), float(np.mean(fractions)),
                                  me[0], me[1], me[2]))
    return rows


def run_snr_sweep(cfg: ExperimentConfig, prep: Prepared | None = None) -> list[ReportRow]:
    """Reliability vs SNR for every configured noise kind, both arms."""
    if prep is None:
        prep = prepare(cfg, stress=False)
    rows = []
    for k_idx, kind in enumerate(cfg.noise_kinds):
        for s_idx, snr in enumerate(cfg.snr_list_db):
            tag = k_idx * 1000 + s_idx

            def verify(i, t, _tag=tag, _kind=kind, _snr=snr):
                return _noisy(prep.clean_verify[i], _kind, _snr,
                              derive_seed(cfg.seed, 4, i, t, _tag))

            rows.extend(_measure(prep, "snr-sweep", f"{kind}@{snr:g}dB",
                                 verify, tag))
    return rows


def run_stress_sweep(cfg: ExperimentConfig, prep: Prepared | None = None) -> list[ReportRow]:
    """Reliability under stressed dynamics, margins re-optimized for stress."""
    if prep is None:
        prep = prepare(cfg, stress=True)
    rows = []
    cache: dict[tuple[int, int], RawSignal] = {}
    for c_idx, scale in enumerate(cfg.stress_scales):
        def verify(i, t, _c=c_idx, _scale=scale):
            if (i, _c) not in cache:
                stressed = synthecg.apply_stress(
                    prep.subjects[i],
                    synthecg.wave_stress(cfg.stress_target, cfg.stress_waves,
                                         _scale))
                dur = _strip_duration(prep.subjects[i], cfg.verify_beats)
                cache[(i, _c)] = synthecg.generate_ecg(
                    stressed, dur, derive_seed(cfg.seed, 10, i, _c))
            return _noisy(cache[(i, _c)], cfg.enroll_kind, cfg.enroll_snr_db,
                          derive_seed(cfg.seed, 11, i, t, _c))

        rows.extend(_measure(prep, "stress-sweep",
                             f"{cfg.stress_target}@{scale:g}", verify, c_idx))
    return rows


def build_enrollment_artifacts(cfg: ExperimentConfig, denoise: bool = True,
                               seed_tag: int = 20) -> EnrollmentArtifacts:
    """Population-level artifacts for on-device enrollment.

    A reference population (disjoint from any user by seed) provides the
    normalization statistics.  The margin table is noise-aware: each
    reference subject's verification-estimator spread is measured under the
    model noise, and the per-feature median across subjects sets the sigma
    the margins must absorb for a typical user.
    """
    pipeline = cfg.pipeline(denoise)
    quant = cfg.quant()
    ref = synthecg.sample_population(cfg.n_subjects, cfg.jitter,
                                     derive_seed(cfg.seed, seed_tag))
    enroll_rows, carriers = [], []
    for i, params in enumerate(ref):
        dur = _strip_duration(params, max(cfg.enroll_beats, cfg.verify_beats))
        carrier = synthecg.generate_ecg(params, dur,
                                        derive_seed(cfg.seed, seed_tag, 1, i))
        carriers.append(carrier)
        noisy = _noisy(carrier, cfg.enroll_kind, cfg.enroll_snr_db,
                       derive_seed(cfg.seed, seed_tag, 2, i))
        enroll_rows.append(beat_feature_matrix(noisy, pipeline)[: cfg.enroll_beats])
    usable = [b for b in enroll_rows if b.shape[0] >= 2]
    if len(usable) < 2:
        raise EnrollmentError("reference population produced too few usable beats")
    pop = quantizer.population_stats(np.vstack(usable), cfg.skew_bound,
                                     cfg.kurtosis_bound)

    sigmas = []
    for i, carrier in enumerate(carriers):
        strips = [_noisy(carrier, cfg.model_kind, cfg.model_snr_db,
                         derive_seed(cfg.seed, seed_tag, 3, i, k))
                  for k in range(cfg.model_strips)]
        sig = _sigma_v_estimate(strips, pipeline, pop, cfg.verify_beats)
        if sig is not None:
            sigmas.append(sig)
    if not sigmas:
        raise EnrollmentError("noise model produced no usable strips")
    sigma_v = np.maximum(np.median(np.asarray(sigmas), axis=0),
                         quantizer.SIGMA_FLOOR)
    margins = quantizer.margin_table(quant, sigma_v)
    return EnrollmentArtifacts(pop=pop, config=quant, margins=margins)


# --- report files -----------------------------------------------------------

_DETAIL_HEADER = ("experiment,condition,arm,subject,key_len,reliability,"
                  "minent_mean,minent_min,minent_max,flag")
_METRICS = ("key_len", "reliability", "minent_mean")


def _fmt(v) -> str:
    # repr round-trips exactly, so `report` can rebuild identical aggregates
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def summarize(rows: list[ReportRow]) -> list[str]:
    """Max/Ave/Min per condition, arm, and metric, recomputed from rows."""
    out = ["experiment,condition,arm,metric,max,ave,min"]
    groups: dict[tuple, list[ReportRow]] = {}
    for r in rows:
        groups.setdefault((r.experiment, r.condition, r.arm), []).append(r)
    for (exp, cond, arm), members in sorted(groups.items()):
        ok = [r for r in members if not r.flag]
        for metric in _METRICS:
            vals = [getattr(r, metric) for r in ok]
            vals = [v for v in vals if not (isinstance(v, float) and math.isnan(v))]
            if not vals:
                out.append(f"{exp},{cond},{arm},{metric},nan,nan,nan")
                continue
            out.append(f"{exp},{cond},{arm},{metric},"
                       f"{_fmt(max(vals))},{_fmt(float(np.mean(vals)))},"
                       f"{_fmt(min(vals))}")
    return out


def write_report(rows: list[ReportRow], outdir) -> list[str]:
    """detail.csv + summary.csv + long.csv, byte-deterministic given rows."""
    import os
    if not rows:
        raise ConfigurationError("no rows to report")
    os.makedirs(outdir, exist_ok=True)
    ordered = sorted(rows, key=lambda r: (r.experiment, r.condition, r.arm,
                                          r.subject))
    detail = os.path.join(outdir, "detail.csv")
    with open(detail, "w") as fh:
        fh.write(_DETAIL_HEADER + "\n")
        for r in ordered:
            fh.write(",".join([r.experiment, r.condition, r.arm, r.subject,
                               str(r.key_len), _fmt(r.reliability),
                               _fmt(r.minent_mean), _fmt(r.minent_min),
                               _fmt(r.minent_max), r.flag]) + "\n")
    summary = os.path.join(outdir, "summary.csv")
    with open(summary, "w") as fh:
        fh.write("\n".join(summarize(ordered)) + "\n")
    longf = os.path.join(outdir, "long.csv")
    with open(longf, "w") as fh:
        fh.write("experiment,condition,arm,subject,metric,value\n")
        for r in ordered:
            for metric in _METRICS:
                fh.write(f"{r.experiment},{r.condition},{r.arm},{r.subject},"
                         f"{metric},{_fmt(getattr(r, metric))}\n")
    return [detail, summary, longf]
