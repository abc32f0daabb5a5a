"""Synthetic ECG generation and structured noise.

The generator integrates the McSharry three-state dynamical model: a planar
limit cycle carries the heartbeat phase while the z channel accumulates one
Gaussian-shaped event per wave (P, Q, R, S, T) plus a slow baseline
oscillation.  Noise generators produce the three classic contaminations,
baseline wander (BW), electrode movement (EM) and muscle artifact (MA), each
normalized to unit power so SNR mixing is exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace, asdict

import numpy as np
from scipy.signal import firwin

from .errors import ConfigurationError, NumericError
from .sigproc import RawSignal

WAVES = ("P", "Q", "R", "S", "T")

# Canonical wave constants: angles on the limit cycle, event amplitudes and
# Gaussian widths.  Chosen so one beat shows P,Q,R,S,T in order with R as
# the global maximum (checked by the test suite before use).
DEFAULT_THETA = (-math.pi / 3.0, -math.pi / 12.0, 0.0, math.pi / 12.0, math.pi / 2.0)
DEFAULT_A = (1.2, -5.0, 30.0, -7.5, 0.75)
DEFAULT_B = (0.25, 0.1, 0.1, 0.1, 0.4)


@dataclass(frozen=True)
class McSharryParams:
    """Dynamical-model parameters for one synthetic subject."""

    theta: tuple[float, ...] = DEFAULT_THETA
    a: tuple[float, ...] = DEFAULT_A
    b: tuple[float, ...] = DEFAULT_B
    hr_bpm: float = 60.0
    fs: float = 256.0
    # The raw z channel carries waves of roughly a_i * b_i^2 / omega mV, so
    # the R bump sits near 0.05 mV at rest; the default baseline rides at
    # about a tenth of that.
    baseline_amp_mv: float = 0.005
    baseline_freq_hz: float = 0.25

    def __post_init__(self):
        for name, tup in (("theta", self.theta), ("a", self.a), ("b", self.b)):
            if len(tup) != 5:
                raise ConfigurationError(f"{name} must have one entry per wave (5)")
        if any(bi <= 0 for bi in self.b):
            raise ConfigurationError("wave widths b must be positive")
        if not self.fs > 0:
            raise ConfigurationError("fs must be positive")
        if not self.hr_bpm > 0:
            raise ConfigurationError("heart rate must be positive")
        if not all(x < y for x, y in zip(self.theta, self.theta[1:])):
            raise ConfigurationError("wave angles must be ordered P < Q < R < S < T")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "McSharryParams":
        d = dict(d)
        for key in ("theta", "a", "b"):
            d[key] = tuple(d[key])
        return cls(**d)


NOISE_KINDS = ("BW", "EM", "MA", "MIXED")


@dataclass(frozen=True)
class NoiseSpec:
    """What to contaminate a clean strip with."""

    kind: str = "MIXED"
    snr_db: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigurationError(f"noise kind must be one of {NOISE_KINDS}")


@dataclass(frozen=True)
class StressScale:
    """Per-wave multipliers applied to one parameter family.

    The sweep range follows the stress/exercise protocol: factors shrink
    parameters toward 0.5 of their resting value.
    """

    target: str
    factors: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.target not in ("a", "b", "theta"):
            raise ConfigurationError("stress target must be 'a', 'b' or 'theta'")
        if len(self.factors) != 5:
            raise ConfigurationError("need one factor per wave")
        if any(not 0.5 <= f <= 1.0 for f in self.factors):
            raise ConfigurationError("stress factors must lie in [0.5, 1.0]")


def _derivative(state, t, omega, theta_i, a_i, b2_i, base_amp, base_w):
    x, y, z = state
    alpha = 1.0 - math.sqrt(x * x + y * y)
    dx = alpha * x - omega * y
    dy = alpha * y + omega * x
    th = math.atan2(y, x)
    dz = -(z - base_amp * math.sin(base_w * t))
    for k in range(5):
        dth = math.fmod(th - theta_i[k] + math.pi, 2.0 * math.pi)
        if dth < 0.0:
            dth += 2.0 * math.pi
        dth -= math.pi
        dz -= a_i[k] * dth * math.exp(-dth * dth / b2_i[k])
    return dx, dy, dz


def generate_ecg(params: McSharryParams, duration: float, seed: int = 0) -> RawSignal:
    """Integrate the model with fixed-step RK4 at dt = 1/fs.

    The seed sets the initial phase on the limit cycle so strips from the
    same subject start at different points of the cardiac cycle.  Output is
    the z channel in millivolts, length round(duration * fs).
    """
    if duration < 2.0:
        raise ConfigurationError("duration must be at least 2 s")
    rng = np.random.default_rng(seed)
    phase0 = float(rng.uniform(-math.pi, math.pi))

    fs = params.fs
    dt = 1.0 / fs
    n = int(round(duration * fs))
    omega = 2.0 * math.pi * params.hr_bpm / 60.0
    theta_i = params.theta
    a_i = params.a
    b2_i = tuple(2.0 * bi * bi for bi in params.b)
    base_amp = params.baseline_amp_mv
    base_w = 2.0 * math.pi * params.baseline_freq_hz

    x, y, z = math.cos(phase0), math.sin(phase0), 0.0
    out = np.empty(n)
    args = (omega, theta_i, a_i, b2_i, base_amp, base_w)
    t = 0.0
    for i in range(n):
        out[i] = z
        k1 = _derivative((x, y, z), t, *args)
        s2 = (x + 0.5 * dt * k1[0], y + 0.5 * dt * k1[1], z + 0.5 * dt * k1[2])
        k2 = _derivative(s2, t + 0.5 * dt, *args)
        s3 = (x + 0.5 * dt * k2[0], y + 0.5 * dt * k2[1], z + 0.5 * dt * k2[2])
        k3 = _derivative(s3, t + 0.5 * dt, *args)
        s4 = (x + dt * k3[0], y + dt * k3[1], z + dt * k3[2])
        k4 = _derivative(s4, t + dt, *args)
        x += dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        y += dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        z += dt / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        t += dt
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
            raise NumericError(f"integration diverged at t={t:.3f}s")
    return RawSignal(out, fs)


def limit_cycle_radius(params: McSharryParams, duration: float, seed: int = 0,
                       initial_radius: float = 1.0) -> np.ndarray:
    """Radius of the (x, y) trajectory over time, for convergence checks.

    generate_ecg starts on the unit cycle (initial_radius 1); pass a
    different radius to watch the attractor pull the state back in.
    """
    if duration < 2.0:
        raise ConfigurationError("duration must be at least 2 s")
    if initial_radius <= 0:
        raise ConfigurationError("initial radius must be positive")
    rng = np.random.default_rng(seed)
    phase0 = float(rng.uniform(-math.pi, math.pi))
    x = initial_radius * math.cos(phase0)
    y = initial_radius * math.sin(phase0)
    z = 0.0
    fs, dt = params.fs, 1.0 / params.fs
    n = int(round(duration * fs))
    omega = 2.0 * math.pi * params.hr_bpm / 60.0
    args = (omega, params.theta, params.a, tuple(2 * b * b for b in params.b),
            params.baseline_amp_mv, 2.0 * math.pi * params.baseline_freq_hz)
    radii = np.empty(n)
    t = 0.0
    for i in range(n):
        radii[i] = math.hypot(x, y)
        k1 = _derivative((x, y, z), t, *args)
        s2 = (x + 0.5 * dt * k1[0], y + 0.5 * dt * k1[1], z + 0.5 * dt * k1[2])
        k2 = _derivative(s2, t + 0.5 * dt, *args)
        s3 = (x + 0.5 * dt * k2[0], y + 0.5 * dt * k2[1], z + 0.5 * dt * k2[2])
        k3 = _derivative(s3, t + 0.5 * dt, *args)
        s4 = (x + dt * k3[0], y + dt * k3[1], z + dt * k3[2])
        k4 = _derivative(s4, t + dt, *args)
        x += dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        y += dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        z += dt / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        t += dt
    return radii


def _unit_power(x: np.ndarray) -> np.ndarray:
    p = float(np.mean(x * x))
    if p <= 0.0:
        raise NumericError("generated noise has zero power")
    return x / math.sqrt(p)


def _burst_envelope(length: int, fs: float, rng: np.random.Generator,
                    mean_burst_s: float = 1.0, ramp_s: float = 0.25) -> np.ndarray:
    """Alternating on/off envelope with ~50% duty cycle and smooth edges."""
    env = np.zeros(length)
    pos = 0
    on = bool(rng.integers(0, 2))
    while pos < length:
        seg = max(1, int(rng.uniform(0.5, 1.5) * mean_burst_s * fs))
        if on:
            env[pos:pos + seg] = 1.0
        pos += seg
        on = not on
    ramp = max(1, int(ramp_s * fs))
    kernel = np.hanning(2 * ramp + 1)
    kernel /= kernel.sum()
    return np.convolve(np.pad(env, ramp, mode="edge"), kernel, mode="valid")


def _bandlimited_gaussian(length: int, fs: float, lo: float, hi: float,
                          rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal(length)
    taps = 257
    h = firwin(taps, [lo, hi], pass_zero=False, fs=fs, window="hamming")
    half = taps // 2
    return np.convolve(np.pad(white, half, mode="edge"), h, mode="valid")


def synth_noise(kind: str, length: int, fs: float, seed: int = 0) -> RawSignal:
    """Generate one unit-power noise realization.

    BW is a sum of sub-0.5 Hz sinusoids with random phases; MA is 5-50 Hz
    band-limited Gaussian noise gated by ~50% duty-cycle bursts; EM is a
    random-step baseline plus 1-10 Hz bursts; MIXED is the equal-power sum
    of all three.  Mean square power is exactly 1 after normalization.
    """
    if kind not in NOISE_KINDS:
        raise ConfigurationError(f"noise kind must be one of {NOISE_KINDS}")
    if length <= 0:
        raise ConfigurationError("length must be positive")
    if kind == "MIXED":
        parts = [synth_noise(k, length, fs, s).samples
                 for k, s in zip(("BW", "EM", "MA"),
                                 np.random.SeedSequence(seed).generate_state(3))]
        return RawSignal(_unit_power(np.sum(parts, axis=0)), fs)

    rng = np.random.default_rng(seed)
    t = np.arange(length) / fs
    if kind == "BW":
        n_comp = 8
        freqs = rng.uniform(0.03, 0.45, n_comp)
        amps = rng.uniform(0.5, 1.0, n_comp)
        phases = rng.uniform(0.0, 2.0 * math.pi, n_comp)
        x = np.zeros(length)
        for f, a, p in zip(freqs, amps, phases):
            x += a * np.sin(2.0 * math.pi * f * t + p)
    elif kind == "MA":
        x = _bandlimited_gaussian(length, fs, 5.0, min(50.0, 0.45 * fs), rng)
        x *= _burst_envelope(length, fs, rng)
    else:  # EM
        steps = np.zeros(length)
        pos = 0
        level = 0.0
        while pos < length:
            seg = max(1, int(rng.exponential(1.5) * fs))
            steps[pos:pos + seg] = level
            level = float(rng.normal(0.0, 1.0))
            pos += seg
        bursts = _bandlimited_gaussian(length, fs, 1.0, 10.0, rng)
        bursts *= _burst_envelope(length, fs, rng)
        steps_p = float(np.mean(steps * steps))
        if steps_p > 0:
            steps /= math.sqrt(steps_p)
        x = steps + _unit_power(bursts)
    return RawSignal(_unit_power(x), fs)


def mix_at_snr(clean: RawSignal, noise: RawSignal, snr_db: float) -> RawSignal:
    """Rescale noise so 10*log10(P_signal / P_noise) equals snr_db exactly."""
    if clean.samples.size != noise.samples.size:
        raise ConfigurationError("clean and noise must have equal length")
    p_sig = float(np.mean(clean.samples ** 2))
    p_noise = float(np.mean(noise.samples ** 2))
    if p_noise <= 0.0:
        raise ConfigurationError("noise has zero power; cannot set an SNR")
    scale = math.sqrt(p_sig / p_noise * 10.0 ** (-snr_db / 10.0))
    return RawSignal(clean.samples + scale * noise.samples, clean.fs)


def apply_stress(params: McSharryParams, scale: StressScale) -> McSharryParams:
    """Scale one parameter family per wave.

    Amplitudes and widths are multiplied directly; angles are scaled as
    offsets from the R wave so the QRS reference stays fixed and intervals
    compress toward R.
    """
    f = scale.factors
    if scale.target == "a":
        new = replace(params, a=tuple(ai * fi for ai, fi in zip(params.a, f)))
    elif scale.target == "b":
        b_new = tuple(bi * fi for bi, fi in zip(params.b, f))
        if any(bi <= 0 for bi in b_new):
            raise ConfigurationError("stress scaling produced a non-positive width")
        new = replace(params, b=b_new)
    else:
        theta_r = params.theta[2]
        new = replace(params, theta=tuple(theta_r + (ti - theta_r) * fi
                                          for ti, fi in zip(params.theta, f)))
    return new


def uniform_stress(target: str, factor: float) -> StressScale:
    """Convenience: the same factor on every wave.

    Note that a uniform amplitude ('a') scale cancels out of per-beat
    z-normalized features; use wave_stress to change beat morphology.
    """
    return StressScale(target, (factor,) * 5)


def wave_stress(target: str, waves, factor: float) -> StressScale:
    """Scale one parameter family on selected waves only.

    `waves` is an iterable of wave names ('P', 'Q', 'R', 'S', 'T'); 'QRS'
    expands to Q, R and S.  Remaining waves keep factor 1.0.
    """
    expanded = set()
    for w in ([waves] if isinstance(waves, str) else waves):
        expanded.update(("Q", "R", "S") if w == "QRS" else (w,))
    unknown = expanded - set(WAVES)
    if unknown:
        raise ConfigurationError(f"unknown wave(s): {sorted(unknown)}")
    return StressScale(target, tuple(factor if w in expanded else 1.0
                                     for w in WAVES))


def sample_population(n: int, jitter: float = 0.1, seed: int = 0,
                      base: McSharryParams = McSharryParams()) -> list[McSharryParams]:
    """Draw n synthetic subjects around a base parameter set.

    Each of a, b, theta offsets (from R) and heart rate is multiplied by an
    independent (1 + N(0, jitter)) factor; draws violating the model
    invariants are rejected and redrawn, so every returned set is valid.
    """
    if n < 2:
        raise ConfigurationError("population needs at least 2 subjects")
    if not 0.0 < jitter <= 0.3:
        raise ConfigurationError("jitter must lie in (0, 0.3]")
    rng = np.random.default_rng(seed)
    subjects = []
    while len(subjects) < n:
        fa = 1.0 + rng.normal(0.0, jitter, 5)
        fb = 1.0 + rng.normal(0.0, jitter, 5)
        ft = 1.0 + rng.normal(0.0, jitter, 5)
        fhr = 1.0 + float(rng.normal(0.0, jitter))
        theta_r = base.theta[2]
        try:
            subjects.append(McSharryParams(
                theta=tuple(theta_r + (ti - theta_r) * fi for ti, fi in zip(base.theta, ft)),
                a=tuple(ai * fi for ai, fi in zip(base.a, fa)),
                b=tuple(bi * fi for bi, fi in zip(base.b, fb)),
                hr_bpm=base.hr_bpm * fhr,
                fs=base.fs,
                baseline_amp_mv=base.baseline_amp_mv,
                baseline_freq_hz=base.baseline_freq_hz,
            ))
        except ConfigurationError:
            continue
    return subjects


def population_to_json(subjects: list[McSharryParams], path) -> None:
    payload = {"version": 1, "kind": "ecg-population",
               "subjects": [p.to_dict() for p in subjects]}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def population_from_json(path) -> list[McSharryParams]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("kind") != "ecg-population":
        raise ConfigurationError("not a population file")
    return [McSharryParams.from_dict(d) for d in payload["subjects"]]
