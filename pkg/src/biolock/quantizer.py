"""Per-user feature quantization with reliability margins.

Implements interval-optimized bit allocation (IOMBA) and its noise-aware
variant (NA-IOMBA).  Features are normalized against population statistics
to a standard normal, the normal axis is cut into 2^d equal-mass regions
per bit depth, and a user's feature is kept only when its mean clears a
margin around every threshold.  The margin is the distance at which the
user's noise distribution leaks at most beta of its mass across the nearest
threshold; an entropy bound alpha caps how much likelier the unbounded
outer regions may be than the inner ones.

The noise-aware variant runs the identical optimization but feeds it
modeled per-feature noise instead of the worst case seen at enrollment.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.stats import kurtosis, skew

from . import ecc
from .errors import ConfigurationError, EnrollmentError

_SQRT2 = math.sqrt(2.0)
SIGMA_FLOOR = 1e-6


def normal_cdf(x: float) -> float:
    """Standard normal CDF via erfc (no lookup tables)."""
    return 0.5 * math.erfc(-x / _SQRT2)


def _bisect_normal_quantile(p: float, tol: float = 1e-10) -> float:
    """Solve normal_cdf(x) = p by bisection to within tol on x."""
    if not 0.0 < p < 1.0:
        raise ConfigurationError(f"quantile probability must be in (0,1), got {p}")
    lo, hi = -40.0, 40.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if normal_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class QuantConfig:
    """alpha bounds region-mass imbalance; beta bounds threshold crossings."""

    alpha: float = 1.0
    beta: float = 1e-3
    max_bits: int = 2

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in (0, 1]")
        if not 0.0 < self.beta < 0.5:
            raise ConfigurationError("beta must lie in (0, 0.5)")
        if self.max_bits not in (1, 2, 3):
            raise ConfigurationError("max_bits must be 1, 2 or 3")


@dataclass
class PopulationStats:
    """Per-feature normalization parameters and a Gaussianity screen."""

    mean: np.ndarray
    std: np.ndarray
    gaussian: np.ndarray
    usable: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.size

    def normalize(self, values: np.ndarray) -> np.ndarray:
        safe = np.where(self.std > 0, self.std, 1.0)
        return (np.asarray(values, dtype=np.float64) - self.mean) / safe


def population_stats(features: np.ndarray, skew_bound: float = 1.0,
                     kurtosis_bound: float = 2.0) -> PopulationStats:
    """Estimate per-feature mean/std over all samples of all subjects.

    features is (n_samples, D) with samples pooled across the population.
    A feature is flagged non-Gaussian when |skewness| or |excess kurtosis|
    exceed the configured bounds; zero-variance features are flagged
    unusable rather than raising.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 4:
        raise ConfigurationError("need a (n_samples, D) matrix with several samples")
    mean = f.mean(axis=0)
    std = f.std(axis=0, ddof=1)
    nonzero = std > 0
    sk = np.zeros(f.shape[1])
    ku = np.zeros(f.shape[1])
    if np.any(nonzero):
        sk[nonzero] = skew(f[:, nonzero], axis=0)
        ku[nonzero] = kurtosis(f[:, nonzero], axis=0)  # excess kurtosis
    gaussian = (np.abs(sk) < skew_bound) & (np.abs(ku) < kurtosis_bound) & nonzero
    return PopulationStats(mean=mean, std=std, gaussian=gaussian,
                           usable=gaussian & nonzero)


@dataclass
class SubjectStats:
    """Normalized-domain mean and noise spread per feature for one subject."""

    mu: np.ndarray
    sigma: np.ndarray


def subject_stats(samples: np.ndarray, pop: PopulationStats) -> SubjectStats:
    """Per-feature mean and unbiased std of a subject's enrollment samples."""
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 2:
        raise ConfigurationError("need at least 2 enrollment samples")
    z = pop.normalize(s)
    sigma = np.maximum(z.std(axis=0, ddof=1), SIGMA_FLOOR)
    return SubjectStats(mu=z.mean(axis=0), sigma=sigma)


@dataclass(frozen=True)
class MarginSet:
    """Quantization geometry for one feature noise level and bit depth.

    thresholds has 2^d - 1 entries symmetric about 0; band_lo/band_hi give
    the reliable interval inside each of the 2^d regions (outer regions are
    half-infinite).  feasible is False when the margin swallows an interior
    region entirely.
    """

    depth: int
    sigma: float
    margin: float
    thresholds: np.ndarray
    band_lo: np.ndarray
    band_hi: np.ndarray
    feasible: bool

    def classify(self, mu: float) -> int | None:
        """Region index when mu sits in a reliable band, else None."""
        if not self.feasible:
            return None
        r = int(np.searchsorted(self.thresholds, mu))
        if not (self.band_lo[r] <= mu <= self.band_hi[r]):
            return None
        if np.min(np.abs(self.thresholds - mu)) <= 0.0:
            return None  # exactly on a threshold: sign is undefined
        return r

    def region_of(self, value: float) -> int:
        """Region of an arbitrary value, margins ignored (regeneration path)."""
        return int(np.searchsorted(self.thresholds, value))


@lru_cache(maxsize=None)
def region_thresholds(depth: int) -> tuple[float, ...]:
    """Equal-population-mass thresholds: 2^d - 1 standard normal quantiles."""
    if depth < 1:
        raise ConfigurationError("bit depth must be >= 1")
    n = 2 ** depth
    half = [_bisect_normal_quantile(k / n) for k in range(1, n // 2)]
    return tuple(half) + (0.0,) + tuple(-t for t in reversed(half))


def compute_margins(config: QuantConfig, sigma_sub: float, bit_depth: int) -> MarginSet:
    """Solve the margin geometry for one feature noise level.

    The margin m is the smallest distance from a threshold at which a
    Gaussian with std sigma_sub keeps its crossing mass at or below beta;
    solved by bisection on the standard normal CDF (tolerance 1e-10).  For
    depths >= 2 the half-infinite outer band is additionally pulled outward
    until its population mass is at most alpha times the smallest interior
    band mass, which balances region probabilities at alpha = 1.
    """
    if bit_depth < 1 or bit_depth > config.max_bits:
        raise ConfigurationError(
            f"bit depth {bit_depth} outside 1..max_bits={config.max_bits}")
    if sigma_sub < 0:
        raise ConfigurationError("sigma must be non-negative")

    thr = np.asarray(region_thresholds(bit_depth))
    n_regions = 2 ** bit_depth
    margin = 0.0 if sigma_sub == 0 else -sigma_sub * _bisect_normal_quantile(config.beta)

    lo = np.empty(n_regions)
    hi = np.empty(n_regions)
    lo[0], hi[-1] = -np.inf, np.inf
    hi[0] = thr[0] - margin
    lo[-1] = thr[-1] + margin
    for r in range(1, n_regions - 1):
        lo[r] = thr[r - 1] + margin
        hi[r] = thr[r] - margin

    feasible = True
    if n_regions > 2:
        inner = slice(1, n_regions - 1)
        if np.any(hi[inner] <= lo[inner]):
            feasible = False
        else:
            masses = [normal_cdf(hi[r]) - normal_cdf(lo[r])
                      for r in range(1, n_regions - 1)]
            cap = config.alpha * min(masses)
            if cap <= 0.0:
                feasible = False
            elif normal_cdf(hi[0]) > cap:
                edge = _bisect_normal_quantile(cap)
                hi[0] = min(hi[0], edge)
                lo[-1] = -hi[0]  # exact mirror
    return MarginSet(depth=bit_depth, sigma=float(sigma_sub), margin=float(margin),
                     thresholds=thr, band_lo=lo, band_hi=hi, feasible=feasible)


def na_margins(config: QuantConfig, noise_model_sigma: float, bit_depth: int) -> MarginSet:
    """Noise-aware margins: identical optimization, modeled sigma as input.

    Feed the per-feature noise predicted by a model (or measured under the
    conditions of interest) instead of the worst case seen at enrollment.
    """
    return compute_margins(config, noise_model_sigma, bit_depth)


def margin_table(config: QuantConfig, sigmas: np.ndarray,
                 depths: tuple[int, ...] | None = None) -> dict[int, list[MarginSet]]:
    """Margin sets for every feature and bit depth: {depth: [MarginSet] * D}."""
    if depths is None:
        depths = tuple(range(1, config.max_bits + 1))
    sig = np.asarray(sigmas, dtype=np.float64)
    return {d: [compute_margins(config, float(s), d) for s in sig] for d in depths}


def gray_bits(region: int, depth: int) -> np.ndarray:
    """Gray-code a region index to depth bits, MSB first."""
    g = region ^ (region >> 1)
    return np.array([(g >> k) & 1 for k in range(depth - 1, -1, -1)], dtype=np.uint8)


@dataclass(frozen=True)
class BioKey:
    """A quantized biometric key."""

    bits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=np.uint8) & 1)

    def __len__(self) -> int:
        return self.bits.size

    def to_hex(self) -> str:
        return np.packbits(self.bits).tobytes().hex()

    def to_bytes(self) -> bytes:
        """Canonical packing: 4-byte big-endian bit length, then MSB-first bits."""
        return len(self.bits).to_bytes(4, "big") + np.packbits(self.bits).tobytes()

    def __eq__(self, other) -> bool:
        return isinstance(other, BioKey) and np.array_equal(self.bits, other.bits)


@dataclass
class HelperData:
    """Public regeneration metadata.

    Carries positions and parameters only: selected feature indices, bits
    per feature and the population normalization for those features.  The
    optional ECC helper is the only key-derived field and is information
    theoretically hiding on its own.
    """

    selected: np.ndarray
    bits_of: np.ndarray
    norm_mean: np.ndarray
    norm_std: np.ndarray
    ecc_helper: ecc.EccHelper | None = None

    def __post_init__(self):
        self.selected = np.asarray(self.selected, dtype=np.intp)
        self.bits_of = np.asarray(self.bits_of, dtype=np.intp)
        if self.selected.size != self.bits_of.size:
            raise ConfigurationError("selected and bits_of must align")
        if self.selected.size and np.any(np.diff(self.selected) <= 0):
            raise ConfigurationError("selected indices must be unique and sorted")

    @property
    def key_length(self) -> int:
        return int(self.bits_of.sum())

    def to_json(self) -> str:
        payload = {
            "version": 1,
            "kind": "helper-data",
            "selected": self.selected.tolist(),
            "bits_of": self.bits_of.tolist(),
            "norm_mean": [float(v) for v in self.norm_mean],
            "norm_std": [float(v) for v in self.norm_std],
            "ecc": None if self.ecc_helper is None else self.ecc_helper.to_dict(),
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "HelperData":
        d = json.loads(text)
        if d.get("kind") != "helper-data":
            raise ConfigurationError("not a helper-data document")
        helper = None if d["ecc"] is None else ecc.EccHelper.from_dict(d["ecc"])
        return cls(selected=np.array(d["selected"], dtype=np.intp),
                   bits_of=np.array(d["bits_of"], dtype=np.intp),
                   norm_mean=np.array(d["norm_mean"], dtype=np.float64),
                   norm_std=np.array(d["norm_std"], dtype=np.float64),
                   ecc_helper=helper)


def enroll_subject(samples: np.ndarray, pop: PopulationStats, config: QuantConfig,
                   margins_by_depth: dict[int, list[MarginSet]]) -> tuple[BioKey, HelperData]:
    """Select reliable features for one subject and quantize them.

    For each usable feature the deepest bit depth whose reliable band
    contains the subject's mean wins; features inside every margin are
    discarded.  Returns the concatenated Gray-coded key and the helper data
    needed to regenerate it.
    """
    stats = subject_stats(samples, pop)
    depths = sorted(margins_by_depth.keys(), reverse=True)
    selected, bits_of, key_bits = [], [], []
    for j in range(pop.dim):
        if not pop.usable[j]:
            continue
        mu = float(stats.mu[j])
        for d in depths:
            ms = margins_by_depth[d][j]
            region = ms.classify(mu)
            if region is not None:
                selected.append(j)
                bits_of.append(d)
                key_bits.append(gray_bits(region, d))
                break
    if not selected:
        raise EnrollmentError("no feature cleared its margins; enrollment failed")
    helper = HelperData(selected=np.array(selected), bits_of=np.array(bits_of),
                        norm_mean=pop.mean[selected], norm_std=pop.std[selected])
    return BioKey(np.concatenate(key_bits)), helper


def quantize_with_helper(values: np.ndarray, helper: HelperData) -> np.ndarray:
    """Quantize one feature vector to raw key bits using stored thresholds."""
    v = np.asarray(values, dtype=np.float64)
    z = (v[helper.selected] - helper.norm_mean) / helper.norm_std
    out = np.zeros(helper.key_length, dtype=np.uint8)
    starts = np.concatenate([[0], np.cumsum(helper.bits_of)[:-1]])
    for d in np.unique(helper.bits_of):
        mask = helper.bits_of == d
        thr = np.asarray(region_thresholds(int(d)))
        regions = np.searchsorted(thr, z[mask])
        gray = regions ^ (regions >> 1)
        cols = np.arange(int(d) - 1, -1, -1)
        bit_matrix = ((gray[:, None] >> cols) & 1).astype(np.uint8)
        out[starts[mask][:, None] + np.arange(int(d))] = bit_matrix
    return out


def regenerate_key(sample, helper: HelperData) -> BioKey:
    """Regenerate the key from a fresh sample via the helper data.

    Normalizes with the stored population parameters, quantizes the
    selected features at their stored depths, then runs ECC recovery when
    the helper carries an ECC block.  Errors surface as bit mismatches, not
    exceptions.
    """
    values = getattr(sample, "values", sample)
    raw = quantize_with_helper(values, helper)
    if helper.ecc_helper is not None:
        return BioKey(ecc.recover_key(raw, helper.ecc_helper))
    return BioKey(raw)


def regenerate_from_samples(samples: np.ndarray, helper: HelperData) -> BioKey:
    """Regenerate from several fresh samples (one per beat).

    Without ECC the per-feature median of the samples is quantized.  With an
    ECC block of length n the samples are split round-robin into n groups;
    each group's median vector is quantized independently and the n raw
    keys feed the block decoder as independent observations, so a group
    that crossed a threshold is outvoted.
    """
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim == 1:
        s = s[None, :]
    if s.shape[0] == 0:
        raise ConfigurationError("need at least one sample to regenerate")
    eh = helper.ecc_helper
    if eh is None or eh.spec.n == 1 or s.shape[0] == 1:
        return regenerate_key(np.median(s, axis=0), helper)
    n = eh.spec.n
    copies = []
    for g in range(n):
        group = s[g::n] if g < s.shape[0] else s[-1:]
        copies.append(quantize_with_helper(np.median(group, axis=0), helper))
    # Interleave per key bit: positions j*n .. j*n+n-1 hold the n opinions.
    expanded = np.stack(copies, axis=1).reshape(-1)
    return BioKey(ecc.recover_key(expanded, eh))


def reliability(enrolled: BioKey, regenerated) -> float:
    """Mean fraction of regenerated bits matching the enrolled key."""
    trials = regenerated if isinstance(regenerated, (list, tuple)) else [regenerated]
    if not trials:
        raise ConfigurationError("need at least one regenerated key")
    fractions = []
    for key in trials:
        if len(key) != len(enrolled):
            raise ConfigurationError(
                f"key length mismatch: {len(key)} vs {len(enrolled)}")
        fractions.append(float(np.mean(key.bits == enrolled.bits)))
    return float(np.mean(fractions))


def align_key_bits(enrollments) -> dict[tuple[int, int], list[int]]:
    """Group key bits by (feature index, bit position) across subjects."""
    table: dict[tuple[int, int], list[int]] = {}
    for key, helper in enrollments:
        pos = 0
        for j, d in zip(helper.selected, helper.bits_of):
            for b in range(int(d)):
                table.setdefault((int(j), b), []).append(int(key.bits[pos]))
                pos += 1
    return table


@dataclass
class MinEntropyReport:
    mean: float
    min: float
    max: float
    n_positions: int
    n_skipped: int


def min_entropy(aligned: dict[tuple[int, int], list[int]],
                min_contributors: int = 10) -> MinEntropyReport:
    """Per-bit min-entropy of the most probable value across subjects.

    Positions with fewer than min_contributors contributors are skipped
    (and counted) because the empirical max-probability estimator is badly
    biased on tiny samples.
    """
    values = []
    skipped = 0
    for bits in aligned.values():
        if len(bits) < min_contributors:
            skipped += 1
            continue
        p1 = float(np.mean(bits))
        p = max(p1, 1.0 - p1)
        values.append(-math.log2(p))
    if not values:
        raise ConfigurationError("no bit position had enough contributors")
    arr = np.asarray(values)
    return MinEntropyReport(mean=float(arr.mean()), min=float(arr.min()),
                            max=float(arr.max()), n_positions=arr.size,
                            n_skipped=skipped)


def metrics_csv_row(subject_id: str, key_len: int, rel: float,
                    ent: MinEntropyReport) -> str:
    """One CSV row: subject_id, key_len, reliability, min-entropy summary."""
    return (f"{subject_id},{key_len},{rel:.10g},"
            f"{ent.mean:.10g},{ent.min:.10g},{ent.max:.10g}")
