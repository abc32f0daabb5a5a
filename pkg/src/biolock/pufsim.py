"""Simulated arbiter PUF with the additive delay model.

A device is a weight vector over the standard parity feature map; the
response to a challenge is the sign of the accumulated delay difference
plus per-evaluation Gaussian noise.  The same linear structure lets the
designer learn a predictive model from collected challenge/response pairs,
which the locking protocol uses constructively.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

log = logging.getLogger(__name__)

MAX_EXPAND_BITS = 10 ** 6


@dataclass(frozen=True)
class ArbiterPuf:
    """Additive delay model: weights (n_stages + 1,), i.i.d. standard normal."""

    weights: np.ndarray
    noise_sigma: float = 0.0
    device_id: str = ""

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size < 2:
            raise ConfigurationError("weights must be a vector of length n_stages + 1")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        object.__setattr__(self, "weights", w)

    @property
    def n_stages(self) -> int:
        return self.weights.size - 1


def make_puf(n_stages: int, seed: int, noise_sigma: float = 0.0,
             device_id: str = "") -> ArbiterPuf:
    rng = np.random.default_rng(seed)
    return ArbiterPuf(weights=rng.standard_normal(n_stages + 1),
                      noise_sigma=noise_sigma, device_id=device_id)


def challenge_features(challenges: np.ndarray) -> np.ndarray:
    """Parity feature map Phi_i(c) = prod_{j >= i} (1 - 2 c_j), plus a 1 column."""
    c = np.atleast_2d(np.asarray(challenges, dtype=np.int8))
    signs = 1 - 2 * c
    phi = np.cumprod(signs[:, ::-1], axis=1, dtype=np.float64)[:, ::-1]
    return np.hstack([phi, np.ones((phi.shape[0], 1))])


def eval_puf(puf: ArbiterPuf, challenges: np.ndarray, seed: int = 0) -> np.ndarray:
    """Evaluate one or many challenges; fresh noise per evaluation.

    Deterministic given the seed; with noise_sigma == 0 the seed is
    irrelevant and repeated calls agree exactly.
    """
    single = np.asarray(challenges).ndim == 1
    c = np.atleast_2d(challenges)
    if c.shape[1] != puf.n_stages:
        raise ConfigurationError(
            f"challenge width {c.shape[1]} != n_stages {puf.n_stages}")
    delta = challenge_features(c) @ puf.weights
    if puf.noise_sigma > 0:
        delta = delta + np.random.default_rng(seed).normal(0.0, puf.noise_sigma, delta.size)
    resp = (delta > 0).astype(np.uint8)
    return resp[0] if single else resp


@dataclass(frozen=True)
class CrpSet:
    challenges: np.ndarray
    responses: np.ndarray

    def __len__(self) -> int:
        return self.responses.size


def collect_crps(puf: ArbiterPuf, count: int, seed: int) -> CrpSet:
    """Uniform random challenges with noiseless responses (trusted setting)."""
    if count < 0:
        raise ConfigurationError("count must be >= 0")
    if count == 0:
        log.warning("collect_crps: empty CRP set requested")
        return CrpSet(np.empty((0, puf.n_stages), dtype=np.uint8),
                      np.empty(0, dtype=np.uint8))
    rng = np.random.default_rng(seed)
    challenges = rng.integers(0, 2, (count, puf.n_stages), dtype=np.uint8)
    quiet = ArbiterPuf(puf.weights, 0.0, puf.device_id)
    return CrpSet(challenges, eval_puf(quiet, challenges))


@dataclass(frozen=True)
class PufModel:
    """Designer-side predictor over the same feature map as the device."""

    learned_weights: np.ndarray
    train_accuracy: float  # measured on a held-out 10% split

    @property
    def n_stages(self) -> int:
        return self.learned_weights.size - 1

    def predict(self, challenges: np.ndarray) -> np.ndarray:
        single = np.asarray(challenges).ndim == 1
        resp = (challenge_features(challenges) @ self.learned_weights > 0).astype(np.uint8)
        return resp[0] if single else resp

    def to_dict(self) -> dict:
        return {"version": 1, "kind": "puf-model",
                "weights": [float(w) for w in self.learned_weights],
                "train_accuracy": float(self.train_accuracy)}

    @classmethod
    def from_dict(cls, d: dict) -> "PufModel":
        if d.get("kind") != "puf-model":
            raise ConfigurationError("not a puf-model document")
        return cls(learned_weights=np.array(d["weights"], dtype=np.float64),
                   train_accuracy=float(d["train_accuracy"]))


def train_model(crps: CrpSet, max_epochs: int = 10_000, tol: float = 1e-6,
                seed: int = 0) -> PufModel:
    """Fit a linear classifier by gradient descent on the logistic loss.

    Full-batch descent with momentum and a backtracking step size, stopped
    when the loss change drops below tol or the epoch budget runs out (the
    best iterate is kept, with a warning).  Accuracy is reported on a 10%
    held-out split.
    """
    if len(crps) < 2:
        raise ConfigurationError("cannot fit a model from fewer than 2 CRPs")
    if len(crps) < 50:
        log.warning("train_model: only %d CRPs; expect poor accuracy", len(crps))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(crps))
    n_hold = max(1, len(crps) // 10)
    hold, train = order[:n_hold], order[n_hold:]

    x = challenge_features(crps.challenges[train])
    y = 2.0 * crps.responses[train].astype(np.float64) - 1.0
    n, d = x.shape
    w = np.zeros(d)
    velocity = np.zeros(d)
    lr = 4.0
    momentum = 0.9

    def loss_of(wv: np.ndarray) -> float:
        m = y * (x @ wv)
        # log(1 + exp(-m)) computed stably
        return float(np.mean(np.logaddexp(0.0, -m)))

    prev = loss_of(w)
    best_w, best_loss = w.copy(), prev
    converged = False
    for _ in range(max_epochs):
        margin = y * (x @ w)
        grad = -(x.T @ (y / (1.0 + np.exp(margin)))) / n
        velocity = momentum * velocity - lr * grad
        cand = w + velocity
        cur = loss_of(cand)
        if cur > prev:
            lr *= 0.5
            velocity[:] = 0.0
            if lr < 1e-12:
                break
            continue
        w = cand
        if cur < best_loss:
            best_loss, best_w = cur, w.copy()
        if abs(prev - cur) < tol:
            converged = True
            break
        prev = cur
    if not converged:
        log.warning("train_model: stopped before convergence; keeping best iterate")
        w = best_w

    xh = challenge_features(crps.challenges[hold])
    pred = (xh @ w > 0).astype(np.uint8)
    acc = float(np.mean(pred == crps.responses[hold]))
    return PufModel(learned_weights=w, train_accuracy=acc)


def expand_challenges(digest: bytes, k: int, n_stages: int) -> np.ndarray:
    """Counter-mode expansion of a 256-bit digest into k challenges.

    Concatenates SHA-256(digest || counter) blocks and chunks the bit
    stream into (k, n_stages).  One way in the digest; deterministic.
    """
    if len(digest) != 32:
        raise ConfigurationError("digest must be 32 bytes (256 bits)")
    need = k * n_stages
    if need > MAX_EXPAND_BITS:
        raise ConfigurationError(f"requested {need} bits exceeds {MAX_EXPAND_BITS}")
    blocks = []
    counter = 0
    have = 0
    while have < need:
        block = hashlib.sha256(digest + counter.to_bytes(8, "big")).digest()
        blocks.append(np.frombuffer(block, dtype=np.uint8))
        have += 256
        counter += 1
    bits = np.unpackbits(np.concatenate(blocks))[:need]
    return bits.reshape(k, n_stages)


def crps_to_csv(crps: CrpSet, path) -> None:
    """CSV: one 'challenge_hex,response_bit' row per CRP."""
    n = crps.challenges.shape[1] if len(crps) else 0
    with open(path, "w") as fh:
        fh.write(f"challenge_hex,response,n_stages={n}\n")
        for c, r in zip(crps.challenges, crps.responses):
            fh.write(f"{np.packbits(c).tobytes().hex()},{int(r)}\n")


def crps_from_csv(path) -> CrpSet:
    with open(path) as fh:
        header = fh.readline().strip()
        n = int(header.rsplit("=", 1)[1])
        ch, resp = [], []
        for line in fh:
            if not line.strip():
                continue
            hex_part, bit = line.strip().split(",")
            bits = np.unpackbits(np.frombuffer(bytes.fromhex(hex_part), dtype=np.uint8))
            ch.append(bits[:n])
            resp.append(int(bit))
    return CrpSet(np.array(ch, dtype=np.uint8), np.array(resp, dtype=np.uint8))


def save_model(model: PufModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> PufModel:
    with open(path) as fh:
        return PufModel.from_dict(json.load(fh))
