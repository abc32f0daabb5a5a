"""Fuzzy-commitment error correction with a repetition code.

The helper stores offset = codeword XOR expanded(key) for a random message,
so the offset alone is marginally uniform and reveals nothing about the key.
Recovery XORs the offset against noisy expanded key material, majority
decodes each block, and re-derives the key bits from the offset and decoded
message; up to t = (n-1)/2 flipped positions per block are corrected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class CodeSpec:
    """Repetition code: n odd copies per key bit, 1 data bit per block."""

    n: int = 3
    scheme: str = "repetition"

    def __post_init__(self):
        if self.scheme != "repetition":
            raise ConfigurationError("only the repetition scheme is implemented")
        if self.n < 1 or self.n % 2 == 0:
            raise ConfigurationError("block length n must be odd and >= 1")

    @property
    def t(self) -> int:
        return (self.n - 1) // 2


@dataclass(frozen=True)
class EccHelper:
    offset: np.ndarray
    spec: CodeSpec

    def __post_init__(self):
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.uint8) & 1)
        if self.offset.size % self.spec.n != 0:
            raise ConfigurationError("offset length must be a multiple of n")

    @property
    def key_length(self) -> int:
        return self.offset.size // self.spec.n

    def to_dict(self) -> dict:
        return {"scheme": self.spec.scheme, "n": self.spec.n,
                "offset_hex": np.packbits(self.offset).tobytes().hex(),
                "offset_bits": int(self.offset.size)}

    @classmethod
    def from_dict(cls, d: dict) -> "EccHelper":
        raw = np.unpackbits(np.frombuffer(bytes.fromhex(d["offset_hex"]), dtype=np.uint8))
        return cls(offset=raw[: d["offset_bits"]], spec=CodeSpec(n=d["n"], scheme=d["scheme"]))


def make_helper(key, spec: CodeSpec, seed: int) -> EccHelper:
    """Commit to key with a fresh random message; deterministic per seed."""
    bits = np.asarray(getattr(key, "bits", key), dtype=np.uint8) & 1
    if bits.size == 0:
        raise ConfigurationError("key must be non-empty")
    rng = np.random.default_rng(seed)
    message = rng.integers(0, 2, bits.size, dtype=np.uint8)
    codeword = np.repeat(message, spec.n)
    return EccHelper(offset=codeword ^ np.repeat(bits, spec.n), spec=spec)


def recover_key(noisy, helper: EccHelper) -> np.ndarray:
    """Recover key bits from noisy material.

    Accepts either a key-length bitstring (expanded internally) or an
    already expanded string of key_length * n independent observations.
    Majority decoding corrects up to t flips per block; beyond that the
    affected key bit comes out wrong with no in-band signal, which is by
    design: failures surface downstream when the key is used.
    """
    bits = np.asarray(getattr(noisy, "bits", noisy), dtype=np.uint8) & 1
    n = helper.spec.n
    k = helper.key_length
    if bits.size == k:
        expanded = np.repeat(bits, n)
    elif bits.size == k * n:
        expanded = bits
    else:
        raise ConfigurationError(
            f"noisy input must have {k} or {k * n} bits, got {bits.size}")
    noisy_codeword = (helper.offset ^ expanded).reshape(k, n)
    message = (noisy_codeword.sum(axis=1) * 2 > n).astype(np.uint8)
    # Each offset position in block j equals message_j XOR key_j, so XOR by
    # the decoded message and take the block majority to shed offset noise.
    key_blocks = helper.offset.reshape(k, n) ^ message[:, None]
    return (key_blocks.sum(axis=1) * 2 > n).astype(np.uint8)
