"""Device-locking protocol actors and flow.

Three enrollment steps precede use: the vendor learns a predictive model of
each device's PUF while it is still in a trusted environment (hardware
enrollment), the user binds a biometric key to the device (ownership
claim), and the vendor ships a bitstream locked to the PUF responses that
the user's key digest selects (firmware customization).  Authentication
regenerates the key from a fresh biometric, replays the digest through the
physical PUF, and succeeds only when the unlocked circuit matches the
original design exactly.

Secrets live only in volatile state: nonvolatile stores hold helper data
and the locked bitstream, the vendor database holds PUF models and audit
records, and the only secret-derived value that ever crosses to the vendor
is a one-way digest.  `scan_store` makes those storage rules testable.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import ecc, locknet, pufsim, quantizer
from .errors import ConfigurationError, ProtocolError
from .sigproc import PipelineConfig, RawSignal, beat_feature_matrix, validate_beats

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BlockerConfig:
    """Knobs for the full lock/unlock stack."""

    n_stages: int = 64
    enroll_crps: int = 25_000
    accuracy_threshold: float = 0.995
    enroll_retries: int = 2
    auth_noise_sigma: float = 0.25   # ~1% response flips at 64 stages
    resp_ecc_n: int = 5              # distinct challenges voting per key bit
    bio_ecc_n: int = 3
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    quant: quantizer.QuantConfig = field(default_factory=quantizer.QuantConfig)


@dataclass
class EnrollmentArtifacts:
    """Public population-level artifacts needed to enroll a subject."""

    pop: quantizer.PopulationStats
    config: quantizer.QuantConfig
    margins: dict[int, list[quantizer.MarginSet]]


class SessionTranscript:
    """Ordered record of every message exchanged, for audit tests."""

    def __init__(self):
        self.messages: list[dict] = []

    def record(self, step: str, channel: str, sender: str, receiver: str,
               payload: dict) -> None:
        self.messages.append({"seq": len(self.messages), "step": step,
                              "channel": channel, "sender": sender,
                              "receiver": receiver, "payload": payload})

    def to_json(self) -> str:
        return json.dumps({"version": 1, "kind": "session-transcript",
                           "messages": self.messages}, sort_keys=True)

    def device_to_designer(self) -> list[dict]:
        return [m for m in self.messages if m["channel"] == "device->designer"]


class Device:
    """A simulated device: PUF, nonvolatile byte store, volatile state."""

    def __init__(self, device_id: str, puf: pufsim.ArbiterPuf):
        self.device_id = device_id
        self.puf = puf
        self.nonvolatile: dict[str, bytes] = {}
        self.volatile: dict[str, object] = {}
        self.crp_port_enabled = True

    def power_cycle(self) -> None:
        self.volatile.clear()

    @property
    def is_unlocked(self) -> bool:
        return bool(self.volatile.get("unlocked", False))

    def run_application(self, inputs: np.ndarray) -> np.ndarray:
        """Evaluate the installed bitstream with the volatile key, if any."""
        if "bitstream" not in self.nonvolatile:
            raise ProtocolError("no bitstream installed")
        if "obs_key" not in self.volatile:
            raise ProtocolError("device is locked; authenticate first")
        bs = locknet.bitstream_from_json(self.nonvolatile["bitstream"].decode())
        key = np.asarray(self.volatile["obs_key"], dtype=np.uint8)
        return locknet.evaluate(bs, key[: bs.key_len], inputs)


def make_device(device_id: str, seed: int, config: BlockerConfig) -> Device:
    puf = pufsim.make_puf(config.n_stages, seed,
                          noise_sigma=config.auth_noise_sigma,
                          device_id=device_id)
    return Device(device_id, puf)


class DesignerDb:
    """Vendor-side store: device PUF models plus an audit log of challenges."""

    def __init__(self):
        self.models: dict[str, pufsim.PufModel] = {}
        self.audit: list[dict] = []

    def register(self, device_id: str, model: pufsim.PufModel) -> None:
        self.models[device_id] = model

    def to_json(self) -> str:
        return json.dumps({"version": 1, "kind": "designer-db",
                           "models": {k: m.to_dict() for k, m in
                                      sorted(self.models.items())},
                           "audit": self.audit}, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "DesignerDb":
        with open(path) as fh:
            d = json.load(fh)
        if d.get("kind") != "designer-db":
            raise ConfigurationError("not a designer-db file")
        db = cls()
        db.models = {k: pufsim.PufModel.from_dict(v) for k, v in d["models"].items()}
        db.audit = list(d["audit"])
        return db


def key_digest(key: quantizer.BioKey) -> bytes:
    """One-way digest of a key: SHA-256 over the canonical packed form."""
    return hashlib.sha256(key.to_bytes()).digest()


def hardware_enroll(device: Device, db: DesignerDb, config: BlockerConfig,
                    seed: int) -> pufsim.PufModel:
    """Learn the device's PUF model in the trusted pre-market environment.

    The dedicated CRP port is disabled afterwards, so this step cannot be
    repeated once the device ships.  Retries with doubled CRP counts when
    the held-out accuracy misses the configured threshold.
    """
    if not device.crp_port_enabled:
        raise ProtocolError("CRP port disabled; hardware enrollment already done")
    count = config.enroll_crps
    model = None
    for attempt in range(config.enroll_retries + 1):
        crps = pufsim.collect_crps(device.puf, count, seed + attempt)
        model = pufsim.train_model(crps, seed=seed + attempt)
        if model.train_accuracy >= config.accuracy_threshold:
            break
        log.warning("hardware_enroll: accuracy %.4f below %.4f, retrying with %d CRPs",
                    model.train_accuracy, config.accuracy_threshold, count * 2)
        count *= 2
    else:
        raise ProtocolError(
            f"PUF model accuracy {model.train_accuracy:.4f} below threshold "
            f"after {config.enroll_retries + 1} attempts")
    db.register(device.device_id, model)
    device.crp_port_enabled = False
    return model


@dataclass(frozen=True)
class ClaimReceipt:
    device_id: str
    digest: bytes
    key_len: int


def ownership_claim(device: Device, enrollment_signals: list[RawSignal],
                    artifacts: EnrollmentArtifacts, config: BlockerConfig,
                    transcript: SessionTranscript, seed: int = 0) -> ClaimReceipt:
    """Bind the user's biometric to the device; happens exactly once.

    Runs the feature pipeline and quantizer on-device, persists only the
    helper data, and sends the designer a one-way digest of the key.  The
    key itself leaves volatile memory before this function returns.
    """
    if "helper" in device.nonvolatile or "bitstream" in device.nonvolatile:
        raise ProtocolError("ownership already claimed for this device")
    beats = [beat_feature_matrix(sig, config.pipeline) for sig in enrollment_signals]
    beats = [b for b in beats if b.size]
    samples = validate_beats(np.vstack(beats)) if beats else np.empty((0, 0))
    if samples.shape[0] < 2:
        raise ProtocolError("not enough usable beats for enrollment")
    key, helper = quantizer.enroll_subject(samples, artifacts.pop,
                                           artifacts.config, artifacts.margins)
    if config.bio_ecc_n > 1:
        helper.ecc_helper = ecc.make_helper(key, ecc.CodeSpec(config.bio_ecc_n), seed)
    device.nonvolatile["helper"] = helper.to_json().encode()
    digest = key_digest(key)
    transcript.record("ownership_claim", "device->designer", device.device_id,
                      "designer", {"device_id": device.device_id,
                                   "digest_hex": digest.hex(),
                                   "key_len": len(key)})
    device.volatile.clear()  # bio_key gone once the digest is out
    return ClaimReceipt(device.device_id, digest, len(key))


def predict_obs_key(model: pufsim.PufModel, digest: bytes, key_len: int,
                    config: BlockerConfig) -> tuple[np.ndarray, np.ndarray]:
    """Model-predicted obfuscation key plus the response alignment mask.

    With response ECC enabled the digest expands to key_len * n distinct
    challenges; the prediction for the first challenge of each block is the
    key bit and the public mask XOR-aligns the remaining predictions to it.
    The device later XORs the same mask into its measured responses, so
    every block position becomes an independent vote on its key bit and
    majority decoding absorbs both evaluation noise and the model's own
    prediction errors (which are systematic per challenge, hence fatal
    without this alignment).  Mask bits are marginally uniform and carry no
    key information on their own.
    """
    n = max(1, config.resp_ecc_n)
    challenges = pufsim.expand_challenges(digest, key_len * n, config.n_stages)
    predicted = model.predict(challenges)
    obs_key = predicted[0::n]
    mask = predicted ^ np.repeat(obs_key, n)
    return obs_key, mask


def firmware_customize(db: DesignerDb, device: Device, digest: bytes,
                       key_len: int, app_netlist: locknet.LutNetlist,
                       config: BlockerConfig, transcript: SessionTranscript,
                       seed: int = 0) -> locknet.ObfuscatedBitstream:
    """Designer side: turn the digest into a device-specific locked bitstream.

    The digest expands to challenges, the stored PUF model predicts the
    responses (the obfuscation key), and the application netlist is locked
    under that key.  Only the bitstream and, when enabled, the response ECC
    offset and alignment mask travel back to the device.
    """
    if device.device_id not in db.models:
        raise ProtocolError(f"device {device.device_id!r} not enrolled")
    model = db.models[device.device_id]
    db.audit.append({"event": "customize", "device_id": device.device_id,
                     "digest_hex": digest.hex(), "key_len": key_len})
    obs_key, mask = predict_obs_key(model, digest, key_len, config)
    bitstream = locknet.obfuscate(app_netlist, obs_key, seed)
    device.nonvolatile["bitstream"] = locknet.bitstream_to_json(bitstream).encode()
    if config.resp_ecc_n > 1:
        resp_helper = ecc.make_helper(obs_key, ecc.CodeSpec(config.resp_ecc_n),
                                      seed + 1)
        payload = resp_helper.to_dict()
        payload["mask_hex"] = np.packbits(mask).tobytes().hex()
        payload["mask_bits"] = int(mask.size)
        device.nonvolatile["resp_ecc"] = json.dumps(payload, sort_keys=True).encode()
    transcript.record("firmware_customize", "designer->device", "designer",
                      device.device_id,
                      {"bitstream_bytes": len(device.nonvolatile["bitstream"]),
                       "resp_ecc": config.resp_ecc_n > 1})
    return bitstream


@dataclass(frozen=True)
class AuthResult:
    unlocked: bool
    match: float
    detail: str = ""


def authenticate(device: Device, fresh_signal: RawSignal,
                 app_netlist: locknet.LutNetlist, config: BlockerConfig,
                 transcript: SessionTranscript | None = None,
                 seed: int = 0) -> AuthResult:
    """Regenerate the key from a fresh biometric and try to unlock.

    The physical PUF (with evaluation noise) answers the expanded
    challenges; repeated evaluations feed the response ECC when enabled.
    Unlock requires an exact functional match against the original design,
    since key generation tolerates no residual error.
    """
    if "bitstream" not in device.nonvolatile or "helper" not in device.nonvolatile:
        raise ProtocolError("device not fully enrolled (missing bitstream or helper)")
    helper = quantizer.HelperData.from_json(device.nonvolatile["helper"].decode())
    beats = beat_feature_matrix(fresh_signal, config.pipeline)
    if beats.shape[0] == 0:
        return AuthResult(False, 0.0, "no usable beats in sample")
    bio_key = quantizer.regenerate_from_samples(validate_beats(beats), helper)
    digest = key_digest(bio_key)

    if "resp_ecc" in device.nonvolatile and config.resp_ecc_n > 1:
        payload = json.loads(device.nonvolatile["resp_ecc"].decode())
        resp_helper = ecc.EccHelper.from_dict(payload)
        if resp_helper.key_length != len(bio_key):
            return AuthResult(False, 0.0, "response helper does not fit this key")
        n = resp_helper.spec.n
        mask = np.unpackbits(np.frombuffer(bytes.fromhex(payload["mask_hex"]),
                                           dtype=np.uint8))[: payload["mask_bits"]]
        challenges = pufsim.expand_challenges(digest, len(bio_key) * n,
                                              config.n_stages)
        responses = pufsim.eval_puf(device.puf, challenges, seed=seed * 1009)
        obs_key = ecc.recover_key(responses ^ mask, resp_helper)
    else:
        challenges = pufsim.expand_challenges(digest, len(bio_key), config.n_stages)
        obs_key = pufsim.eval_puf(device.puf, challenges, seed=seed * 1009)

    bitstream = locknet.bitstream_from_json(device.nonvolatile["bitstream"].decode())
    match = locknet.functional_match(bitstream, obs_key[: bitstream.key_len],
                                     app_netlist)
    unlocked = match == 1.0
    device.volatile["obs_key"] = obs_key
    device.volatile["unlocked"] = unlocked
    if transcript is not None:
        transcript.record("authenticate", "user->device", "user",
                          device.device_id, {"unlocked": unlocked,
                                             "match": match})
    return AuthResult(unlocked, match, "")


# --- storage hygiene --------------------------------------------------------

def find_bit_leak(store: bytes, secret_bits, min_bits: int = 64) -> bool:
    """True when any min_bits-long window of the secret appears in the store.

    Checks the raw bit stream at every alignment plus ASCII '0'/'1' and hex
    renderings.  The raw window defaults to 64 bits because much shorter
    windows match by chance in any store of a few kilobytes; ASCII and hex
    windows use 16 bits since text encodings are far sparser.
    """
    bits = np.asarray(getattr(secret_bits, "bits", secret_bits), dtype=np.uint8) & 1
    if bits.size == 0 or not store:
        return False

    hay_bits = np.unpackbits(np.frombuffer(store, dtype=np.uint8)).tobytes()
    needle_bits = bits.tobytes()
    w = min(min_bits, bits.size)
    for start in range(0, bits.size - w + 1):
        if hay_bits.find(needle_bits[start:start + w]) != -1:
            return True

    ascii_needle = "".join(str(int(b)) for b in bits).encode()
    w_ascii = min(16, bits.size)
    for start in range(0, bits.size - w_ascii + 1):
        if store.find(ascii_needle[start:start + w_ascii]) != -1:
            return True

    packed = np.packbits(bits).tobytes()
    for hexstr in (packed.hex().encode(), packed.hex().upper().encode()):
        w_hex = min(8, len(hexstr))  # 8 hex chars = 32 bits
        for start in range(0, len(hexstr) - w_hex + 1):
            if store.find(hexstr[start:start + w_hex]) != -1:
                return True
    return False


def find_byte_leak(store: bytes, secret: bytes, min_bytes: int = 16) -> bool:
    """True when any min_bytes-long window of the secret appears verbatim."""
    if not secret or not store:
        return False
    w = min(min_bytes, len(secret))
    for start in range(0, len(secret) - w + 1):
        if store.find(secret[start:start + w]) != -1:
            return True
    return False


def scan_device_storage(device: Device, db: DesignerDb,
                        bio_key: quantizer.BioKey | None = None,
                        obs_key: np.ndarray | None = None,
                        template: np.ndarray | None = None) -> list[str]:
    """Report every place a secret shows up at rest.  Empty list == clean."""
    findings = []
    stores = {f"nonvolatile:{k}": v for k, v in device.nonvolatile.items()}
    stores["designer-db"] = db.to_json().encode()
    for name, blob in stores.items():
        if bio_key is not None and find_bit_leak(blob, bio_key):
            findings.append(f"bio_key material in {name}")
        if obs_key is not None and find_bit_leak(blob, obs_key):
            findings.append(f"obs_key material in {name}")
        if template is not None:
            raw = np.asarray(template, dtype=np.float64).tobytes()
            if find_byte_leak(blob, raw):
                findings.append(f"raw template bytes in {name}")
    return findings
