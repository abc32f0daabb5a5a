"""LUT-network bitstream obfuscation.

A design is a DAG of small lookup tables.  Obfuscation hides the true
function of each under-occupied LUT by widening it with a key input: the
half-table selected by the correct key value is the original function and
the other half is a decoy that differs in at least one row.  Only the
correct key restores the original circuit behavior; the bitstream itself
never stores the key.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

log = logging.getLogger(__name__)

EXHAUSTIVE_INPUT_LIMIT = 20


@dataclass(frozen=True)
class Lut:
    """One lookup table: output wire, input wires, truth table.

    Row indexing: inputs[k] contributes bit k of the row index (inputs[0]
    is the least significant bit).
    """

    output: str
    inputs: tuple[str, ...]
    table: tuple[int, ...]

    def __post_init__(self):
        if len(self.table) != 2 ** len(self.inputs):
            raise ConfigurationError(
                f"table for {len(self.inputs)} inputs needs {2 ** len(self.inputs)} rows")
        if any(v not in (0, 1) for v in self.table):
            raise ConfigurationError("truth table entries must be 0/1")

    def table_hex(self) -> str:
        return np.packbits(np.array(self.table, dtype=np.uint8)).tobytes().hex()


@dataclass(frozen=True)
class LutNetlist:
    """Acyclic LUT network from primary inputs to primary outputs."""

    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    luts: tuple[Lut, ...]
    max_inputs: int = 3

    def __post_init__(self):
        object.__setattr__(self, "_topo", _toposort(self))

    @property
    def topo_order(self) -> tuple[Lut, ...]:
        return self._topo


def _toposort(net: LutNetlist) -> tuple[Lut, ...]:
    driven = set(net.inputs)
    by_output = {}
    for lut in net.luts:
        if lut.output in by_output or lut.output in driven:
            raise ConfigurationError(f"wire {lut.output} driven more than once")
        if len(lut.inputs) > net.max_inputs:
            raise ConfigurationError(
                f"LUT {lut.output} has {len(lut.inputs)} inputs, max is {net.max_inputs}")
        by_output[lut.output] = lut
    order = []
    placed = set(net.inputs)
    pending = dict(by_output)
    while pending:
        ready = [w for w, lut in pending.items()
                 if all(i in placed for i in lut.inputs)]
        if not ready:
            missing = {i for lut in pending.values() for i in lut.inputs
                       if i not in placed and i not in pending}
            if missing:
                raise ConfigurationError(f"undriven wires: {sorted(missing)}")
            raise ConfigurationError("netlist contains a combinational cycle")
        for w in sorted(ready):
            order.append(pending.pop(w))
            placed.add(w)
    for out in net.outputs:
        if out not in placed:
            raise ConfigurationError(f"primary output {out} is undriven")
    return tuple(order)


def evaluate_netlist(net: LutNetlist, inputs: np.ndarray) -> np.ndarray:
    """Topological evaluation; inputs may be a vector or an (N, n_in) batch."""
    arr = np.asarray(inputs, dtype=np.uint8)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != len(net.inputs):
        raise ConfigurationError(
            f"expected {len(net.inputs)} input bits, got {arr.shape[1]}")
    wires: dict[str, np.ndarray] = {w: arr[:, i] for i, w in enumerate(net.inputs)}
    for lut in net.topo_order:
        idx = np.zeros(arr.shape[0], dtype=np.intp)
        for k, wire in enumerate(lut.inputs):
            idx |= wires[wire].astype(np.intp) << k
        wires[lut.output] = np.asarray(lut.table, dtype=np.uint8)[idx]
    out = np.stack([wires[w] for w in net.outputs], axis=1)
    return out[0] if single else out


@dataclass(frozen=True)
class ObfuscatedBitstream:
    """A netlist widened with key wires plus where each key bit landed."""

    netlist: LutNetlist
    key_inputs: tuple[str, ...]
    key_positions: dict[str, int]  # obfuscated LUT output -> key input index

    @property
    def key_len(self) -> int:
        return len(self.key_inputs)


def _widen_lut(lut: Lut, key_name: str, pos: int, key_bit: int,
               decoy: np.ndarray) -> Lut:
    """Insert a key wire at input slot pos; wrong key value selects decoy."""
    original = np.asarray(lut.table, dtype=np.uint8)
    new_inputs = lut.inputs[:pos] + (key_name,) + lut.inputs[pos:]
    rows = []
    for row in range(2 ** len(new_inputs)):
        kv = (row >> pos) & 1
        rest = (row & ((1 << pos) - 1)) | ((row >> 1) & ~((1 << pos) - 1))
        rows.append(int(original[rest]) if kv == key_bit else int(decoy[rest]))
    return Lut(lut.output, new_inputs, tuple(rows))


def obfuscate(net: LutNetlist, key, seed: int) -> ObfuscatedBitstream:
    """Embed key bits into spare LUT capacity.

    Every LUT using fewer than max_inputs inputs is eligible; each gets one
    key wire at a seed-chosen input position.  The half-table addressed by
    the correct key value reproduces the original function, the other half
    is a random decoy redrawn until it differs somewhere.  For designs small
    enough to enumerate, each decoy is additionally redrawn until flipping
    its key bit provably changes some primary output, so wrong keys are
    always detectable; a fully complemented table is the fallback draw.
    """
    bits = np.asarray(getattr(key, "bits", key), dtype=np.uint8) & 1
    eligible = [lut for lut in net.luts if len(lut.inputs) < net.max_inputs]
    skipped = len(net.luts) - len(eligible)
    if skipped:
        log.info("obfuscate: %d LUT(s) had no spare input and were skipped", skipped)
    if not eligible:
        raise ConfigurationError("no LUT has spare inputs; nothing to obfuscate")
    if bits.size == 0:
        raise ConfigurationError("key must be non-empty")

    rng = np.random.default_rng(seed)
    count = min(bits.size, len(eligible))
    chosen_idx = sorted(rng.choice(len(eligible), size=count, replace=False))
    chosen = {eligible[i].output: k for k, i in enumerate(chosen_idx)}

    plans = {}  # output -> (key index, position, decoy)
    for lut in net.luts:
        if lut.output not in chosen:
            continue
        original = np.asarray(lut.table, dtype=np.uint8)
        pos = int(rng.integers(0, len(lut.inputs) + 1))
        while True:
            decoy = rng.integers(0, 2, original.size, dtype=np.uint8)
            if not np.array_equal(decoy, original):
                break
        plans[lut.output] = [chosen[lut.output], pos, decoy]

    def assemble() -> ObfuscatedBitstream:
        new_luts = []
        for lut in net.luts:
            if lut.output in plans:
                k, pos, decoy = plans[lut.output]
                new_luts.append(_widen_lut(lut, f"__key{k}", pos, int(bits[k]), decoy))
            else:
                new_luts.append(lut)
        key_names = tuple(f"__key{k}" for k in range(count))
        widened = LutNetlist(inputs=net.inputs + key_names, outputs=net.outputs,
                             luts=tuple(new_luts), max_inputs=net.max_inputs + 1)
        return ObfuscatedBitstream(netlist=widened, key_inputs=key_names,
                                   key_positions={o: p for o, (_, p, _) in plans.items()})

    bs = assemble()
    if len(net.inputs) <= EXHAUSTIVE_INPUT_LIMIT:
        vectors = _all_input_vectors(len(net.inputs))
        want = evaluate_netlist(net, vectors)
        by_key = {plans[o][0]: o for o in plans}
        for k in range(count):
            for attempt in range(17):
                flipped = bits.copy()
                flipped[k] ^= 1
                got = evaluate(bs, flipped[:count], vectors)
                if not np.array_equal(got, want):
                    break
                output = by_key[k]
                original = np.asarray(
                    next(l for l in net.luts if l.output == output).table, dtype=np.uint8)
                decoy = 1 - original if attempt == 15 else \
                    rng.integers(0, 2, original.size, dtype=np.uint8)
                if np.array_equal(decoy, original):
                    continue
                plans[output][2] = decoy
                bs = assemble()
            else:
                raise ConfigurationError(
                    f"LUT {by_key[k]} is not observable at any primary output")
    return bs


def evaluate(bitstream: ObfuscatedBitstream, key, inputs: np.ndarray) -> np.ndarray:
    """Evaluate the locked design under a candidate key (exact key width)."""
    bits = np.asarray(getattr(key, "bits", key), dtype=np.uint8) & 1
    if bits.size != bitstream.key_len:
        raise ConfigurationError(
            f"key has {bits.size} bits, bitstream needs {bitstream.key_len}")
    arr = np.asarray(inputs, dtype=np.uint8)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    n_primary = len(bitstream.netlist.inputs) - bitstream.key_len
    if arr.shape[1] != n_primary:
        raise ConfigurationError(
            f"expected {n_primary} primary input bits, got {arr.shape[1]}")
    key_cols = np.tile(bits, (arr.shape[0], 1))
    out = evaluate_netlist(bitstream.netlist, np.hstack([arr, key_cols]))
    return out[0] if single else out


def _all_input_vectors(n: int) -> np.ndarray:
    rows = np.arange(2 ** n, dtype=np.uint32)
    return ((rows[:, None] >> np.arange(n)) & 1).astype(np.uint8)


def functional_match(bitstream: ObfuscatedBitstream, key,
                     original: LutNetlist) -> float:
    """Fraction of exhaustive input vectors on which outputs agree."""
    n = len(original.inputs)
    if n > EXHAUSTIVE_INPUT_LIMIT:
        raise ConfigurationError(
            f"{n} primary inputs is too many for exhaustive matching; "
            "use functional_match_sampled instead")
    vectors = _all_input_vectors(n)
    got = evaluate(bitstream, key, vectors)
    want = evaluate_netlist(original, vectors)
    return float(np.mean(np.all(got == want, axis=1)))


def functional_match_sampled(bitstream: ObfuscatedBitstream, key,
                             original: LutNetlist, n_samples: int = 100_000,
                             seed: int = 0) -> float:
    """Monte Carlo match fraction for designs too wide to enumerate."""
    rng = np.random.default_rng(seed)
    vectors = rng.integers(0, 2, (n_samples, len(original.inputs)), dtype=np.uint8)
    got = evaluate(bitstream, key, vectors)
    want = evaluate_netlist(original, vectors)
    return float(np.mean(np.all(got == want, axis=1)))


# --- bundled sample design: 4x4 combinational multiplier -------------------

_AND = (0, 0, 0, 1)
_XOR = (0, 1, 1, 0)
_OR = (0, 1, 1, 1)


class _NetBuilder:
    def __init__(self, inputs: tuple[str, ...]):
        self.inputs = inputs
        self.luts: list[Lut] = []
        self._n = 0

    def gate(self, table: tuple[int, ...], a: str, b: str) -> str:
        wire = f"n{self._n}"
        self._n += 1
        self.luts.append(Lut(wire, (a, b), table))
        return wire

    def half_adder(self, a: str, b: str) -> tuple[str, str]:
        return self.gate(_XOR, a, b), self.gate(_AND, a, b)

    def full_adder(self, a: str, b: str, cin: str) -> tuple[str, str]:
        s1 = self.gate(_XOR, a, b)
        total = self.gate(_XOR, s1, cin)
        c1 = self.gate(_AND, a, b)
        c2 = self.gate(_AND, s1, cin)
        return total, self.gate(_OR, c1, c2)


def build_multiplier_netlist(width: int = 4) -> LutNetlist:
    """Array multiplier of two width-bit operands mapped to 2-input LUTs.

    Cells are 2-input functions hosted in 3-input LUTs, so every cell has
    one spare input available for a key wire.  Inputs are a0..a{w-1} then
    b0..b{w-1} (LSB first); outputs p0..p{2w-1}.
    """
    a = tuple(f"a{i}" for i in range(width))
    b = tuple(f"b{i}" for i in range(width))
    nb = _NetBuilder(a + b)
    pp = [[nb.gate(_AND, a[i], b[j]) for j in range(width)] for i in range(width)]

    # Shift-and-add rows of ripple adders.
    acc = list(pp[0])  # partial sum bits, weight i
    outputs = [acc.pop(0)]
    for i in range(1, width):
        row = pp[i]
        new_acc = []
        carry = None
        for j in range(width):
            top = acc[j] if j < len(acc) else None
            if top is None:
                if carry is None:
                    new_acc.append(row[j])
                else:
                    s, carry = nb.half_adder(row[j], carry)
                    new_acc.append(s)
            elif carry is None:
                s, carry = nb.half_adder(row[j], top)
                new_acc.append(s)
            else:
                s, carry = nb.full_adder(row[j], top, carry)
                new_acc.append(s)
        if carry is not None:
            new_acc.append(carry)
        outputs.append(new_acc.pop(0))
        acc = new_acc
    outputs.extend(acc)
    out_names = tuple(f"p{i}" for i in range(2 * width))
    luts = list(nb.luts)
    renames = dict(zip(outputs, out_names))
    final = []
    for lut in luts:
        final.append(Lut(renames.get(lut.output, lut.output),
                         tuple(renames.get(i, i) for i in lut.inputs), lut.table))
    return LutNetlist(inputs=a + b, outputs=out_names, luts=tuple(final),
                      max_inputs=3)


# --- serialization ----------------------------------------------------------

def netlist_to_dict(net: LutNetlist) -> dict:
    return {"version": 1, "kind": "lut-netlist",
            "inputs": list(net.inputs), "outputs": list(net.outputs),
            "max_inputs": net.max_inputs,
            "luts": [{"out": l.output, "in": list(l.inputs),
                      "rows": len(l.table), "table_hex": l.table_hex()}
                     for l in net.luts]}


def netlist_from_dict(d: dict) -> LutNetlist:
    if d.get("kind") != "lut-netlist":
        raise ConfigurationError("not a lut-netlist document")
    luts = []
    for entry in d["luts"]:
        bits = np.unpackbits(np.frombuffer(bytes.fromhex(entry["table_hex"]),
                                           dtype=np.uint8))[: entry["rows"]]
        luts.append(Lut(entry["out"], tuple(entry["in"]), tuple(int(v) for v in bits)))
    return LutNetlist(inputs=tuple(d["inputs"]), outputs=tuple(d["outputs"]),
                      luts=tuple(luts), max_inputs=d["max_inputs"])


def bitstream_to_json(bitstream: ObfuscatedBitstream) -> str:
    payload = {"version": 1, "kind": "obfuscated-bitstream",
               "netlist": netlist_to_dict(bitstream.netlist),
               "key_inputs": list(bitstream.key_inputs),
               "key_positions": dict(sorted(bitstream.key_positions.items()))}
    return json.dumps(payload, sort_keys=True)


def bitstream_from_json(text: str) -> ObfuscatedBitstream:
    d = json.loads(text)
    if d.get("kind") != "obfuscated-bitstream":
        raise ConfigurationError("not an obfuscated-bitstream document")
    return ObfuscatedBitstream(netlist=netlist_from_dict(d["netlist"]),
                               key_inputs=tuple(d["key_inputs"]),
                               key_positions={k: int(v) for k, v in
                                              d["key_positions"].items()})
