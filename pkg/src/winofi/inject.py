"""Bit-flip fault injection at operation and neuron granularity.

Faults are transient (one inference) and strike result bits: op-level flips
XOR into the low exposed window of an operation's widened result; neuron-level
flips XOR into a conv layer's stored output values after requantization.

All randomness is addressed by (seed, trial, sample, copy, bit index), so a
trial's fault set is independent of execution order, worker count, and scope:
scope filtering removes flips from protected operations without perturbing the
draws of anything else, which is what paired-scope campaigns rely on.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .engine import OpType
from .errors import ConfigError
from .qtensor import QTensor, flip_array_with_masks
from .rng import STREAM_NEURON, STREAM_OP, sample_flip_positions
from .runtime import OpSpace


class Granularity(Enum):
    OP_LEVEL = "op"
    NEURON_LEVEL = "neuron"


def _parse_ranges(text: str) -> tuple:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            a, b = part.split("-")
            out.append((int(a), int(b)))
        else:
            out.append((int(part), int(part) + 1))
    return tuple(out)


@dataclass(frozen=True)
class Scope:
    """Pure, deterministic predicate selecting which ops/neurons can be struck.

    ``exclude_op_ranges`` holds protected [start, end) op_id ranges (segments
    under TMR study); include sets, when given, whitelist. Neuron-level
    injection honours only the layer filters.
    """

    include_layers: Optional[frozenset] = None
    exclude_layers: frozenset = frozenset()
    include_optypes: Optional[frozenset] = None
    exclude_optypes: frozenset = frozenset()
    exclude_op_ranges: tuple = ()

    def __post_init__(self):
        merged = []
        for a, b in sorted((int(a), int(b)) for a, b in self.exclude_op_ranges):
            if b <= a:
                raise ConfigError(f"empty op range ({a}, {b})")
            if merged and a <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], b))
            else:
                merged.append((a, b))
        object.__setattr__(self, "exclude_op_ranges", tuple(merged))
        object.__setattr__(self, "_range_starts", [r[0] for r in merged])

    def _in_excluded_range(self, op_id: int) -> bool:
        idx = bisect.bisect_right(self._range_starts, op_id) - 1
        return idx >= 0 and op_id < self.exclude_op_ranges[idx][1]

    def allows(self, layer_id: int, op_type: int, op_id: int) -> bool:
        if self.include_layers is not None and layer_id not in self.include_layers:
            return False
        if layer_id in self.exclude_layers:
            return False
        if self.include_optypes is not None and op_type not in self.include_optypes:
            return False
        if op_type in self.exclude_optypes:
            return False
        if self.exclude_op_ranges and self._in_excluded_range(op_id):
            return False
        return True

    def allows_layer(self, layer_id: int) -> bool:
        if self.include_layers is not None and layer_id not in self.include_layers:
            return False
        return layer_id not in self.exclude_layers

    def matches(self, record) -> bool:
        """Predicate over an OpRecord."""
        return self.allows(record.layer_id, int(record.op_type), record.op_id)

    # -- derived scopes (used by vulnerability campaigns) ---------------------

    def excluding_layer(self, layer_id: int) -> "Scope":
        return self._replace(exclude_layers=self.exclude_layers | {layer_id})

    def excluding_optype(self, op_type: OpType) -> "Scope":
        return self._replace(exclude_optypes=self.exclude_optypes | {op_type})

    def excluding_op_ranges(self, ranges) -> "Scope":
        return self._replace(exclude_op_ranges=tuple(self.exclude_op_ranges) + tuple(ranges))

    def _replace(self, **kw) -> "Scope":
        base = dict(
            include_layers=self.include_layers,
            exclude_layers=self.exclude_layers,
            include_optypes=self.include_optypes,
            exclude_optypes=self.exclude_optypes,
            exclude_op_ranges=self.exclude_op_ranges,
        )
        base.update(kw)
        return Scope(**base)

    # -- parsing (CLI --scope flag) -------------------------------------------

    @staticmethod
    def parse(text: str) -> "Scope":
        """Parse e.g. ``exclude_layers=0,2;exclude_optypes=MUL;exclude_ops=0-36``."""
        kw = {}
        if text.strip():
            for item in text.replace(" ", ";").split(";"):
                if not item:
                    continue
                if "=" not in item:
                    raise ConfigError(f"bad scope item {item!r}")
                key, val = item.split("=", 1)
                if key in ("include_layers", "exclude_layers"):
                    kw[key] = frozenset(int(v) for v in val.split(",") if v)
                elif key in ("include_optypes", "exclude_optypes"):
                    kw[key] = frozenset(OpType[v.strip().upper()] for v in val.split(",") if v)
                elif key == "exclude_ops":
                    kw["exclude_op_ranges"] = _parse_ranges(val)
                else:
                    raise ConfigError(f"unknown scope key {key!r}")
        return Scope(**kw)

    def to_text(self) -> str:
        parts = []
        if self.include_layers is not None:
            parts.append("include_layers=" + ",".join(str(v) for v in sorted(self.include_layers)))
        if self.exclude_layers:
            parts.append("exclude_layers=" + ",".join(str(v) for v in sorted(self.exclude_layers)))
        if self.include_optypes is not None:
            parts.append("include_optypes=" + ",".join(OpType(v).name for v in sorted(self.include_optypes)))
        if self.exclude_optypes:
            parts.append("exclude_optypes=" + ",".join(OpType(v).name for v in sorted(self.exclude_optypes)))
        if self.exclude_op_ranges:
            parts.append("exclude_ops=" + ",".join(f"{a}-{b}" for a, b in self.exclude_op_ranges))
        return ";".join(parts)


EVERYTHING = Scope()


@dataclass
class InjectionConfig:
    granularity: Granularity = Granularity.OP_LEVEL
    ber: float = 0.0
    seed: int = 0
    scope: Scope = field(default_factory=Scope)
    trials: int = 100
    fault_bits: Optional[object] = None  # None | int | {"MUL": w, "ADD": w}

    def __post_init__(self):
        if isinstance(self.granularity, str):
            self.granularity = Granularity(self.granularity)
        if not 0.0 <= self.ber <= 1.0:
            raise ConfigError(f"ber must be in [0, 1], got {self.ber}")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")


# ---------------------------------------------------------------------------
# Fault traces

KIND_OP = "op"
KIND_NEURON = "neuron"


class FaultTrace:
    """Exact record of the flips applied in a campaign; replaying a trace
    reproduces the corrupted outputs bit for bit."""

    def __init__(self, events=None):
        # (trial, sample, kind, index, bit, copy)
        self.events: list = list(events) if events else []
        self._index = None
        self._index_len = -1

    def __len__(self):
        return len(self.events)

    def __eq__(self, other):
        return isinstance(other, FaultTrace) and self.events == other.events

    def key_set(self):
        return set(self.events)

    def masks_for(self, trial: int, sample: int, kind: str, copy: int = 0) -> dict:
        if self._index is None or self._index_len != len(self.events):
            index: dict = {}
            for t, s, k, idx, bit, cp in self.events:
                d = index.setdefault((t, s, k, cp), {})
                d[idx] = d.get(idx, 0) | (1 << bit)
            self._index = index
            self._index_len = len(self.events)
        return dict(self._index.get((trial, sample, kind, copy), {}))

    def copies_present(self, trial: int, sample: int) -> set:
        return {cp for t, s, _k, _i, _b, cp in self.events if t == trial and s == sample}

    def save_jsonl(self, path: str) -> None:
        with open(path, "w") as f:
            for t, s, k, idx, bit, cp in self.events:
                rec = {"trial": t, "sample": s, ("op_id" if k == KIND_OP else "neuron"): idx, "bit": bit}
                if cp:
                    rec["copy"] = cp
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    @staticmethod
    def load_jsonl(path: str) -> "FaultTrace":
        events = []
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                kind = KIND_OP if "op_id" in rec else KIND_NEURON
                idx = rec["op_id"] if kind == KIND_OP else rec["neuron"]
                events.append(
                    (rec.get("trial", 0), rec.get("sample", 0), kind, int(idx), int(rec["bit"]), rec.get("copy", 0))
                )
        return FaultTrace(events)


# ---------------------------------------------------------------------------
# Op-level injection


def sample_op_flips(opspace: OpSpace, seed: int, trial: int, sample: int, ber: float, copy: int = 0) -> dict:
    """Draw this inference's op flips over the full op-bit space: a sparse
    {op_id: xor_mask} table, a pure function of (seed, trial, sample, copy)."""
    wpad = opspace.width_pad
    total = opspace.total_ops * wpad
    pos = sample_flip_positions(seed, (STREAM_OP, trial, sample, copy), total, ber)
    if pos.size == 0:
        return {}
    ids = pos // wpad
    bits = pos % wpad
    flips: dict[int, int] = {}
    if opspace.uniform_width:
        for i, b in zip(ids.tolist(), bits.tolist()):
            flips[i] = flips.get(i, 0) | (1 << b)
    else:
        for i, b in zip(ids.tolist(), bits.tolist()):
            if b < opspace.op_width(i):
                flips[i] = flips.get(i, 0) | (1 << b)
    return flips


def op_level_hook(
    cfg: InjectionConfig,
    opspace: OpSpace,
    *,
    trial: int = 0,
    sample: int = 0,
    trace: Optional[FaultTrace] = None,
):
    """Instrumentation callback flipping in-scope op result bits.

    Returns (hook, trace); the trace accumulates exactly the applied flips.
    """
    if cfg.granularity is not Granularity.OP_LEVEL:
        raise ConfigError("op_level_hook needs an OP_LEVEL config")
    if trace is None:
        trace = FaultTrace()
    flips = sample_op_flips(opspace, cfg.seed, trial, sample, cfg.ber)
    scope = cfg.scope
    events = trace.events

    def hook(op_id, layer_id, op_type, stage, value, _get=flips.get, _allows=scope.allows, _append=events.append):
        m = _get(op_id)
        if m is None:
            return value
        if not _allows(layer_id, op_type, op_id):
            return value
        mm, b = m, 0
        while mm:
            if mm & 1:
                _append((trial, sample, KIND_OP, op_id, b, 0))
            mm >>= 1
            b += 1
        return value ^ m

    return hook, trace


def replay_op_hook(masks: dict, *, trial: int = 0, sample: int = 0):
    """Hook applying an exact {op_id: mask} table (no sampling, no scope)."""

    def hook(op_id, layer_id, op_type, stage, value, _get=masks.get):
        m = _get(op_id)
        return value if m is None else value ^ m

    return hook


# ---------------------------------------------------------------------------
# Neuron-level injection


def neuron_level_inject(
    output: QTensor,
    cfg: InjectionConfig,
    layer_id: int,
    *,
    trial: int = 0,
    sample: int = 0,
    neuron_offset: int = 0,
    trace: Optional[FaultTrace] = None,
) -> QTensor:
    """Flip bits of a conv layer's requantized output neurons.

    Draws are keyed by (seed, trial, sample, layer), independent of the engine
    that produced the output: identical outputs give identical corruption.
    """
    if cfg.granularity is not Granularity.NEURON_LEVEL:
        raise ConfigError("neuron_level_inject needs a NEURON_LEVEL config")
    if not cfg.scope.allows_layer(layer_id):
        return output
    width = output.qparams.bit_width
    total = output.size * width
    pos = sample_flip_positions(cfg.seed, (STREAM_NEURON, trial, sample, layer_id), total, cfg.ber)
    if pos.size == 0:
        return output
    ids = (pos // width).astype(np.int64)
    bits = (pos % width).astype(np.int64)
    uniq, inv = np.unique(ids, return_inverse=True)
    masks = np.zeros(uniq.size, dtype=np.int64)
    np.bitwise_or.at(masks, inv, np.int64(1) << bits)
    if trace is not None:
        for i, b in zip(ids.tolist(), bits.tolist()):
            trace.events.append((trial, sample, KIND_NEURON, neuron_offset + i, b, 0))
    flipped = flip_array_with_masks(output.data, uniq, masks, width)
    return output.with_data(flipped)


def replay_neuron_masks(output: QTensor, masks: dict, neuron_offset: int = 0) -> QTensor:
    """Apply exact {global_neuron_index: mask} flips to one layer's output."""
    local = {i - neuron_offset: m for i, m in masks.items() if neuron_offset <= i < neuron_offset + output.size}
    if not local:
        return output
    idx = np.fromiter(local.keys(), dtype=np.int64)
    msk = np.fromiter(local.values(), dtype=np.int64)
    return output.with_data(flip_array_with_masks(output.data, idx, msk, output.qparams.bit_width))


# ---------------------------------------------------------------------------
# BER alignment between granularities


def bit_ratio(op_bits: int, neuron_bits: int) -> float:
    if neuron_bits <= 0:
        raise ConfigError("neuron bit total must be positive")
    return op_bits / neuron_bits


def ber_neuron_to_op_scale(model, input_shape=None, engine=None, fault_bits=None) -> float:
    """(total op bits) / (total neuron bits): the factor aligning neuron-level
    BER with op-level BER for one inference."""
    from .runtime import enumerate_ops

    space = enumerate_ops(model, engine, input_shape, fault_bits=fault_bits)
    return bit_ratio(space.total_op_bits, space.total_neuron_bits)
