"""One-time-pad additive masking for tensors crossing a trust boundary.

The identities implemented here are exact in floating point up to
cancellation noise:

* affine maps:   h(E) = h(E + r) - h_linear(r)
* matrix product: A·B = A_en·B_en - A_en·r_b - r_a·B_en + r_a·r_b

where ``X_en = X + r_x``. The correction terms are always computed on the
trusted side. ``h_linear`` excludes the bias so the affine identity is exact.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, MaskReuse
from .tensor import Rng, Tensor, maybe_quantize


@dataclass
class MaskDistribution:
    """Pad sampling rule. ``scale=None`` matches the masked value's magnitude."""

    kind: str = "uniform"
    scale: float | None = 1.0

    def resolve(self, reference: np.ndarray | None) -> float:
        if self.scale is not None:
            return self.scale
        if reference is None:
            return 1.0
        return max(1.0, float(np.max(np.abs(reference))))


class MaskPad:
    """Single-use additive mask bound to a shape and a channel."""

    __slots__ = ("pad_id", "values", "channel", "consumed", "_ledger")

    def __init__(self, pad_id: int, values: np.ndarray, channel: str, ledger: "PadLedger"):
        self.pad_id = pad_id
        self.values = values
        self.channel = channel
        self.consumed = False
        self._ledger = ledger

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def consume(self) -> None:
        if self.consumed:
            self._ledger.record_reuse_attempt(self.pad_id, self.channel)
            raise MaskReuse(f"pad {self.pad_id} on channel {self.channel!r} already consumed")
        self.consumed = True
        self._ledger.record_consumed(self.pad_id)


@dataclass
class MaskedTensor:
    """Payload E + r together with the id of the pad held by the trusted side."""

    payload: Tensor
    pad_id: int

    @property
    def shape(self) -> tuple:
        return self.payload.shape


@dataclass
class PadLedger:
    """Serialized registry of every pad's lifecycle; the reuse audit source."""

    created: int = 0
    consumed: int = 0
    reuse_attempts: list[dict] = field(default_factory=list)
    _consumed_ids: set = field(default_factory=set)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def next_id(self) -> int:
        with self._lock:
            self.created += 1
            return self.created

    def record_consumed(self, pad_id: int) -> None:
        with self._lock:
            if pad_id in self._consumed_ids:
                # unreachable through MaskPad, kept as a belt-and-braces audit
                self.reuse_attempts.append({"pad_id": pad_id, "channel": "?"})
                return
            self._consumed_ids.add(pad_id)
            self.consumed += 1

    def record_reuse_attempt(self, pad_id: int, channel: str) -> None:
        with self._lock:
            self.reuse_attempts.append({"pad_id": pad_id, "channel": channel})

    @property
    def reuse_count(self) -> int:
        return len(self.reuse_attempts)

    def summary(self) -> dict:
        return {
            "pads_created": self.created,
            "pads_consumed": self.consumed,
            "reuse_attempts": list(self.reuse_attempts),
            "reuse_count": self.reuse_count,
        }

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def gen_mask(shape, rng: Rng, dist: MaskDistribution | None = None,
             ledger: PadLedger | None = None, channel: str = "",
             reference: np.ndarray | None = None) -> MaskPad:
    """Draw a fresh unconsumed pad for `shape` from the given stream."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s <= 0 for s in shape):
        raise DimensionError(f"mask shape must be non-empty, got {shape}")
    dist = dist or MaskDistribution()
    ledger = ledger or PadLedger()
    s = dist.resolve(reference)
    if dist.kind == "normal":
        values = rng.normal(s, shape)
    else:
        values = rng.uniform(-s, s, shape)
    return MaskPad(ledger.next_id(), values, channel, ledger)


def mask(e: Tensor, pad: MaskPad) -> MaskedTensor:
    """E_en = E + r; marks the pad consumed. Gradient flows through to E."""
    if e.shape != pad.shape:
        raise DimensionError(f"mask: tensor {e.shape} vs pad {pad.shape}")
    pad.consume()
    payload = e + Tensor(pad.values)
    return MaskedTensor(payload=payload, pad_id=pad.pad_id)


def unmask_affine(h_of_payload: Tensor, h_of_mask: Tensor) -> Tensor:
    """h(E) = h(E_en) - h_linear(r), exact for affine h in exact mode."""
    if h_of_payload.shape != h_of_mask.shape:
        raise DimensionError(f"unmask_affine: {h_of_payload.shape} vs {h_of_mask.shape}")
    return h_of_payload - h_of_mask


def unmask_matmul(qen_ken: Tensor, q_en: MaskedTensor, k_en: MaskedTensor,
                  r_q: MaskPad, r_k: MaskPad) -> Tensor:
    """Recover Q·K from the product of two masked operands.

    Q·K = Q_en·K_en - Q_en·r_k - r_q·K_en + r_q·r_k, with the three
    correction products evaluated here (the trusted side).
    """
    m, d = q_en.shape
    d2, n = k_en.shape
    if d != d2 or r_q.shape != (m, d) or r_k.shape != (d, n) or qen_ken.shape != (m, n):
        raise DimensionError(
            f"unmask_matmul: payloads {q_en.shape}x{k_en.shape}, pads {r_q.shape},{r_k.shape}, "
            f"product {qen_ken.shape}")
    rk = Tensor(r_k.values)
    rq = Tensor(r_q.values)
    return qen_ken - (q_en.payload @ rk) - (rq @ k_en.payload) + Tensor(
        maybe_quantize(r_q.values @ r_k.values))
