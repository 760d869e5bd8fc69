"""Trust partitioning of model execution between a simulated trusted domain
(TEE) and an untrusted domain (GPU).

The secure runtime routes every boundary crossing through one-time-pad
masking: affine sites use h(E) = h(E_en) - h_linear(r), data-by-data matmul
sites use the four-term product expansion. Backward passes re-mask gradients
with fresh pads before they touch the untrusted domain. Every op and
transfer is logged to an append-only trace for the taint audit and the cost
accounting.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, SecurityBreach
from .masking import MaskDistribution, PadLedger, gen_mask, mask
from .model import (PlainRuntime, Site, TransformerClassifier, TransformerConfig,
                    enumerate_sites, lora_contribution, spf_forward)
from .tensor import Rng, Tensor, compose, maybe_quantize

# ---------------------------------------------------------------------------
# domains and plans


class TrustDomain(enum.Enum):
    TRUSTED = "trusted"
    UNTRUSTED = "untrusted"


class TensorState(enum.Enum):
    PLAINTEXT = "plaintext"
    MASKED = "masked"


@dataclass
class DomainTensor:
    """Tensor tagged with the trust domain and masking state it lives in."""

    inner: Tensor
    domain: TrustDomain
    state: TensorState
    lineage: str = ""


class Method(enum.Enum):
    METHOD1 = "method1"
    METHOD2 = "method2"
    SWMT = "swmt"
    PLAINTEXT = "plaintext"


_NONLINEAR_CLASSES = {"norm", "softmax", "activation"}


@dataclass
class PartitionPlan:
    method: Method
    n_layers: int
    sites: list[Site]
    assignment: dict[str, TrustDomain]
    masking: bool
    split_layer: int | None = None

    def domain_of(self, site: str) -> TrustDomain:
        return self.assignment[site]

    def protocol_site(self, site: str) -> bool:
        """True when compute at this site happens on masked payloads."""
        return (self.method is Method.METHOD1 and self.masking
                and self.assignment[site] is TrustDomain.UNTRUSTED)

    def exposed(self, site: str) -> bool:
        """Whether an adversary observes execution at this site.

        Method1's untrusted GPU shares the client machine with an adversary;
        Method2 clients hold no foreign data and deploy no TEE, so their
        local untrusted compute is not adversary-visible. Plaintext mode is
        the detector-sanity fixture: everything is visible.
        """
        if self.method is Method.PLAINTEXT:
            return True
        if self.method is Method.METHOD1:
            return self.assignment[site] is TrustDomain.UNTRUSTED
        return False

    def untrusted_forward_visits(self) -> int:
        return sum(s.visits for s in self.sites
                   if self.assignment[s.name] is TrustDomain.UNTRUSTED)


def build_plan(cfg: TransformerConfig, method: Method,
               split_layer: int | None = None) -> PartitionPlan:
    sites = enumerate_sites(cfg)
    assignment: dict[str, TrustDomain] = {}
    if method is Method.METHOD1:
        for s in sites:
            offloadable = s.op_class in ("linear", "matmul") and s.name != "head"
            assignment[s.name] = TrustDomain.UNTRUSTED if offloadable else TrustDomain.TRUSTED
        return PartitionPlan(method, cfg.n_layers, sites, assignment, masking=True)
    if method is Method.METHOD2:
        if split_layer is None or not 1 <= split_layer < cfg.n_layers:
            raise ContractError(
                f"method2 needs 1 <= split_layer < n_layers, got {split_layer}")
        for s in sites:
            assignment[s.name] = (TrustDomain.UNTRUSTED if s.layer < split_layer
                                  else TrustDomain.TRUSTED)
        return PartitionPlan(method, cfg.n_layers, sites, assignment, masking=True,
                             split_layer=split_layer)
    if method is Method.SWMT:
        for s in sites:
            assignment[s.name] = TrustDomain.TRUSTED
        return PartitionPlan(method, cfg.n_layers, sites, assignment, masking=True)
    if method is Method.PLAINTEXT:
        for s in sites:
            assignment[s.name] = TrustDomain.UNTRUSTED
        return PartitionPlan(method, cfg.n_layers, sites, assignment, masking=False)
    raise ContractError(f"unknown method {method}")


# ---------------------------------------------------------------------------
# trace


@dataclass
class TraceEvent:
    kind: str  # "op" | "transfer"
    site: str
    party: str
    domain: str
    state: str
    lineage: str
    exposed: bool
    masked: bool = True
    nbytes: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("kind", "site", "party", "domain", "state", "lineage",
                 "exposed", "masked", "nbytes")}


class RunTrace:
    """Append-only event log; single writer per executor."""

    def __init__(self):
        self.events: list[TraceEvent] = []
        self.crossings = 0
        self.masked_bytes = 0
        self._seq = 0

    def _lineage(self, party: str, site: str) -> str:
        self._seq += 1
        return f"{party}/{site}#{self._seq}"

    def log_op(self, site: str, party: str, domain: TrustDomain, state: TensorState,
               exposed: bool) -> str:
        lineage = self._lineage(party, site)
        self.events.append(TraceEvent("op", site, party, domain.value, state.value,
                                      lineage, exposed))
        return lineage

    def log_transfer(self, site: str, party: str, masked: bool, nbytes: int,
                     exposed: bool = True) -> None:
        lineage = self._lineage(party, site)
        state = TensorState.MASKED if masked else TensorState.PLAINTEXT
        self.events.append(TraceEvent("transfer", site, party, TrustDomain.UNTRUSTED.value,
                                      state.value, lineage, exposed, masked, nbytes))
        self.crossings += 1
        if masked:
            self.masked_bytes += nbytes

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev.to_dict(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# secure runtime


class SecureRuntime(PlainRuntime):
    """Plan-driven executor: trusted sites run plainly, Method1 untrusted
    sites run the masked protocol; everything is traced."""

    def __init__(self, plan: PartitionPlan, ledger: PadLedger, trace: RunTrace,
                 pad_rng: Rng, party: str = "client0", dropout_rng: Rng | None = None,
                 mask_dist: MaskDistribution | None = None, strict: bool = True,
                 fault_skip_sites: frozenset = frozenset(),
                 quantize_on_transfer: bool = True):
        super().__init__(dropout_rng=dropout_rng)
        self.plan = plan
        self.ledger = ledger
        self.trace = trace
        self.pad_rng = pad_rng
        self.party = party
        self.mask_dist = mask_dist or MaskDistribution(scale=None)
        self.strict = strict
        self.fault_skip_sites = frozenset(fault_skip_sites)
        self.quantize_on_transfer = quantize_on_transfer

    # -- helpers -------------------------------------------------------------

    def _q(self, arr: np.ndarray) -> np.ndarray:
        return maybe_quantize(arr) if self.quantize_on_transfer else arr

    def _plain(self, site: str, out):
        domain = self.plan.domain_of(site)
        self.trace.log_op(site, self.party, domain, TensorState.PLAINTEXT,
                          self.plan.exposed(site))
        return out

    def _fresh_pad(self, shape, channel: str, reference: np.ndarray):
        return gen_mask(shape, self.pad_rng, self.mask_dist, self.ledger,
                        channel=channel, reference=reference)

    def _route(self, site: str) -> str:
        """'plain' | 'protocol' | 'fault' for this site."""
        if not self.plan.protocol_site(site):
            return "plain"
        if site in self.fault_skip_sites:
            if self.strict:
                raise SecurityBreach(f"plaintext would reach untrusted site {site}")
            return "fault"
        return "protocol"

    def _log_fault(self, site: str):
        self.trace.log_op(site, self.party, TrustDomain.UNTRUSTED,
                          TensorState.PLAINTEXT, exposed=True)

    # -- protocol ops ----------------------------------------------------------

    def _protocol_affine(self, site: str, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        """Frozen affine layer on the untrusted side over a masked payload.

        The trusted side precomputes h_linear(r) = r @ W.T from its copy of
        the frozen public weights. Backward re-masks the output gradient
        with a fresh pad before the untrusted grad @ W product.
        """
        trace, party = self.trace, self.party
        pad = self._fresh_pad(x.shape, f"{party}/{site}/fwd", x.data)
        payload = mask(x, pad)  # keeps the graph edge into x
        pq = self._q(payload.payload.data)
        trace.log_transfer(site, party, True, pq.nbytes)
        y_en = maybe_quantize(pq @ w.data.T + b.data)
        trace.log_op(site, party, TrustDomain.UNTRUSTED, TensorState.MASKED, False)
        y_en = self._q(y_en)
        trace.log_transfer(site, party, True, y_en.nbytes)
        corr = maybe_quantize(pad.values @ w.data.T)
        out = maybe_quantize(y_en - corr)

        def backward(grad):
            if not x.requires_grad:
                return
            gpad = self._fresh_pad(grad.shape, f"{party}/{site}/bwd", grad)
            gpad.consume()
            g_en = self._q(maybe_quantize(grad + gpad.values))
            trace.log_transfer(site, party, True, g_en.nbytes)
            t_en = maybe_quantize(g_en @ w.data)
            trace.log_op(site, party, TrustDomain.UNTRUSTED, TensorState.MASKED, False)
            t_en = self._q(t_en)
            trace.log_transfer(site, party, True, t_en.nbytes)
            gx = maybe_quantize(t_en - gpad.values @ w.data)
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad += gx

        return compose(out, (x,), backward)

    def _masked_product(self, site: str, a_data: np.ndarray, b_data: np.ndarray) -> np.ndarray:
        """Four-term masked product of two plaintext arrays; returns a·b."""
        trace, party = self.trace, self.party
        ra = self._fresh_pad(a_data.shape, f"{party}/{site}/a", a_data)
        rb = self._fresh_pad(b_data.shape, f"{party}/{site}/b", b_data)
        ra.consume()
        rb.consume()
        a_en = self._q(maybe_quantize(a_data + ra.values))
        b_en = self._q(maybe_quantize(b_data + rb.values))
        trace.log_transfer(site, party, True, a_en.nbytes + b_en.nbytes)
        prod = maybe_quantize(a_en @ b_en)
        trace.log_op(site, party, TrustDomain.UNTRUSTED, TensorState.MASKED, False)
        prod = self._q(prod)
        trace.log_transfer(site, party, True, prod.nbytes)
        out = maybe_quantize(prod - maybe_quantize(a_en @ rb.values))
        out = maybe_quantize(out - maybe_quantize(ra.values @ b_en))
        return maybe_quantize(out + maybe_quantize(ra.values @ rb.values))

    def _protocol_matmul(self, site: str, a: Tensor, b: Tensor) -> Tensor:
        out = self._masked_product(site, a.data, b.data)

        def backward(grad):
            if a.requires_grad:
                ga = self._masked_product(f"{site}/bwd-a", grad, b.data.T)
                if a.grad is None:
                    a.grad = np.zeros_like(a.data)
                a.grad += ga
            if b.requires_grad:
                gb = self._masked_product(f"{site}/bwd-b", a.data.T, grad)
                if b.grad is None:
                    b.grad = np.zeros_like(b.data)
                b.grad += gb

        return compose(out, (a, b), backward)

    # -- runtime interface -------------------------------------------------------

    def linear(self, site, x, w, b, lora=None, spf=None, training=False):
        route = self._route(site)
        if route == "plain":
            return self._plain(site, super().linear(site, x, w, b, lora=lora, spf=spf,
                                                    training=training))
        if route == "fault":
            self._log_fault(site)
            return super().linear(site, x, w, b, lora=lora, spf=spf, training=training)
        if spf is not None:
            raise ContractError(f"SPF layers are trusted-resident, cannot offload {site}")
        out = self._protocol_affine(site, x, w, b)
        if lora is not None:
            out = out + lora_contribution(x, lora, self.dropout_rng, training)
        return out

    def pair_matmul(self, site, a, b):
        route = self._route(site)
        if route == "plain":
            return self._plain(site, super().pair_matmul(site, a, b))
        if route == "fault":
            self._log_fault(site)
            return super().pair_matmul(site, a, b)
        return self._protocol_matmul(site, a, b)

    def embed(self, site, tokens, table, pos):
        return self._plain(site, super().embed(site, tokens, table, pos))

    def layernorm_op(self, site, x, g, b):
        return self._plain(site, super().layernorm_op(site, x, g, b))

    def softmax_op(self, site, x):
        return self._plain(site, super().softmax_op(site, x))

    def gelu_op(self, site, x):
        return self._plain(site, super().gelu_op(site, x))

    def pool(self, site, x):
        return self._plain(site, super().pool(site, x))

    def loss_op(self, site, logits, label):
        return self._plain(site, super().loss_op(site, logits, label))


def secure_forward(plan: PartitionPlan, x: DomainTensor, model: TransformerClassifier,
                   runtime: SecureRuntime, training: bool = False) -> DomainTensor:
    """Run the partitioned forward pass on token ids held plaintext in the TEE."""
    if x.state is not TensorState.PLAINTEXT or x.domain is not TrustDomain.TRUSTED:
        raise ContractError("input must enter as plaintext through the trusted domain")
    tokens = np.asarray(x.inner.data, dtype=np.int64)
    logits = model.forward_example(tokens, runtime, training=training)
    return DomainTensor(logits, TrustDomain.TRUSTED, TensorState.PLAINTEXT,
                        lineage=f"{runtime.party}/logits")


# ---------------------------------------------------------------------------
# audit


@dataclass
class AuditReport:
    method: str
    passed: bool
    violations: list[dict]
    pad_reuse_count: int
    pads_created: int
    pads_consumed: int
    op_events: int
    transfer_events: int
    untrusted_plaintext_events: int
    crossings: int
    masked_bytes: int

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "passed": self.passed,
            "violations": self.violations,
            "pad_reuse_count": self.pad_reuse_count,
            "pads_created": self.pads_created,
            "pads_consumed": self.pads_consumed,
            "op_events": self.op_events,
            "transfer_events": self.transfer_events,
            "untrusted_plaintext_events": self.untrusted_plaintext_events,
            "crossings": self.crossings,
            "masked_bytes": self.masked_bytes,
        }


def audit_taint(trace: RunTrace, ledger: PadLedger | None = None,
                method: str = "") -> AuditReport:
    """Scan a complete trace for plaintext sightings in adversary-visible
    untrusted locations and for pad reuse."""
    violations = []
    untrusted_plaintext = 0
    ops = transfers = 0
    for ev in trace.events:
        if ev.kind == "op":
            ops += 1
        else:
            transfers += 1
        plaintext_in_untrusted = (ev.domain == TrustDomain.UNTRUSTED.value
                                  and ev.state == TensorState.PLAINTEXT.value)
        if plaintext_in_untrusted:
            untrusted_plaintext += 1
            if ev.exposed:
                violations.append({"site": ev.site, "party": ev.party,
                                   "lineage": ev.lineage, "kind": ev.kind})
    reuse = ledger.reuse_count if ledger is not None else 0
    return AuditReport(
        method=method,
        passed=not violations and reuse == 0,
        violations=violations,
        pad_reuse_count=reuse,
        pads_created=ledger.created if ledger else 0,
        pads_consumed=ledger.consumed if ledger else 0,
        op_events=ops,
        transfer_events=transfers,
        untrusted_plaintext_events=untrusted_plaintext,
        crossings=trace.crossings,
        masked_bytes=trace.masked_bytes,
    )


# ---------------------------------------------------------------------------
# cost model


_BASE_UNITS = {"linear": 2.0, "matmul": 2.0, "norm": 1.0, "activation": 1.0,
               "softmax": 1.0, "embed": 1.0, "other": 1.0}


@dataclass
class CostModel:
    """Per-op-class costs in each domain plus boundary prices; all weights >= 0."""

    trusted: dict = field(default_factory=lambda: {k: 5.0 * v for k, v in _BASE_UNITS.items()})
    untrusted: dict = field(default_factory=lambda: dict(_BASE_UNITS))
    per_crossing: float = 2.0
    per_masked_byte: float = 1e-6

    def __post_init__(self):
        weights = list(self.trusted.values()) + list(self.untrusted.values())
        if any(w < 0 for w in weights) or self.per_crossing < 0 or self.per_masked_byte < 0:
            raise ContractError("cost weights must be non-negative")

    def to_dict(self) -> dict:
        return {"trusted": self.trusted, "untrusted": self.untrusted,
                "per_crossing": self.per_crossing,
                "per_masked_byte": self.per_masked_byte}


@dataclass
class Workload:
    """Visit counts per site for one unit of work (one example, one step)."""

    visits: dict
    site_bytes: dict
    wire_crossings: float = 0.0
    wire_masked_bytes: float = 0.0


def build_workload(cfg: TransformerConfig, seq_len: int, training: bool = True,
                   plan: PartitionPlan | None = None) -> Workload:
    """Per-(example, step) visit counts.

    With a Method2 plan, client-side layers contribute forward visits only:
    features are computed once offline and gradients never flow below the
    split. Other plans pay forward+backward everywhere when training.
    """
    visits: dict[str, float] = {}
    site_bytes: dict[str, float] = {}
    d, dh = cfg.d_model, cfg.d_head
    for s in enumerate_sites(cfg):
        passes = 1.0
        if training:
            client_side = (plan is not None and plan.method is Method.METHOD2
                           and s.layer < plan.split_layer)
            passes = 1.0 if client_side else 2.0
        visits[s.name] = s.visits * passes
        if s.op_class == "linear":
            site_bytes[s.name] = 8.0 * seq_len * 2 * d
        elif s.op_class == "matmul":
            site_bytes[s.name] = 8.0 * (seq_len * dh * 2 + seq_len * seq_len)
        else:
            site_bytes[s.name] = 0.0
    wire_crossings = 0.0
    wire_bytes = 0.0
    if plan is not None and plan.method is Method.METHOD2:
        # one-shot feature upload amortized over the training steps
        wire_crossings = 0.0
        wire_bytes = 8.0 * seq_len * d
    return Workload(visits, site_bytes, wire_crossings, wire_bytes)


@dataclass
class CostReport:
    method: str
    total: float
    trusted_units: float
    untrusted_units: float
    crossings: float
    masked_bytes: float
    weights: dict

    def to_dict(self) -> dict:
        return {"method": self.method, "total": self.total,
                "trusted_units": self.trusted_units,
                "untrusted_units": self.untrusted_units,
                "crossings": self.crossings, "masked_bytes": self.masked_bytes,
                "weights": self.weights}


def simulate_cost(plan: PartitionPlan, workload: Workload,
                  cost_model: CostModel | None = None) -> CostReport:
    cm = cost_model or CostModel()
    classes = {s.name: s.op_class for s in plan.sites}
    trusted_units = untrusted_units = 0.0
    crossings = workload.wire_crossings
    masked_bytes = workload.wire_masked_bytes
    for site, n in workload.visits.items():
        cls = classes[site]
        if plan.domain_of(site) is TrustDomain.TRUSTED:
            trusted_units += n * cm.trusted[cls]
        else:
            untrusted_units += n * cm.untrusted[cls]
        if plan.protocol_site(site):
            crossings += 2.0 * n
            masked_bytes += n * workload.site_bytes.get(site, 0.0)
    total = (trusted_units + untrusted_units + crossings * cm.per_crossing
             + masked_bytes * cm.per_masked_byte)
    return CostReport(plan.method.value, total, trusted_units, untrusted_units,
                      crossings, masked_bytes, cm.to_dict())
