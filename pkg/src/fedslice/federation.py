"""Multi-client training orchestration over a simulated reliable network.

Method1 federates adapter parameters with sample-count-weighted averaging
inside the server's trusted domain; Method2 slices the model by layer,
collects one-shot masked feature uploads, and fine-tunes the upper half
server-side (head-sparsified QKV/dense plus MLP adapters). FL-LLM (plaintext)
and SWMT (whole model in the TEE) reuse the Method1 loop as baselines.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .data import Dataset, SyntheticTask, gen_dataset, load_dataset
from .errors import ContractError, ProtocolError
from .masking import MaskDistribution, PadLedger
from .model import TransformerClassifier, count_trainable_params
from .optim import Adam
from .partition import (Method, PartitionPlan, RunTrace, SecureRuntime, TensorState,
                        TrustDomain, audit_taint, build_plan, build_workload,
                        simulate_cost)
from .tensor import PrecisionMode, Rng, backward, maybe_quantize, precision

_METHODS = {"method1": Method.METHOD1, "method2": Method.METHOD2,
            "fl-llm": Method.PLAINTEXT, "swmt": Method.SWMT}


# ---------------------------------------------------------------------------
# wire format: length-prefixed binary frames


class MessageKind(enum.Enum):
    ADAPTER_UPDATE = 1
    EMBEDDING_BATCH = 2
    GLOBAL_BROADCAST = 3


SERVER_ID = -1


@dataclass
class RoundMessage:
    sender: int
    round: int
    kind: MessageKind
    n_k: int
    names: list
    payloads: list  # np.ndarray per name; masked unless `masked` is False
    pad_ids: list
    masked: bool
    channel: str


def encode_message(msg: RoundMessage) -> bytes:
    chan = msg.channel.encode()
    head = struct.pack("<iiBIBH", msg.sender, msg.round, msg.kind.value, msg.n_k,
                       1 if msg.masked else 0, len(chan)) + chan
    head += struct.pack("<H", len(msg.names))
    body = b""
    for name, arr, pad_id in zip(msg.names, msg.payloads, msg.pad_ids):
        enc = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        head += struct.pack("<H", len(enc)) + enc
        head += struct.pack("<B", arr.ndim)
        head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        head += struct.pack("<q", pad_id)
        body += arr.tobytes()
    frame = head + body
    return struct.pack("<I", len(frame)) + frame


def decode_message(blob: bytes) -> RoundMessage:
    (total,) = struct.unpack_from("<I", blob, 0)
    if total != len(blob) - 4:
        raise ProtocolError(f"frame length {total} does not match {len(blob) - 4} bytes")
    pos = 4
    sender, rnd, kind, n_k, masked, clen = struct.unpack_from("<iiBIBH", blob, pos)
    pos += struct.calcsize("<iiBIBH")
    channel = blob[pos:pos + clen].decode()
    pos += clen
    (count,) = struct.unpack_from("<H", blob, pos)
    pos += 2
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos) if ndim else ()
        pos += 4 * ndim
        (pad_id,) = struct.unpack_from("<q", blob, pos)
        pos += 8
        entries.append((name, shape, pad_id))
    names, payloads, pad_ids = [], [], []
    for name, shape, pad_id in entries:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        names.append(name)
        payloads.append(arr.astype(np.float64))
        pad_ids.append(pad_id)
    return RoundMessage(sender, rnd, MessageKind(kind), n_k, names, payloads,
                        pad_ids, bool(masked), channel)


class WireCrypto:
    """Pre-shared one-time pads for the wire, derived per channel.

    Sender and receiver derive identical pad streams from the provisioning
    seed, so pads never travel. Channels must be unique per message.
    """

    def __init__(self, seed: int, ledger: PadLedger):
        self.seed = seed
        self.ledger = ledger

    def _stream(self, channel: str) -> Rng:
        return Rng(self.seed, f"/wire/{channel}")

    def seal(self, names: list, arrays: list, channel: str) -> tuple[list, list]:
        rng = self._stream(channel)
        payloads, pad_ids = [], []
        for arr in arrays:
            pad_id = self.ledger.next_id()
            values = rng.uniform(-1.0, 1.0, arr.shape)
            self.ledger.record_consumed(pad_id)
            payloads.append(maybe_quantize(arr + values))
            pad_ids.append(pad_id)
        return payloads, pad_ids

    def open(self, msg: RoundMessage) -> dict:
        rng = self._stream(msg.channel)
        out = {}
        for name, payload in zip(msg.names, msg.payloads):
            values = rng.uniform(-1.0, 1.0, payload.shape)
            out[name] = maybe_quantize(payload - values)
        return out


def _send(sender: int, rnd: int, kind: MessageKind, n_k: int, arrays: dict,
          channel: str, wire: WireCrypto | None, trace: RunTrace,
          party: str) -> RoundMessage:
    """Seal, frame, 'transmit', and decode one message; returns the received copy."""
    names = list(arrays)
    plain = [np.asarray(arrays[n], dtype=np.float64) for n in names]
    if wire is not None:
        payloads, pad_ids = wire.seal(names, plain, channel)
        masked = True
    else:
        payloads, pad_ids = plain, [0] * len(plain)
        masked = False
    nbytes = int(sum(p.nbytes for p in payloads))
    trace.log_transfer(f"wire/{channel}", party, masked, nbytes, exposed=True)
    msg = RoundMessage(sender, rnd, kind, n_k, names, payloads, pad_ids, masked, channel)
    return decode_message(encode_message(msg))


# ---------------------------------------------------------------------------
# federation state


@dataclass
class ClientState:
    id: int
    tokens: np.ndarray
    labels: np.ndarray
    model: TransformerClassifier
    runtime: SecureRuntime
    batch_rng: Rng

    @property
    def n_k(self) -> int:
        return len(self.tokens)


@dataclass
class GlobalModel:
    adapters: dict
    round: int
    received: list = field(default_factory=list)  # (sender, n_k, decrypted arrays)


def aggregate(messages: list[RoundMessage], expected_senders: set, wire: WireCrypto | None,
              trace: RunTrace, rnd: int) -> GlobalModel:
    """W' = sum_k (n_k / n) W_k, evaluated inside the server trusted domain."""
    senders = [m.sender for m in messages]
    if set(senders) != set(expected_senders) or len(senders) != len(expected_senders):
        missing = set(expected_senders) - set(senders)
        raise ProtocolError(f"round {rnd}: missing/duplicate clients (missing {missing})")
    for m in messages:
        if m.kind is not MessageKind.ADAPTER_UPDATE:
            raise ProtocolError(f"round {rnd}: unexpected {m.kind} from {m.sender}")
        if m.n_k < 1:
            raise ProtocolError(f"round {rnd}: client {m.sender} reported n_k={m.n_k}")
    n = sum(m.n_k for m in messages)
    acc: dict[str, np.ndarray] = {}
    received = []
    for m in messages:
        arrays = wire.open(m) if wire is not None else dict(zip(m.names, m.payloads))
        trace.log_op("aggregate", "server", TrustDomain.TRUSTED, TensorState.PLAINTEXT,
                     exposed=False)
        received.append((m.sender, m.n_k, arrays))
        w = m.n_k / n
        for name, arr in arrays.items():
            acc[name] = acc.get(name, 0.0) + w * arr
    return GlobalModel(adapters=acc, round=rnd, received=received)


# ---------------------------------------------------------------------------
# run results


@dataclass
class RunResult:
    report: dict
    audit: object
    cost: object
    trace: RunTrace
    ledger: PadLedger
    model: TransformerClassifier
    uploads: list = field(default_factory=list)   # per round: [(n_k, {name: W_k})]
    globals: list = field(default_factory=list)   # per round: {name: W'}
    ef_client: dict = field(default_factory=dict)
    ef_server: dict = field(default_factory=dict)
    server: object = None


def _dataset_for(cfg: ExperimentConfig) -> Dataset:
    if cfg.data_dir:
        return load_dataset(cfg.data_dir)
    task = SyntheticTask(n_classes=cfg.n_classes, seq_len=cfg.seq_len, vocab=cfg.vocab,
                         separation=cfg.separation, n_train=cfg.n_train,
                         n_test=cfg.n_test, n_clients=cfg.k)
    return gen_dataset(task, cfg.seed)


def _precision_of(cfg: ExperimentConfig) -> PrecisionMode:
    return PrecisionMode.SIM_HALF if cfg.precision == "simhalf" else PrecisionMode.EXACT


def _mask_dist(cfg: ExperimentConfig) -> MaskDistribution:
    return MaskDistribution(scale=None if cfg.mask_scale == 0 else cfg.mask_scale)


def _train_steps(model: TransformerClassifier, opt: Adam, tokens, labels,
                 batch_rng: Rng, rt, steps: int, batch_size: int) -> list:
    if len(tokens) == 0:
        raise ContractError("client dataset is empty")
    losses = []
    n = len(tokens)
    for _ in range(steps):
        idx = batch_rng.integers(0, n, (batch_size,))
        total = None
        for i in idx:
            loss, _ = model.example_loss(tokens[i], labels[i], rt, training=True)
            total = loss if total is None else total + loss
        total = total * (1.0 / batch_size)
        opt.zero_grad()
        backward(total)
        opt.step()
        losses.append(total.item())
    return losses


def local_train_step(client: ClientState, broadcast: dict, cfg: ExperimentConfig) -> tuple:
    """One round of local adapter training; returns (W_k, per-step losses).

    Only the broadcast adapter set receives gradients; base weights are
    untouched by contract.
    """
    client.model.load_trainable(broadcast)
    params = client.model.trainable_params()
    opt = Adam(params, lr=cfg.lr)
    losses = _train_steps(client.model, opt, client.tokens, client.labels,
                          client.batch_rng, client.runtime, cfg.steps_per_round,
                          cfg.batch_size)
    return client.model.snapshot_trainable(), losses


def _accuracy(model: TransformerClassifier, tokens, labels, rt) -> float:
    correct = 0
    for seq, lab in zip(tokens, labels):
        logits = model.forward_example(seq, rt, training=False)
        correct += int(np.argmax(logits.data) == lab)
    return correct / len(labels)


# ---------------------------------------------------------------------------
# Method1 and baselines share one loop


def _federated_run(cfg: ExperimentConfig, dataset: Dataset | None,
                   method: Method) -> RunResult:
    ds = dataset or _dataset_for(cfg)
    mc = cfg.model_config()
    plan = build_plan(mc, method)
    ledger = PadLedger()
    trace = RunTrace()
    root = Rng(cfg.seed)
    wire = None if method is Method.PLAINTEXT else WireCrypto(cfg.seed, ledger)
    counts = {k.name.lower(): 0 for k in MessageKind}

    with precision(_precision_of(cfg)):
        global_model = TransformerClassifier(mc, root.stream("model"))
        global_model.attach(cfg.tuning_config(), root.stream("model"))
        base_fp = global_model.base_fingerprint()
        W = global_model.snapshot_trainable()

        clients = []
        for k in range(cfg.k):
            tokens, labels = ds.shard_of(k)
            replica = global_model.replica()
            rt = SecureRuntime(
                plan, ledger, trace, pad_rng=root.stream(f"client{k}.pads"),
                party=f"client{k}", dropout_rng=root.stream(f"client{k}.dropout"),
                mask_dist=_mask_dist(cfg), quantize_on_transfer=cfg.quantize_on_transfer)
            clients.append(ClientState(k, tokens, labels, replica, rt,
                                       root.stream(f"client{k}.batches")))

        rounds_log, uploads, globals_log = [], [], []
        for t in range(cfg.rounds):
            msgs, client_losses = [], []
            for client in clients:
                down = _send(SERVER_ID, t, MessageKind.GLOBAL_BROADCAST, 0, W,
                             f"down/c{client.id}/t{t}", wire, trace, "server")
                counts["global_broadcast"] += 1
                w_local = (wire.open(down) if wire is not None
                           else dict(zip(down.names, down.payloads)))
                w_k, losses = local_train_step(client, w_local, cfg)
                client_losses.append(losses)
                up = _send(client.id, t, MessageKind.ADAPTER_UPDATE, client.n_k, w_k,
                           f"up/c{client.id}/t{t}", wire, trace, f"client{client.id}")
                counts["adapter_update"] += 1
                msgs.append(up)
            gm = aggregate(msgs, {c.id for c in clients}, wire, trace, t)
            W = gm.adapters
            # what the server trusted domain actually received and averaged
            uploads.append([(n_k, arrays) for _, n_k, arrays in gm.received])
            globals_log.append({k: v.copy() for k, v in W.items()})
            rounds_log.append({
                "round": t,
                "client_losses": [float(np.mean(l)) for l in client_losses],
                "mean_loss": float(np.mean([np.mean(l) for l in client_losses])),
            })

        global_model.load_trainable(W)
        eval_rt = SecureRuntime(
            plan, ledger, trace, pad_rng=root.stream("eval.pads"), party="eval",
            mask_dist=_mask_dist(cfg), quantize_on_transfer=cfg.quantize_on_transfer)
        accuracy = _accuracy(global_model, ds.test_tokens, ds.test_labels, eval_rt)

    method_name = {Method.METHOD1: "method1", Method.PLAINTEXT: "fl-llm",
                   Method.SWMT: "swmt"}[method]
    audit = audit_taint(trace, ledger, method_name)
    cost = simulate_cost(plan, build_workload(mc, cfg.seq_len, training=True, plan=plan))
    report = {
        "method": method_name,
        "tuning": cfg.tuning,
        "precision": cfg.precision,
        "seed": cfg.seed,
        "dataset_id": ds.dataset_id,
        "config": cfg.to_dict(),
        "rounds": rounds_log,
        "losses": [r["mean_loss"] for r in rounds_log],
        "final_accuracy": accuracy,
        "trainable_params": count_trainable_params(global_model),
        "messages": counts,
        "server_to_client_param_messages": counts["global_broadcast"],
        "base_unchanged": global_model.base_fingerprint() == base_fp,
        "audit": audit.to_dict(),
        "cost": cost.to_dict(),
    }
    return RunResult(report, audit, cost, trace, ledger, global_model,
                     uploads=uploads, globals=globals_log)


def run_method1(cfg: ExperimentConfig, dataset: Dataset | None = None) -> RunResult:
    if cfg.method != "method1":
        raise ContractError(f"config method is {cfg.method!r}, not method1")
    return _federated_run(cfg, dataset, Method.METHOD1)


def run_baseline(cfg: ExperimentConfig, dataset: Dataset | None = None,
                 mode: str | None = None) -> RunResult:
    mode = mode or cfg.method
    if mode == "fl-llm":
        return _federated_run(cfg, dataset, Method.PLAINTEXT)
    if mode == "swmt":
        return _federated_run(cfg, dataset, Method.SWMT)
    raise ContractError(f"baseline mode must be fl-llm or swmt, got {mode!r}")


def run_centralized(cfg: ExperimentConfig, dataset: Dataset | None = None,
                    client: int = 0) -> RunResult:
    """Round-structured training on a single client's shard, no federation.

    The reference trajectory for the K=1 degenerate case: identical streams,
    identical Adam restarts per round, no wire.
    """
    ds = dataset or _dataset_for(cfg)
    mc = cfg.model_config()
    method = _METHODS[cfg.method]
    plan = build_plan(mc, method, cfg.split_layer if method is Method.METHOD2 else None)
    ledger = PadLedger()
    trace = RunTrace()
    root = Rng(cfg.seed)
    with precision(_precision_of(cfg)):
        model = TransformerClassifier(mc, root.stream("model"))
        model.attach(cfg.tuning_config(), root.stream("model"))
        rt = SecureRuntime(
            plan, ledger, trace, pad_rng=root.stream(f"client{client}.pads"),
            party=f"client{client}", dropout_rng=root.stream(f"client{client}.dropout"),
            mask_dist=_mask_dist(cfg), quantize_on_transfer=cfg.quantize_on_transfer)
        batch_rng = root.stream(f"client{client}.batches")
        tokens, labels = ds.shard_of(client)
        rounds_log = []
        for t in range(cfg.rounds):
            params = model.trainable_params()
            opt = Adam(params, lr=cfg.lr)
            losses = _train_steps(model, opt, tokens, labels, batch_rng, rt,
                                  cfg.steps_per_round, cfg.batch_size)
            rounds_log.append({"round": t, "mean_loss": float(np.mean(losses)),
                               "client_losses": [float(np.mean(losses))]})
        eval_rt = SecureRuntime(
            plan, ledger, trace, pad_rng=root.stream("eval.pads"), party="eval",
            mask_dist=_mask_dist(cfg), quantize_on_transfer=cfg.quantize_on_transfer)
        accuracy = _accuracy(model, ds.test_tokens, ds.test_labels, eval_rt)
    audit = audit_taint(trace, ledger, "centralized")
    cost = simulate_cost(plan, build_workload(mc, cfg.seq_len, training=True, plan=plan))
    report = {
        "method": "centralized", "tuning": cfg.tuning, "precision": cfg.precision,
        "seed": cfg.seed, "dataset_id": ds.dataset_id, "config": cfg.to_dict(),
        "rounds": rounds_log, "losses": [r["mean_loss"] for r in rounds_log],
        "final_accuracy": accuracy, "trainable_params": count_trainable_params(model),
        "messages": {k.name.lower(): 0 for k in MessageKind},
        "server_to_client_param_messages": 0,
        "base_unchanged": True,
        "audit": audit.to_dict(), "cost": cost.to_dict(),
    }
    return RunResult(report, audit, cost, trace, ledger, model)


# ---------------------------------------------------------------------------
# Method2: split fine-tuning with a one-shot encrypted feature upload


@dataclass
class SplitArtifacts:
    """One client's offline feature store, held inside the server trusted
    domain: frozen-lower-slice outputs keyed by example id, stored once."""

    sender: int
    example_ids: np.ndarray
    features: np.ndarray  # (n_k, seq, d_model)
    labels: np.ndarray


class Method2Server:
    """Server trusted domain: ingests one feature batch per client, trains
    the upper slice, and serves masked-feature predict queries."""

    def __init__(self, model: TransformerClassifier, plan: PartitionPlan,
                 wire: WireCrypto, trace: RunTrace, ledger: PadLedger, root: Rng,
                 cfg: ExperimentConfig):
        self.model = model
        self.plan = plan
        self.wire = wire
        self.trace = trace
        self.cfg = cfg
        self.split = plan.split_layer
        self.store: dict[int, tuple] = {}
        self.query_seq = 0
        self.runtime = SecureRuntime(
            plan, ledger, trace, pad_rng=root.stream("server.pads"), party="server",
            dropout_rng=root.stream("server.dropout"), mask_dist=_mask_dist(cfg),
            quantize_on_transfer=cfg.quantize_on_transfer)

    def ingest(self, msg: RoundMessage) -> np.ndarray:
        if msg.kind is not MessageKind.EMBEDDING_BATCH:
            raise ProtocolError(f"expected an embedding batch, got {msg.kind}")
        if msg.sender in self.store:
            raise ProtocolError(f"client {msg.sender} already uploaded its features")
        arrays = self.wire.open(msg)
        self.trace.log_op("ef-decrypt", "server", TrustDomain.TRUSTED,
                          TensorState.PLAINTEXT, exposed=False)
        seq, d = self.cfg.seq_len, self.cfg.d_model
        features = arrays["features"].reshape(msg.n_k, seq, d)
        labels = np.rint(arrays["labels"]).astype(np.int64)
        ids = np.rint(arrays["example_ids"]).astype(np.int64)
        self.store[msg.sender] = SplitArtifacts(msg.sender, ids, features, labels)
        return features

    def _forward_features(self, feats: np.ndarray, training: bool):
        from .tensor import Tensor
        x = Tensor(feats)
        x = self.model.forward_layers(x, self.split, self.cfg.n_layers,
                                      self.runtime, training)
        return self.model.forward_head(x, self.runtime)

    def train(self, batch_rng: Rng) -> list:
        if not self.store:
            raise ProtocolError("no feature uploads to train on")
        feats = np.concatenate([a.features for a in self.store.values()])
        labels = np.concatenate([a.labels for a in self.store.values()])
        params = self.model.trainable_params()
        opt = Adam(params, lr=self.cfg.lr)
        losses = []
        n = len(labels)
        for _ in range(self.cfg.method2_steps):
            idx = batch_rng.integers(0, n, (self.cfg.batch_size,))
            total = None
            for i in idx:
                logits = self._forward_features(feats[i], training=True)
                loss = self.runtime.loss_op("loss", logits, [int(labels[i])])
                total = loss if total is None else total + loss
            total = total * (1.0 / self.cfg.batch_size)
            opt.zero_grad()
            backward(total)
            opt.step()
            losses.append(total.item())
        return losses

    def predict(self, msg: RoundMessage) -> np.ndarray:
        """Serve one masked-feature query; returns plaintext logits."""
        arrays = self.wire.open(msg)
        feats = arrays["features"].reshape(self.cfg.seq_len, self.cfg.d_model)
        return self._forward_features(feats, training=False).data


def compute_client_features(model: TransformerClassifier, tokens_batch: np.ndarray,
                            rt: SecureRuntime, split: int) -> np.ndarray:
    """Frozen lower-slice forward over a token batch; plaintext client-local."""
    out = []
    for tokens in tokens_batch:
        x = model.forward_embed(tokens, rt)
        out.append(model.forward_layers(x, 0, split, rt, training=False).data)
    return np.stack(out)


def run_method2(cfg: ExperimentConfig, dataset: Dataset | None = None) -> RunResult:
    if cfg.method != "method2":
        raise ContractError(f"config method is {cfg.method!r}, not method2")
    ds = dataset or _dataset_for(cfg)
    mc = cfg.model_config()
    plan = build_plan(mc, Method.METHOD2, cfg.split_layer)
    ledger = PadLedger()
    trace = RunTrace()
    root = Rng(cfg.seed)
    wire = WireCrypto(cfg.seed, ledger)
    counts = {k.name.lower(): 0 for k in MessageKind}
    ef_client: dict[int, np.ndarray] = {}
    ef_server: dict[int, np.ndarray] = {}

    with precision(_precision_of(cfg)):
        model = TransformerClassifier(mc, root.stream("model"))
        model.attach(cfg.tuning_config(), root.stream("model"))
        base_fp = model.base_fingerprint()
        server = Method2Server(model, plan, wire, trace, ledger, root, cfg)

        # phase 1: offline feature computation, one masked upload per client
        for k in range(cfg.k):
            tokens, labels = ds.shard_of(k)
            rt = SecureRuntime(
                plan, ledger, trace, pad_rng=root.stream(f"client{k}.pads"),
                party=f"client{k}", mask_dist=_mask_dist(cfg),
                quantize_on_transfer=cfg.quantize_on_transfer)
            feats = compute_client_features(model, tokens, rt, cfg.split_layer)
            ef_client[k] = feats
            msg = _send(k, 0, MessageKind.EMBEDDING_BATCH, len(tokens),
                        {"features": feats.reshape(len(tokens) * cfg.seq_len, cfg.d_model),
                         "labels": labels.astype(np.float64),
                         "example_ids": ds.shards[k].astype(np.float64)},
                        f"ef/c{k}", wire, trace, f"client{k}")
            counts["embedding_batch"] += 1
            ef_server[k] = server.ingest(msg)

        # phase 2: server-side fine-tuning; nothing flows back to clients
        losses = server.train(root.stream("server.batches"))

        # serving path: queries arrive as masked features
        correct = 0
        query_rt = SecureRuntime(
            plan, ledger, trace, pad_rng=root.stream("user.pads"), party="user",
            mask_dist=_mask_dist(cfg), quantize_on_transfer=cfg.quantize_on_transfer)
        for qid, (tokens, label) in enumerate(zip(ds.test_tokens, ds.test_labels)):
            feats = compute_client_features(model, tokens[None, :], query_rt,
                                            cfg.split_layer)[0]
            qmsg = _send(SERVER_ID, 0, MessageKind.EMBEDDING_BATCH, 1,
                         {"features": feats},
                         f"query/{qid}", wire, trace, "user")
            logits = server.predict(qmsg)
            correct += int(np.argmax(logits) == label)
        accuracy = correct / len(ds.test_labels)

    ef_err = max(float(np.max(np.abs(ef_client[k] - ef_server[k]))) for k in ef_client)
    audit = audit_taint(trace, ledger, "method2")
    cost = simulate_cost(plan, build_workload(mc, cfg.seq_len, training=True, plan=plan))
    chunk = max(1, cfg.method2_steps // cfg.rounds)
    rounds_log = [{"round": t, "mean_loss": float(np.mean(losses[t * chunk:(t + 1) * chunk])),
                   "client_losses": []}
                  for t in range(min(cfg.rounds, (len(losses) + chunk - 1) // chunk))]
    report = {
        "method": "method2", "tuning": "spf_lora", "precision": cfg.precision,
        "seed": cfg.seed, "dataset_id": ds.dataset_id, "config": cfg.to_dict(),
        "rounds": rounds_log,
        "losses": [float(l) for l in losses],
        "final_accuracy": accuracy,
        "trainable_params": count_trainable_params(model),
        "messages": counts,
        "server_to_client_param_messages": 0,
        "ef_roundtrip_max_abs_err": ef_err,
        "base_unchanged": model.base_fingerprint() == base_fp,
        "audit": audit.to_dict(), "cost": cost.to_dict(),
    }
    return RunResult(report, audit, cost, trace, ledger, model,
                     ef_client=ef_client, ef_server=ef_server, server=server)


def predict_with_server(result: RunResult, tokens: np.ndarray) -> np.ndarray:
    """Full serving round trip for one query against a finished Method2 run:
    frozen lower slice on the caller's side, masked upload, trusted forward."""
    server: Method2Server = result.server
    if server is None:
        raise ContractError("only method2 runs can serve predictions")
    cfg = ExperimentConfig(**result.report["config"])
    server.query_seq += 1
    qid = server.query_seq
    with precision(_precision_of(cfg)):
        rt = SecureRuntime(
            server.plan, result.ledger, result.trace,
            pad_rng=Rng(cfg.seed, f"/svc-user.pads/{qid}"), party="user",
            mask_dist=_mask_dist(cfg), quantize_on_transfer=cfg.quantize_on_transfer)
        feats = compute_client_features(result.model, np.asarray(tokens)[None, :], rt,
                                        server.split)[0]
        qmsg = _send(SERVER_ID, 0, MessageKind.EMBEDDING_BATCH, 1, {"features": feats},
                     f"query/svc-{qid}", server.wire, result.trace, "user")
        return server.predict(qmsg)


def run_experiment(cfg: ExperimentConfig, dataset: Dataset | None = None) -> RunResult:
    if cfg.method == "method1":
        return run_method1(cfg, dataset)
    if cfg.method == "method2":
        return run_method2(cfg, dataset)
    return run_baseline(cfg, dataset)
