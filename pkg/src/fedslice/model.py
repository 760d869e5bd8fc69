"""Toy transformer encoder for sequence classification plus the three
fine-tuning mechanisms: low-rank adapters, per-layer key/value prefixes,
and head-sparsified linear layers.

Forward passes are parameterized by a runtime object so the same model code
can run plainly or under a trust-partitioned executor.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import (Rng, Tensor, concat_cols, concat_rows, cross_entropy, dropout,
                     gather_cols, gather_rows, gelu, layernorm, scatter_cols, softmax)

# ---------------------------------------------------------------------------
# configs


@dataclass
class TransformerConfig:
    n_layers: int = 4
    d_model: int = 16
    n_heads: int = 4
    d_head: int = 4
    d_ff: int = 32
    vocab: int = 24
    n_classes: int = 3
    max_seq: int = 16

    def __post_init__(self):
        dims = (self.n_layers, self.d_model, self.n_heads, self.d_head,
                self.d_ff, self.vocab, self.n_classes, self.max_seq)
        if any(d < 1 for d in dims):
            raise ContractError(f"all dims must be >= 1, got {self}")
        if self.d_model != self.n_heads * self.d_head:
            raise ContractError(
                f"d_model {self.d_model} != n_heads {self.n_heads} * d_head {self.d_head}")


@dataclass
class TuningConfig:
    """Which adapters are live and where."""

    mode: str = "none"  # none | lora | ptuning_v2 | spf_lora
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.1
    lora_sites: tuple = ("qkv",)
    prefix_len: int = 8
    qkv_ratio: float = 0.25
    dense_ratio: float = 0.5
    train_head: bool = True
    layers: tuple | None = None  # None = all layers

    def layer_range(self, n_layers: int) -> tuple:
        return tuple(self.layers) if self.layers is not None else tuple(range(n_layers))


# named (qkv, dense) trainable-fraction pairs for head sparsification
RATIO_PRESETS = {
    "sparse": (0.125, 0.25),
    "rich": (0.5, 0.625),
    "balanced": (0.25, 0.5),
}

# ---------------------------------------------------------------------------
# adapters


class LoraAdapter:
    """Low-rank pair (a, b); contribution is zero at init because b is zero."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float,
                 dropout_p: float, target: str, rng: Rng):
        if rank > min(d_in, d_out):
            raise ContractError(f"lora rank {rank} > min({d_in}, {d_out}) at {target}")
        bound = 1.0 / math.sqrt(d_in)
        self.a = Tensor(rng.uniform(-bound, bound, (rank, d_in)), requires_grad=True)
        self.b = Tensor(np.zeros((d_out, rank)), requires_grad=True)
        self.rank = rank
        self.alpha = alpha
        self.dropout_p = dropout_p
        self.target = target

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def lora_contribution(x: Tensor, adapter: LoraAdapter, rng: Rng | None,
                      training: bool) -> Tensor:
    h = dropout(x, adapter.dropout_p, rng, training and rng is not None)
    return ((h @ adapter.a.T) @ adapter.b.T) * adapter.scale


def lora_forward(x: Tensor, w: Tensor, b: Tensor, adapter: LoraAdapter,
                 rng: Rng | None = None, training: bool = False) -> Tensor:
    if adapter.a.shape[1] != w.shape[1] or adapter.b.shape[0] != w.shape[0]:
        raise DimensionError(
            f"lora {adapter.a.shape}/{adapter.b.shape} does not fit weight {w.shape}")
    return (x @ w.T) + b + lora_contribution(x, adapter, rng, training)


class PrefixEmbedding:
    """Learnable per-layer key/value prefixes; queries never see them."""

    def __init__(self, n_layers: int, prefix_len: int, d_model: int, rng: Rng):
        self.prefix_len = prefix_len
        self.keys = [Tensor(rng.normal(0.2, (prefix_len, d_model)), requires_grad=True)
                     for _ in range(n_layers)]
        self.values = [Tensor(rng.normal(0.2, (prefix_len, d_model)), requires_grad=True)
                       for _ in range(n_layers)]


# ---------------------------------------------------------------------------
# sparsification-parameter fine-tuning


@dataclass
class SpfPartition:
    """Per-linear-layer split of head groups into trainable and frozen rows."""

    layer_id: str
    head_group_size: int
    train_heads: list
    freeze_heads: list
    ratio: float
    w_train: Tensor = field(repr=False, default=None)
    b_train: Tensor = field(repr=False, default=None)
    w_freeze: Tensor = field(repr=False, default=None)
    b_freeze: Tensor = field(repr=False, default=None)
    train_rows: np.ndarray = field(repr=False, default=None)
    freeze_rows: np.ndarray = field(repr=False, default=None)
    src_shape: tuple = ()

    def recompose(self) -> tuple[np.ndarray, np.ndarray]:
        """Current full weight/bias with trained rows written back in place."""
        w = np.empty(self.src_shape)
        b = np.empty(self.src_shape[0])
        w[self.train_rows] = self.w_train.data
        b[self.train_rows] = self.b_train.data
        w[self.freeze_rows] = self.w_freeze.data
        b[self.freeze_rows] = self.b_freeze.data
        return w, b


def spf_select_heads(w_all, bias, n_groups: int, ratio: float,
                     layer_id: str = "") -> SpfPartition:
    """Split rows into head groups and pick the top ceil(ratio*n_groups) by
    summed L1 norm; ties go to the lower group index."""
    w = w_all.data if isinstance(w_all, Tensor) else np.asarray(w_all, dtype=np.float64)
    b = bias.data if isinstance(bias, Tensor) else np.asarray(bias, dtype=np.float64)
    if not 0.0 < ratio <= 1.0:
        raise ContractError(f"ratio must be in (0, 1], got {ratio}")
    d_out = w.shape[0]
    if d_out % n_groups != 0:
        raise DimensionError(f"{d_out} output rows not divisible into {n_groups} head groups")
    gsize = d_out // n_groups
    scores = np.abs(w).reshape(n_groups, gsize * w.shape[1]).sum(axis=1)
    order = sorted(range(n_groups), key=lambda g: (-scores[g], g))
    n_train = max(1, math.ceil(ratio * n_groups))
    train_heads = sorted(order[:n_train])
    freeze_heads = sorted(order[n_train:])
    train_rows = np.concatenate([np.arange(g * gsize, (g + 1) * gsize) for g in train_heads])
    freeze_rows = (np.concatenate([np.arange(g * gsize, (g + 1) * gsize) for g in freeze_heads])
                   if freeze_heads else np.empty(0, dtype=np.int64))
    part = SpfPartition(
        layer_id=layer_id, head_group_size=gsize, train_heads=train_heads,
        freeze_heads=freeze_heads, ratio=ratio,
        w_train=Tensor(w[train_rows].copy(), requires_grad=True),
        b_train=Tensor(b[train_rows].copy(), requires_grad=True),
        w_freeze=Tensor(w[freeze_rows].copy()),
        b_freeze=Tensor(b[freeze_rows].copy()),
        train_rows=train_rows, freeze_rows=freeze_rows, src_shape=w.shape)
    return part


def spf_forward(x: Tensor, w_all, bias, part: SpfPartition) -> Tensor:
    """Disjoint-support scatter-sum of the trainable and frozen branches.

    Value-equivalent to the dense layer at partition time; only gradient
    routing differs.
    """
    src = w_all.data if isinstance(w_all, Tensor) else np.asarray(w_all)
    if tuple(src.shape) != tuple(part.src_shape):
        raise ContractError(
            f"stale partition: built for {part.src_shape}, weight now {src.shape}")
    o_train = (x @ part.w_train.T) + part.b_train
    if len(part.freeze_rows) == 0:
        return scatter_cols([(o_train, part.train_rows)], part.src_shape[0])
    o_freeze = (x @ part.w_freeze.T) + part.b_freeze
    return scatter_cols([(o_train, part.train_rows), (o_freeze, part.freeze_rows)],
                        part.src_shape[0])


# ---------------------------------------------------------------------------
# site map (shared with the trust partitioner and the cost model)

SITE_CLASSES = {
    "embed": "embed", "ln1": "norm", "ln2": "norm", "qkv": "linear", "dense": "linear",
    "fc1": "linear", "fc2": "linear", "attn_qk": "matmul", "attn_pv": "matmul",
    "attn_softmax": "softmax", "gelu": "activation", "pool": "other", "head": "linear",
    "loss": "other",
}

_LAYER_SITES = ("ln1", "qkv", "attn_qk", "attn_softmax", "attn_pv", "dense",
                "ln2", "fc1", "gelu", "fc2")


@dataclass(frozen=True)
class Site:
    name: str
    op_class: str
    layer: int  # -1 for the embedding, n_layers for the head stack
    visits: int  # per single forward pass of one example


def enumerate_sites(cfg: TransformerConfig) -> list[Site]:
    sites = [Site("embed", "embed", -1, 1)]
    for i in range(cfg.n_layers):
        for short in _LAYER_SITES:
            visits = cfg.n_heads if short.startswith("attn_") else 1
            sites.append(Site(f"layer{i}.{short}", SITE_CLASSES[short], i, visits))
    sites.append(Site("pool", "other", cfg.n_layers, 1))
    sites.append(Site("head", "linear", cfg.n_layers, 1))
    sites.append(Site("loss", "other", cfg.n_layers, 1))
    return sites


# ---------------------------------------------------------------------------
# plain runtime


class PlainRuntime:
    """Executes every op locally in plaintext. Subclasses may log or reroute."""

    def __init__(self, dropout_rng: Rng | None = None):
        self.dropout_rng = dropout_rng

    def embed(self, site, tokens, table, pos):
        seq = len(tokens)
        return gather_rows(table, tokens) + gather_rows(pos, np.arange(seq))

    def linear(self, site, x, w, b, lora=None, spf=None, training=False):
        if spf is not None:
            return spf_forward(x, w, b, spf)
        if lora is not None:
            return lora_forward(x, w, b, lora, self.dropout_rng, training)
        return (x @ w.T) + b

    def pair_matmul(self, site, a, b):
        return a @ b

    def layernorm_op(self, site, x, g, b):
        return layernorm(x, g, b)

    def softmax_op(self, site, x):
        return softmax(x)

    def gelu_op(self, site, x):
        return gelu(x)

    def pool(self, site, x):
        return x.mean(axis=0).reshape(1, -1)

    def loss_op(self, site, logits, label):
        return cross_entropy(logits, label)

    def finish_example(self):
        pass


# ---------------------------------------------------------------------------
# the model


class TransformerClassifier:
    """Pre-LN encoder stack with mean pooling and a classification head.

    Base parameters are frozen; trainable parameters come from the attached
    tuning mechanism (and optionally the head).
    """

    def __init__(self, cfg: TransformerConfig, rng: Rng):
        self.cfg = cfg
        r = rng.stream("base")
        d, ff = cfg.d_model, cfg.d_ff
        p: dict[str, Tensor] = {
            "embed": Tensor(r.normal(0.5, (cfg.vocab, d))),
            "pos": Tensor(r.normal(0.1, (cfg.max_seq, d))),
        }
        for i in range(cfg.n_layers):
            p[f"layer{i}.ln1.g"] = Tensor(np.ones(d))
            p[f"layer{i}.ln1.b"] = Tensor(np.zeros(d))
            p[f"layer{i}.qkv.w"] = Tensor(r.normal(1.0 / math.sqrt(d), (3 * d, d)))
            p[f"layer{i}.qkv.b"] = Tensor(np.zeros(3 * d))
            p[f"layer{i}.dense.w"] = Tensor(r.normal(1.0 / math.sqrt(d), (d, d)))
            p[f"layer{i}.dense.b"] = Tensor(np.zeros(d))
            p[f"layer{i}.ln2.g"] = Tensor(np.ones(d))
            p[f"layer{i}.ln2.b"] = Tensor(np.zeros(d))
            p[f"layer{i}.fc1.w"] = Tensor(r.normal(1.0 / math.sqrt(d), (ff, d)))
            p[f"layer{i}.fc1.b"] = Tensor(np.zeros(ff))
            p[f"layer{i}.fc2.w"] = Tensor(r.normal(1.0 / math.sqrt(ff), (d, ff)))
            p[f"layer{i}.fc2.b"] = Tensor(np.zeros(d))
        p["head.w"] = Tensor(r.normal(0.3, (cfg.n_classes, d)))
        p["head.b"] = Tensor(np.zeros(cfg.n_classes))
        self.params = p
        self.tuning = TuningConfig(mode="none", train_head=False)
        self.loras: dict[tuple, LoraAdapter] = {}
        self.prefix: PrefixEmbedding | None = None
        self.spf: dict[tuple, SpfPartition] = {}

    # -- tuning -------------------------------------------------------------

    def attach(self, tuning: TuningConfig, rng: Rng) -> None:
        cfg = self.cfg
        r = rng.stream("adapters")
        self.tuning = tuning
        self.loras = {}
        self.prefix = None
        self.spf = {}
        layers = tuning.layer_range(cfg.n_layers)
        if tuning.mode == "lora":
            for i in layers:
                for short in tuning.lora_sites:
                    w = self.params[f"layer{i}.{short}.w"]
                    self.loras[(i, short)] = LoraAdapter(
                        w.shape[1], w.shape[0], tuning.lora_rank, tuning.lora_alpha,
                        tuning.lora_dropout, f"layer{i}.{short}", r)
        elif tuning.mode == "ptuning_v2":
            self.prefix = PrefixEmbedding(cfg.n_layers, tuning.prefix_len, cfg.d_model, r)
        elif tuning.mode == "spf_lora":
            for i in layers:
                wq, bq = self.params[f"layer{i}.qkv.w"], self.params[f"layer{i}.qkv.b"]
                self.spf[(i, "qkv")] = spf_select_heads(
                    wq, bq, 3 * cfg.n_heads, tuning.qkv_ratio, f"layer{i}.qkv")
                wd, bd = self.params[f"layer{i}.dense.w"], self.params[f"layer{i}.dense.b"]
                self.spf[(i, "dense")] = spf_select_heads(
                    wd, bd, cfg.n_heads, tuning.dense_ratio, f"layer{i}.dense")
                for short in ("fc1", "fc2"):
                    w = self.params[f"layer{i}.{short}.w"]
                    self.loras[(i, short)] = LoraAdapter(
                        w.shape[1], w.shape[0], tuning.lora_rank, tuning.lora_alpha,
                        tuning.lora_dropout, f"layer{i}.{short}", r)
        elif tuning.mode != "none":
            raise ContractError(f"unknown tuning mode {tuning.mode!r}")
        self.params["head.w"].requires_grad = tuning.train_head
        self.params["head.b"].requires_grad = tuning.train_head

    def trainable_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for (i, short), ad in sorted(self.loras.items()):
            out[f"lora.layer{i}.{short}.a"] = ad.a
            out[f"lora.layer{i}.{short}.b"] = ad.b
        if self.prefix is not None:
            for i, (k, v) in enumerate(zip(self.prefix.keys, self.prefix.values)):
                out[f"prefix.layer{i}.k"] = k
                out[f"prefix.layer{i}.v"] = v
        for (i, short), part in sorted(self.spf.items()):
            out[f"spf.layer{i}.{short}.w"] = part.w_train
            out[f"spf.layer{i}.{short}.b"] = part.b_train
        if self.tuning.train_head:
            out["head.w"] = self.params["head.w"]
            out["head.b"] = self.params["head.b"]
        return out

    def load_trainable(self, values: dict[str, np.ndarray]) -> None:
        own = self.trainable_params()
        if set(values) != set(own):
            raise ContractError("trainable parameter names do not match this model")
        for name, arr in values.items():
            own[name].data = np.array(arr, dtype=np.float64)

    def snapshot_trainable(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.trainable_params().items()}

    def base_fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name in sorted(self.params):
            if not self.params[name].requires_grad:
                h.update(name.encode())
                h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def replica(self) -> "TransformerClassifier":
        """New model sharing the frozen base tensors, with fresh adapters."""
        twin = object.__new__(TransformerClassifier)
        twin.cfg = self.cfg
        twin.params = dict(self.params)
        twin.params["head.w"] = Tensor(self.params["head.w"].data.copy(),
                                       requires_grad=self.params["head.w"].requires_grad)
        twin.params["head.b"] = Tensor(self.params["head.b"].data.copy(),
                                       requires_grad=self.params["head.b"].requires_grad)
        twin.tuning = TuningConfig(mode="none", train_head=False)
        twin.loras, twin.prefix, twin.spf = {}, None, {}
        twin.attach(self.tuning, Rng(0, "replica"))
        return twin

    # -- forward ------------------------------------------------------------

    def _qkv_cols(self, head: int, section: int) -> np.ndarray:
        d, dh = self.cfg.d_model, self.cfg.d_head
        lo = section * d + head * dh
        return np.arange(lo, lo + dh)

    def forward_embed(self, tokens, rt) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if len(tokens) > self.cfg.max_seq:
            raise DimensionError(f"sequence of {len(tokens)} exceeds max_seq {self.cfg.max_seq}")
        return rt.embed("embed", tokens, self.params["embed"], self.params["pos"])

    def forward_layers(self, x: Tensor, lo: int, hi: int, rt,
                       training: bool = False) -> Tensor:
        cfg = self.cfg
        inv_sqrt = 1.0 / math.sqrt(cfg.d_head)
        for i in range(lo, hi):
            p = self.params
            y = rt.layernorm_op(f"layer{i}.ln1", x, p[f"layer{i}.ln1.g"], p[f"layer{i}.ln1.b"])
            qkv = rt.linear(f"layer{i}.qkv", y, p[f"layer{i}.qkv.w"], p[f"layer{i}.qkv.b"],
                            lora=self.loras.get((i, "qkv")), spf=self.spf.get((i, "qkv")),
                            training=training)
            heads = []
            for h in range(cfg.n_heads):
                q = gather_cols(qkv, self._qkv_cols(h, 0))
                k = gather_cols(qkv, self._qkv_cols(h, 1))
                v = gather_cols(qkv, self._qkv_cols(h, 2))
                if self.prefix is not None and self.prefix.prefix_len > 0:
                    cols = np.arange(h * cfg.d_head, (h + 1) * cfg.d_head)
                    k = concat_rows([gather_cols(self.prefix.keys[i], cols), k])
                    v = concat_rows([gather_cols(self.prefix.values[i], cols), v])
                scores = rt.pair_matmul(f"layer{i}.attn_qk", q, k.T) * inv_sqrt
                probs = rt.softmax_op(f"layer{i}.attn_softmax", scores)
                heads.append(rt.pair_matmul(f"layer{i}.attn_pv", probs, v))
            att = concat_cols(heads)
            x = x + rt.linear(f"layer{i}.dense", att, p[f"layer{i}.dense.w"],
                              p[f"layer{i}.dense.b"], lora=self.loras.get((i, "dense")),
                              spf=self.spf.get((i, "dense")), training=training)
            z = rt.layernorm_op(f"layer{i}.ln2", x, p[f"layer{i}.ln2.g"], p[f"layer{i}.ln2.b"])
            h1 = rt.gelu_op(f"layer{i}.gelu",
                            rt.linear(f"layer{i}.fc1", z, p[f"layer{i}.fc1.w"],
                                      p[f"layer{i}.fc1.b"], lora=self.loras.get((i, "fc1")),
                                      training=training))
            x = x + rt.linear(f"layer{i}.fc2", h1, p[f"layer{i}.fc2.w"], p[f"layer{i}.fc2.b"],
                              lora=self.loras.get((i, "fc2")), training=training)
        return x

    def forward_head(self, x: Tensor, rt) -> Tensor:
        pooled = rt.pool("pool", x)
        return rt.linear("head", pooled, self.params["head.w"], self.params["head.b"])

    def forward_example(self, tokens, rt=None, training: bool = False) -> Tensor:
        rt = rt or PlainRuntime()
        x = self.forward_embed(tokens, rt)
        x = self.forward_layers(x, 0, self.cfg.n_layers, rt, training)
        logits = self.forward_head(x, rt)
        rt.finish_example()
        return logits

    def example_loss(self, tokens, label, rt=None, training: bool = False):
        rt = rt or PlainRuntime()
        x = self.forward_embed(tokens, rt)
        x = self.forward_layers(x, 0, self.cfg.n_layers, rt, training)
        logits = self.forward_head(x, rt)
        loss = rt.loss_op("loss", logits, [int(label)])
        rt.finish_example()
        return loss, logits


def count_trainable_params(model: TransformerClassifier) -> int:
    """Exact count of parameters that receive gradients under the attached tuning."""
    return int(sum(p.data.size for p in model.trainable_params().values()))


# ---------------------------------------------------------------------------
# checkpoint format: flat binary (header with names + dims, body of
# row-major little-endian float64) plus a JSON manifest

_CKPT_MAGIC = b"FSLC"
_CKPT_VERSION = 1


def save_checkpoint(params: dict, path: str) -> None:
    names = list(params)
    arrays = [np.ascontiguousarray(
        p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64))
        for p in params.values()]
    header = bytearray()
    header += _CKPT_MAGIC
    header += struct.pack("<HI", _CKPT_VERSION, len(names))
    for name, arr in zip(names, arrays):
        enc = name.encode()
        header += struct.pack("<H", len(enc)) + enc
        header += struct.pack("<B", arr.ndim)
        header += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    manifest = {"format": "fedslice-checkpoint-v1", "byte_order": "little", "tensors": []}
    offset = 0
    for name, arr in zip(names, arrays):
        manifest["tensors"].append(
            {"name": name, "shape": list(arr.shape), "offset_doubles": offset})
        offset += arr.size
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        for arr in arrays:
            fh.write(arr.astype("<f8").tobytes())
    with open(str(path) + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ContractError(f"{path} is not a checkpoint")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != _CKPT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    pos = 10
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
        entries.append((name, shape))
    out = {}
    for name, shape in entries:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
        out[name] = arr.astype(np.float64)
        pos += 8 * size
    return out
