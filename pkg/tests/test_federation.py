import json

import numpy as np
import pytest

from fedslice.config import ExperimentConfig
from fedslice.data import SyntheticTask, gen_dataset
from fedslice.errors import ContractError, ProtocolError
from fedslice.federation import (MessageKind, RoundMessage, WireCrypto, aggregate,
                                 decode_message, encode_message, local_train_step,
                                 predict_with_server, run_baseline, run_centralized,
                                 run_experiment, run_method1, run_method2)
from fedslice.masking import PadLedger
from fedslice.optim import Adam
from fedslice.partition import RunTrace
from fedslice.tensor import Tensor, backward

FAST = dict(rounds=3, steps_per_round=3, batch_size=3, n_train=30, n_test=30)


def quick_cfg(**kw):
    merged = {**FAST, **kw}
    return ExperimentConfig(**merged)


# --- wire codec -----------------------------------------------------------------

def test_message_roundtrip():
    msg = RoundMessage(
        sender=2, round=7, kind=MessageKind.ADAPTER_UPDATE, n_k=30,
        names=["a", "b.w"], payloads=[np.arange(6.0).reshape(2, 3), np.array([1.5])],
        pad_ids=[11, 12], masked=True, channel="up/c2/t7")
    out = decode_message(encode_message(msg))
    assert (out.sender, out.round, out.kind, out.n_k) == (2, 7, MessageKind.ADAPTER_UPDATE, 30)
    assert out.names == msg.names and out.pad_ids == [11, 12]
    assert out.masked and out.channel == "up/c2/t7"
    for got, want in zip(out.payloads, msg.payloads):
        assert np.array_equal(got, want)


def test_message_frame_is_pinned():
    # golden frame: any change to the wire layout must show up here
    msg = RoundMessage(sender=1, round=0, kind=MessageKind.GLOBAL_BROADCAST, n_k=0,
                       names=["x"], payloads=[np.array([[1.0, 2.0]])], pad_ids=[3],
                       masked=False, channel="c")
    frame = encode_message(msg)
    want = bytes.fromhex(
        "37000000"                                      # length prefix (55)
        "01000000" "00000000" "03" "00000000" "00"      # sender, round, kind, n_k, masked
        "0100" "63"                                     # channel "c"
        "0100"                                          # tensor count
        "0100" "78" "02" "01000000" "02000000"          # name "x", ndim, dims 1x2
        "0300000000000000"                              # pad id 3
        "000000000000f03f" "0000000000000040")          # 1.0, 2.0
    assert frame == want
    assert decode_message(frame).names == ["x"]


def test_truncated_frame_rejected():
    msg = RoundMessage(0, 0, MessageKind.ADAPTER_UPDATE, 1, ["x"],
                       [np.zeros(2)], [0], True, "c")
    with pytest.raises(ProtocolError):
        decode_message(encode_message(msg)[:-4])


def test_wire_seal_open_roundtrip():
    ledger = PadLedger()
    wire = WireCrypto(9, ledger)
    arrays = [np.linspace(0, 1, 12).reshape(3, 4), np.array([5.0])]
    payloads, pad_ids = wire.seal(["p", "q"], arrays, "up/c0/t0")
    assert all(np.all(p != a) for p, a in zip(payloads, arrays))
    msg = RoundMessage(0, 0, MessageKind.ADAPTER_UPDATE, 1, ["p", "q"], payloads,
                       pad_ids, True, "up/c0/t0")
    opened = wire.open(msg)
    for name, want in zip(["p", "q"], arrays):
        assert np.max(np.abs(opened[name] - want)) < 1e-12
    assert ledger.created == 2 and ledger.consumed == 2


# --- aggregation -------------------------------------------------------------------

def _adapter_msg(sender, n_k, arrays):
    return RoundMessage(sender, 0, MessageKind.ADAPTER_UPDATE, n_k,
                        list(arrays), [np.asarray(arrays[k]) for k in arrays],
                        [0] * len(arrays), False, f"up/c{sender}/t0")


def test_aggregate_weighted_mean_hand_case():
    msgs = [_adapter_msg(0, 1, {"w": np.array([2.0])}),
            _adapter_msg(1, 3, {"w": np.array([4.0])})]
    gm = aggregate(msgs, {0, 1}, None, RunTrace(), 0)
    assert np.allclose(gm.adapters["w"], [3.5])


def test_aggregate_idempotent_on_identical_clients():
    w = np.array([[1.0, -2.0], [0.5, 3.0]])
    msgs = [_adapter_msg(k, 7, {"w": w}) for k in range(3)]
    gm = aggregate(msgs, {0, 1, 2}, None, RunTrace(), 0)
    assert np.allclose(gm.adapters["w"], w)


def test_aggregate_matches_oracle():
    rng = np.random.default_rng(5)
    n_k = [3, 7, 5]
    ws = [rng.normal(size=4) for _ in range(3)]
    msgs = [_adapter_msg(k, n_k[k], {"w": ws[k]}) for k in range(3)]
    gm = aggregate(msgs, {0, 1, 2}, None, RunTrace(), 0)
    oracle = sum(nk * w for nk, w in zip(n_k, ws)) / sum(n_k)
    assert np.max(np.abs(gm.adapters["w"] - oracle)) < 1e-14


def test_aggregate_linearity():
    rng = np.random.default_rng(6)
    ws = [rng.normal(size=5) for _ in range(3)]
    msgs = lambda arrs: [_adapter_msg(k, k + 1, {"w": arrs[k]}) for k in range(3)]
    base = aggregate(msgs(ws), {0, 1, 2}, None, RunTrace(), 0).adapters["w"]
    scaled = aggregate(msgs([3.0 * w for w in ws]), {0, 1, 2}, None,
                       RunTrace(), 0).adapters["w"]
    assert np.max(np.abs(scaled - 3.0 * base)) < 1e-12


def test_aggregate_missing_client():
    msgs = [_adapter_msg(0, 1, {"w": np.array([1.0])})]
    with pytest.raises(ProtocolError):
        aggregate(msgs, {0, 1}, None, RunTrace(), 0)


def test_aggregate_weight_conservation():
    n_k = [3, 7, 5]
    n = sum(n_k)
    assert abs(sum(nk / n for nk in n_k) - 1.0) < 1e-15


# --- optimizer sanity ----------------------------------------------------------------

def test_adam_converges_to_quadratic_minimum():
    target = np.array([1.5, -2.0, 0.25])
    w = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam({"w": w}, lr=0.05)
    for _ in range(400):
        diff = w - Tensor(target)
        loss = (diff * diff).sum() * 0.5
        opt.zero_grad()
        backward(loss)
        opt.step()
    assert np.max(np.abs(w.data - target)) < 1e-3


# --- local training ---------------------------------------------------------------------

def test_zero_learning_rate_gives_zero_delta():
    cfg = quick_cfg(method="fl-llm", lr=0.0, rounds=2)
    res = run_baseline(cfg)
    # uploads in round 1 must be bit-identical to the round-0 global broadcast
    for _, upload in res.uploads[1]:
        for name, arr in upload.items():
            assert np.array_equal(arr, res.globals[0][name])


def test_base_weights_untouched_by_training():
    res = run_method1(quick_cfg(method="method1"))
    assert res.report["base_unchanged"]


def test_empty_client_dataset_rejected():
    cfg = quick_cfg(method="fl-llm")
    ds = gen_dataset(SyntheticTask(n_train=30, n_test=6, n_clients=3), 0)
    ds.shards[1] = np.array([], dtype=np.int64)
    with pytest.raises(ContractError):
        run_baseline(cfg, ds)


# --- full runs --------------------------------------------------------------------------

def test_method1_matches_fl_llm_same_seed():
    cfg1 = quick_cfg(method="method1")
    cfg2 = quick_cfg(method="fl-llm")
    w1 = run_method1(cfg1).model.snapshot_trainable()
    w2 = run_baseline(cfg2).model.snapshot_trainable()
    assert max(np.max(np.abs(w1[k] - w2[k])) for k in w1) < 1e-6


def test_k1_fl_llm_identical_to_centralized():
    cfg = quick_cfg(method="fl-llm", k=1, n_train=10)
    fed = run_baseline(cfg).model.snapshot_trainable()
    cen = run_centralized(cfg).model.snapshot_trainable()
    for name in fed:
        assert np.array_equal(fed[name], cen[name])


def test_method1_wire_payloads_masked():
    res = run_method1(quick_cfg(method="method1", rounds=1))
    wire_events = [e for e in res.trace.events if e.kind == "transfer"
                   and e.site.startswith("wire/")]
    assert wire_events and all(e.masked for e in wire_events)


def test_fl_llm_wire_payloads_plaintext():
    res = run_baseline(quick_cfg(method="fl-llm", rounds=1))
    wire_events = [e for e in res.trace.events if e.kind == "transfer"
                   and e.site.startswith("wire/")]
    assert wire_events and all(not e.masked for e in wire_events)


def test_same_seed_reports_identical():
    cfg = quick_cfg(method="fl-llm", seed=4)
    a = run_baseline(cfg).report
    b = run_baseline(quick_cfg(method="fl-llm", seed=4)).report
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_method2_protocol_shape():
    cfg = quick_cfg(method="method2", method2_steps=20)
    res = run_method2(cfg)
    assert res.report["messages"]["embedding_batch"] == cfg.k
    assert res.report["messages"]["global_broadcast"] == 0
    assert res.report["messages"]["adapter_update"] == 0
    assert res.report["server_to_client_param_messages"] == 0
    assert res.report["ef_roundtrip_max_abs_err"] < 1e-12
    assert res.audit.passed


def test_method2_double_upload_rejected():
    cfg = quick_cfg(method="method2", method2_steps=5)
    res = run_method2(cfg)
    msg = RoundMessage(0, 0, MessageKind.EMBEDDING_BATCH, 2,
                       ["features", "labels", "example_ids"],
                       [np.zeros((2 * cfg.seq_len, cfg.d_model)), np.zeros(2),
                        np.arange(2.0)],
                       [0, 0, 0], True, "ef/c0")
    with pytest.raises(ProtocolError):
        res.server.ingest(msg)


def test_method2_server_stores_artifacts_by_example_id():
    cfg = quick_cfg(method="method2", method2_steps=5)
    res = run_method2(cfg)
    ds_ids = set()
    for k, art in res.server.store.items():
        assert art.sender == k
        assert art.features.shape == (len(art.example_ids), cfg.seq_len, cfg.d_model)
        assert len(art.labels) == len(art.example_ids)
        ds_ids.update(art.example_ids.tolist())
    assert ds_ids == set(range(cfg.n_train))  # every example stored exactly once


def test_method2_predict_roundtrip():
    cfg = quick_cfg(method="method2", method2_steps=20)
    res = run_method2(cfg)
    ds_tokens = np.arange(cfg.seq_len) % cfg.vocab
    logits = predict_with_server(res, ds_tokens)
    assert logits.shape == (1, cfg.n_classes)
    assert np.all(np.isfinite(logits))


def test_run_experiment_dispatch():
    assert run_experiment(quick_cfg(method="swmt")).report["method"] == "swmt"
    with pytest.raises(ContractError):
        run_method1(quick_cfg(method="fl-llm"))
    with pytest.raises(ContractError):
        run_method2(quick_cfg(method="method1"))


def test_method1_with_prefix_tuning():
    res = run_method1(quick_cfg(method="method1", tuning="ptuningv2", prefix_len=4))
    assert res.audit.passed
    assert res.report["base_unchanged"]
    assert any(name.startswith("prefix.") for name in res.model.snapshot_trainable())
    assert res.report["final_accuracy"] > 0.5


def test_pad_ledger_dump(tmp_path):
    res = run_method1(quick_cfg(method="method1", rounds=1))
    path = tmp_path / "pads.json"
    res.ledger.dump(str(path))
    summary = json.loads(path.read_text())
    assert summary["reuse_count"] == 0
    assert summary["pads_created"] == summary["pads_consumed"] > 0
