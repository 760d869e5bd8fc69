import numpy as np
import pytest

from fedslice.errors import DimensionError, MaskReuse
from fedslice.masking import (MaskDistribution, MaskPad, MaskedTensor, PadLedger,
                              gen_mask, mask, unmask_affine, unmask_matmul)
from fedslice.tensor import Rng, Tensor


def _pad(values, ledger=None, channel="t"):
    ledger = ledger or PadLedger()
    return MaskPad(ledger.next_id(), np.asarray(values, dtype=np.float64), channel, ledger)


# --- gen_mask -------------------------------------------------------------------

def test_gen_mask_deterministic():
    a = gen_mask((2, 3), Rng(9, "pads"))
    b = gen_mask((2, 3), Rng(9, "pads"))
    assert np.array_equal(a.values, b.values)
    assert a.values.shape == (2, 3)


def test_gen_mask_streams_differ():
    a = gen_mask((4, 4), Rng(9).stream("s1"))
    b = gen_mask((4, 4), Rng(9).stream("s2"))
    assert np.any(a.values != b.values)


def test_gen_mask_rejects_empty_shape():
    with pytest.raises(DimensionError):
        gen_mask((), Rng(0))


def test_gen_mask_scale_follows_reference():
    dist = MaskDistribution(scale=None)
    pad = gen_mask((64, 64), Rng(3), dist, reference=np.full((2, 2), 50.0))
    assert np.max(np.abs(pad.values)) <= 50.0
    assert np.max(np.abs(pad.values)) > 5.0


# --- mask -----------------------------------------------------------------------

def test_mask_elementwise_add():
    pad = _pad([[0.5, -0.5], [1.0, -1.0]])
    out = mask(Tensor([[1.0, 2.0], [3.0, 4.0]]), pad)
    assert np.array_equal(out.payload.data, [[1.5, 1.5], [4.0, 3.0]])
    assert out.pad_id == pad.pad_id


def test_mask_zero_tensor_gives_pad():
    pad = _pad(np.linspace(0, 1, 6).reshape(2, 3))
    out = mask(Tensor(np.zeros((2, 3))), pad)
    assert np.array_equal(out.payload.data, pad.values)


def test_mask_reuse_raises():
    pad = _pad(np.ones((2, 2)))
    mask(Tensor(np.zeros((2, 2))), pad)
    with pytest.raises(MaskReuse):
        mask(Tensor(np.zeros((2, 2))), pad)


def test_mask_shape_mismatch():
    pad = _pad(np.ones((2, 2)))
    with pytest.raises(DimensionError):
        mask(Tensor(np.zeros((3, 2))), pad)


def test_ledger_counts_reuse_attempts():
    ledger = PadLedger()
    pad = _pad(np.ones((1, 1)), ledger)
    mask(Tensor(np.zeros((1, 1))), pad)
    with pytest.raises(MaskReuse):
        mask(Tensor(np.zeros((1, 1))), pad)
    assert ledger.reuse_count == 1
    assert ledger.summary()["pads_consumed"] == 1


# --- unmask_affine ---------------------------------------------------------------

def test_unmask_affine_identity_map():
    e = np.array([[2.0, -1.0], [0.5, 3.0]])
    pad = _pad([[1.0, 1.0], [-2.0, 4.0]])
    en = mask(Tensor(e), pad)
    out = unmask_affine(en.payload, Tensor(pad.values))
    assert np.allclose(out.data, e, atol=1e-15)


def test_unmask_affine_diagonal_weight():
    w = np.array([[2.0, 0.0], [0.0, 3.0]])
    e = np.array([[1.0, 1.0]])
    r = np.array([[1.0, -1.0]])
    got = unmask_affine(Tensor((e + r) @ w.T), Tensor(r @ w.T))
    assert np.allclose(got.data, [[2.0, 3.0]])


def test_unmask_affine_random_matches_plaintext():
    rng = np.random.default_rng(17)
    w = rng.normal(size=(4, 4))
    e = rng.normal(size=(4, 4))
    r = rng.normal(size=(4, 4))
    want = e @ w.T
    got = unmask_affine(Tensor((e + r) @ w.T), Tensor(r @ w.T)).data
    assert np.max(np.abs(got - want) / (np.abs(want) + 1e-12)) < 1e-12


# --- unmask_matmul ---------------------------------------------------------------

def test_unmask_matmul_zero_masks_bit_exact():
    rng = np.random.default_rng(23)
    q, k = rng.normal(size=(3, 2)), rng.normal(size=(2, 3))
    ledger = PadLedger()
    rq = _pad(np.zeros((3, 2)), ledger)
    rk = _pad(np.zeros((2, 3)), ledger)
    qen = mask(Tensor(q), rq)
    ken = mask(Tensor(k), rk)
    prod = Tensor(qen.payload.data @ ken.payload.data)
    out = unmask_matmul(prod, qen, ken, rq, rk)
    assert np.array_equal(out.data, prod.data)


def test_unmask_matmul_hand_case():
    q = np.eye(2)
    k = np.array([[1.0, 2.0], [3.0, 4.0]])
    rq = _pad(np.ones((2, 2)))
    rk = _pad(np.full((2, 2), 2.0))
    qen = mask(Tensor(q), rq)
    ken = mask(Tensor(k), rk)
    prod = Tensor(qen.payload.data @ ken.payload.data)
    out = unmask_matmul(prod, qen, ken, rq, rk)
    assert np.allclose(out.data, k, atol=1e-12)


def test_unmask_matmul_random_trials():
    rng = np.random.default_rng(31)
    worst = 0.0
    for _ in range(100):
        q, k = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        ledger = PadLedger()
        rq = _pad(rng.normal(size=(3, 3)), ledger)
        rk = _pad(rng.normal(size=(3, 3)), ledger)
        qen = mask(Tensor(q), rq)
        ken = mask(Tensor(k), rk)
        prod = Tensor(qen.payload.data @ ken.payload.data)
        got = unmask_matmul(prod, qen, ken, rq, rk).data
        want = q @ k
        worst = max(worst, np.max(np.abs(got - want) / (np.abs(want) + 1e-9)))
    assert worst < 1e-10


def test_unmask_matmul_shape_check():
    rq = _pad(np.zeros((2, 2)))
    rk = _pad(np.zeros((2, 2)))
    qen = MaskedTensor(Tensor(np.zeros((2, 2))), rq.pad_id)
    ken = MaskedTensor(Tensor(np.zeros((2, 2))), rk.pad_id)
    with pytest.raises(DimensionError):
        unmask_matmul(Tensor(np.zeros((3, 3))), qen, ken, rq, rk)


# --- simulated half precision ---------------------------------------------------

def test_simhalf_unmask_degradation_bounded():
    from fedslice.tensor import PrecisionMode, precision
    rng = np.random.default_rng(41)
    pads = Rng(41, "pads")
    worst_c = 0.0
    for _ in range(50):
        e = rng.normal(size=(4, 4))
        w = rng.normal(size=(4, 4))
        ledger = PadLedger()
        pad = gen_mask((4, 4), pads, MaskDistribution(scale=None), ledger,
                       reference=e)
        with precision(PrecisionMode.SIM_HALF):
            payload = mask(Tensor(e), pad).payload
            h_en = payload @ Tensor(w.T)
            got = unmask_affine(h_en, Tensor(pad.values) @ Tensor(w.T)).data
        want = e @ w.T
        magnitude = np.maximum(np.abs(want), 1.0)
        worst_c = max(worst_c, np.max(np.abs(got - want) / (2.0 ** -11 * magnitude)))
    # measured degradation constant, reported for the record
    print(f"simhalf unmask degradation constant c = {worst_c:.1f}")
    assert worst_c < 64.0


# --- statistical smoke -------------------------------------------------------------

def test_masked_payload_never_equals_plaintext():
    rng = Rng(5, "leak-smoke")
    data_rng = np.random.default_rng(5)
    for _ in range(1000):
        ledger = PadLedger()
        e = data_rng.normal(size=(2, 2))
        pad = gen_mask((2, 2), rng, ledger=ledger)
        payload = mask(Tensor(e), pad).payload.data
        assert np.all(payload != e)
