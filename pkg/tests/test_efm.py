import math

import numpy as np
import numpy.testing as npt
import pytest

from geofed import efm
from geofed.diffengine import Tensor


def _bank(vectors, valid=None, owner=0, rnd=1):
    vectors = np.asarray(vectors, float)
    valid = np.ones(len(vectors), bool) if valid is None else np.asarray(valid)
    return efm.PrototypeBank(owner, vectors, valid, rnd)


def test_extract_mean():
    feats = np.array([[[[1.0, 3.0], [3.0, 5.0]]]])
    bank, counts = efm.extract_prototypes(feats, np.array([[[1, 1]]]), 3)
    npt.assert_array_equal(bank.vectors[1], [2.0, 4.0])
    npt.assert_array_equal(bank.valid, [False, True, False])
    npt.assert_array_equal(counts, [0, 2, 0])


def test_extract_single_pixel_and_ignore():
    feats = np.array([[[[1.0, 3.0], [7.0, 9.0]]]])
    bank, _ = efm.extract_prototypes(feats, np.array([[[0, 255]]]), 2)
    npt.assert_array_equal(bank.vectors[0], [1.0, 3.0])
    assert not bank.valid[1]


def test_ema():
    old = _bank([[0.0, 0.0], [5.0, 5.0]])
    fresh = _bank([[1.0, 1.0], [9.0, 9.0]], valid=[True, False])
    out = efm.ema_update(old, fresh, 0.8, round=3)
    npt.assert_allclose(out.vectors, [[0.8, 0.8], [5.0, 5.0]])
    assert out.round == 3
    npt.assert_array_equal(efm.ema_update(old, _bank([[2, 2], [3, 3]]), 1.0).vectors, [[2, 2], [3, 3]])


def _pixels(vectors):
    return Tensor(np.asarray(vectors, float)[None, None])


def test_intra_uniform_similarities():
    emb = _pixels([[1.0, 0.0]])
    mask = np.array([[[0]]])
    two = _bank([[0.0, 1.0], [0.0, -1.0]])
    assert float(efm.intra_contrastive_loss(emb, mask, two).data) == pytest.approx(math.log(2), abs=1e-12)
    four = _bank([[0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])
    emb3 = _pixels([[1.0, 0.0, 0.0]])
    assert float(efm.intra_contrastive_loss(emb3, mask, four).data) == pytest.approx(math.log(4), abs=1e-12)


def test_intra_saturated():
    loss = efm.intra_contrastive_loss(_pixels([[1.0, 0.0]]), np.array([[[0]]]),
                                      _bank([[1.0, 0.0], [-1.0, 0.0]]), tau=0.05)
    assert float(loss.data) == pytest.approx(4.248354255291589e-18, rel=1e-6)


def test_intra_undefined_returns_zero():
    before = efm.counters["intra_undefined"]
    loss = efm.intra_contrastive_loss(_pixels([[1.0, 0.0]]), np.array([[[0]]]),
                                      _bank([[1.0, 0.0], [0.0, 1.0]], valid=[True, False]))
    assert float(loss.data) == 0.0
    assert efm.counters["intra_undefined"] == before + 1


def test_inter_reduces_to_intra():
    emb, mask = _pixels([[1.0, 0.0]]), np.array([[[0]]])
    bank = _bank([[0.0, 1.0], [0.0, -1.0]])
    a = efm.intra_contrastive_loss(emb, mask, bank).data
    b = efm.inter_contrastive_loss(emb, mask, [bank]).data
    assert float(b) == float(a) == pytest.approx(math.log(2))


def test_inter_mean_and_gating():
    emb, mask = _pixels([[1.0, 0.0], [0.6, 0.8]]), np.array([[[0, 1]]])
    b1 = _bank([[1.0, 0.2], [0.1, 1.0]], owner=1)
    b2 = _bank([[0.3, 1.0], [1.0, -0.5]], owner=2)
    la = float(efm.inter_contrastive_loss(emb, mask, [b1]).data)
    lb = float(efm.inter_contrastive_loss(emb, mask, [b2]).data)
    both = float(efm.inter_contrastive_loss(emb, mask, [b1, b2]).data)
    assert both == pytest.approx((la + lb) / 2, abs=1e-14)
    broken = _bank([[1.0, 0.0], [0.0, 1.0]], valid=[True, False], owner=3)
    assert float(efm.inter_contrastive_loss(emb, mask, [b1, broken]).data) == pytest.approx(la, abs=1e-14)


def test_prototypes_are_constants():
    from geofed.diffengine import Tape, backward
    emb = Tensor(np.array([[[[1.0, 0.2]]]]), requires_grad=True)
    with Tape() as tape:
        loss = efm.intra_contrastive_loss(emb, np.array([[[0]]]), _bank([[1.0, 0.0], [0.0, 1.0]]))
        grads = backward(tape, loss)
    assert list(grads) == [emb.node_id]


def test_distribution():
    banks = [_bank([[1.0, 0.0], [0.0, 1.0]], owner=i) for i in range(3)]
    out = efm.merge_and_distribute(banks)
    assert all(len(v) == 2 for v in out.values())
    assert all(b.owner != k for k, v in out.items() for b in v)


def test_server_rejects_stale_round():
    s = efm.PrototypeServer()
    s.submit(_bank([[1.0, 0.0]], rnd=3))
    with pytest.raises(ValueError, match="older"):
        s.submit(_bank([[1.0, 0.0]], rnd=2))


def test_sample_pixels_cap_and_ignore():
    mask = np.full((2, 10, 10), 255)
    mask[0, :5] = 1
    mask[1] = 0
    idx = efm.sample_pixels(mask, np.random.default_rng(0), per_image=20)
    assert len(idx) == 40
    assert (mask.reshape(-1)[idx] != 255).all()
    assert (idx[:20] < 100).all() and (idx[20:] >= 100).all()
