import numpy as np
import numpy.testing as npt

from geofed import logo
from geofed import diffengine as de
from geofed.diffengine import Tape, Tensor
from geofed.gie import ce_loss
from geofed.segmodel import ModelConfig, flatten, init_balance, init_model


def _state(lr_b=0.01, lr_l=0.001, same=True):
    cfg = ModelConfig()
    local = flatten(init_model(cfg, 0))
    glob = local if same else flatten(init_model(cfg, 1))
    return logo.LogoState(local, glob, flatten(init_balance(cfg, 0)), lr_l, lr_b)


def test_blend_examples():
    r_l, r_g = Tensor(np.ones((2, 2, 2, 3))), Tensor(np.full((2, 2, 2, 3), 3.0))
    npt.assert_array_equal(logo.blend(r_l, r_g, (0.25, 0.75)).data, 2.5)
    npt.assert_array_equal(logo.blend(r_l, r_g, (1.0, 0.0)).data, r_l.data)
    k = Tensor(np.array([[0.2, 0.8], [0.9, 0.1]]))
    npt.assert_array_equal(logo.blend(r_l, r_l, k).data, r_l.data)


def test_fresh_round_blend_equals_local():
    st = _state()
    out = logo.state_forward(st, np.random.default_rng(0).random((2, 8, 8, 3)))
    npt.assert_allclose(out.blended_logits.data, out.local_logits.data, rtol=0, atol=1e-15)


def test_zeroed_balnet():
    st = _state()
    st = logo.LogoState(st.local, st.global_params, st.balance.replace(np.zeros(len(st.balance))))
    out = logo.state_forward(st, np.ones((3, 8, 8, 3)))
    npt.assert_array_equal(out.coeffs.data, 0.5)


def _step(st, images, mask):
    with Tape() as tape:
        b = st.bind()
        out = logo.logo_forward(b.local, b.global_net, b.balance, images, st.pin)
        li = ce_loss(out.local_logits, mask)
        lb = ce_loss(out.blended_logits, mask)
        return logo.dual_update(st, tape, b, li, lb), tape, b, li, lb


def test_dual_gradients_are_separated():
    st = _state(same=False)
    rng = np.random.default_rng(0)
    images, mask = rng.random((2, 8, 8, 3)), rng.integers(0, 6, (2, 8, 8))
    with Tape() as tape:
        b = st.bind()
        out = logo.logo_forward(b.local, b.global_net, b.balance, images)
        lb = ce_loss(out.blended_logits, mask)
        gb_local = de.backward(tape, lb)[b.local_flat.node_id]
    # the balancing loss only reaches the local decoder, never the encoder
    n_enc = sum(l.size for l in st.local.layout[:-1])
    assert not gb_local[:n_enc].any()
    li_only, _ = logo.dual_gradients(tape, b, ce_loss(out.local_logits, mask), lb)
    assert np.isfinite(li_only).all()


def test_zero_balance_lr_keeps_balnet():
    st = _state(lr_b=0.0, same=False)
    rng = np.random.default_rng(0)
    new, *_ = _step(st, rng.random((2, 8, 8, 3)), rng.integers(0, 6, (2, 8, 8)))
    assert new.balance.equals(st.balance)
    assert not new.local.equals(st.local)
    assert new.global_params.equals(st.global_params)


def test_dead_balance_unit_unchanged():
    st = _state(same=False)
    v = st.balance.values.copy()
    # kill hidden unit 0: its conv weights and bias make it zero for nonnegative input
    conv = st.balance.layout[0]
    w = v[:int(np.prod(conv.weight))].reshape(conv.weight)
    w[..., 0] = -1.0
    v[:w.size] = w.reshape(-1)
    v[w.size] = -1.0
    st = logo.LogoState(st.local, st.global_params, st.balance.replace(v), 0.001, 0.5)
    rng = np.random.default_rng(1)
    new, *_ = _step(st, rng.random((2, 8, 8, 3)), rng.integers(0, 6, (2, 8, 8)))
    head_start = conv.size
    npt.assert_array_equal(new.balance.values[head_start:head_start + 2],
                           st.balance.values[head_start:head_start + 2])  # row 0 of the head
    assert not new.balance.equals(st.balance)


def test_zero_gradients_fixed_point():
    st = _state()
    once = logo.apply_dual(st, np.zeros(len(st.local)), np.zeros(len(st.balance)))
    twice = logo.apply_dual(once, np.zeros(len(st.local)), np.zeros(len(st.balance)))
    assert twice.local.equals(st.local) and twice.balance.equals(st.balance)


def test_pin_overrides_balnet():
    st = _state(same=False)
    st = logo.LogoState(st.local, st.global_params, st.balance, pin=(1.0, 0.0))
    out = logo.state_forward(st, np.random.default_rng(0).random((1, 8, 8, 3)))
    npt.assert_array_equal(out.blended_logits.data, out.local_logits.data)
