import numpy as np
import numpy.testing as npt
import pytest

from geofed import segmodel as sm
from geofed.diffengine import Tensor
from geofed.fedcore import RoundMessage, aggregate


def test_init_deterministic():
    cfg = sm.ModelConfig()
    a = sm.flatten(sm.init_model(cfg, 3))
    b = sm.flatten(sm.init_model(cfg, 3))
    assert a.equals(b)
    assert not a.equals(sm.flatten(sm.init_model(cfg, 4)))


def test_default_layout():
    layout = sm.segnet_layout(sm.ModelConfig())
    assert [l.name for l in layout] == ["enc0", "enc1", "enc2", "dec"]
    assert layout[-1].weight == (8, 6)
    assert layout[0].weight == (3, 3, 3, 8)


def test_glorot_limits_and_zero_bias():
    cfg = sm.ModelConfig()
    net = sm.init_model(cfg, 0)
    w = net.encoder[0].weight.data
    assert np.abs(w).max() <= np.sqrt(6 / (27 + 72))
    for layer in net.layers:
        assert not layer.bias.data.any()


def test_flatten_roundtrip():
    net = sm.init_model(sm.ModelConfig(), 1)
    pv = sm.flatten(net)
    again = sm.flatten(sm.unflatten(pv, pv.layout))
    assert pv.equals(again)


def test_param_vector_validates_length():
    layout = sm.segnet_layout(sm.ModelConfig())
    with pytest.raises(sm.LayoutError):
        sm.ParamVector(np.zeros(3), layout)


def test_param_vector_read_only():
    pv = sm.flatten(sm.init_model(sm.ModelConfig(), 0))
    with pytest.raises(ValueError):
        pv.values[0] = 1.0


def test_check_layouts_names_layer():
    a = sm.segnet_layout(sm.ModelConfig())
    b = sm.segnet_layout(sm.ModelConfig(num_classes=5))
    with pytest.raises(sm.LayoutError, match="dec"):
        sm.check_layouts(a, b)


def test_aggregate_rejects_mixed_layouts():
    pa = sm.flatten(sm.init_model(sm.ModelConfig(), 0))
    pb = sm.flatten(sm.init_model(sm.ModelConfig(embed_dim=4), 0))
    with pytest.raises(sm.LayoutError):
        aggregate([RoundMessage(0, 1, pa, None, 1), RoundMessage(1, 1, pb, None, 1)])


def test_encode_zero_image_zero_features():
    net = sm.init_model(sm.ModelConfig(), 0)
    out = sm.encode(net, np.zeros((8, 8, 3)))
    assert out.shape == (1, 8, 8, 8)
    assert not out.data.any()


def test_encode_batched_shape():
    net = sm.init_model(sm.ModelConfig(embed_dim=5), 0)
    assert sm.encode(net, np.ones((2, 8, 12, 3))).shape == (2, 8, 12, 5)


def test_decode_zero_features():
    net = sm.init_model(sm.ModelConfig(), 0)
    assert not sm.decode(net, Tensor(np.zeros((1, 4, 4, 8)))).data.any()


def test_balance_zeroed_gives_half():
    cfg = sm.ModelConfig()
    bal = sm.init_balance(cfg, 0)
    pv = sm.flatten(bal)
    zero = sm.unflatten(pv.replace(np.zeros(len(pv))), pv.layout)
    npt.assert_array_equal(sm.balance_forward(zero, np.random.default_rng(0).random((3, 8, 8, 3))).data,
                           np.full((3, 2), 0.5))


def test_balance_closed_form():
    cfg = sm.ModelConfig()
    pv = sm.flatten(sm.init_balance(cfg, 0))
    values = np.zeros(len(pv))
    values[-2] = np.log(3.0)  # bias of the K_l logit
    net = sm.unflatten(pv.replace(values), pv.layout)
    npt.assert_allclose(sm.balance_forward(net, np.ones((1, 8, 8, 3))).data, [[0.75, 0.25]],
                        rtol=0, atol=1e-15)


def test_bind_matches_unflatten():
    pv = sm.flatten(sm.init_model(sm.ModelConfig(), 2))
    img = np.random.default_rng(0).random((1, 8, 8, 3))
    a = sm.encode(sm.unflatten(pv, pv.layout), img).data
    b = sm.encode(sm.bind(Tensor(pv.values, requires_grad=True), pv.layout), img).data
    npt.assert_array_equal(a, b)


def test_checkpoint_roundtrip(tmp_path):
    pv = sm.flatten(sm.init_model(sm.ModelConfig(), 5))
    sm.save_checkpoint(pv, tmp_path / "m")
    assert sm.load_checkpoint(tmp_path / "m").equals(pv)


def test_predict_range():
    net = sm.init_model(sm.ModelConfig(), 0)
    pred = sm.predict(net, np.random.default_rng(1).random((2, 8, 8, 3)))
    assert pred.shape == (2, 8, 8)
    assert pred.min() >= 0 and pred.max() < 6


def test_model_config_rejects_tiny():
    with pytest.raises(ValueError):
        sm.ModelConfig(num_classes=1)


def test_decode_linear_without_bias():
    net = sm.init_model(sm.ModelConfig(), 0)
    f = np.random.default_rng(0).normal(size=(1, 4, 4, 8))
    npt.assert_allclose(sm.decode(net, Tensor(2.5 * f)).data, 2.5 * sm.decode(net, Tensor(f)).data,
                        rtol=1e-13)


def test_balance_coefficients_sum_to_one():
    bal = sm.init_balance(sm.ModelConfig(), 4)
    k = sm.balance_forward(bal, np.random.default_rng(0).random((100, 8, 8, 3))).data
    assert (k > 0).all() and (k < 1).all()
    npt.assert_allclose(k.sum(axis=1), 1.0, rtol=0, atol=1e-15)


def test_encode_gradient_check():
    from geofed.diffengine import check_gradient, total
    pv = sm.flatten(sm.init_model(sm.ModelConfig(hidden=(4,), embed_dim=3), 1))
    img = np.random.default_rng(2).random((1, 6, 6, 3))
    assert check_gradient(lambda th: total(sm.encode(sm.bind(th, pv.layout), img)), pv.values) < 1e-4


def test_encode_rejects_wrong_channels():
    from geofed.diffengine import ShapeError
    with pytest.raises(ShapeError):
        sm.encode(sm.init_model(sm.ModelConfig(), 0), np.zeros((8, 8, 4)))
