import dataclasses

import numpy as np
import numpy.testing as npt
import pytest

from geofed import fedcore as fc
from geofed.segmodel import ModelConfig, ParamVector, flatten, init_model, segnet_layout
from geofed.synthdata import benchmark_profiles, generate_dataset

SMALL = dict(institutions=2, rounds=2, image_size=16, sample_counts=(10, 10), embed_dim=4,
             lr_local=0.1, batch_size=3)


def _layout():
    return segnet_layout(ModelConfig(num_classes=2, embed_dim=2, hidden=(2,)))


def _msg(i, values, count):
    layout = _layout()
    full = np.zeros(sum(l.size for l in layout))
    full[:len(values)] = values
    return fc.RoundMessage(i, 1, ParamVector(full, layout), None, count)


def test_aggregate_examples():
    out = fc.aggregate([_msg(0, [0, 0], 1), _msg(1, [4, 8], 3)])
    npt.assert_array_equal(out.values[:2], [3, 6])
    same = fc.aggregate([_msg(0, [1.5, -2], 7), _msg(1, [1.5, -2], 2)])
    npt.assert_array_equal(same.values[:2], [1.5, -2])
    mean = fc.aggregate([_msg(0, [1, 2], 5), _msg(1, [3, 6], 5)])
    npt.assert_array_equal(mean.values[:2], [2, 4])


def test_aggregate_order_independent():
    msgs = [_msg(i, [i * 0.1, 1.0 / (i + 1)], i + 2) for i in range(4)]
    assert fc.aggregate(msgs).equals(fc.aggregate(msgs[::-1]))


def test_config_defaults():
    cfg = fc.ExperimentConfig()
    assert (cfg.lambda1, cfg.lambda2, cfg.temperature, cfg.gamma) == (0.4, 0.6, 0.05, 0.8)
    assert (cfg.rounds, cfg.local_epochs, cfg.batch_size) == (100, 1, 4)


@pytest.mark.parametrize("bad", [dict(lambda1=-1), dict(rounds=0), dict(local_epochs=0),
                                 dict(pin_balance=(0.3, 0.3)), dict(lr_schedule="cosine"),
                                 dict(gamma=1.5)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        fc.ExperimentConfig(**bad)


def test_poly_factor():
    cfg = fc.ExperimentConfig(rounds=10)
    assert cfg.lr_factor(1) == 1.0
    assert cfg.lr_factor(10) == pytest.approx(0.1 ** 0.9)
    assert fc.ExperimentConfig(lr_schedule="constant").lr_factor(7) == 1.0


def test_batches_cover_everything():
    rng = np.random.default_rng(0)
    got = list(fc.batches(10, 3, rng))
    assert [len(b) for b in got] == [3, 3, 3, 1]
    assert sorted(np.concatenate(got)) == list(range(10))
    assert [len(b) for b in fc.batches(10, 0, rng)] == [10]


def test_clip_gradient():
    g = np.array([3.0, 4.0])
    npt.assert_allclose(fc.clip_gradient(g, 1.0), [0.6, 0.8])
    assert fc.clip_gradient(g, 0.0) is g
    assert fc.clip_gradient(g, 10.0) is g


def test_zero_rounds_global_is_init():
    cfg = fc.ExperimentConfig(**SMALL)
    exp = fc.Experiment(cfg)
    assert exp.global_params.equals(flatten(init_model(cfg.model_config, cfg.seed)))


@pytest.mark.parametrize("strategy", list(fc.Strategy))
def test_every_strategy_runs(strategy):
    log = fc.run_experiment(fc.ExperimentConfig(strategy=strategy, **SMALL))
    assert len(log.rows) == 2
    assert 0 <= log.final.global_miou <= 1
    assert len(log.final.per_institution) == 2
    if strategy in (fc.Strategy.GEOFED, fc.Strategy.FEDAVG):
        assert all(abs(s - 1) < 1e-12 for s in log.weight_sums)


def test_determinism_and_threads():
    cfg = fc.ExperimentConfig(**SMALL)
    a = fc.run_experiment(cfg)
    b = fc.run_experiment(dataclasses.replace(cfg, threads=2))
    assert a.final_params.equals(b.final_params)
    assert a.to_csv() == b.to_csv()


def test_zero_lr_geofed_uploads_global():
    cfg = fc.ExperimentConfig(lr_local=0.0, lr_balance=0.0, rounds=1,
                              **{k: v for k, v in SMALL.items() if k not in ("lr_local", "rounds")})
    exp = fc.Experiment(cfg)
    start = exp.global_params
    exp.run_round()
    for m in exp.last_messages:
        assert m.params.equals(start)


def test_messages_carry_no_data():
    exp = fc.Experiment(fc.ExperimentConfig(rounds=1, **{k: v for k, v in SMALL.items()
                                                         if k != "rounds"}))
    exp.run_round()
    for m in exp.last_messages:
        payload = m.to_dict()
        assert set(payload) <= {"institution_id", "round", "params", "layout", "bank",
                                "sample_count"}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_term():
    cfg = fc.ExperimentConfig(lr_local=1e200, lr_balance=0.0, rounds=3,
                              **{k: v for k, v in SMALL.items() if k not in ("lr_local", "rounds")})
    with pytest.raises(fc.DivergenceError, match="L_"):
        fc.run_experiment(cfg)


def test_csv_layout():
    log = fc.run_experiment(fc.ExperimentConfig(strategy="fedavg", **SMALL))
    lines = log.to_csv().splitlines()
    assert lines[0] == "round,strategy,inst_0,inst_1,average,global"
    assert len(lines) == 3


def test_custom_datasets():
    profiles = benchmark_profiles(2, seed=3, sample_counts=(10, 10), size=16)
    data = [generate_dataset(p) for p in profiles]
    log = fc.run_experiment(fc.ExperimentConfig(strategy="fedavg", **SMALL), datasets=data)
    assert len(log.rows) == 2
