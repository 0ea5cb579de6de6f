"""Round-based federated orchestration: GeoFed and the baseline strategies."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np

from . import diffengine as de
from . import efm, gie
from .diffengine import Tape, Tensor
from .logo import LogoState, apply_dual, blend, coefficients, dual_gradients, state_forward
from .metrics import ConfusionCounts, accumulate, global_metric, local_metric, miou
from .rng import stream
from .segmodel import (ModelConfig, ParamVector, bind, check_layouts, decode, encode, flatten,
                       init_balance, init_model, unflatten)
from .synthdata import IGNORE, Dataset, Split, benchmark_profiles, generate_dataset

log = logging.getLogger(__name__)


class Strategy(str, Enum):
    GEOFED = "geofed"
    FEDAVG = "fedavg"
    LOCAL_ONLY = "local_only"
    CENTRALIZED = "centralized"


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    strategy: Strategy = Strategy.GEOFED
    institutions: int = 4
    rounds: int = 100
    local_epochs: int = 1
    batch_size: int = 4  # 0 means full batch
    lr_local: float = 0.001
    lr_balance: float = 0.01
    lambda1: float = 0.4
    lambda2: float = 0.6
    temperature: float = 0.05
    gamma: float = 0.8
    tail_tau: float = 0.005
    sigma: float = 1.0
    epsilon: float = 1e-6
    seed: int = 0
    num_classes: int = 6
    embed_dim: int = 8
    image_size: int = 32
    sample_counts: tuple[int, ...] | None = None
    color_shift: float = 0.12
    tail_regeneration: bool = True
    tr_only_when_broken: bool = False
    ce_on_blend: bool = False
    pin_balance: tuple[float, float] | None = None
    pixels_per_image: int = 256
    eval_institutions: int = 0  # 0: evaluate on the participating institutions only
    lr_schedule: str = "poly"  # "poly" or "constant"
    poly_power: float = 0.9
    grad_clip: float = 0.0  # max L2 norm of a local-model gradient; 0 disables
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if self.rounds < 1 or self.local_epochs < 1:
            raise ValueError("rounds and local_epochs must be >= 1")
        if self.institutions < 1:
            raise ValueError("institutions must be >= 1")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0")
        if self.lr_local < 0 or self.lr_balance < 0:
            raise ValueError("learning rates must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0 <= self.tail_tau < 1:
            raise ValueError("tail_tau must lie in [0, 1)")
        if self.sigma < 0 or self.epsilon <= 0:
            raise ValueError("sigma must be >= 0 and epsilon > 0")
        if self.pin_balance is not None:
            pin = tuple(float(v) for v in self.pin_balance)
            if len(pin) != 2 or min(pin) < 0 or abs(sum(pin) - 1) > 1e-12:
                raise ValueError("pin_balance must be two nonnegative numbers summing to 1")
            object.__setattr__(self, "pin_balance", pin)
        if self.lr_schedule not in ("poly", "constant"):
            raise ValueError("lr_schedule must be 'poly' or 'constant'")
        if self.sample_counts is not None:
            object.__setattr__(self, "sample_counts", tuple(int(v) for v in self.sample_counts))

    def lr_factor(self, round_index: int) -> float:
        """Poly decay ``(1 - (t - 1) / T) ** power`` for 1-based round ``t``."""
        if self.lr_schedule == "constant":
            return 1.0
        return (1.0 - (round_index - 1) / self.rounds) ** self.poly_power

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(num_classes=self.num_classes, embed_dim=self.embed_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        for k in ("sample_counts", "pin_balance"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d


@dataclass(frozen=True, eq=False)
class RoundMessage:
    """What an institution uploads: parameters, prototype bank and sample count."""

    institution_id: int
    round: int
    params: ParamVector
    bank: efm.PrototypeBank | None
    sample_count: int

    def to_dict(self) -> dict:
        return {
            "institution_id": self.institution_id,
            "round": self.round,
            "sample_count": self.sample_count,
            "params": self.params.values.tolist(),
            "layout": [l.to_json() for l in self.params.layout],
            "bank": None if self.bank is None else self.bank.to_dict(),
        }


@dataclass
class Institution:
    institution_id: int
    data: Dataset
    num_classes: int
    counts: gie.ClassDistribution = None  # local pixel counts, computed once
    bank: efm.PrototypeBank | None = None
    balance: ParamVector | None = None
    local: ParamVector | None = None  # last local model (personal / local-only)

    def __post_init__(self):
        if self.counts is None:
            self.counts = gie.class_frequency(self.data.train.masks, self.num_classes)

    @property
    def train(self) -> Split:
        return self.data.train

    @property
    def sample_count(self) -> int:
        return len(self.data.train)


# ---------------------------------------------------------------- helpers


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    size = n if batch_size == 0 else batch_size
    return [order[i:i + size] for i in range(0, n, size)]


def _check_finite(value: Tensor, term: str, institution: int, round_index: int):
    if not np.all(np.isfinite(value.data)):
        raise DivergenceError(
            f"non-finite {term} at institution {institution}, round {round_index}")


def sgd_epochs(params: ParamVector, split: Split, config: ExperimentConfig,
               key: tuple, epochs: int) -> ParamVector:
    """Plain minibatch SGD on pixel cross-entropy (the FedAvg local step).

    ``key`` is ``(institution, round)``; it keys the shuffling stream and the
    round picks the learning-rate factor.
    """
    lr = config.lr_local * config.lr_factor(key[1])
    for epoch in range(epochs):
        for idx in batches(len(split), config.batch_size, stream(config.seed, "shuffle", *key, epoch)):
            masks = split.masks[idx]
            if not np.any(masks != IGNORE):
                continue
            flat = Tensor(params.values, requires_grad=True)
            with Tape() as tape:
                net = bind(flat, params.layout)
                loss = gie.ce_loss(decode(net, encode(net, split.images[idx])), masks)
                de.backward(tape, loss)
            _check_finite(loss, "L_CE", key[0], key[1])
            grad = clip_gradient(tape.grad(flat), config.grad_clip)
            params = params.replace(de.sgd_step(params.values, grad, lr)) if lr > 0 else params
    return params


def clip_gradient(grad: np.ndarray, max_norm: float) -> np.ndarray:
    if max_norm <= 0:
        return grad
    norm = float(np.sqrt(np.dot(grad, grad)))
    return grad * (max_norm / norm) if norm > max_norm else grad


def refresh_bank(inst: Institution, params: ParamVector, gamma: float, round_index: int):
    net = unflatten(params, params.layout)
    feats = encode(net, inst.train.images)
    fresh, _ = efm.extract_prototypes(feats, inst.train.masks, inst.num_classes)
    return efm.ema_update(inst.bank, fresh, gamma, round_index)


def local_update(inst: Institution, global_params: ParamVector, foreign_banks,
                 config: ExperimentConfig, round_index: int,
                 scale: gie.PerturbationScale) -> tuple[RoundMessage, Institution]:
    """One GeoFed local update; returns the upload and the updated institution state."""
    iid = inst.institution_id
    C = inst.num_classes
    use_contrast = config.lambda1 > 0 or config.lambda2 > 0
    factor = config.lr_factor(round_index)
    state = LogoState(local=global_params, global_params=global_params, balance=inst.balance,
                      lr_local=config.lr_local * factor, lr_balance=config.lr_balance * factor,
                      pin=config.pin_balance)
    residue, _ = gie.detect_broken_tail(inst.counts, config.tail_tau)
    bank = inst.bank
    for epoch in range(config.local_epochs):
        key = (iid, round_index, epoch)
        for b, idx in enumerate(batches(len(inst.train), config.batch_size,
                                        stream(config.seed, "shuffle", *key))):
            images, masks = inst.train.images[idx], inst.train.masks[idx]
            if not np.any(masks != IGNORE):
                continue
            with Tape() as tape:
                binding = state.bind()
                r_l = encode(binding.local, images)
                feats = gie.perturb_features(r_l, masks, scale,
                                             stream(config.seed, "perturb", *key, b))
                r_g = de.detach(encode(binding.global_net, images))
                k = coefficients(binding.balance, images, state.pin)
                if config.ce_on_blend:
                    logits = decode(binding.local, blend(feats, r_g, de.detach(k)))
                else:
                    logits = decode(binding.local, feats)
                l_ce = gie.ce_loss(logits, masks)
                _check_finite(l_ce, "L_CE", iid, round_index)
                loss = l_ce
                if use_contrast:
                    pixels = efm.sample_pixels(masks, stream(config.seed, "pixels", *key, b),
                                               config.pixels_per_image)
                    if config.lambda1 > 0:
                        l_inter = efm.inter_contrastive_loss(r_l, masks, foreign_banks,
                                                             config.temperature, pixels)
                        _check_finite(l_inter, "L_inter", iid, round_index)
                        loss = de.add(loss, de.scale(l_inter, config.lambda1))
                    if config.lambda2 > 0:
                        l_intra = efm.intra_contrastive_loss(r_l, masks, bank,
                                                             config.temperature, pixels)
                        _check_finite(l_intra, "L_intra", iid, round_index)
                        loss = de.add(loss, de.scale(l_intra, config.lambda2))
                blended = decode(binding.local, blend(de.detach(r_l), r_g, k))
                l_b = gie.ce_loss(blended, masks)
                _check_finite(l_b, "L_b", iid, round_index)
                gl, gb = dual_gradients(tape, binding, loss, l_b)
                state = apply_dual(state, clip_gradient(gl, config.grad_clip), gb)
        bank = refresh_bank(replace(inst, bank=bank), state.local, config.gamma, round_index)
        if config.tail_regeneration and not (config.tr_only_when_broken and residue == C):
            state = replace(state, local=gie.tail_regeneration(state.local, global_params, C, residue))
    new_inst = replace(inst, bank=bank, balance=state.balance, local=state.local)
    return RoundMessage(iid, round_index, state.local, bank, inst.sample_count), new_inst


def fedavg_update(inst: Institution, global_params: ParamVector, config: ExperimentConfig,
                  round_index: int) -> RoundMessage:
    params = sgd_epochs(global_params, inst.train, config,
                        (inst.institution_id, round_index), config.local_epochs)
    return RoundMessage(inst.institution_id, round_index, params, None, inst.sample_count)


def aggregation_weights(messages) -> np.ndarray:
    counts = np.array([m.sample_count for m in messages], dtype=np.float64)
    return counts / counts.sum()


def aggregate(messages) -> ParamVector:
    """Sample-count weighted mean of the uploaded parameters, in institution order."""
    messages = sorted(messages, key=lambda m: m.institution_id)
    if not messages:
        raise ValueError("aggregate: no messages")
    layout = messages[0].params.layout
    for m in messages[1:]:
        check_layouts(layout, m.params.layout)
    weights = aggregation_weights(messages)
    acc = np.zeros(len(messages[0].params))
    for w, m in zip(weights, messages):
        acc = acc + w * m.params.values
    return ParamVector(acc, layout)


# ---------------------------------------------------------------- evaluation


def _counts(pred: np.ndarray, split: Split, C: int) -> ConfusionCounts:
    return accumulate(pred, split.masks, C)


def _predict(params: ParamVector, images) -> np.ndarray:
    net = unflatten(params, params.layout)
    return decode(net, encode(net, images)).data.argmax(axis=-1)


# ---------------------------------------------------------------- experiment


@dataclass
class RoundRecord:
    round: int
    strategy: str
    per_institution: list[float]
    average: float
    global_miou: float


@dataclass
class MetricsLog:
    strategy: str
    institutions: int
    rows: list[RoundRecord] = field(default_factory=list)
    weight_sums: list[float] = field(default_factory=list)
    final_params: ParamVector | None = None

    @property
    def final(self) -> RoundRecord:
        return self.rows[-1]

    def header(self) -> list[str]:
        return ["round", "strategy"] + [f"inst_{i}" for i in range(self.institutions)] \
            + ["average", "global"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for r in self.rows:
            w.writerow([r.round, r.strategy] + [f"{v:.6f}" for v in r.per_institution]
                       + [f"{r.average:.6f}", f"{r.global_miou:.6f}"])
        return buf.getvalue()

    def summary(self) -> dict:
        f = self.final
        return {"strategy": self.strategy, "rounds": len(self.rows),
                "per_institution": f.per_institution, "average": f.average,
                "global": f.global_miou}


class Experiment:
    """Mutable run state; :meth:`run_round` advances one communication round."""

    def __init__(self, config: ExperimentConfig, datasets: list[Dataset] | None = None):
        self.config = config
        if datasets is None:
            n_profiles = max(config.institutions, config.eval_institutions)
            profiles = benchmark_profiles(n_profiles, config.seed, config.num_classes,
                                          config.sample_counts, config.color_shift,
                                          config.image_size)
            datasets = [generate_dataset(p) for p in profiles]
        if len(datasets) < config.institutions:
            raise ValueError("fewer datasets than institutions")
        self.eval_sets = [d.test for d in datasets[:max(config.institutions,
                                                        config.eval_institutions)]]
        C = config.num_classes
        mc = config.model_config
        self.institutions = [
            Institution(i, d, C, bank=efm.init_bank(i, C, mc.embed_dim, config.seed),
                        balance=flatten(init_balance(mc, config.seed, i)))
            for i, d in enumerate(datasets[:config.institutions])]
        self.global_params = flatten(init_model(mc, config.seed))
        for inst in self.institutions:
            inst.local = self.global_params
        self.server = efm.PrototypeServer()
        self.scale: gie.PerturbationScale | None = None
        self.global_freq: gie.ClassDistribution | None = None
        self.round = 0
        self.log = MetricsLog(config.strategy.value, config.institutions)
        if config.strategy is Strategy.CENTRALIZED:
            self.pooled = Split.concat([inst.train for inst in self.institutions])

    # global class distribution, computed once by the masked ring sum
    def _ensure_scale(self):
        if self.scale is not None:
            return
        counts = [inst.counts.counts for inst in self.institutions]
        if len(counts) >= 2:
            self.global_freq = gie.secure_sum(counts, seed=self.config.seed)
        else:
            self.global_freq = gie.ClassDistribution.from_counts(counts[0])
        self.scale = gie.perturbation_scale(self.global_freq, self.config.epsilon,
                                            self.config.sigma)

    def _map(self, fn, items):
        if self.config.threads > 1:
            with ThreadPoolExecutor(self.config.threads) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]

    def run_round(self) -> RoundRecord:
        cfg = self.config
        t = self.round + 1
        snapshot = self.global_params
        if cfg.strategy is Strategy.GEOFED:
            self._ensure_scale()
            foreign = self.server.distribute()
            results = self._map(
                lambda inst: local_update(inst, snapshot, foreign.get(inst.institution_id, []),
                                          cfg, t, self.scale),
                self.institutions)
            messages = [m for m, _ in results]
            self.institutions = [inst for _, inst in results]
            self._finish_fed_round(messages)
            for m in messages:
                self.server.submit(m.bank)
        elif cfg.strategy is Strategy.FEDAVG:
            messages = self._map(lambda inst: fedavg_update(inst, snapshot, cfg, t),
                                 self.institutions)
            self._finish_fed_round(messages)
        elif cfg.strategy is Strategy.LOCAL_ONLY:
            locals_ = self._map(
                lambda inst: sgd_epochs(inst.local, inst.train, cfg,
                                        (inst.institution_id, t), cfg.local_epochs),
                self.institutions)
            for inst, p in zip(self.institutions, locals_):
                inst.local = p
        elif cfg.strategy is Strategy.CENTRALIZED:
            self.global_params = sgd_epochs(self.global_params, self.pooled, cfg, (0, t),
                                            cfg.local_epochs)
        else:  # pragma: no cover
            raise ValueError(f"unknown strategy {cfg.strategy}")
        self.round = t
        record = self.evaluate()
        self.log.rows.append(record)
        return record

    def _finish_fed_round(self, messages):
        if len(messages) != len(self.institutions):
            raise RuntimeError("missing round messages")
        self.log.weight_sums.append(float(aggregation_weights(messages).sum()))
        self.global_params = aggregate(messages)
        self.last_messages = sorted(messages, key=lambda m: m.institution_id)

    def evaluate(self) -> RoundRecord:
        cfg = self.config
        C = cfg.num_classes
        strategy = cfg.strategy
        per_inst: list[ConfusionCounts] = []
        pooled: list[ConfusionCounts] = []
        if strategy is Strategy.LOCAL_ONLY:
            for inst in self.institutions:
                per_inst.append(_counts(_predict(inst.local, inst.data.test.images),
                                        inst.data.test, C))
                for split in self.eval_sets:
                    pooled.append(_counts(_predict(inst.local, split.images), split, C))
        else:
            for split in self.eval_sets:
                pooled.append(_counts(_predict(self.global_params, split.images), split, C))
            for inst in self.institutions:
                test = inst.data.test
                if strategy is Strategy.GEOFED:
                    state = LogoState(inst.local, self.global_params, inst.balance,
                                      pin=cfg.pin_balance)
                    pred = state_forward(state, test.images).blended_logits.data.argmax(-1)
                else:
                    pred = _predict(self.global_params, test.images)
                per_inst.append(_counts(pred, test, C))
        scores = [miou(c) for c in per_inst]
        return RoundRecord(self.round, strategy.value, scores, local_metric(per_inst),
                           global_metric(pooled))


def run_experiment(config: ExperimentConfig, datasets: list[Dataset] | None = None,
                   callback=None) -> MetricsLog:
    exp = Experiment(config, datasets)
    for _ in range(config.rounds):
        rec = exp.run_round()
        log.debug("round %d %s avg=%.4f global=%.4f", rec.round, rec.strategy,
                  rec.average, rec.global_miou)
        if callback is not None:
            callback(exp, rec)
    exp.log.final_params = exp.global_params
    return exp.log


def threads_from_env(default: int = 1) -> int:
    raw = os.environ.get("GEOFED_THREADS")
    try:
        return max(1, int(raw)) if raw else default
    except ValueError:
        return default
