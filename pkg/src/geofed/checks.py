"""Verification suites behind the ``gradcheck`` and ``protocheck`` subcommands."""

from __future__ import annotations

import numpy as np

from . import diffengine as de
from . import efm, gie
from .fedcore import RoundMessage, aggregate
from .logo import blend
from .rng import stream
from .segmodel import (ModelConfig, ParamVector, balance_forward, bind, decode, encode, flatten,
                       init_balance, init_model, segnet_layout, unflatten)

GRAD_TOL = 1e-4


KINK_MARGIN = 1e-4


def _min_preactivation(params: ParamVector, image) -> float:
    net = unflatten(params, params.layout)
    x, smallest = de.Tensor(image), np.inf
    for layer in net.encoder:
        z = de.conv3x3(x, layer.weight, layer.bias)
        smallest = min(smallest, float(np.abs(z.data).min()))
        x = de.relu(z)
    return smallest


def _case(seed: int, size: int = 8, num_classes: int = 4, dim: int = 8):
    """Random image, mask and jittered parameters for one gradient check.

    Finite differences are meaningless across a ReLU kink, so the jitter is
    redrawn until every encoder pre-activation is at least ``KINK_MARGIN``
    away from zero.
    """
    cfg = ModelConfig(num_classes=num_classes, embed_dim=dim)
    base = flatten(init_model(cfg, seed))
    for attempt in range(100):
        rng = stream(seed, "gradcheck", attempt)
        params = base.replace(base.values + rng.normal(0, 0.05, len(base)))
        image = rng.uniform(0, 1, (1, size, size, 3))
        if _min_preactivation(params, image) > KINK_MARGIN:
            break
    mask = rng.integers(0, num_classes, (1, size, size))
    return cfg, params, image, mask, rng


def _bank(rng, num_classes, dim, owner=0):
    return efm.PrototypeBank(owner, rng.normal(size=(num_classes, dim)),
                             np.ones(num_classes, bool), 1)


def ce_plain(seed: int) -> float:
    _, params, image, mask, _ = _case(seed)

    def f(theta):
        net = bind(theta, params.layout)
        return gie.ce_loss(decode(net, encode(net, image)), mask)

    return de.check_gradient(f, params.values)


def ce_perturbed(seed: int) -> float:
    cfg, params, image, mask, rng = _case(seed)
    freq = gie.class_frequency(mask, cfg.num_classes)
    scale = gie.perturbation_scale(freq, sigma=1.0)

    def f(theta):
        net = bind(theta, params.layout)
        feats = gie.perturb_features(encode(net, image), mask, scale,
                                     stream(seed, "perturb"), ignore_index=None)
        return gie.ce_loss(decode(net, feats), mask)

    return de.check_gradient(f, params.values)


def intra(seed: int) -> float:
    cfg, params, image, mask, rng = _case(seed)
    feats = rng.normal(size=(1, 8, 8, cfg.embed_dim))
    bank = _bank(rng, cfg.num_classes, cfg.embed_dim)
    return de.check_gradient(lambda e: efm.intra_contrastive_loss(e, mask, bank, 0.05), feats)


def inter(seed: int) -> float:
    cfg, params, image, mask, rng = _case(seed)
    feats = rng.normal(size=(1, 8, 8, cfg.embed_dim))
    banks = [_bank(rng, cfg.num_classes, cfg.embed_dim, o) for o in (1, 2)]
    return de.check_gradient(lambda e: efm.inter_contrastive_loss(e, mask, banks, 0.05), feats)


def blended_ce(seed: int) -> float:
    cfg, params, image, mask, rng = _case(seed)
    local = unflatten(params, params.layout)
    glob = unflatten(params.replace(params.values + rng.normal(0, 0.1, len(params))),
                     params.layout)
    bal = flatten(init_balance(cfg, seed))
    bal = bal.replace(bal.values + rng.normal(0, 0.1, len(bal)))
    r_l = encode(local, image)
    r_g = encode(glob, image)

    def f(theta):
        k = balance_forward(bind(theta, bal.layout), image)
        return gie.ce_loss(decode(local, blend(r_l, r_g, k)), mask)

    return de.check_gradient(f, bal.values)


GRADIENT_TERMS = {
    "ce": ce_plain,
    "ce_perturbed": ce_perturbed,
    "intra": intra,
    "inter": inter,
    "blended_ce": blended_ce,
}


def gradient_suite(seeds=range(20), terms=None) -> dict[str, float]:
    """Worst relative error per loss term over ``seeds``."""
    terms = terms or list(GRADIENT_TERMS)
    return {name: max(GRADIENT_TERMS[name](s) for s in seeds) for name in terms}


def secure_sum_case(seed: int) -> tuple[bool, bool]:
    """One random ring: (exact result, no message equals a raw weighted vector)."""
    rng = stream(seed, "protocheck")
    n = int(rng.integers(2, 9))
    C = int(rng.integers(2, 25))
    counts = [rng.integers(0, 10 ** 6, C) for _ in range(n)]
    weights = [int(w) for w in rng.integers(1, 100, n)]
    transcript: list = []
    result = gie.secure_sum(counts, weights, seed=seed, transcript=transcript)
    direct = np.zeros(C, dtype=np.int64)
    for w, c in zip(weights, counts):
        direct += w * c
    exact = np.array_equal(result.counts, direct.astype(np.float64))
    raws = [w * c for w, c in zip(weights, counts)]
    hidden = all(not np.array_equal(msg, r) for _, msg in transcript for r in raws)
    return exact, hidden


def aggregation_case(seed: int) -> bool:
    rng = stream(seed, "protocheck", 1)
    layout = segnet_layout(ModelConfig(num_classes=3, embed_dim=2, hidden=(2,)))
    n = int(rng.integers(1, 6))
    counts = [int(c) for c in rng.integers(1, 50, n)]
    msgs = [RoundMessage(i, 1, ParamVector(rng.normal(size=sum(l.size for l in layout)), layout),
                         None, counts[i]) for i in range(n)]
    total = sum(counts)
    expected = sum(msgs[i].params.values * (counts[i] / total) for i in range(n))
    return bool(np.allclose(aggregate(msgs).values, expected, rtol=0, atol=1e-12))


def protocol_suite(cases: int = 100) -> dict[str, bool]:
    ring = [secure_sum_case(s) for s in range(cases)]
    return {
        "secure_sum_exact": all(e for e, _ in ring),
        "secure_sum_hidden": all(h for _, h in ring),
        "aggregation": all(aggregation_case(s) for s in range(cases)),
    }

