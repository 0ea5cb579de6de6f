"""Global insight enhancement.

Class-frequency accounting, the masked ring sum used to obtain the global
class distribution, inverse-frequency feature perturbation, cross-entropy,
broken-tail detection and tail-regeneration blending.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffengine as de
from .diffengine import Tensor
from .rng import stream
from .segmodel import ParamVector, check_layouts
from .synthdata import IGNORE

MASK_BITS = 40
MAX_COUNT = 2 ** 52


@dataclass(frozen=True)
class ClassDistribution:
    counts: np.ndarray
    frequencies: np.ndarray

    @classmethod
    def from_counts(cls, counts) -> "ClassDistribution":
        counts = np.asarray(counts, dtype=np.float64)
        total = counts.sum()
        freqs = counts / total if total > 0 else np.zeros_like(counts)
        return cls(counts, freqs)

    @property
    def total(self) -> float:
        return float(self.counts.sum())


@dataclass(frozen=True)
class PerturbationScale:
    scales: np.ndarray
    sigma: float = 1.0
    epsilon: float = 1e-6


def class_frequency(masks, num_classes: int, ignore_index: int | None = IGNORE) -> ClassDistribution:
    """Pixel share of every category; ignored pixels count in neither numerator nor denominator."""
    if isinstance(masks, (list, tuple)):
        if not masks:
            raise ValueError("class_frequency: no masks given")
        flat = np.concatenate([np.asarray(m).reshape(-1) for m in masks])
    else:
        flat = np.asarray(masks).reshape(-1)
    if flat.size == 0:
        raise ValueError("class_frequency: no masks given")
    if ignore_index is not None:
        flat = flat[flat != ignore_index]
    if flat.size and flat.max() >= num_classes:
        raise ValueError(f"class_frequency: category id {flat.max()} >= {num_classes}")
    return ClassDistribution.from_counts(np.bincount(flat.astype(np.int64), minlength=num_classes))


def _as_int_counts(vec) -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64)
    if not np.all(arr == np.round(arr)) or (arr < 0).any():
        raise ValueError("secure_sum: counts must be nonnegative integers")
    if (arr > MAX_COUNT).any():
        raise OverflowError("secure_sum: count exceeds 2**52")
    return arr.astype(np.int64)


def secure_sum(local_counts, weights=None, seed: int = 0, mask=None,
               transcript: list | None = None) -> ClassDistribution:
    """Ring summation of weighted count vectors hidden behind a random mask.

    Institution 0 draws ``mask`` (uniform integers in ``[0, 2**40)``) and sends
    ``mask + w_0 * P_0``; every following institution adds its own ``w_k * P_k``
    and forwards; the last message returns to institution 0, which removes the
    mask. Only the running masked sums travel; they are appended to
    ``transcript`` as ``(step, vector)`` when a list is given.
    """
    n = len(local_counts)
    if n < 2:
        raise ValueError("secure_sum needs at least 2 institutions; one would expose its vector")
    vectors = [_as_int_counts(v) for v in local_counts]
    size = vectors[0].size
    if any(v.size != size for v in vectors):
        raise ValueError("secure_sum: count vectors differ in length")
    weights = [1] * n if weights is None else list(weights)
    if len(weights) != n:
        raise ValueError("secure_sum: one weight per institution required")
    weighted = []
    for w, v in zip(weights, vectors):
        if int(w) != w or w < 0:
            raise ValueError("secure_sum: weights must be nonnegative integers")
        if int(w) and (v > MAX_COUNT // int(w)).any():
            raise OverflowError("secure_sum: weighted count exceeds 2**52")
        weighted.append(int(w) * v)
    if sum(int(x.sum()) for x in weighted) > MAX_COUNT:
        raise OverflowError("secure_sum: total count exceeds 2**52")

    if mask is None:
        mask = stream(seed, "mask").integers(0, 2 ** MASK_BITS, size=size, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.int64)
    message = mask + weighted[0]
    if transcript is not None:
        transcript.append((0, message.copy()))
    for k in range(1, n):
        message = message + weighted[k]
        if transcript is not None:
            transcript.append((k, message.copy()))
    return ClassDistribution.from_counts(message - mask)


def write_transcript(transcript, path) -> None:
    """JSON lines, one ``{"step": k, "message": [...]}`` per ring hop."""
    with Path(path).open("w") as fh:
        for step, vec in transcript:
            fh.write(json.dumps({"step": int(step), "message": [int(v) for v in vec]}) + "\n")


def perturbation_scale(global_freq, epsilon: float = 1e-6, sigma: float = 1.0) -> PerturbationScale:
    """Softmax of inverse frequencies ``1 / (f_c + epsilon)``."""
    f = np.asarray(getattr(global_freq, "frequencies", global_freq), dtype=np.float64)
    inv = 1.0 / (f + epsilon)
    e = np.exp(inv - inv.max())
    return PerturbationScale(e / e.sum(), float(sigma), float(epsilon))


def perturb_features(features: Tensor, mask, scale: PerturbationScale,
                     rng: np.random.Generator, ignore_index: int | None = IGNORE) -> Tensor:
    """Add ``scale[c] * |N(0, sigma^2)|`` to every channel of every pixel of true category c.

    Ignored pixels are left untouched. Training-time only.
    """
    if scale.sigma == 0 or not np.any(scale.scales):
        return features
    mask = np.asarray(mask)
    labels = mask.astype(np.int64)
    counted = np.ones(mask.shape, bool) if ignore_index is None else mask != ignore_index
    per_pixel = np.where(counted, scale.scales[np.where(counted, labels, 0)], 0.0)
    noise = np.abs(rng.normal(0.0, scale.sigma, size=features.shape))
    return de.add(features, per_pixel[..., None] * noise)


def ce_loss(logits: Tensor, mask, ignore_index: int | None = IGNORE) -> Tensor:
    """Mean negative log-likelihood of the true category over counted pixels."""
    mask = np.asarray(mask)
    if logits.shape[:-1] != mask.shape:
        raise de.ShapeError("ce_loss", logits.shape, mask.shape)
    flat = mask.reshape(-1)
    rows = np.flatnonzero(flat != ignore_index) if ignore_index is not None \
        else np.arange(flat.size)
    if rows.size == 0:
        raise ValueError("ce_loss: every pixel is ignored")
    logp = de.gather_rows(de.log_softmax(logits), rows)
    return de.scale(de.mean(de.pick(logp, flat[rows].astype(np.int64))), -1.0)


def detect_broken_tail(local_freq, tau: float = 0.005) -> tuple[int, frozenset]:
    """Categories with pixel share below ``tau`` are treated as missing."""
    if not 0 <= tau < 1:
        raise ValueError("tau must lie in [0, 1)")
    f = np.asarray(getattr(local_freq, "frequencies", local_freq), dtype=np.float64)
    kept = f >= tau if tau > 0 else f > 0
    return int(kept.sum()), frozenset(int(c) for c in np.flatnonzero(~kept))


def tail_alpha(num_classes: int, residue: int) -> float:
    if not 0 <= residue <= num_classes:
        raise ValueError("residue must lie in [0, num_classes]")
    return float(np.sqrt(residue / (num_classes + residue))) if residue else 0.0


def tail_regeneration(updated: ParamVector, global_params: ParamVector,
                      num_classes: int, residue: int) -> ParamVector:
    """``alpha * updated + (1 - alpha) * global`` with ``alpha = sqrt(Cr / (C + Cr))``.

    Evaluated as ``global + alpha * (updated - global)`` so equal inputs and
    ``alpha = 0`` both return ``global`` exactly.
    """
    check_layouts(updated.layout, global_params.layout)
    alpha = tail_alpha(num_classes, residue)
    if alpha == 0.0:
        return global_params.replace(global_params.values.copy())
    g = global_params.values
    return global_params.replace(g + alpha * (updated.values - g))
