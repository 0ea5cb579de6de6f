"""Essential feature mining: prototype banks and the two contrastive losses."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import diffengine as de
from .diffengine import Tensor
from .rng import stream
from .synthdata import IGNORE

GLOBAL = -1

# incremented whenever a contrastive loss is undefined and returns 0
counters = {"intra_undefined": 0, "inter_undefined": 0}


@dataclass(frozen=True, eq=False)
class PrototypeBank:
    owner: int
    vectors: np.ndarray  # (C, D), stored unnormalised
    valid: np.ndarray  # (C,) bool
    round: int = 0

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]

    def normalized(self) -> np.ndarray:
        norm = np.linalg.norm(self.vectors, axis=1, keepdims=True)
        return self.vectors / np.maximum(norm, de.NORM_FLOOR)

    def to_dict(self) -> dict:
        return {"owner": self.owner, "round": self.round,
                "vectors": self.vectors.tolist(), "valid": self.valid.astype(int).tolist()}


def init_bank(owner: int, num_classes: int, dim: int, seed: int) -> PrototypeBank:
    """N(0, 1) vectors, nothing observed yet."""
    vectors = stream(seed, "proto_init", owner).standard_normal((num_classes, dim))
    return PrototypeBank(owner, vectors, np.zeros(num_classes, bool), 0)


def extract_prototypes(features, mask, num_classes: int,
                       ignore_index: int | None = IGNORE) -> tuple[PrototypeBank, np.ndarray]:
    """Masked average pooling of pixel embeddings per category.

    Returns a bank (owner ``GLOBAL``, round -1) with invalid rows for absent
    categories, and the per-category pixel counts.
    """
    feats = np.asarray(getattr(features, "data", features), dtype=np.float64)
    mask = np.asarray(mask)
    if feats.shape[:-1] != mask.shape:
        raise de.ShapeError("extract_prototypes", feats.shape, mask.shape)
    dim = feats.shape[-1]
    flat_f = feats.reshape(-1, dim)
    flat_m = mask.reshape(-1).astype(np.int64)
    keep = flat_m != ignore_index if ignore_index is not None else np.ones(flat_m.size, bool)
    sums = np.zeros((num_classes, dim))
    np.add.at(sums, flat_m[keep], flat_f[keep])
    counts = np.bincount(flat_m[keep], minlength=num_classes).astype(np.float64)
    valid = counts > 0
    vectors = np.zeros_like(sums)
    vectors[valid] = sums[valid] / counts[valid, None]
    return PrototypeBank(GLOBAL, vectors, valid, -1), counts


def ema_update(bank: PrototypeBank, fresh: PrototypeBank, gamma: float,
               round: int | None = None) -> PrototypeBank:
    """``gamma * fresh + (1 - gamma) * old`` on categories valid in ``fresh``."""
    if not 0 <= gamma <= 1:
        raise ValueError("gamma must lie in [0, 1]")
    if fresh.vectors.shape != bank.vectors.shape:
        raise de.ShapeError("ema_update", bank.vectors.shape, fresh.vectors.shape)
    v = fresh.valid
    vectors = bank.vectors.copy()
    vectors[v] = gamma * fresh.vectors[v] + (1 - gamma) * bank.vectors[v]
    return replace(bank, vectors=vectors, valid=bank.valid | v,
                   round=bank.round if round is None else round)


def sample_pixels(mask, rng: np.random.Generator, per_image: int = 256,
                  ignore_index: int | None = IGNORE) -> np.ndarray:
    """Flat pixel indices into ``(N*H*W)``, at most ``per_image`` uniform picks per image."""
    mask = np.asarray(mask)
    n = mask.shape[0]
    hw = mask[0].size
    picked = []
    for i in range(n):
        m = mask[i].reshape(-1)
        cand = np.flatnonzero(m != ignore_index) if ignore_index is not None else np.arange(hw)
        if cand.size > per_image:
            cand = np.sort(rng.choice(cand, size=per_image, replace=False))
        picked.append(cand + i * hw)
    return np.concatenate(picked) if picked else np.zeros(0, np.int64)


def _all_pixels(mask, ignore_index):
    flat = np.asarray(mask).reshape(-1)
    return np.flatnonzero(flat != ignore_index) if ignore_index is not None else np.arange(flat.size)


def _info_nce(rows: Tensor, labels: np.ndarray, bank: PrototypeBank, tau: float):
    """Mean InfoNCE of normalised ``rows`` against the valid prototypes of ``bank``.

    Returns None when the bank has fewer than two valid categories or none of
    the row labels is valid in it.
    """
    valid_ids = np.flatnonzero(bank.valid)
    if valid_ids.size < 2:
        return None
    keep = bank.valid[labels]
    if not keep.any():
        return None
    position = np.full(bank.num_classes, -1)
    position[valid_ids] = np.arange(valid_ids.size)
    protos = bank.normalized()[valid_ids]  # constants: no gradient into the bank
    sel = np.flatnonzero(keep)
    r = rows if sel.size == rows.shape[0] else de.gather_rows(rows, sel)
    sims = de.scale(de.matmul(r, protos.T), 1.0 / tau)
    logp = de.pick(de.log_softmax(sims), position[labels[sel]])
    return de.scale(de.mean(logp), -1.0)


def _rows(embeddings: Tensor, mask, pixels, ignore_index):
    if pixels is None:
        pixels = _all_pixels(mask, ignore_index)
    labels = np.asarray(mask).reshape(-1)[pixels].astype(np.int64)
    return de.l2_normalize(de.gather_rows(embeddings, pixels)), labels


def intra_contrastive_loss(embeddings: Tensor, mask, bank: PrototypeBank, tau: float = 0.05,
                           pixels=None, ignore_index: int | None = IGNORE) -> Tensor:
    """InfoNCE of each pixel against its own institution's prototypes.

    ``pixels`` are flat indices from :func:`sample_pixels`; all counted pixels
    are used when omitted. Returns a constant 0 (and bumps a counter) when the
    loss is undefined.
    """
    rows, labels = _rows(embeddings, mask, pixels, ignore_index)
    loss = _info_nce(rows, labels, bank, tau) if labels.size else None
    if loss is None:
        counters["intra_undefined"] += 1
        return Tensor(0.0)
    return loss


def inter_contrastive_loss(embeddings: Tensor, mask, foreign_banks, tau: float = 0.05,
                           pixels=None, ignore_index: int | None = IGNORE) -> Tensor:
    """Mean over contributing foreign banks of the per-bank InfoNCE.

    A bank contributes for the pixels whose category it has observed; banks
    that cannot form a term are skipped.
    """
    rows, labels = _rows(embeddings, mask, pixels, ignore_index)
    terms = [t for t in (_info_nce(rows, labels, b, tau) for b in foreign_banks) if t is not None] \
        if labels.size else []
    if not terms:
        counters["inter_undefined"] += 1
        return Tensor(0.0)
    acc = terms[0]
    for t in terms[1:]:
        acc = de.add(acc, t)
    return de.scale(acc, 1.0 / len(terms))


def merge_and_distribute(banks) -> dict[int, list[PrototypeBank]]:
    """Every institution receives the latest bank of every other institution, unchanged."""
    banks = sorted(banks, key=lambda b: b.owner)
    return {b.owner: [o for o in banks if o.owner != b.owner] for b in banks}


class PrototypeServer:
    """Keeps the latest bank per owner; older round stamps are rejected."""

    def __init__(self):
        self.latest: dict[int, PrototypeBank] = {}

    def submit(self, bank: PrototypeBank) -> None:
        prev = self.latest.get(bank.owner)
        if prev is not None and bank.round < prev.round:
            raise ValueError(f"bank from institution {bank.owner} is older than the stored one")
        self.latest[bank.owner] = bank

    def distribute(self) -> dict[int, list[PrototypeBank]]:
        return merge_and_distribute(self.latest.values())
