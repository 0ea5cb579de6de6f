"""Seeded synthetic segmentation data with per-institution heterogeneity.

Each institution samples shape categories from its own ``class_weights``
(label skew, zero weight = missing category) and renders every category with
its own base colour, texture amplitude and shape family (appearance skew).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream

IGNORE = 255
FAMILIES = ("rectangle", "ellipse", "stripe")

# canonical colours for the benchmark categories; institutions shift them
PALETTE = np.array([
    [0.85, 0.20, 0.20],
    [0.20, 0.70, 0.25],
    [0.20, 0.35, 0.85],
    [0.90, 0.80, 0.20],
    [0.70, 0.25, 0.80],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.15],
    [0.55, 0.55, 0.55],
])


@dataclass(frozen=True)
class Appearance:
    color: tuple[float, float, float]
    texture: float = 0.05
    family: str = "rectangle"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown shape family {self.family!r}")


@dataclass(frozen=True)
class InstitutionProfile:
    institution_id: int
    class_weights: tuple[float, ...]
    appearance: tuple[Appearance, ...]
    sample_count: int = 40
    seed: int = 0
    height: int = 32
    width: int = 32
    background: bool = True
    background_color: tuple[float, float, float] = (0.45, 0.40, 0.35)
    background_texture: float = 0.05

    def __post_init__(self):
        w = np.asarray(self.class_weights, dtype=float)
        if w.ndim != 1 or w.size < 2:
            raise ValueError("need at least 2 categories")
        if (w < 0).any() or w.sum() <= 0:
            raise ValueError("class_weights must be nonnegative with positive sum")
        if len(self.appearance) != w.size:
            raise ValueError("one appearance entry per category required")
        if self.height < 8 or self.width < 8:
            raise ValueError("images must be at least 8x8")

    @property
    def num_classes(self) -> int:
        return len(self.class_weights)

    @property
    def probabilities(self) -> np.ndarray:
        w = np.asarray(self.class_weights, dtype=float)
        return w / w.sum()


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) uint8, IGNORE for background
    categories: tuple[int, ...] = ()  # category of every drawn shape, paint order


@dataclass(frozen=True)
class Split:
    images: np.ndarray  # (N, H, W, 3)
    masks: np.ndarray  # (N, H, W)

    def __len__(self):
        return self.images.shape[0]

    @classmethod
    def stack(cls, samples: list[Sample], height: int, width: int) -> "Split":
        if not samples:
            return cls(np.zeros((0, height, width, 3)), np.zeros((0, height, width), np.uint8))
        return cls(np.stack([s.image for s in samples]), np.stack([s.mask for s in samples]))

    @classmethod
    def concat(cls, splits: list["Split"]) -> "Split":
        return cls(np.concatenate([s.images for s in splits]),
                   np.concatenate([s.masks for s in splits]))


@dataclass(frozen=True)
class Dataset:
    profile: InstitutionProfile
    train: Split
    val: Split
    test: Split
    samples: tuple[Sample, ...] = field(default=(), repr=False)


def _shape_region(family: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if family == "rectangle":
        rh, rw = rng.integers(h // 5, h // 2 + 1), rng.integers(w // 5, w // 2 + 1)
        y0, x0 = rng.integers(0, h - rh + 1), rng.integers(0, w - rw + 1)
        return (yy >= y0) & (yy < y0 + rh) & (xx >= x0) & (xx < x0 + rw)
    if family == "ellipse":
        ry, rx = rng.uniform(h / 10, h / 4), rng.uniform(w / 10, w / 4)
        cy, cx = rng.uniform(ry, h - ry), rng.uniform(rx, w - rx)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    # stripe: a full-length axis-aligned band
    if rng.random() < 0.5:
        t = rng.integers(2, max(3, h // 6) + 1)
        y0 = rng.integers(0, h - t + 1)
        return (yy >= y0) & (yy < y0 + t)
    t = rng.integers(2, max(3, w // 6) + 1)
    x0 = rng.integers(0, w - t + 1)
    return (xx >= x0) & (xx < x0 + t)


def render_sample(profile: InstitutionProfile, rng: np.random.Generator) -> Sample:
    """Paint 1-4 shapes whose categories are drawn in proportion to ``class_weights``."""
    h, w = profile.height, profile.width
    probs = profile.probabilities
    image = np.empty((h, w, 3))
    mask = np.full((h, w), IGNORE, dtype=np.uint8)
    cats = []
    if profile.background:
        image[:] = profile.background_color
        image += profile.background_texture * rng.standard_normal((h, w, 3))
    else:
        # without background the whole frame starts as one category
        c = int(rng.choice(probs.size, p=probs))
        cats.append(c)
        app = profile.appearance[c]
        image[:] = app.color
        image += app.texture * rng.standard_normal((h, w, 3))
        mask[:] = c
    for _ in range(int(rng.integers(1, 5))):
        c = int(rng.choice(probs.size, p=probs))
        app = profile.appearance[c]
        region = _shape_region(app.family, h, w, rng)
        noise = rng.standard_normal((h, w, 3))
        patch = np.asarray(app.color) + app.texture * noise
        image[region] = patch[region]
        mask[region] = c
        cats.append(c)
    return Sample(np.clip(image, 0.0, 1.0), mask, tuple(cats))


def split_sizes(n: int) -> tuple[int, int, int]:
    """Train/val/test sizes for a 6:2:2 split."""
    n_train, n_val = (6 * n) // 10, (2 * n) // 10
    return n_train, n_val, n - n_train - n_val


def generate_dataset(profile: InstitutionProfile) -> Dataset:
    pid = profile.institution_id
    samples = [render_sample(profile, stream(profile.seed, "sample", pid, i))
               for i in range(profile.sample_count)]
    order = stream(profile.seed, "split", pid).permutation(profile.sample_count)
    n_train, n_val, _ = split_sizes(profile.sample_count)
    parts = np.split(order, [n_train, n_train + n_val])
    h, w = profile.height, profile.width
    train, val, test = (Split.stack([samples[i] for i in sorted(p)], h, w) for p in parts)
    return Dataset(profile, train, val, test, tuple(samples))


def _class_table(profiles, datasets=None) -> np.ndarray:
    if datasets is None:
        return np.stack([p.probabilities for p in profiles])
    rows = []
    for p, d in zip(profiles, datasets):
        m = d.train.masks
        counts = np.bincount(m[m != IGNORE].reshape(-1), minlength=p.num_classes)
        rows.append(counts / max(counts.sum(), 1))
    return np.stack(rows)


def heterogeneity_report(profiles, datasets=None) -> dict:
    """Class-frequency table per institution and pairwise total-variation distances.

    Frequencies come from the normalised ``class_weights`` unless ``datasets`` is
    given, in which case training-mask pixel frequencies are used.
    """
    if len(profiles) < 2:
        raise ValueError("heterogeneity_report needs at least 2 profiles")
    table = _class_table(profiles, datasets)
    n = len(profiles)
    tv = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            tv[i, j] = 0.5 * np.abs(table[i] - table[j]).sum()
    return {
        "institutions": [p.institution_id for p in profiles],
        "frequencies": table,
        "tv_distance": tv,
    }


# default benchmark: rows rotate over institutions, zeros are missing categories
_BENCH_WEIGHTS = (
    (0.40, 0.30, 0.20, 0.00, 0.07, 0.03),
    (0.10, 0.45, 0.00, 0.35, 0.00, 0.10),
    (0.35, 0.00, 0.40, 0.15, 0.10, 0.00),
    (0.00, 0.25, 0.30, 0.40, 0.00, 0.05),
)
_BENCH_COUNTS = (40, 60, 50, 70)


def benchmark_profiles(n: int = 4, seed: int = 0, num_classes: int = 6,
                       sample_counts=None, color_shift: float = 0.12,
                       size: int = 32) -> list[InstitutionProfile]:
    """Long-tail, missing-category and appearance-shifted institutions.

    Categories 4 and 5 are global tail categories. Each institution perturbs
    the canonical palette by up to ``color_shift`` per channel, draws its own
    texture amplitudes and assigns its own shape family to every category.
    """
    if num_classes != 6:
        raise ValueError("the default benchmark is defined for 6 categories")
    profiles = []
    for i in range(n):
        rng = stream(seed, "profile", i)
        weights = _BENCH_WEIGHTS[i % len(_BENCH_WEIGHTS)]
        if i >= len(_BENCH_WEIGHTS):
            weights = tuple(np.roll(weights, i // len(_BENCH_WEIGHTS)))
        apps = []
        for c in range(num_classes):
            color = np.clip(PALETTE[c] + rng.uniform(-color_shift, color_shift, 3), 0.0, 1.0)
            apps.append(Appearance(tuple(float(v) for v in color),
                                   float(rng.uniform(0.02, 0.08)),
                                   FAMILIES[int(rng.integers(0, len(FAMILIES)))]))
        counts = sample_counts or _BENCH_COUNTS
        bg = np.clip(np.array([0.45, 0.40, 0.35]) + rng.uniform(-0.05, 0.05, 3), 0, 1)
        profiles.append(InstitutionProfile(
            institution_id=i, class_weights=weights, appearance=tuple(apps),
            sample_count=int(counts[i % len(counts)]), seed=seed,
            height=size, width=size, background=True,
            background_color=tuple(float(v) for v in bg)))
    return profiles


def dump_dataset(dataset: Dataset, out_dir) -> Path:
    """Write one ``<split>.bin`` per split plus ``manifest.json``.

    Binary layout: little-endian uint32 header ``H, W, C, N``; then ``N*H*W``
    mask bytes; then ``N*H*W*3`` little-endian float32 image values.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = dataset.profile
    files = {}
    for name in ("train", "val", "test"):
        split: Split = getattr(dataset, name)
        header = np.array([p.height, p.width, p.num_classes, len(split)], dtype="<u4")
        path = out / f"{name}.bin"
        path.write_bytes(header.tobytes() + split.masks.astype(np.uint8).tobytes()
                         + split.images.astype("<f4").tobytes())
        files[name] = path.name
    manifest = {
        "institution_id": p.institution_id,
        "seed": p.seed,
        "num_classes": p.num_classes,
        "height": p.height,
        "width": p.width,
        "ignore_index": IGNORE if p.background else None,
        "class_weights": list(p.class_weights),
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_split(path) -> Split:
    raw = Path(path).read_bytes()
    h, w, _, n = np.frombuffer(raw[:16], dtype="<u4")
    h, w, n = int(h), int(w), int(n)
    off = 16
    masks = np.frombuffer(raw[off:off + n * h * w], dtype=np.uint8).reshape(n, h, w)
    off += n * h * w
    images = np.frombuffer(raw[off:], dtype="<f4").reshape(n, h, w, 3).astype(np.float64)
    return Split(images, masks.copy())
