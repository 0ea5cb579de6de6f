"""Tiny segmentation network, balancing network and flat parameter transport."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffengine as de
from .diffengine import Tensor
from .rng import stream


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class LayerLayout:
    name: str
    weight: tuple[int, ...]
    bias: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.weight)) + int(np.prod(self.bias))

    def to_json(self) -> dict:
        return {"name": self.name, "weight": list(self.weight), "bias": list(self.bias)}


Layout = tuple[LayerLayout, ...]


def layout_size(layout: Layout) -> int:
    return sum(layer.size for layer in layout)


def check_layouts(a: Layout, b: Layout) -> None:
    """Raise :class:`LayoutError` naming the first layer where ``a`` and ``b`` differ."""
    for la, lb in zip(a, b):
        if la != lb:
            raise LayoutError(f"layout mismatch at layer {la.name!r}: {la} vs {lb}")
    if len(a) != len(b):
        first = (a if len(a) > len(b) else b)[min(len(a), len(b))]
        raise LayoutError(f"layout mismatch at layer {first.name!r}: missing in one layout")


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or values.size != layout_size(self.layout):
            raise LayoutError(
                f"ParamVector of length {values.size} does not match layout size "
                f"{layout_size(self.layout)}")

    def __len__(self):
        return self.values.size

    def replace(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def equals(self, other: "ParamVector") -> bool:
        """Bitwise equality of values and layout."""
        return self.layout == other.layout and \
            self.values.tobytes() == other.values.tobytes()


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 6
    embed_dim: int = 8
    hidden: tuple[int, ...] = (8, 8)
    in_channels: int = 3
    balance_hidden: int = 4

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")


@dataclass(frozen=True)
class Layer:
    weight: Tensor
    bias: Tensor


@dataclass(frozen=True)
class SegNet:
    """Conv3x3+ReLU encoder stack followed by a per-pixel linear decoder."""

    encoder: tuple[Layer, ...]
    decoder: Layer

    @property
    def num_classes(self) -> int:
        return self.decoder.weight.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.decoder.weight.shape[0]

    @property
    def layers(self) -> tuple[Layer, ...]:
        return self.encoder + (self.decoder,)

    @property
    def layout(self) -> Layout:
        names = [f"enc{i}" for i in range(len(self.encoder))] + ["dec"]
        return tuple(LayerLayout(n, l.weight.shape, l.bias.shape)
                     for n, l in zip(names, self.layers))


@dataclass(frozen=True)
class BalanceNet:
    """Conv3x3+ReLU, global average pooling, linear map to two logits."""

    conv: Layer
    head: Layer

    @property
    def layers(self) -> tuple[Layer, ...]:
        return (self.conv, self.head)

    @property
    def layout(self) -> Layout:
        return (LayerLayout("bal_conv", self.conv.weight.shape, self.conv.bias.shape),
                LayerLayout("bal_head", self.head.weight.shape, self.head.bias.shape))


def segnet_layout(config: ModelConfig) -> Layout:
    widths = (config.in_channels,) + tuple(config.hidden) + (config.embed_dim,)
    layers = [LayerLayout(f"enc{i}", (3, 3, cin, cout), (cout,))
              for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:]))]
    layers.append(LayerLayout("dec", (config.embed_dim, config.num_classes), (config.num_classes,)))
    return tuple(layers)


def balance_layout(config: ModelConfig) -> Layout:
    h = config.balance_hidden
    return (LayerLayout("bal_conv", (3, 3, config.in_channels, h), (h,)),
            LayerLayout("bal_head", (h, 2), (2,)))


def _glorot(layout: Layout, rng: np.random.Generator) -> np.ndarray:
    parts = []
    for layer in layout:
        w = layer.weight
        if len(w) == 4:
            fan_in, fan_out = 9 * w[2], 9 * w[3]
        else:
            fan_in, fan_out = w
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        parts.append(rng.uniform(-limit, limit, size=int(np.prod(w))))
        parts.append(np.zeros(int(np.prod(layer.bias))))
    return np.concatenate(parts)


def init_model(config: ModelConfig, seed: int) -> SegNet:
    """Glorot-uniform weights (limit ``sqrt(6 / (fan_in + fan_out))``), zero biases."""
    layout = segnet_layout(config)
    return unflatten(ParamVector(_glorot(layout, stream(seed, "init")), layout), layout)


def init_balance(config: ModelConfig, seed: int, institution: int = 0) -> BalanceNet:
    layout = balance_layout(config)
    values = _glorot(layout, stream(seed, "balnet", institution))
    return unflatten(ParamVector(values, layout), layout)


def flatten(net: SegNet | BalanceNet) -> ParamVector:
    parts = []
    for layer in net.layers:
        parts.append(layer.weight.data.reshape(-1))
        parts.append(layer.bias.data.reshape(-1))
    return ParamVector(np.concatenate(parts), net.layout)


def _split(flat, layout: Layout, tracked: bool) -> list[Layer]:
    layers, pos = [], 0
    for spec in layout:
        nw, nb = int(np.prod(spec.weight)), int(np.prod(spec.bias))
        if tracked:
            w = de.reshape(de.take_range(flat, pos, pos + nw), spec.weight)
            b = de.take_range(flat, pos + nw, pos + nw + nb)
        else:
            w = Tensor(flat[pos:pos + nw].reshape(spec.weight))
            b = Tensor(flat[pos + nw:pos + nw + nb])
        layers.append(Layer(w, b))
        pos += nw + nb
    return layers


def _assemble(layers: list[Layer], layout: Layout) -> SegNet | BalanceNet:
    if layout[0].name == "bal_conv":
        return BalanceNet(layers[0], layers[1])
    return SegNet(tuple(layers[:-1]), layers[-1])


def unflatten(params: ParamVector, layout: Layout) -> SegNet | BalanceNet:
    check_layouts(params.layout, layout)
    return _assemble(_split(params.values, layout, tracked=False), layout)


def bind(flat: Tensor, layout: Layout) -> SegNet | BalanceNet:
    """Network whose weights are differentiable slices of the 1-D tensor ``flat``."""
    if flat.shape != (layout_size(layout),):
        raise LayoutError(f"flat tensor of shape {flat.shape} does not match layout")
    return _assemble(_split(flat, layout, tracked=True), layout)


def _batched(image) -> Tensor:
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.data.ndim == 3:
        x = de.reshape(x, (1,) + x.shape)
    return x


def encode(net: SegNet, image) -> Tensor:
    """``(N, H, W, 3)`` (or a single ``(H, W, 3)``) -> ``(N, H, W, D)``."""
    x = _batched(image)
    cin = net.encoder[0].weight.shape[2]
    if x.data.ndim != 4 or x.shape[-1] != cin:
        raise de.ShapeError("encode", x.shape, (None, None, None, cin))
    for layer in net.encoder:
        x = de.relu(de.conv3x3(x, layer.weight, layer.bias))
    return x


def decode(net: SegNet, features: Tensor) -> Tensor:
    if features.shape[-1] != net.embed_dim:
        raise de.ShapeError("decode", features.shape, net.decoder.weight.shape)
    return de.add(de.matmul(features, net.decoder.weight), net.decoder.bias)


def balance_logits(balnet: BalanceNet, image) -> Tensor:
    x = _batched(image)
    h = de.relu(de.conv3x3(x, balnet.conv.weight, balnet.conv.bias))
    return de.add(de.matmul(de.global_avg_pool(h), balnet.head.weight), balnet.head.bias)


def balance_forward(balnet: BalanceNet, image) -> Tensor:
    """Per-image coefficients ``(N, 2)``; column 0 is K_local, column 1 is K_global."""
    return de.softmax(balance_logits(balnet, image))


def predict(net: SegNet, image) -> np.ndarray:
    """Arg-max category map ``(N, H, W)``."""
    return decode(net, encode(net, image)).data.argmax(axis=-1)


def save_checkpoint(params: ParamVector, path) -> tuple[Path, Path]:
    """Write ``<path>.json`` (layout) and ``<path>.bin`` (little-endian float64)."""
    path = Path(path)
    meta = path.with_suffix(".json")
    blob = path.with_suffix(".bin")
    meta.write_text(json.dumps({"dtype": "<f8", "length": len(params),
                                "layout": [l.to_json() for l in params.layout]}, indent=2))
    blob.write_bytes(params.values.astype("<f8").tobytes())
    return meta, blob


def load_checkpoint(path) -> ParamVector:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    layout = tuple(LayerLayout(l["name"], tuple(l["weight"]), tuple(l["bias"]))
                   for l in meta["layout"])
    values = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    return ParamVector(values.astype(np.float64), layout)
