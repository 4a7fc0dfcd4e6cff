"""Feature extractor / classifier backbones assembled from the autodiff primitives."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, Parameter, RunningStats, ShapeError, Tensor

LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class Layer:
    """One layer descriptor.

    ``kind`` is one of conv, batchnorm, leaky_relu, relu, avgpool, flatten, fc.
    ``size`` is out channels (conv) or out dim (fc). A ``window`` of 0 on an
    avgpool layer means "pool over the whole remaining length".
    """

    kind: str
    size: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    window: int = 0


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    in_channels: int
    length: int
    extractor: tuple[Layer, ...]
    classifier: tuple[Layer, ...]
    num_classes: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extractor"] = [asdict(l) for l in self.extractor]
        d["classifier"] = [asdict(l) for l in self.classifier]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(
            name=d["name"],
            in_channels=int(d["in_channels"]),
            length=int(d["length"]),
            extractor=tuple(Layer(**l) for l in d["extractor"]),
            classifier=tuple(Layer(**l) for l in d["classifier"]),
            num_classes=int(d["num_classes"]),
        )


def _cbl(size, kernel, stride, pad, bn=True):
    layers = [Layer("conv", size=size, kernel=kernel, stride=stride, pad=pad)]
    if bn:
        layers.append(Layer("batchnorm"))
    layers.append(Layer("leaky_relu"))
    return layers


def bearings_spec(length: int = 4096, in_channels: int = 1, num_classes: int = 10) -> BackboneSpec:
    """Six conv layers plus FC-32 as extractor; three FC layers as classifier."""
    ext = _cbl(8, 64, 2, 1)
    for _ in range(3):
        ext += _cbl(8, 3, 2, 1)
    ext += _cbl(8, 3, 2, 1, bn=False)
    ext += [Layer("conv", size=8, kernel=8, stride=1, pad=1), Layer("flatten"), Layer("fc", size=32)]
    clf = [Layer("fc", size=32), Layer("relu"), Layer("fc", size=32), Layer("relu"), Layer("fc", size=num_classes)]
    return BackboneSpec("bearings", in_channels, length, tuple(ext), tuple(clf), num_classes)


def hhar_spec(
    hidden_dim: int = 128, length: int = 128, in_channels: int = 3, num_classes: int = 6
) -> BackboneSpec:
    ext = _cbl(hidden_dim, 8, 1, 1) + _cbl(2 * hidden_dim, 5, 1, 1) + _cbl(hidden_dim, 3, 1, 1)
    # window 0: pool over the full remaining length (121 for length-128 input)
    ext += [Layer("avgpool", window=0), Layer("flatten")]
    clf = [Layer("fc", size=num_classes)]
    return BackboneSpec("hhar", in_channels, length, tuple(ext), tuple(clf), num_classes)


def mimic_spec(length: int = 24, in_channels: int = 11, num_classes: int = 2) -> BackboneSpec:
    spec = hhar_spec(hidden_dim=32, length=length, in_channels=in_channels, num_classes=num_classes)
    return BackboneSpec("mimic", spec.in_channels, spec.length, spec.extractor, spec.classifier, num_classes)


def toy_spec(hidden_dim: int = 32, length: int = 200, in_channels: int = 2, num_classes: int = 2) -> BackboneSpec:
    ext = _cbl(hidden_dim, 8, 1, 1) + [Layer("avgpool", window=0), Layer("flatten")]
    clf = [Layer("fc", size=num_classes)]
    return BackboneSpec("toy", in_channels, length, tuple(ext), tuple(clf), num_classes)


SPECS = {"bearings": bearings_spec, "hhar": hhar_spec, "mimic": mimic_spec, "toy": toy_spec}


def spec_by_name(name: str, **kwargs) -> BackboneSpec:
    try:
        return SPECS[name](**kwargs)
    except KeyError:
        raise ConfigurationError(f"unknown backbone {name!r}; expected one of {sorted(SPECS)}") from None


class _Module:
    """A built layer: holds parameters and applies the op."""

    def __init__(self, desc: Layer, in_shape: tuple[int, ...], rng: np.random.Generator, prefix: str):
        self.desc = desc
        self.params: list[Parameter] = []
        self.running: RunningStats | None = None
        kind = desc.kind
        if kind == "conv":
            c, length = in_shape
            fan_in = c * desc.kernel
            bound = 1.0 / np.sqrt(fan_in)
            self.weight = Parameter(rng.uniform(-bound, bound, (desc.size, c, desc.kernel)), f"{prefix}.weight")
            self.bias = Parameter(np.zeros(desc.size), f"{prefix}.bias")
            self.params = [self.weight, self.bias]
            out_len = ad.conv_output_length(length, desc.kernel, desc.stride, desc.pad)
            if out_len < 1:
                raise ConfigurationError(f"conv output length {out_len} < 1")
            self.out_shape = (desc.size, out_len)
        elif kind == "batchnorm":
            c = in_shape[0]
            if len(in_shape) != 2:
                raise ConfigurationError("batchnorm needs a [channels, length] input")
            self.gamma = Parameter(np.ones(c), f"{prefix}.gamma")
            self.beta = Parameter(np.zeros(c), f"{prefix}.beta")
            self.params = [self.gamma, self.beta]
            self.running = RunningStats(c)
            self.out_shape = in_shape
        elif kind in ("leaky_relu", "relu"):
            self.out_shape = in_shape
        elif kind == "avgpool":
            if len(in_shape) != 2:
                raise ConfigurationError("avgpool needs a [channels, length] input")
            c, length = in_shape
            self.window = desc.window or length
            self.stride = desc.stride if desc.window else self.window
            if self.window > length:
                raise ConfigurationError(f"pool window {self.window} > length {length}")
            self.out_shape = (c, (length - self.window) // self.stride + 1)
        elif kind == "flatten":
            self.out_shape = (int(np.prod(in_shape)),)
        elif kind == "fc":
            if len(in_shape) != 1:
                raise ConfigurationError(f"fc needs a flat input, got {in_shape}")
            fan_in = in_shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            self.weight = Parameter(rng.uniform(-bound, bound, (fan_in, desc.size)), f"{prefix}.weight")
            self.bias = Parameter(np.zeros(desc.size), f"{prefix}.bias")
            self.params = [self.weight, self.bias]
            self.out_shape = (desc.size,)
        else:
            raise ConfigurationError(f"unknown layer kind {kind!r}")

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        kind = self.desc.kind
        if kind == "conv":
            return ad.conv1d(x, self.weight, self.bias, self.desc.stride, self.desc.pad)
        if kind == "batchnorm":
            return ad.batch_norm1d(x, self.gamma, self.beta, self.running, train)
        if kind == "leaky_relu":
            return ad.leaky_relu(x, LEAKY_SLOPE)
        if kind == "relu":
            return ad.relu(x)
        if kind == "avgpool":
            return ad.avg_pool1d(x, self.window, self.stride)
        if kind == "flatten":
            return ad.flatten(x)
        return ad.linear(x, self.weight, self.bias)


@dataclass
class Model:
    spec: BackboneSpec
    extractor: list[_Module] = field(repr=False)
    classifier: list[_Module] = field(repr=False)

    @property
    def feature_dim(self) -> int:
        return self.extractor[-1].out_shape[0]

    def parameters(self) -> list[Parameter]:
        return [p for m in self.extractor + self.classifier for p in m.params]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for group, mods in (("extractor", self.extractor), ("classifier", self.classifier)):
            for i, m in enumerate(mods):
                for p in m.params:
                    out[p.name] = p.data
                if m.running is not None:
                    out[f"{group}.{i}.running_mean"] = m.running.mean
                    out[f"{group}.{i}.running_var"] = m.running.var
        return out

    def features(self, x, train: bool = False) -> Tensor:
        x = ad.as_tensor(x)
        for m in self.extractor:
            x = m(x, train)
        return x

    def forward(self, x, train: bool = False) -> tuple[Tensor, Tensor]:
        """Return (features z, logits g)."""
        x = ad.as_tensor(x)
        expected = (self.spec.in_channels, self.spec.length)
        if x.ndim != 3 or x.shape[1:] != expected:
            raise ShapeError(f"model {self.spec.name!r} expects [batch, {expected[0]}, {expected[1]}], got {x.shape}")
        z = self.features(x, train)
        g = z
        for m in self.classifier:
            g = m(g, train)
        return z, g

    __call__ = forward

    def predict_proba(self, x, batch_size: int = 512) -> np.ndarray:
        """Eval-mode softmax outputs, without recording a graph."""
        out = []
        with ad.no_grad():
            for start in range(0, len(x), batch_size):
                _, g = self.forward(x[start : start + batch_size], train=False)
                out.append(ad.softmax(g).data)
        return np.concatenate(out, axis=0)

    def extract_features(self, x, batch_size: int = 512) -> np.ndarray:
        out = []
        with ad.no_grad():
            for start in range(0, len(x), batch_size):
                out.append(self.features(x[start : start + batch_size], train=False).data)
        return np.concatenate(out, axis=0)


def build(spec: BackboneSpec, init_seed: int | np.random.Generator) -> Model:
    """Instantiate a model; weights ~ U(+-1/sqrt(fan_in)), biases 0, BN gamma 1 / beta 0."""
    rng = init_seed if isinstance(init_seed, np.random.Generator) else np.random.default_rng(init_seed)
    shape: tuple[int, ...] = (spec.in_channels, spec.length)
    built = {}
    index = 0
    for group, layers in (("extractor", spec.extractor), ("classifier", spec.classifier)):
        mods = []
        for i, desc in enumerate(layers):
            try:
                mod = _Module(desc, shape, rng, f"{group}.{i}")
            except ConfigurationError as exc:
                raise ConfigurationError(
                    f"layer {index} ({group}[{i}], {desc.kind}) with input shape {shape}: {exc}"
                ) from None
            shape = mod.out_shape
            mods.append(mod)
            index += 1
        if group == "extractor" and len(shape) != 1:
            raise ConfigurationError(f"extractor must end flat, got shape {shape} at layer {index - 1}")
        built[group] = mods
    if shape != (spec.num_classes,):
        raise ConfigurationError(f"classifier output {shape} != number of classes {spec.num_classes}")
    return Model(spec, built["extractor"], built["classifier"])


# checkpoints -------------------------------------------------------------------

def save_checkpoint(model: Model, path: str | Path, config_hash: str | None = None) -> None:
    """Write an ``.npz`` with one named array per parameter/running stat plus the spec as JSON.

    ``config_hash``, when given, is stored as the ``__config_hash__`` string array.
    """
    arrays = dict(model.named_arrays())
    arrays["__spec__"] = np.array(json.dumps(model.spec.to_dict(), sort_keys=True))
    if config_hash is not None:
        arrays["__config_hash__"] = np.array(config_hash)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def checkpoint_hash(path: str | Path) -> str | None:
    with np.load(path, allow_pickle=False) as npz:
        return str(npz["__config_hash__"]) if "__config_hash__" in npz.files else None


def load_checkpoint(path: str | Path) -> Model:
    with np.load(path, allow_pickle=False) as npz:
        spec = BackboneSpec.from_dict(json.loads(str(npz["__spec__"])))
        model = build(spec, 0)
        for group, mods in (("extractor", model.extractor), ("classifier", model.classifier)):
            for i, m in enumerate(mods):
                for p in m.params:
                    p.data = np.array(npz[p.name])
                if m.running is not None:
                    m.running.mean = np.array(npz[f"{group}.{i}.running_mean"])
                    m.running.var = np.array(npz[f"{group}.{i}.running_var"])
    return model
