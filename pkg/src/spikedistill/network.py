"""Declarative network specs, parameter initialization and checkpoint files.

A :class:`NetworkSpec` is an ordered list of :class:`LayerSpec` entries plus
the input shape, class count and a role. The same spec drives the ANN
forward pass and, for ``student-snn`` checkpoints, the spiking simulation.

Checkpoint file layout (all integers little-endian)::

    b"LASNN\\x01"
    u64 length | UTF-8 JSON document (spec, metadata, blob manifest)
    f32 blobs, one per manifest entry, in spec order
    optional threshold block:
        b"THRS" | u32 n | f32[n] thresholds | f32[n] max preactivation
        | u32 calibration samples | u32 time steps | f32 percentile (0 = max)
"""
from __future__ import annotations

import io
import json
import pathlib
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .tensor import DTYPE, conv_output_size, make_rng

MAGIC = b"LASNN\x01"
THRESHOLD_MAGIC = b"THRS"

KINDS = ("conv", "linear", "relu", "avgpool", "maxpool", "dropout", "batchnorm", "flatten")
LEVELS = ("low", "mid", "high")
ROLES = ("teacher", "intermediate", "student-snn")
CONSTRAINED_ROLES = ("intermediate", "student-snn")
WEIGHTED = ("conv", "linear")


class SpecError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int = 0
    kernel: int = 3
    stride: int = 1
    pad: int = 0
    pool: int = 2
    p: float = 0.0
    bias: bool = False
    level: str = "none"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.level not in LEVELS + ("none",):
            raise SpecError(f"unknown level tag {self.level!r}")


def conv(out, kernel=3, stride=1, pad=None, bias=False, level="none"):
    return LayerSpec("conv", out=out, kernel=kernel, stride=stride,
                     pad=kernel // 2 if pad is None else pad, bias=bias, level=level)


def linear(out, bias=False):
    return LayerSpec("linear", out=out, bias=bias)


def relu():
    return LayerSpec("relu")


def avgpool(k=2):
    return LayerSpec("avgpool", pool=k)


def maxpool(k=2):
    return LayerSpec("maxpool", pool=k)


def dropout(p=0.2):
    return LayerSpec("dropout", p=p)


def batchnorm():
    return LayerSpec("batchnorm")


def flatten():
    return LayerSpec("flatten")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple
    num_classes: int
    role: str = "teacher"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.role not in ROLES:
            raise SpecError(f"unknown role {self.role!r}")

    def shapes(self):
        """Per-sample output shape of every layer; raises if layers do not compose."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            shape = _layer_output_shape(i, layer, shape)
            out.append(shape)
        if not out or out[-1] != (self.num_classes,):
            raise SpecError(f"network output shape {out[-1] if out else None} != ({self.num_classes},)")
        return out

    def input_shapes(self):
        return [self.input_shape] + self.shapes()[:-1]

    def weighted_indices(self):
        return [i for i, layer in enumerate(self.layers) if layer.kind in WEIGHTED]

    def spiking_indices(self):
        """Weighted layers that fire in the SNN: all but the output layer."""
        return self.weighted_indices()[:-1]

    def level_layers(self):
        """Map level tag -> index of the tagged conv/linear layer."""
        return {l.level: i for i, l in enumerate(self.layers) if l.level != "none"}

    def with_role(self, role):
        return replace(self, role=role)

    def to_dict(self):
        return {
            "layers": [asdict(l) for l in self.layers],
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "role": self.role,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(LayerSpec(**l) for l in d["layers"]), tuple(d["input_shape"]),
                   int(d["num_classes"]), d["role"])


def _layer_output_shape(i, layer, shape):
    kind = layer.kind
    if kind == "conv":
        if len(shape) != 3:
            raise SpecError(f"layer {i} (conv) needs a (C, H, W) input, got {shape}")
        c, h, w = shape
        if layer.kernel > h + 2 * layer.pad or layer.kernel > w + 2 * layer.pad:
            raise SpecError(f"layer {i} (conv) kernel {layer.kernel} exceeds padded input {shape}")
        return (layer.out, conv_output_size(h, layer.kernel, layer.stride, layer.pad),
                conv_output_size(w, layer.kernel, layer.stride, layer.pad))
    if kind == "linear":
        if len(shape) != 1:
            raise SpecError(f"layer {i} (linear) needs a flat input, got {shape}; add a flatten layer")
        return (layer.out,)
    if kind in ("avgpool", "maxpool"):
        if len(shape) != 3 or shape[1] % layer.pool or shape[2] % layer.pool:
            raise SpecError(f"layer {i} ({kind}) pool {layer.pool} does not divide input {shape}")
        return (shape[0], shape[1] // layer.pool, shape[2] // layer.pool)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    return shape


def param_shapes(spec):
    """List (one dict per layer) of parameter name -> shape."""
    result = []
    for layer, in_shape in zip(spec.layers, spec.input_shapes()):
        shapes = {}
        if layer.kind == "conv":
            shapes["weight"] = (layer.out, in_shape[0], layer.kernel, layer.kernel)
            if layer.bias:
                shapes["bias"] = (layer.out,)
        elif layer.kind == "linear":
            shapes["weight"] = (layer.out, in_shape[0])
            if layer.bias:
                shapes["bias"] = (layer.out,)
        elif layer.kind == "batchnorm":
            c = in_shape[0]
            shapes = {"gamma": (c,), "beta": (c,), "running_mean": (c,), "running_var": (c,)}
        result.append(shapes)
    return result


def init_params(spec, seed):
    """He-normal weights, zero biases, identity batchnorm."""
    rng = make_rng(seed, 0x1417)
    params = []
    for shapes in param_shapes(spec):
        layer_params = {}
        for name, shape in shapes.items():
            if name == "weight":
                fan_in = int(np.prod(shape[1:]))
                value = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            elif name in ("gamma", "running_var"):
                value = np.ones(shape)
            else:
                value = np.zeros(shape)
            layer_params[name] = value.astype(DTYPE)
        params.append(layer_params)
    return params


def auto_level_tags(spec):
    """Tag low/mid/high on the last conv of each third of the conv layers.

    Existing tags are kept untouched. Networks with fewer than three conv
    layers get as many distinct levels as they have convs (high first).
    """
    if spec.level_layers():
        return spec
    convs = [i for i, l in enumerate(spec.layers) if l.kind == "conv"]
    if not convs:
        return spec
    if len(convs) >= 3:
        thirds = np.array_split(np.array(convs), 3)
        picks = {"low": int(thirds[0][-1]), "mid": int(thirds[1][-1]), "high": convs[-1]}
    elif len(convs) == 2:
        picks = {"low": convs[0], "high": convs[1]}
    else:
        picks = {"high": convs[0]}
    layers = list(spec.layers)
    for level, i in picks.items():
        layers[i] = replace(layers[i], level=level)
    return replace(spec, layers=tuple(layers))


def capture_index(spec, layer_index):
    """Index whose output is captured for a tagged layer: the first ReLU after it."""
    for j in range(layer_index + 1, len(spec.layers)):
        kind = spec.layers[j].kind
        if kind == "relu":
            return j
        if kind in WEIGHTED or kind in ("avgpool", "maxpool", "flatten"):
            break
    raise SpecError(f"tagged layer {layer_index} is not followed by a ReLU")


def replace_wide_stem(spec, dropout_p=0.2):
    """Swap a wide strided stem conv for three 3x3 stride-1 convs.

    The replacement block is conv-relu-dropout-conv-relu-dropout-conv; any
    stride of the original stem is recovered with a trailing average pool.
    """
    first = next((i for i, l in enumerate(spec.layers) if l.kind == "conv"), None)
    if first is None or not is_wide_stem(spec.layers[first]):
        return spec
    stem = spec.layers[first]
    block = [
        conv(stem.out, 3, 1, 1), relu(), dropout(dropout_p),
        conv(stem.out, 3, 1, 1), relu(), dropout(dropout_p),
        replace(conv(stem.out, 3, 1, 1), level=stem.level),
    ]
    rest = list(spec.layers[first + 1:])
    if stem.stride > 1:
        # keep the post-stem activation before downsampling
        if rest and rest[0].kind in ("batchnorm", "relu"):
            head = [rest.pop(0)]
            if head[0].kind == "batchnorm" and rest and rest[0].kind == "relu":
                head.append(rest.pop(0))
        else:
            head = []
        block += head + [avgpool(stem.stride)]
    new = replace(spec, layers=tuple(list(spec.layers[:first]) + block + rest))
    new.shapes()
    return new


def is_wide_stem(layer):
    return layer.kind == "conv" and layer.kernel >= 7 and layer.stride >= 2


# --------------------------------------------------------------------------
# reference architectures (desk scale)
# --------------------------------------------------------------------------

def _conv_stack(plan, input_shape, num_classes, hidden, role, bias, bn, pool, drop):
    layers = []
    shape = input_shape
    for item in plan:
        if item == "P":
            if shape[1] % 2 == 0 and shape[2] % 2 == 0:
                layers.append(maxpool(2) if pool == "max" else avgpool(2))
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            continue
        layers.append(conv(item, 3, 1, 1, bias=bias))
        if bn:
            layers.append(batchnorm())
        layers.append(relu())
        shape = (item, shape[1], shape[2])
    layers.append(flatten())
    for width in hidden:
        layers += [linear(width, bias=bias), relu(), dropout(drop)]
    layers.append(linear(num_classes, bias=bias))
    spec = NetworkSpec(tuple(layers), input_shape, num_classes, role)
    spec.shapes()
    return auto_level_tags(spec)


def three_conv_two_linear(input_shape=(1, 28, 28), num_classes=10, channels=(8, 16, 16),
                          hidden=64, dropout_p=0.2, role="intermediate"):
    """Small constrained CNN: 3 bias-free convs with average pooling, 2 linears."""
    c1, c2, c3 = channels
    return _conv_stack([c1, "P", c2, "P", c3], input_shape, num_classes, [hidden], role,
                       bias=False, bn=False, pool="avg", drop=dropout_p)


def vgg5(input_shape=(1, 28, 28), num_classes=10, width=8, hidden=64, dropout_p=0.2,
         role="intermediate"):
    return _conv_stack([width, "P", 2 * width, 2 * width, "P"], input_shape, num_classes,
                       [hidden], role, bias=False, bn=False, pool="avg", drop=dropout_p)


def vgg9_teacher(input_shape=(1, 28, 28), num_classes=10, width=8, hidden=128,
                 dropout_p=0.2):
    """VGG9-style teacher: seven conv-BN-ReLU blocks and two linears, with biases."""
    w = width
    plan = [w, "P", 2 * w, 2 * w, "P", 4 * w, 4 * w, "P", 4 * w, 4 * w]
    return _conv_stack(plan, input_shape, num_classes, [hidden], "teacher",
                       bias=True, bn=True, pool="avg", drop=dropout_p)


def mlp(input_shape=(1, 28, 28), num_classes=10, hidden=(128,), dropout_p=0.0,
        role="intermediate", bias=False):
    layers = [flatten()]
    for width in hidden:
        layers += [linear(width, bias=bias), relu()]
        if dropout_p:
            layers.append(dropout(dropout_p))
    layers.append(linear(num_classes, bias=bias))
    spec = NetworkSpec(tuple(layers), input_shape, num_classes, role)
    spec.shapes()
    return spec


ARCHITECTURES = {
    "3conv2linear": three_conv_two_linear,
    "vgg5": vgg5,
    "vgg9": vgg9_teacher,
    "mlp": mlp,
}


def build_architecture(name, input_shape, num_classes, **kwargs):
    try:
        builder = ARCHITECTURES[name]
    except KeyError:
        raise SpecError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}") from None
    return builder(input_shape=tuple(input_shape), num_classes=num_classes, **kwargs)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: list
    thresholds: Optional[np.ndarray] = None
    max_preactivation: Optional[np.ndarray] = None
    calibration_samples: int = 0
    calibration_time_steps: int = 0
    percentile: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.spec)
        if len(self.params) != len(expected):
            raise CheckpointError(f"{len(self.params)} parameter groups for {len(expected)} layers")
        for i, (got, want) in enumerate(zip(self.params, expected)):
            if set(got) != set(want):
                raise CheckpointError(f"layer {i}: parameters {sorted(got)} != {sorted(want)}")
            for name, shape in want.items():
                if tuple(got[name].shape) != tuple(shape):
                    raise CheckpointError(
                        f"layer {i} {name}: shape {got[name].shape} != spec {shape}")
        has_thresholds = self.thresholds is not None
        if has_thresholds != (self.spec.role == "student-snn"):
            raise CheckpointError("thresholds must be present exactly when role is student-snn")
        if has_thresholds:
            self.thresholds = np.asarray(self.thresholds, dtype=DTYPE)
            n = len(self.spec.spiking_indices())
            if self.thresholds.shape != (n,):
                raise CheckpointError(f"{self.thresholds.shape[0]} thresholds for {n} spiking layers")
            if self.max_preactivation is None:
                self.max_preactivation = self.thresholds.copy()
            self.max_preactivation = np.asarray(self.max_preactivation, dtype=DTYPE)

    def copy(self):
        return Checkpoint(
            self.spec,
            [{k: v.copy() for k, v in p.items()} for p in self.params],
            None if self.thresholds is None else self.thresholds.copy(),
            None if self.max_preactivation is None else self.max_preactivation.copy(),
            self.calibration_samples, self.calibration_time_steps, self.percentile,
            dict(self.metadata),
        )

    def threshold_of(self, layer_index):
        return float(self.thresholds[self.spec.spiking_indices().index(layer_index)])

    def to_bytes(self):
        manifest = [[i, name, list(arr.shape)] for i, p in enumerate(self.params)
                    for name, arr in sorted(p.items())]
        doc = json.dumps({"spec": self.spec.to_dict(), "metadata": self.metadata,
                          "blobs": manifest}, sort_keys=True, separators=(",", ":")).encode("utf-8")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<Q", len(doc)))
        buf.write(doc)
        for i, name, _ in manifest:
            buf.write(np.ascontiguousarray(self.params[i][name], dtype="<f4").tobytes())
        if self.thresholds is not None:
            n = len(self.thresholds)
            buf.write(THRESHOLD_MAGIC)
            buf.write(struct.pack("<I", n))
            buf.write(np.asarray(self.thresholds, dtype="<f4").tobytes())
            buf.write(np.asarray(self.max_preactivation, dtype="<f4").tobytes())
            buf.write(struct.pack("<IIf", self.calibration_samples, self.calibration_time_steps,
                                  self.percentile))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data):
        if not data.startswith(MAGIC):
            raise CheckpointError("not a checkpoint file (bad magic)")
        if len(data) < len(MAGIC) + 8:
            raise CheckpointError("checkpoint truncated inside the header")
        pos = len(MAGIC)
        (doc_len,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        try:
            if pos + doc_len > len(data):
                raise ValueError("header extends past end of file")
            doc = json.loads(data[pos:pos + doc_len].decode("utf-8"))
        except ValueError as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
        pos += doc_len
        spec = NetworkSpec.from_dict(doc["spec"])
        params = [dict() for _ in spec.layers]
        for i, name, shape in doc["blobs"]:
            count = int(np.prod(shape))
            if pos + 4 * count > len(data):
                raise CheckpointError("checkpoint truncated inside weight blobs")
            params[i][name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos) \
                .astype(DTYPE).reshape(shape)
            pos += 4 * count
        kwargs = {}
        if pos < len(data):
            if data[pos:pos + 4] != THRESHOLD_MAGIC:
                raise CheckpointError("unexpected trailing bytes after weight blobs")
            pos += 4
            if pos + 4 > len(data):
                raise CheckpointError("checkpoint truncated inside the threshold block")
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if len(data) - pos != 8 * n + 12:
                raise CheckpointError("threshold block has the wrong length")
            thresholds = np.frombuffer(data, dtype="<f4", count=n, offset=pos).astype(DTYPE)
            pos += 4 * n
            max_pre = np.frombuffer(data, dtype="<f4", count=n, offset=pos).astype(DTYPE)
            pos += 4 * n
            samples, steps, pct = struct.unpack_from("<IIf", data, pos)
            kwargs = dict(thresholds=thresholds, max_preactivation=max_pre,
                          calibration_samples=samples, calibration_time_steps=steps,
                          percentile=pct)
        return cls(spec, params, metadata=doc["metadata"], **kwargs)

    def save(self, path):
        path = pathlib.Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path):
        path = pathlib.Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())
