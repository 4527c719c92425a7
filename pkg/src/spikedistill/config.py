"""Run configuration: ``key = value`` files with dotted sections.

Every key has a default listed in :data:`DEFAULTS`. A config file only needs
the keys it changes. Blank lines and ``#`` comments are ignored; unknown or
repeated keys are errors. Lists are comma separated (``channels = 8,16,16``).

The config hash is the SHA-256 of the canonical rendering (all keys, sorted)
minus ``out``, so moving a run to another directory keeps its hash.
"""
from __future__ import annotations

import hashlib
import pathlib

_MNIST = "data/mnist5k"

# key: (default, help)
DEFAULTS = {
    "seed": (0, "global seed for initialization, shuffling, dropout and encoding"),
    "out": ("runs/default", "output directory"),

    "dataset.name": ("mnist", "mnist (IDX files) or cifar10 (binary batches)"),
    "dataset.num_classes": (10, "number of classes"),
    "dataset.image_shape": ((1, 28, 28), "C,H,W"),
    "dataset.train": ((f"{_MNIST}/train-images-idx3-ubyte.gz", f"{_MNIST}/train-labels-idx1-ubyte.gz"),
                      "mnist: images,labels; cifar10: batch files"),
    "dataset.test": ((f"{_MNIST}/t10k-images-idx3-ubyte.gz", f"{_MNIST}/t10k-labels-idx1-ubyte.gz"),
                     "mnist: images,labels; cifar10: batch files"),
    "dataset.train_subset": (1000, "0 keeps the whole split"),
    "dataset.test_subset": (1000, "0 keeps the whole split"),
    "dataset.subset_seed": (0, "seed of the subset draw"),

    "teacher.arch": ("vgg9", "architecture name"),
    "teacher.width": (8, "base channel width"),
    "teacher.hidden": (128, "hidden linear width"),
    "teacher.dropout": (0.2, "dropout probability"),
    "teacher.optimizer": ("sgd", "sgd or adam"),
    "teacher.lr": (0.01, "learning rate"),
    "teacher.momentum": (0.9, "SGD momentum"),
    "teacher.weight_decay": (5e-4, "L2 weight decay"),
    "teacher.epochs": (30, "training epochs"),
    "teacher.batch_size": (32, "minibatch size"),

    "intermediate.arch": ("3conv2linear", "3conv2linear, vgg5 or mlp"),
    "intermediate.channels": ((8, 16, 16), "3conv2linear conv widths"),
    "intermediate.width": (8, "vgg5 base width"),
    "intermediate.hidden": (64, "hidden linear width"),
    "intermediate.dropout": (0.2, "dropout probability"),
    "intermediate.optimizer": ("sgd", "sgd or adam"),
    "intermediate.lr": (0.01, "learning rate"),
    "intermediate.momentum": (0.9, "SGD momentum"),
    "intermediate.weight_decay": (5e-4, "L2 weight decay"),
    "intermediate.epochs": (20, "training epochs"),
    "intermediate.batch_size": (32, "minibatch size"),

    "convert.time_steps": (500, "calibration time steps"),
    "convert.samples": (512, "calibration samples drawn from the training split"),
    "convert.percentile": (0.0, "0 uses the maximum, otherwise this percentile"),
    "convert.coding": ("poisson", "poisson or direct"),
    "convert.leak": (1.0, "leak stored with the converted student"),

    "distill.alpha": (0.9, "attention loss weight; 0 gives the hybrid baseline"),
    "distill.mode": ("activation", "activation or gradient"),
    "distill.levels": (("low", "mid", "high"), "levels paired between teacher and student"),
    "distill.pairs": ((), "explicit level:teacher_layer:student_layer entries"),
    "distill.normalize": (True, "normalize attention maps"),
    "distill.student_activation": ("spikes", "spikes or membrane"),
    "distill.per_step": (False, "gradient mode: one SAM term per step"),
    "distill.time_steps": (100, "simulation time steps"),
    "distill.gamma": (0.3, "surrogate gradient scale"),
    "distill.leak": (1.0, "membrane leak"),
    "distill.reset_grad": (True, "backpropagate through the soft reset"),
    "distill.leak_grad": (True, "backpropagate through the leak"),
    "distill.coding": ("poisson", "poisson or direct"),
    "distill.optimizer": ("adam", "sgd or adam"),
    "distill.lr": (1e-4, "learning rate"),
    "distill.weight_decay": (5e-4, "L2 weight decay"),
    "distill.epochs": (4, "training epochs"),
    "distill.batch_size": (16, "minibatch size"),

    "evaluate.checkpoint": ("distilled.ckpt", "checkpoint to evaluate, relative to out"),
    "evaluate.time_steps": (100, "SNN time steps"),
    "evaluate.coding": ("poisson", "poisson or direct"),

    "energy.checkpoint": ("distilled.ckpt", "checkpoint to profile, relative to out"),
    "energy.samples": (2000, "test samples counted; 0 uses the whole test split"),
    "energy.time_steps": (100, "SNN time steps"),
    "energy.coding": ("poisson", "poisson or direct"),
    "energy.records_dir": ("", "if set, spike records are stored there"),
}


class ConfigError(ValueError):
    pass


def _parse_value(key, text):
    default = DEFAULTS[key][0]
    text = text.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = tuple(s.strip() for s in text.split(",") if s.strip())
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            return items
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def _render(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Resolved settings; read with ``cfg["distill.alpha"]`` or ``cfg.section("distill")``."""

    def __init__(self, values=None):
        self._values = {k: v for k, (v, _) in DEFAULTS.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self._values[key] = _parse_value(key, value) if isinstance(value, str) else value

    def __getitem__(self, key):
        try:
            return self._values[key]
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}") from None

    def section(self, name):
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self._values.items() if k.startswith(prefix)}

    def to_text(self, include_out=True):
        return "".join(f"{k} = {_render(v)}\n" for k, v in sorted(self._values.items())
                       if include_out or k != "out")

    @property
    def hash(self):
        return hashlib.sha256(self.to_text(include_out=False).encode("utf-8")).hexdigest()

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self._values == other._values


def parse_config_text(text, source="<config>"):
    entries = {}
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{number}: unknown config key {key!r}")
        if key in entries:
            raise ConfigError(f"{source}:{number}: {key!r} given twice")
        entries[key] = value
    return entries


def load_config(path=None, overrides=(), seed=None, out=None):
    """Defaults, then the file at ``path``, then ``key=value`` overrides, then flags."""
    cfg = RunConfig()
    if path is not None:
        path = pathlib.Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        for key, value in parse_config_text(text, str(path)).items():
            cfg.set(key, value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        cfg.set(key, value)
    if seed is not None:
        cfg.set("seed", int(seed))
    if out is not None:
        cfg.set("out", str(out))
    return cfg


def dataset_spec(cfg):
    from .datasets import DatasetSpec

    return DatasetSpec(cfg["dataset.name"], cfg["dataset.num_classes"],
                       tuple(cfg["dataset.image_shape"]), tuple(cfg["dataset.train"]),
                       tuple(cfg["dataset.test"]), cfg["dataset.train_subset"] or None,
                       cfg["dataset.test_subset"] or None, cfg["dataset.subset_seed"])
