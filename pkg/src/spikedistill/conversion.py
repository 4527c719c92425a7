"""ANN-to-SNN conversion by threshold balancing.

Weights are copied unchanged. Thresholds are fixed front to back: for each
spiking layer the calibration set is simulated with the thresholds of all
earlier layers already in place, and the layer's threshold becomes the
largest input current ``W @ o[t]`` seen over samples, steps and neurons.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .encoding import encode_batch
from .network import Checkpoint, is_wide_stem
from .snn import SnnConfig, snn_forward
from .tensor import DTYPE

log = logging.getLogger(__name__)


class ConversionError(ValueError):
    pass


@dataclass(frozen=True)
class Violation:
    layer: int
    kind: str
    message: str

    def __str__(self):
        return f"layer {self.layer}: {self.message}"


@dataclass
class CalibrationReport:
    layers: list
    max_preactivation: np.ndarray
    thresholds: np.ndarray
    samples: int
    time_steps: int
    percentile: float = 0.0
    extra: dict = field(default_factory=dict)

    def rows(self):
        for layer, pre, th in zip(self.layers, self.max_preactivation, self.thresholds):
            yield {"layer": layer, "max_preactivation": float(pre), "threshold": float(th)}


def validate_convertible(spec):
    """List every conversion-constraint violation in ``spec`` (empty when convertible)."""
    problems = []
    first_conv = True
    for i, layer in enumerate(spec.layers):
        if layer.kind in ("conv", "linear") and layer.bias:
            problems.append(Violation(i, "bias", f"{layer.kind} uses a bias term"))
        if layer.kind == "batchnorm":
            problems.append(Violation(i, "batchnorm", "batch normalization is not convertible"))
        if layer.kind == "maxpool":
            problems.append(Violation(i, "maxpool", "max pooling loses information on spikes; use avgpool"))
        if layer.kind == "conv" and first_conv:
            first_conv = False
            if is_wide_stem(layer):
                problems.append(Violation(
                    i, "wide-stem",
                    f"{layer.kernel}x{layer.kernel} stride-{layer.stride} stem; replace it with three "
                    "3x3 stride-1 convolutions (network.replace_wide_stem)"))
    if not spec.weighted_indices():
        problems.append(Violation(-1, "no-output", "network has no weighted layers"))
    return problems


def _calibration_ckpt(ann, thresholds):
    n = len(ann.spec.spiking_indices())
    padded = np.full(n, np.inf, dtype=DTYPE)
    padded[:len(thresholds)] = thresholds
    return Checkpoint(ann.spec.with_role("student-snn"), ann.params, thresholds=padded)


def balance_thresholds(ann, images, time_steps, seed=0, percentile=None, coding="poisson",
                       chunk=None, budget=64_000_000):
    """Set one threshold per spiking layer from Poisson-driven calibration runs."""
    violations = validate_convertible(ann.spec)
    if violations:
        raise ConversionError("network is not convertible: " + "; ".join(map(str, violations)))
    images = np.asarray(images, dtype=DTYPE)
    if len(images) == 0:
        raise ConversionError("empty calibration set")
    spec = ann.spec
    spiking = spec.spiking_indices()
    config = SnnConfig(leak=1.0, time_steps=time_steps)
    widest = max(int(np.prod(s)) for s in [spec.input_shape] + spec.shapes())
    if chunk is None:
        chunk = max(1, int(budget // (time_steps * widest)))

    thresholds, maxima = [], []
    for layer in spiking:
        probe = _calibration_ckpt(ann, thresholds)
        seen = []

        def grab(i, current, layer=layer):
            if i == layer:
                if percentile:
                    seen.append(np.asarray(current, dtype=np.float32).ravel())
                else:
                    seen.append(float(current.max()))

        for start in range(0, len(images), chunk):
            ids = np.arange(start, min(start + chunk, len(images)))
            train = encode_batch(images[ids], time_steps, coding, seed, ids)
            snn_forward(probe, train, config, record=False, upto=layer, on_current=grab)
        if percentile:
            peak = float(np.percentile(np.concatenate(seen), percentile))
        else:
            peak = max(seen)
        if not peak > 0:
            raise ConversionError(f"layer {layer}: nonpositive maximum preactivation {peak}")
        log.info("layer %d threshold %.5f", layer, peak)
        maxima.append(peak)
        thresholds.append(peak)
    return CalibrationReport(spiking, np.asarray(maxima, DTYPE), np.asarray(thresholds, DTYPE),
                             len(images), int(time_steps), float(percentile or 0.0))


def convert(ann, report, leak=1.0):
    """Install ``report``'s thresholds on a copy of ``ann`` with role ``student-snn``."""
    spiking = ann.spec.spiking_indices()
    if list(report.layers) != spiking:
        raise ConversionError(
            f"report covers layers {list(report.layers)}, network spiking layers are {spiking}")
    violations = validate_convertible(ann.spec)
    if violations:
        raise ConversionError("network is not convertible: " + "; ".join(map(str, violations)))
    source = ann.copy()
    metadata = dict(ann.metadata)
    metadata.update(leak=float(leak), converted_from=ann.spec.role)
    return Checkpoint(ann.spec.with_role("student-snn"), source.params,
                      thresholds=np.asarray(report.thresholds, DTYPE),
                      max_preactivation=np.asarray(report.max_preactivation, DTYPE),
                      calibration_samples=report.samples,
                      calibration_time_steps=report.time_steps,
                      percentile=report.percentile, metadata=metadata)


def report_from_checkpoint(ckpt):
    return CalibrationReport(ckpt.spec.spiking_indices(), ckpt.max_preactivation,
                             ckpt.thresholds, ckpt.calibration_samples,
                             ckpt.calibration_time_steps, ckpt.percentile)
