"""Accuracy, spike counts and the spike-count energy proxy.

Energy is reported as spike activity only: for each spiking layer, the
number of spikes over all steps divided by the layer's neuron count,
averaged over samples. Counts are accumulated as exact integers.

CSV column order (``energy.csv``)::

    layer, kind, neurons, avg_spikes, total_spikes, time_steps, samples, threshold
"""
from __future__ import annotations

import csv
import io
import pathlib
from dataclasses import dataclass, field

import numpy as np

ENERGY_COLUMNS = ("layer", "kind", "neurons", "avg_spikes", "total_spikes", "time_steps",
                  "samples", "threshold")


def top1_accuracy(predictions, labels):
    """Fraction of correct predictions.

    ``predictions`` is either class ids (N,) or scores (N, K); for scores the
    argmax is taken and ties go to the lowest class index.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(predictions) == 0:
        raise ValueError("top1_accuracy of an empty set")
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    if predictions.ndim == 2:
        predictions = predictions.argmax(axis=1)
    return float(np.mean(predictions == labels))


@dataclass
class EnergyReport:
    layers: list
    kinds: list
    neurons: list
    total_spikes: list
    time_steps: int
    samples: int
    thresholds: list = field(default_factory=list)

    @property
    def avg_spikes(self):
        return [t / (n * self.samples) for t, n in zip(self.total_spikes, self.neurons)]

    @property
    def network_avg(self):
        return sum(self.total_spikes) / (sum(self.neurons) * self.samples)

    def rows(self):
        ths = self.thresholds or [float("nan")] * len(self.layers)
        for layer, kind, n, total, avg, th in zip(self.layers, self.kinds, self.neurons,
                                                  self.total_spikes, self.avg_spikes, ths):
            yield {"layer": layer, "kind": kind, "neurons": n, "avg_spikes": avg,
                   "total_spikes": total, "time_steps": self.time_steps,
                   "samples": self.samples, "threshold": th}

    def to_csv(self, extra=None):
        extra = extra or {}
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(ENERGY_COLUMNS) + list(extra),
                                lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in {**row, **extra}.items()})
        return buf.getvalue()

    def summary(self):
        lines = [f"time_steps: {self.time_steps}", f"samples: {self.samples}",
                 f"network_avg_spikes: {self.network_avg!r}"]
        for row in self.rows():
            lines.append(f"layer {row['layer']} ({row['kind']}, {row['neurons']} neurons): "
                         f"avg_spikes {row['avg_spikes']!r}")
        return "\n".join(lines) + "\n"


class SpikeCounter:
    """Streaming accumulator of per-layer spike totals over many records."""

    def __init__(self, spec=None):
        self.spec = spec
        self.layers = None
        self.shapes = None
        self.totals = None
        self.samples = 0
        self.time_steps = None
        self.thresholds = None

    def add(self, record):
        layers = record.layers()
        shapes = [record.spikes[l].shape[2:] for l in layers]
        if self.layers is None:
            self.layers, self.shapes = layers, shapes
            self.totals = [0] * len(layers)
            self.time_steps = record.time_steps
            self.thresholds = [record.thresholds.get(l, float("nan")) for l in layers]
        elif layers != self.layers or shapes != self.shapes or record.time_steps != self.time_steps:
            raise ValueError("spike records come from different networks or time-step settings")
        for k, layer in enumerate(layers):
            self.totals[k] += int(np.count_nonzero(record.spikes[layer]))
        self.samples += record.spikes[layers[0]].shape[1] if layers else 0

    def report(self):
        if self.layers is None:
            raise ValueError("no spike records were added")
        kinds = [self.spec.layers[l].kind if self.spec is not None else "" for l in self.layers]
        neurons = [int(np.prod(s)) for s in self.shapes]
        return EnergyReport(list(self.layers), kinds, neurons, list(self.totals),
                            self.time_steps, self.samples, list(self.thresholds))


def spike_report(records, spec=None):
    counter = SpikeCounter(spec)
    for record in records:
        counter.add(record)
    return counter.report()


def save_spike_record(path, record):
    """Store spike tensors bit-packed (``.npz``); membranes are not kept."""
    arrays = {"time_steps": np.array(record.time_steps)}
    for layer in record.layers():
        spikes = record.spikes[layer] > 0
        arrays[f"shape_{layer}"] = np.array(spikes.shape)
        arrays[f"bits_{layer}"] = np.packbits(spikes.ravel())
        arrays[f"threshold_{layer}"] = np.array(record.thresholds.get(layer, np.nan))
    np.savez_compressed(path, **arrays)


def load_spike_record(path):
    from .snn import SpikeRecord

    with np.load(pathlib.Path(path)) as data:
        rec = SpikeRecord(time_steps=int(data["time_steps"]))
        for key in data.files:
            if key.startswith("bits_"):
                layer = int(key[5:])
                shape = tuple(data[f"shape_{layer}"])
                bits = np.unpackbits(data[key], count=int(np.prod(shape)))
                rec.spikes[layer] = bits.reshape(shape).astype(np.float32)
                rec.thresholds[layer] = float(data[f"threshold_{layer}"])
    return rec
