"""Time-stepped LIF simulation and surrogate-gradient BPTT.

Hidden weighted layers integrate input current with leak ``lam`` and a soft
reset that subtracts the threshold one step after a spike::

    v[t] = lam * v[t-1] + I[t] - theta * o[t-1]
    o[t] = 1 if v[t] > theta else 0

The output layer integrates without leak or firing, ``v_out[t] = v_out[t-1]
+ I[t]``, and the class distribution is ``softmax(v_out[T])``.

Layers are feed-forward, so the input current of layer ``l`` at step ``t``
depends only on layer ``l-1`` at the same step. The simulator therefore runs
layer by layer, computing the current for all ``T`` steps with one batched
conv/matmul and then scanning the membrane recurrence over time. The result
equals the step-by-step schedule; only the loop order differs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as tc
from .encoding import SpikeTrain
from .tensor import DTYPE


class SnnError(ValueError):
    pass


@dataclass
class SnnConfig:
    leak: float = 1.0
    gamma: float = 0.3
    time_steps: int = 100
    reset_grad: bool = True
    leak_grad: bool = True

    def __post_init__(self):
        if not 0.0 < self.leak <= 1.0:
            raise SnnError(f"leak must lie in (0, 1], got {self.leak}")
        if not 0.0 <= self.gamma <= 1.0:
            raise SnnError(f"gamma must lie in [0, 1], got {self.gamma}")
        if int(self.time_steps) < 1:
            raise SnnError(f"time_steps must be >= 1, got {self.time_steps}")


@dataclass
class SpikeRecord:
    """Everything one forward pass produced, time-major ``(T, N, ...)``.

    ``spikes`` and ``membrane`` are keyed by spiking-layer index. ``inputs``
    holds the per-step input of every weighted layer (needed for weight
    gradients). Time steps are 1-based in :meth:`last_spike_time`.
    """

    time_steps: int
    spikes: dict = field(default_factory=dict)
    membrane: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    dropout_masks: dict = field(default_factory=dict)
    output_potential: Optional[np.ndarray] = None
    thresholds: dict = field(default_factory=dict)

    def layers(self):
        return sorted(self.spikes)

    def last_spike_time(self, layer, t=None):
        """StT after step ``t`` (default ``T``): latest 1-based spike step, 0 if none."""
        if layer not in self.spikes:
            raise KeyError(f"layer {layer} not recorded")
        t = self.time_steps if t is None else int(t)
        if not 0 <= t <= self.time_steps:
            raise ValueError(f"t must lie in [0, {self.time_steps}]")
        spikes = self.spikes[layer][:t] > 0
        steps = np.arange(1, t + 1).reshape((t,) + (1,) * (spikes.ndim - 1))
        return np.where(spikes, steps, 0).max(axis=0, initial=0)

    def spike_counts(self, layer):
        return self.spikes[layer].sum(axis=0, dtype=np.float64)


def surrogate_grad(v, theta, gamma=0.3):
    """Damped triangular pseudo-derivative ``gamma * max(0, 1 - |v - theta| / theta)``."""
    if theta <= 0:
        raise SnnError(f"threshold must be positive, got {theta}")
    v = np.asarray(v)
    dtype = v.dtype if v.dtype.kind == "f" else np.float64
    tri = np.maximum(0.0, 1.0 - np.abs(v - theta) / theta)
    return (gamma * tri).astype(dtype)


def lif_step(v_prev, spikes_prev, weighted_input, leak, theta):
    """One membrane update and firing decision; returns ``(v, spikes)``."""
    v = leak * v_prev + weighted_input - theta * spikes_prev
    return v, (v > theta).astype(np.asarray(v).dtype)


def lif_scan(current, leak, theta, keep_membrane=True):
    """Run :func:`lif_step` over axis 0 of ``current`` starting from rest."""
    dtype = current.dtype
    leak, theta = dtype.type(leak), dtype.type(theta)
    spikes = np.empty_like(current)
    membrane = np.empty_like(current) if keep_membrane else None
    v = np.zeros_like(current[0])
    o = np.zeros_like(current[0])
    for t in range(current.shape[0]):
        v *= leak
        v += current[t]
        v -= theta * o
        np.greater(v, theta, out=o, casting="unsafe")
        spikes[t] = o
        if keep_membrane:
            membrane[t] = v
    return spikes, membrane


def _as_time_major(spiketrain, spec):
    values = spiketrain.values if isinstance(spiketrain, SpikeTrain) else spiketrain
    values = tc.as_float(values)
    if tuple(values.shape[1:]) == spec.input_shape:
        values = values[:, None]
        single = True
    elif tuple(values.shape[2:]) == spec.input_shape:
        single = False
    else:
        raise SnnError(f"spike train shape {values.shape} does not match input {spec.input_shape}")
    return values, single


def _apply_weighted(layer, p, h):
    """Apply a conv/linear to a time-major tensor by folding T into the batch."""
    t, n = h.shape[:2]
    flat = h.reshape((t * n,) + h.shape[2:])
    if layer.kind == "conv":
        out = tc.conv2d(flat, p["weight"], layer.stride, layer.pad, p.get("bias"))
    else:
        out = tc.linear(flat, p["weight"], p.get("bias"))
    return out.reshape((t, n) + out.shape[1:])


def snn_forward(ckpt, spiketrain, config, train=False, rng=None, record=True, upto=None,
                on_current=None):
    """Simulate ``ckpt`` (role ``student-snn``) on a time-major spike train.

    ``spiketrain`` is a :class:`SpikeTrain` or an array shaped
    ``(T, *input_shape)`` or ``(T, N, *input_shape)``. Returns
    ``(probabilities, record)``; probabilities are float64 with rows summing
    to one. With ``record=False`` only spike tensors are kept.

    ``upto`` stops after the layer with that index (used by threshold
    calibration together with ``on_current``, which receives the input
    current of every weighted layer as it is computed).
    """
    spec = ckpt.spec
    if spec.role != "student-snn" or ckpt.thresholds is None:
        raise SnnError("snn_forward needs a student-snn checkpoint with thresholds")
    values, single = _as_time_major(spiketrain, spec)
    steps = values.shape[0]
    if steps != config.time_steps:
        raise SnnError(f"spike train has {steps} steps, config expects {config.time_steps}")
    if train and rng is None:
        raise SnnError("train mode needs an rng for dropout")

    weighted = spec.weighted_indices()
    output_index = weighted[-1]
    thresholds = {i: float(th) for i, th in zip(spec.spiking_indices(), ckpt.thresholds)}
    rec = SpikeRecord(time_steps=steps, thresholds=thresholds)
    h = values
    logits = None
    for i, (layer, p) in enumerate(zip(spec.layers, ckpt.params)):
        kind = layer.kind
        if kind in ("conv", "linear"):
            if record:
                rec.inputs[i] = h
            current = _apply_weighted(layer, p, h)
            if on_current is not None:
                on_current(i, current)
            if upto is not None and i >= upto:
                return None, rec
            if i == output_index:
                potential = np.cumsum(current, axis=0, dtype=current.dtype)
                rec.output_potential = potential
                logits = potential[-1]
                h = logits
            else:
                h, membrane = lif_scan(current, config.leak, thresholds[i], keep_membrane=record)
                rec.spikes[i] = h
                if record:
                    rec.membrane[i] = membrane
        elif kind == "avgpool":
            t, n = h.shape[:2]
            pooled = tc.avgpool2d(h.reshape((t * n,) + h.shape[2:]), layer.pool)
            h = pooled.reshape((t, n) + pooled.shape[1:])
        elif kind == "flatten":
            h = h.reshape(h.shape[:2] + (-1,))
        elif kind == "dropout":
            if train and layer.p > 0:
                mask = tc.dropout_mask(rng, h.shape[1:], layer.p).astype(h.dtype)
                rec.dropout_masks[i] = mask
                h = h * mask
        elif kind == "relu":
            pass  # spikes are already nonnegative
        else:
            raise SnnError(f"layer {i} ({kind}) cannot run in a spiking network")
        if upto is not None and i >= upto:
            return None, rec
    from .ann import softmax

    probs = softmax(logits)
    return (probs[0] if single else probs), rec


def snn_backward(record, ckpt, config, grad_output, spike_grads=None, membrane_grads=None):
    """Surrogate-gradient BPTT through a recorded forward pass.

    ``grad_output`` is dL/dv_out[T] with shape (N, K). ``spike_grads`` maps a
    spiking-layer index to an extra dL/do term, either per step ``(T, N, ...)``
    or time-invariant ``(N, ...)`` (a loss on spike counts); ``membrane_grads``
    does the same for dL/dv. Returns one
    gradient dict per layer, like :func:`spikedistill.ann.ann_backward`.
    """
    spec = ckpt.spec
    weighted = spec.weighted_indices()
    in_shapes = spec.input_shapes()
    if sorted(record.inputs) != weighted or any(
            tuple(record.inputs[i].shape[2:]) != tuple(in_shapes[i]) for i in weighted):
        raise SnnError("record does not match this network (forward must use record=True)")
    spike_grads = spike_grads or {}
    membrane_grads = membrane_grads or {}
    output_index, first_weighted = weighted[-1], weighted[0]
    steps = record.time_steps
    grads = [dict() for _ in spec.layers]

    g = None
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, p = spec.layers[i], ckpt.params[i]
        kind = layer.kind
        if kind in ("conv", "linear"):
            if i == output_index:
                grad_output = np.asarray(grad_output, dtype=record.output_potential.dtype)
                g_current = np.broadcast_to(grad_output, (steps,) + grad_output.shape)
            else:
                g_current = _lif_backward(record, i, g, spike_grads.get(i),
                                         membrane_grads.get(i), config)
            x = record.inputs[i]
            t, n = x.shape[:2]
            flat_x = x.reshape((t * n,) + x.shape[2:])
            flat_g = np.ascontiguousarray(g_current).reshape((t * n,) + g_current.shape[2:])
            if kind == "conv":
                gx, gw, gb = tc.conv2d_backward(flat_g, flat_x, p["weight"], layer.stride, layer.pad,
                                                input_grad=i != first_weighted)
            else:
                gx, gw, gb = tc.linear_backward(flat_g, flat_x, p["weight"])
            grads[i]["weight"] = gw
            if "bias" in p:
                grads[i]["bias"] = gb
            if i == first_weighted:
                break
            g = gx.reshape(x.shape)
        elif kind == "avgpool":
            t, n = g.shape[:2]
            up = tc.avgpool2d_backward(g.reshape((t * n,) + g.shape[2:]), layer.pool)
            g = up.reshape((t, n) + up.shape[1:])
        elif kind == "flatten":
            g = g.reshape(g.shape[:2] + tuple(spec.input_shapes()[i]))
        elif kind == "dropout":
            mask = record.dropout_masks.get(i)
            if mask is not None:
                g = g * mask
    return grads


def _broadcast_time(extra, like):
    extra = np.asarray(extra, dtype=like.dtype)
    return extra if extra.ndim == like.ndim else np.broadcast_to(extra, like.shape)


def _lif_backward(record, i, g_spikes, extra, extra_v, config):
    """Reverse-time scan for one spiking layer; returns dL/dI for every step."""
    membrane = record.membrane[i]
    theta = record.thresholds[i]
    dtype = membrane.dtype
    if g_spikes is None:
        g_spikes = np.zeros_like(membrane)
    if extra is not None:
        g_spikes = g_spikes + _broadcast_time(extra, membrane)
    if extra_v is not None:
        extra_v = _broadcast_time(extra_v, membrane)
    surrogate = surrogate_grad(membrane, theta, config.gamma).astype(dtype)
    leak = dtype.type(config.leak if config.leak_grad else 0.0)
    reset = dtype.type(-theta if config.reset_grad else 0.0)
    g_current = np.empty_like(membrane)
    dv_next = np.zeros_like(membrane[0])
    for t in range(membrane.shape[0] - 1, -1, -1):
        do = g_spikes[t] + reset * dv_next
        dv = do * surrogate[t] + leak * dv_next
        if extra_v is not None:
            dv = dv + extra_v[t]
        g_current[t] = dv
        dv_next = dv
    return g_current


def simulate(ckpt, images, config, coding="poisson", seed=0, sample_ids=None,
             budget=64_000_000, on_chunk=None, readout_steps=None):
    """Batched inference over many images with bounded memory.

    Samples are processed in chunks so that ``T * chunk * widest_layer`` stays
    under ``budget`` elements. Returns float64 probabilities (N, K).
    ``on_chunk(ids, record)`` sees each chunk's record (spikes only).

    With ``readout_steps`` the result is a dict mapping each step count to
    the probabilities read from the output potential at that step. Encoders
    draw time-major, so this equals separate runs with shorter trains.
    """
    from .encoding import encode_batch

    images = tc.as_float(images)
    if sample_ids is None:
        sample_ids = np.arange(len(images))
    widest = max(int(np.prod(s)) for s in [ckpt.spec.input_shape] + ckpt.spec.shapes())
    chunk = max(1, int(budget // (config.time_steps * widest)))
    steps = [config.time_steps] if readout_steps is None else [int(t) for t in readout_steps]
    if any(t < 1 or t > config.time_steps for t in steps):
        raise SnnError(f"readout steps {steps} outside 1..{config.time_steps}")
    from .ann import softmax

    out = {t: [] for t in steps}
    for start in range(0, len(images), chunk):
        ids = sample_ids[start:start + chunk]
        train = encode_batch(images[start:start + chunk], config.time_steps, coding, seed, ids)
        probs, rec = snn_forward(ckpt, train, config, record=False)
        for t in steps:
            out[t].append(probs if t == config.time_steps else softmax(rec.output_potential[t - 1]))
        if on_chunk is not None:
            on_chunk(ids, rec)
    empty = np.zeros((0, ckpt.spec.num_classes))
    out = {t: np.concatenate(v) if v else empty for t, v in out.items()}
    return out if readout_steps is not None else out[config.time_steps]
