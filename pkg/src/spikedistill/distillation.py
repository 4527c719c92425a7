"""Layer-wise attention distillation from an ANN teacher into an SNN student.

Two kinds of attention are supported:

* activation attention: ``map[h, m] = mean_c |A[c, h, m]|**2`` over a
  layer's activation. The teacher uses post-ReLU activations; the student
  uses per-neuron spike counts summed over time.
* gradient attention: the teacher's input sensitivity ``|dL/dx|**2``
  (channel mean, resized to the student layer) against the student's spike
  activation map at the last step, where every spike at the current step
  is weighted by ``sum over earlier own spikes t' of exp(-(t - t'))``.

Maps are divided by their Frobenius norm by default so the ANN activation
scale and the SNN spike-count scale do not matter. The attention loss sums,
over level pairs, the L2 norm of the map difference (averaged over the
batch), and the training objective is ``ce + alpha / 2 * attention``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import tensor as tc
from .ann import cross_entropy, forward_cached, input_gradient
from .encoding import encode_batch
from .network import LEVELS, capture_index
from .snn import simulate, snn_backward, snn_forward
from .tensor import make_rng

log = logging.getLogger(__name__)

MODES = ("activation", "gradient")


class DistillError(ValueError):
    pass


class AttentionMap(NamedTuple):
    map: np.ndarray
    level: str
    source: str


class LayerPair(NamedTuple):
    level: str
    teacher_layer: int
    student_layer: int


@dataclass
class DistillConfig:
    alpha: float = 0.9
    mode: str = "activation"
    levels: tuple = LEVELS
    normalize: bool = True
    student_activation: str = "spikes"
    per_step: bool = False
    pairs: Optional[list] = None

    def __post_init__(self):
        if self.alpha < 0:
            raise DistillError(f"alpha must be >= 0, got {self.alpha}")
        if self.mode not in MODES:
            raise DistillError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.student_activation not in ("spikes", "membrane"):
            raise DistillError("student_activation must be 'spikes' or 'membrane'")
        unknown = set(self.levels) - set(LEVELS)
        if unknown:
            raise DistillError(f"unknown levels {sorted(unknown)}")


# --------------------------------------------------------------------------
# maps
# --------------------------------------------------------------------------

def _normalize(raw):
    """Divide each map (last two axes) by its Frobenius norm; zero maps stay zero."""
    norm = np.sqrt((raw * raw).sum(axis=(-2, -1), keepdims=True))
    return np.divide(raw, norm, out=np.zeros_like(raw), where=norm > 0), norm


def _normalize_backward(q, norm, grad_q):
    dot = (q * grad_q).sum(axis=(-2, -1), keepdims=True)
    return np.divide(grad_q - q * dot, norm, out=np.zeros_like(grad_q), where=norm > 0)


def attention_map(activation, normalize=True):
    """Channel mean of squared magnitudes for (C, H, M) or batched (N, C, H, M) input."""
    a = np.asarray(activation, dtype=np.float64)
    if a.ndim not in (3, 4):
        raise ValueError(f"attention_map expects (C, H, M) or (N, C, H, M), got {a.shape}")
    raw = (a * a).mean(axis=-3)
    return _normalize(raw)[0] if normalize else raw


def resize_map(raw, shape):
    """Block-average when the size ratio is an integer, bilinear otherwise."""
    h, w = raw.shape[-2:]
    h2, w2 = shape
    if (h, w) == (h2, w2):
        return raw
    if h2 <= h and w2 <= w and h % h2 == 0 and w % w2 == 0 and h // h2 == w // w2:
        k = h // h2
        return raw.reshape(raw.shape[:-2] + (h2, k, w2, k)).mean(axis=(-3, -1))
    return tc.interpolate_bilinear(raw, shape)


def student_attention_from_spikes(record, layer, normalize=True):
    if layer not in record.spikes:
        raise DistillError(f"layer {layer} not recorded")
    return attention_map(record.spike_counts(layer), normalize)


def sam_kernel(record, layer, t):
    """Per-neuron ``sum_{t' <= t} exp(-(t - t')) * o[t']`` (t is 1-based)."""
    if layer not in record.spikes:
        raise DistillError(f"layer {layer} not recorded")
    if not 1 <= t <= record.time_steps:
        raise ValueError(f"t must lie in [1, {record.time_steps}], got {t}")
    weights = np.exp(-(t - np.arange(1, t + 1, dtype=np.float64)))
    return np.tensordot(weights, record.spikes[layer][:t].astype(np.float64), axes=(0, 0))


def sam_map(record, layer, t=None, normalize=False):
    """Spike activation map at step ``t`` (default ``T``), summed over channels."""
    t = record.time_steps if t is None else int(t)
    kernel = sam_kernel(record, layer, t)
    current = record.spikes[layer][t - 1].astype(np.float64)
    raw = (current * kernel).sum(axis=-3)
    return _normalize(raw)[0] if normalize else raw


def _sam_backward(record, layer, t, grad_raw):
    """dL/do[t'] for every step given dL/d(raw SAM at t)."""
    spikes = record.spikes[layer]
    g = np.asarray(grad_raw, dtype=np.float64)[..., None, :, :]
    current = spikes[t - 1].astype(np.float64)
    out = np.zeros(spikes.shape, dtype=np.float64)
    weights = np.exp(-(t - np.arange(1, t + 1, dtype=np.float64)))
    # raw = sum_c o_t * K_t, K_t = sum_{t'<=t} w[t'] o_t'
    for tp in range(t):
        out[tp] = g * current * weights[tp]
    out[t - 1] += g * sam_kernel(record, layer, t)
    return out


def attention_loss(pairs):
    """Sum over ``(student, teacher)`` pairs of the flattened L2 difference norm.

    Batched maps (N, H, M) contribute the mean of their per-sample norms.
    """
    total = 0.0
    for a, b in pairs:
        a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
        if a.shape != b.shape:
            raise DistillError(f"attention map shapes differ: {a.shape} vs {b.shape}")
        diff = (a - b).reshape(-1, a.shape[-2] * a.shape[-1])
        total += float(np.sqrt((diff * diff).sum(axis=1)).mean())
    return total


def _pair_loss_grad(student_map, teacher_map):
    diff = student_map - teacher_map
    norm = np.sqrt((diff * diff).sum(axis=(-2, -1), keepdims=True))
    n = diff.shape[0] if diff.ndim == 3 else 1
    grad = np.divide(diff, norm, out=np.zeros_like(diff), where=norm > 0) / n
    return float(norm.mean()), grad


def activation_attention_grad(activation, target, normalize=True):
    """Pair loss of ``activation`` (N, C, H, M) against a target map, and its gradient."""
    raw = attention_map(activation, normalize=False)
    q, norm = _normalize(raw) if normalize else (raw, None)
    loss, g_q = _pair_loss_grad(q, target)
    g_raw = _normalize_backward(q, norm, g_q) if normalize else g_q
    channels = activation.shape[-3]
    return loss, g_raw[..., None, :, :] * (2.0 / channels) * activation


def total_loss(ce, at, alpha):
    return ce + 0.5 * alpha * at


# --------------------------------------------------------------------------
# teacher side
# --------------------------------------------------------------------------

def pair_layers(teacher_spec, student_spec, levels=LEVELS, table=None):
    """Resolve (level, teacher layer, student layer) triples.

    Without an explicit ``table`` the level tags of both specs are matched.
    """
    student_spiking = set(student_spec.spiking_indices())
    if table:
        pairs = [LayerPair(*p) for p in table]
    else:
        t_levels, s_levels = teacher_spec.level_layers(), student_spec.level_layers()
        pairs = []
        for level in levels:
            if level not in t_levels or level not in s_levels:
                raise DistillError(f"level {level!r} is not tagged in both teacher and student")
            pairs.append(LayerPair(level, t_levels[level], s_levels[level]))
    if len({p.level for p in pairs}) != len(pairs):
        raise DistillError("each level may appear in only one pair")
    for p in pairs:
        if p.teacher_layer >= len(teacher_spec.layers) or teacher_spec.layers[p.teacher_layer].kind != "conv":
            raise DistillError(f"pair {p}: teacher layer is not a conv layer")
        if p.student_layer not in student_spiking or student_spec.layers[p.student_layer].kind != "conv":
            raise DistillError(f"pair {p}: student layer is not a spiking conv layer")
    return pairs


def _student_shape(student_spec, layer):
    return tuple(student_spec.shapes()[layer][1:])


def teacher_activation_maps(teacher, x, pairs, student_spec, normalize=True):
    """Normalized teacher maps resized to each paired student layer, keyed by level."""
    _, cache = forward_cached(teacher, x, train=False)
    n_layers = len(teacher.spec.layers)
    out = {}
    for p in pairs:
        j = capture_index(teacher.spec, p.teacher_layer)
        act = cache[j + 1][0] if j + 1 < n_layers else tc.relu(cache[j][0])
        raw = resize_map(attention_map(act, normalize=False), _student_shape(student_spec, p.student_layer))
        out[p.level] = _normalize(raw)[0] if normalize else raw
    return out


def gradient_attention_teacher(teacher, x, labels, shapes, normalize=True):
    """Teacher input-sensitivity maps ``mean_c (dL/dx)**2`` resized per level.

    ``shapes`` maps level -> (H, M). Returns level -> (N, H, M).
    """
    grad = input_gradient(teacher, x, labels)
    raw = attention_map(grad, normalize=False)
    out = {}
    for level, shape in shapes.items():
        m = resize_map(raw, shape)
        out[level] = _normalize(m)[0] if normalize else m
    return out


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class StepResult:
    loss_total: float
    loss_ce: float
    loss_at: float
    correct: int
    grads: list = field(repr=False, default=None)


def distill_step(teacher, student, images, labels, dcfg, scfg, pairs, rng, encode_seed,
                 sample_ids, coding="poisson"):
    """Loss and student gradients for one batch. ``teacher=None`` means CE only."""
    spikes_in = encode_batch(images, scfg.time_steps, coding, encode_seed, sample_ids)
    probs, record = snn_forward(student, spikes_in, scfg, train=True, rng=rng, record=True)
    logits = record.output_potential[-1]
    ce, grad_out = cross_entropy(logits, labels)

    spike_grads, membrane_grads = {}, {}
    at = 0.0
    if teacher is not None and pairs:
        scale = 0.5 * dcfg.alpha
        if dcfg.mode == "activation":
            targets = teacher_activation_maps(teacher, images, pairs, student.spec, dcfg.normalize)
            for p in pairs:
                if dcfg.student_activation == "spikes":
                    counts = record.spike_counts(p.student_layer)
                else:
                    counts = record.membrane[p.student_layer].sum(axis=0, dtype=np.float64)
                loss, g_counts = activation_attention_grad(counts, targets[p.level], dcfg.normalize)
                at += loss
                bucket = spike_grads if dcfg.student_activation == "spikes" else membrane_grads
                bucket[p.student_layer] = scale * g_counts
        else:
            shapes = {p.level: _student_shape(student.spec, p.student_layer) for p in pairs}
            targets = gradient_attention_teacher(teacher, images, labels, shapes, dcfg.normalize)
            steps = range(1, scfg.time_steps + 1) if dcfg.per_step else [scfg.time_steps]
            for p in pairs:
                total = None
                for t in steps:
                    raw = sam_map(record, p.student_layer, t)
                    q, norm = _normalize(raw) if dcfg.normalize else (raw, None)
                    loss, g_q = _pair_loss_grad(q, targets[p.level])
                    at += loss
                    g_raw = _normalize_backward(q, norm, g_q) if dcfg.normalize else g_q
                    g = _sam_backward(record, p.student_layer, t, scale * g_raw)
                    total = g if total is None else total + g
                spike_grads[p.student_layer] = total

    grads = snn_backward(record, student, scfg, grad_out, spike_grads, membrane_grads)
    correct = int((logits.argmax(axis=1) == labels).sum())
    return StepResult(total_loss(ce, at, dcfg.alpha if teacher is not None else 0.0), ce, at,
                      correct, grads)


def distill_epoch(teacher, student, dataset, dcfg, scfg, optimizer, epoch=1, seed=0,
                  batch_size=16, coding="poisson"):
    """One pass over ``dataset`` updating ``student`` in place.

    The teacher is only read. With ``teacher=None`` the epoch is plain
    surrogate-gradient fine-tuning (the hybrid baseline).
    """
    pairs = None
    if teacher is not None:
        pairs = pair_layers(teacher.spec, student.spec, dcfg.levels, dcfg.pairs)
    perm = make_rng(seed, epoch).permutation(len(dataset))
    sums = {"loss_total": 0.0, "loss_ce": 0.0, "loss_at": 0.0}
    correct, seen = 0, 0
    for b, start in enumerate(range(0, len(dataset), batch_size)):
        ids = perm[start:start + batch_size]
        xb, yb = dataset.images[ids], dataset.labels[ids]
        rng = make_rng(seed, 0x5D, epoch, b)
        res = distill_step(teacher, student, xb, yb, dcfg, scfg, pairs, rng,
                           (seed, epoch), ids, coding)
        if not np.isfinite(res.loss_total):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {b}")
        optimizer.step(student.params, res.grads)
        k = len(yb)
        sums["loss_total"] += res.loss_total * k
        sums["loss_ce"] += res.loss_ce * k
        sums["loss_at"] += res.loss_at * k
        correct += res.correct
        seen += k
    metrics = {key: value / seen for key, value in sums.items()}
    metrics["train_acc"] = correct / seen
    return student, metrics


def evaluate_snn(ckpt, dataset, scfg, coding="poisson", seed=0, on_chunk=None):
    from .metrics import top1_accuracy

    probs = simulate(ckpt, dataset.images, scfg, coding, seed, on_chunk=on_chunk)
    return top1_accuracy(probs, dataset.labels)


def train_student(teacher, student, train, test, dcfg, scfg, optimizer, epochs, seed=0,
                  batch_size=16, coding="poisson", eval_seed=None, on_epoch=None):
    """Run ``epochs`` distillation epochs; return ``(best_student, rows)``.

    Row 0 is the untouched student. The best test accuracy wins (earliest on
    ties); every epoch is evaluated with the same encoding seed.
    """
    student = student.copy()
    eval_seed = seed + 7919 if eval_seed is None else eval_seed
    acc = evaluate_snn(student, test, scfg, coding, eval_seed)
    rows = [{"epoch": 0, "loss_total": float("nan"), "loss_ce": float("nan"),
             "loss_at": float("nan"), "train_acc": float("nan"), "test_acc": acc}]
    if on_epoch is not None:
        on_epoch(rows[0])
    best, best_acc = student.copy(), acc
    for epoch in range(1, epochs + 1):
        _, metrics = distill_epoch(teacher, student, train, dcfg, scfg, optimizer, epoch, seed,
                                   batch_size, coding)
        acc = evaluate_snn(student, test, scfg, coding, eval_seed)
        row = {"epoch": epoch, **metrics, "test_acc": acc}
        rows.append(row)
        log.info("distill epoch %d total %.4f ce %.4f at %.4f test %.4f", epoch,
                 metrics["loss_total"], metrics["loss_ce"], metrics["loss_at"], acc)
        if on_epoch is not None:
            on_epoch(row)
        if acc > best_acc:
            best, best_acc = student.copy(), acc
            best.metadata.update(epoch=epoch, test_acc=acc)
    return best, rows
