"""ANN forward/backward over the fixed layer set, training and introspection.

Forward passes return a per-layer cache; :func:`ann_backward` consumes it
to produce parameter gradients and the gradient w.r.t. the network input.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .datasets import batch_iter
from .network import Checkpoint, capture_index, init_params
from .optim import Optimizer
from .tensor import DTYPE, make_rng

log = logging.getLogger(__name__)

BN_MOMENTUM = 0.1


class TrainingDiverged(RuntimeError):
    pass


def _check_input(spec, x):
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ValueError(f"input shape {tuple(x.shape[1:])} does not match network input {spec.input_shape}")


def forward_cached(ckpt, x, train=False, rng=None):
    """Run the network, keeping what the backward pass needs.

    Returns ``(logits, cache)`` where ``cache`` is a list with one entry per
    layer: ``(layer_input, extra)``.
    """
    spec = ckpt.spec
    x = tc.as_float(x)
    _check_input(spec, x)
    cache = []
    h = x
    for i, (layer, p) in enumerate(zip(spec.layers, ckpt.params)):
        extra = None
        kind = layer.kind
        if kind == "conv":
            out = tc.conv2d(h, p["weight"], layer.stride, layer.pad, p.get("bias"))
        elif kind == "linear":
            out = tc.linear(h, p["weight"], p.get("bias"))
        elif kind == "relu":
            out = tc.relu(h)
        elif kind == "avgpool":
            out = tc.avgpool2d(h, layer.pool)
        elif kind == "maxpool":
            out = tc.maxpool2d(h, layer.pool)
        elif kind == "flatten":
            out = h.reshape(len(h), -1)
        elif kind == "dropout":
            if train and layer.p > 0:
                if rng is None:
                    raise ValueError("train-mode dropout needs an rng")
                extra = tc.dropout_mask(rng, h.shape, layer.p)
                out = h * extra
            else:
                out = h
        elif kind == "batchnorm":
            if train:
                out, mean, var, bn_cache = tc.batchnorm_train(h, p["gamma"], p["beta"])
                extra = (bn_cache, mean, var)
            else:
                out = tc.batchnorm_eval(h, p["gamma"], p["beta"], p["running_mean"], p["running_var"])
        else:  # pragma: no cover - LayerSpec validates kinds
            raise ValueError(kind)
        cache.append((h, extra))
        h = out
    return h, cache


def ann_forward(ckpt, x, mode="eval", capture=None, rng=None):
    """Logits plus post-ReLU activations of the requested level-tagged layers."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    logits, cache = forward_cached(ckpt, x, mode == "train", rng)
    captured = {}
    if capture:
        levels = ckpt.spec.level_layers()
        n = len(ckpt.spec.layers)
        for level in capture:
            if level not in levels:
                raise KeyError(f"network has no layer tagged {level!r}")
            j = capture_index(ckpt.spec, levels[level])
            captured[level] = tc.relu(cache[j][0]) if j + 1 >= n else cache[j + 1][0]
    return logits, captured


def ann_backward(ckpt, cache, grad_logits):
    """Return ``(param_grads, grad_input)`` for upstream ``grad_logits``."""
    spec = ckpt.spec
    grads = [dict() for _ in spec.layers]
    g = tc.as_float(grad_logits)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, p = spec.layers[i], ckpt.params[i]
        h, extra = cache[i]
        kind = layer.kind
        if kind == "conv":
            g, gw, gb = tc.conv2d_backward(g, h, p["weight"], layer.stride, layer.pad)
            grads[i]["weight"] = gw
            if "bias" in p:
                grads[i]["bias"] = gb
        elif kind == "linear":
            g, gw, gb = tc.linear_backward(g, h, p["weight"])
            grads[i]["weight"] = gw
            if "bias" in p:
                grads[i]["bias"] = gb
        elif kind == "relu":
            g = tc.relu_backward(g, h)
        elif kind == "avgpool":
            g = tc.avgpool2d_backward(g, layer.pool)
        elif kind == "maxpool":
            g = tc.maxpool2d_backward(g, h, layer.pool)
        elif kind == "flatten":
            g = g.reshape(h.shape)
        elif kind == "dropout":
            if extra is not None:
                g = g * extra
        elif kind == "batchnorm":
            if extra is None:
                inv_std = 1.0 / np.sqrt(p["running_var"] + p["running_var"].dtype.type(1e-5))
                shape = (1, -1) + (1,) * (g.ndim - 2)
                g = g * (p["gamma"] * inv_std).reshape(shape)
            else:
                g, gg, gb = tc.batchnorm_backward(g, p["gamma"], extra[0])
                grads[i]["gamma"], grads[i]["beta"] = gg, gb
    return grads, g


def update_running_stats(ckpt, cache):
    for layer, p, (h, extra) in zip(ckpt.spec.layers, ckpt.params, cache):
        if layer.kind == "batchnorm" and extra is not None:
            _, mean, var = extra
            m = h.size // h.shape[1]
            unbiased = var * DTYPE(m / max(m - 1, 1))
            p["running_mean"][...] = (1 - BN_MOMENTUM) * p["running_mean"] + BN_MOMENTUM * mean
            p["running_var"][...] = (1 - BN_MOMENTUM) * p["running_var"] + BN_MOMENTUM * unbiased


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def cross_entropy(logits, labels, reduction="mean"):
    """Softmax cross-entropy and its gradient w.r.t. the logits.

    ``reduction='mean'`` averages loss and gradient over the batch;
    ``'sum'`` returns per-batch sums so each row's gradient is that
    sample's own ``p - onehot``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].sum()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    if reduction == "mean":
        loss /= n
        grad /= n
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return float(loss), grad.astype(logits.dtype if logits.dtype == np.float64 else DTYPE)


def input_gradient(ckpt, x, labels):
    """Gradient of each sample's own cross-entropy w.r.t. its input (eval mode)."""
    logits, cache = forward_cached(ckpt, x, train=False)
    _, grad = cross_entropy(logits, labels, reduction="sum")
    _, gx = ann_backward(ckpt, cache, grad)
    return gx


def predict_logits(ckpt, images, batch_size=256):
    out = []
    for start in range(0, len(images), batch_size):
        logits, _ = forward_cached(ckpt, images[start:start + batch_size], train=False)
        out.append(logits)
    return np.concatenate(out) if out else np.zeros((0, ckpt.spec.num_classes), DTYPE)


def evaluate_accuracy(ckpt, dataset, batch_size=256):
    from .metrics import top1_accuracy

    return top1_accuracy(predict_logits(ckpt, dataset.images, batch_size), dataset.labels)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    optimizer: str = "sgd"
    seed: int = 0


def train_ann(spec_or_ckpt, train, test, config, on_epoch=None):
    """Train an ANN and return ``(best_checkpoint, log_rows)``.

    The checkpoint with the highest test accuracy wins (earliest on ties).
    A non-finite loss aborts with :class:`TrainingDiverged`.
    """
    if isinstance(spec_or_ckpt, Checkpoint):
        ckpt = spec_or_ckpt.copy()
    else:
        ckpt = Checkpoint(spec_or_ckpt, init_params(spec_or_ckpt, config.seed))
    opt = Optimizer(config.optimizer, config.lr, config.momentum, config.weight_decay)
    best, best_acc, rows = ckpt.copy(), -1.0, []
    for epoch in range(1, config.epochs + 1):
        total, correct, seen = 0.0, 0, 0
        for b, (xb, yb) in enumerate(batch_iter(train, config.batch_size, config.seed, epoch)):
            rng = make_rng(config.seed, 0xD0, epoch, b)
            logits, cache = forward_cached(ckpt, xb, train=True, rng=rng)
            loss, grad = cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            grads, _ = ann_backward(ckpt, cache, grad)
            update_running_stats(ckpt, cache)
            opt.step(ckpt.params, grads)
            total += loss * len(yb)
            correct += int((logits.argmax(axis=1) == yb).sum())
            seen += len(yb)
        test_acc = evaluate_accuracy(ckpt, test)
        row = {"epoch": epoch, "train_loss": total / seen, "train_acc": correct / seen,
               "test_acc": test_acc}
        rows.append(row)
        log.info("epoch %d loss %.4f train %.4f test %.4f", epoch, row["train_loss"],
                 row["train_acc"], test_acc)
        if on_epoch is not None:
            on_epoch(row)
        if test_acc > best_acc:
            best_acc = test_acc
            best = ckpt.copy()
            best.metadata.update(epoch=epoch, test_acc=test_acc)
    best.metadata["seed"] = config.seed
    return best, rows
