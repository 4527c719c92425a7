"""Slow, obviously-correct reference implementations used by the tests.

Nothing here imports the package's numerics; loops are written out by hand.
"""
import math

import numpy as np


def conv2d_loops(x, k, stride=1, pad=0, bias=None):
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0 if bias is None else float(bias[o])
                    for ch in range(c):
                        for a in range(kh):
                            for d in range(kw):
                                r, q = i * stride + a - pad, j * stride + d - pad
                                if 0 <= r < h and 0 <= q < w:
                                    s += float(x[b, ch, r, q]) * float(k[o, ch, a, d])
                    out[b, o, i, j] = s
    return out


def avgpool_loops(x, k):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // k, w // k))
    for b in range(n):
        for ch in range(c):
            for i in range(h // k):
                for j in range(w // k):
                    s = 0.0
                    for a in range(k):
                        for d in range(k):
                            s += float(x[b, ch, i * k + a, j * k + d])
                    out[b, ch, i, j] = s / (k * k)
    return out


def lif_loops(currents, leak, theta):
    """Scalar LIF with soft reset over a (T, n) current sequence."""
    steps, n = currents.shape
    spikes = np.zeros((steps, n))
    volts = np.zeros((steps, n))
    for j in range(n):
        v, o = 0.0, 0.0
        for t in range(steps):
            v = leak * v + float(currents[t, j]) - theta * o
            o = 1.0 if v > theta else 0.0
            volts[t, j], spikes[t, j] = v, o
    return volts, spikes


def attention_loops(a, normalize=True):
    """Channel mean of squared activations, flattened L2 normalization. a: (C, H, W)."""
    c, h, w = a.shape
    m = [[sum(float(a[ch, i, j]) ** 2 for ch in range(c)) / c for j in range(w)] for i in range(h)]
    m = np.array(m)
    if normalize:
        norm = math.sqrt(sum(v * v for v in m.ravel()))
        if norm > 0:
            m = m / norm
    return m


def sam_loops(spikes, t):
    """Spike activation map after step t (1-based) for spikes shaped (T, C, H, W)."""
    _, c, h, w = spikes.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            total = 0.0
            for ch in range(c):
                if spikes[t - 1, ch, i, j] <= 0:
                    continue
                kern = 0.0
                for tp in range(1, t + 1):
                    if spikes[tp - 1, ch, i, j] > 0:
                        kern += math.exp(-(t - tp))
                total += kern
            out[i, j] = total
    return out


def bilinear_loops(img, out_h, out_w):
    """Corner-aligned bilinear resize of a 2-D array."""
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            y = 0.0 if out_h == 1 else i * (h - 1) / (out_h - 1)
            x = 0.0 if out_w == 1 else j * (w - 1) / (out_w - 1)
            y0, x0 = int(math.floor(y)), int(math.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            dy, dx = y - y0, x - x0
            out[i, j] = (img[y0, x0] * (1 - dy) * (1 - dx) + img[y0, x1] * (1 - dy) * dx
                         + img[y1, x0] * dy * (1 - dx) + img[y1, x1] * dy * dx)
    return out


def central_difference(f, x, eps=1e-3):
    """Numerical gradient of scalar ``f`` at ``x`` (modified in place, then restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        up = f()
        x[idx] = old - eps
        down = f()
        x[idx] = old
        grad[idx] = (up - down) / (2 * eps)
    return grad


def rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.abs(a) + np.abs(b))))


# --------------------------------------------------------------------------
# scalar reverse-mode autodiff, just enough to unroll a tiny SNN
# --------------------------------------------------------------------------

class Scalar:
    __slots__ = ("value", "parents", "grad")

    def __init__(self, value, parents=()):
        self.value = float(value)
        self.parents = parents  # tuple of (node, local derivative)
        self.grad = 0.0

    def __add__(self, other):
        other = other if isinstance(other, Scalar) else Scalar(other)
        return Scalar(self.value + other.value, ((self, 1.0), (other, 1.0)))

    __radd__ = __add__

    def __mul__(self, other):
        other = other if isinstance(other, Scalar) else Scalar(other)
        return Scalar(self.value * other.value, ((self, other.value), (other, self.value)))

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other if isinstance(other, Scalar) else Scalar(-other))

    def detached(self):
        return Scalar(self.value)

    def exp(self):
        e = math.exp(self.value)
        return Scalar(e, ((self, e),))

    def log(self):
        return Scalar(math.log(self.value), ((self, 1.0 / self.value),))


def spike(v, theta, gamma):
    """Heaviside forward, damped triangle backward."""
    out = 1.0 if v.value > theta else 0.0
    slope = gamma * max(0.0, 1.0 - abs(v.value - theta) / theta)
    return Scalar(out, ((v, slope),))


def backward(root):
    order, seen = [], set()

    def visit(node):
        if id(node) in seen:
            return
        seen.add(id(node))
        for parent, _ in node.parents:
            visit(parent)
        order.append(node)

    visit(root)
    root.grad = 1.0
    for node in reversed(order):
        for parent, local in node.parents:
            parent.grad += node.grad * local


def unrolled_snn_loss(x, w1, w2, label, theta, leak, gamma, reset_grad=True, leak_grad=True,
                      spike_weights=None):
    """Loss and weight gradients of a one-hidden-layer SNN built from scalars.

    x: (T, n_in) input per step; w1: (h, n_in); w2: (k, h). The output layer
    integrates without leak and never fires; loss is cross-entropy of the
    final output potential plus sum(spike_weights[t, j] * o[t, j]).
    """
    steps, n_in = x.shape
    h, k = w1.shape[0], w2.shape[0]
    W1 = [[Scalar(w1[a, b]) for b in range(n_in)] for a in range(h)]
    W2 = [[Scalar(w2[a, b]) for b in range(h)] for a in range(k)]
    v = [Scalar(0.0) for _ in range(h)]
    o = [Scalar(0.0) for _ in range(h)]
    out = [Scalar(0.0) for _ in range(k)]
    extra = Scalar(0.0)
    for t in range(steps):
        new_o = []
        for j in range(h):
            current = Scalar(0.0)
            for b in range(n_in):
                current = current + W1[j][b] * float(x[t, b])
            prev_v = v[j] if leak_grad else v[j].detached()
            prev_o = o[j] if reset_grad else o[j].detached()
            v[j] = leak * prev_v + current - theta * prev_o
            new_o.append(spike(v[j], theta, gamma))
        o = new_o
        if spike_weights is not None:
            for j in range(h):
                extra = extra + float(spike_weights[t, j]) * o[j]
        for a in range(k):
            for j in range(h):
                out[a] = out[a] + W2[a][j] * o[j]
    # cross-entropy with a max shift for stability
    shift = max(u.value for u in out)
    denom = Scalar(0.0)
    for u in out:
        denom = denom + (u - shift).exp()
    loss = denom.log() - (out[label] - shift) + extra
    backward(loss)
    g1 = np.array([[s.grad for s in row] for row in W1])
    g2 = np.array([[s.grad for s in row] for row in W2])
    return loss.value, g1, g2


def norm_rel_error(a, b):
    """||a - b|| / (||a|| + ||b||), 0 when both vanish."""
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    # gradients that vanish identically (a bias before batchnorm) only leave rounding noise
    return 0.0 if denom < 1e-9 else float(np.linalg.norm(a - b) / denom)
