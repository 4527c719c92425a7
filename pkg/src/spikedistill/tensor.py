"""Dense float32 layer primitives with explicit forward/backward pairs.

Arrays are plain ``numpy.ndarray`` objects, batch-first (``N, C, H, W``
for images). Everything runs in float32; float64 inputs stay float64,
which the gradient tests rely on. Convolution follows the cross-correlation
convention used by most deep-learning frameworks::

    out[n, f, i, j] = sum_{c, a, b} x_pad[n, c, i*s + a, j*s + b] * k[f, c, a, b]

There is no autodiff tape. Each layer exposes a forward function and a
backward function that takes the upstream gradient plus whatever the
forward needs, and returns exact gradients.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

# Reductions over more terms than this are carried out in float64.
WIDE_ACCUMULATION = 10_000


def make_rng(seed, *keys):
    """Return a PCG64 generator derived from ``seed`` and integer ``keys``.

    Streams come from ``numpy.random.SeedSequence`` so that each
    ``(seed, *keys)`` tuple maps to an independent, platform-stable stream.
    """
    entropy = [int(seed)] + [int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def as_float(x):
    """View ``x`` as a float array: float64 stays float64, anything else is float32."""
    x = np.asarray(x)
    return x if x.dtype in (np.float32, np.float64) else x.astype(DTYPE)


def _sum_rows(a):
    """Sum over axis 0, widening to float64 for long reductions."""
    if a.shape[0] > WIDE_ACCUMULATION:
        return a.sum(axis=0, dtype=np.float64).astype(a.dtype)
    return a.sum(axis=0)


def _matmul_tn(a, b):
    """``a.T @ b``; long shared axes are split into blocks summed in float64."""
    n = a.shape[0]
    if n <= WIDE_ACCUMULATION:
        return a.T @ b
    out = np.zeros((a.shape[1], b.shape[1]), dtype=np.float64)
    for s in range(0, n, WIDE_ACCUMULATION):
        out += a[s:s + WIDE_ACCUMULATION].T @ b[s:s + WIDE_ACCUMULATION]
    return out.astype(np.result_type(a, b))


def conv_output_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def _check_conv_shapes(x, kernel, stride, pad):
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be 4-D (N, C, H, W), got shape {x.shape}")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d kernel must be 4-D (F, C, kh, kw), got shape {kernel.shape}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"conv2d pad must be >= 0, got {pad}")
    _, c, h, w = x.shape
    _, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d channel mismatch: input has C={c}, kernel expects C={kc}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ValueError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )


def _im2col(x, kh, kw, stride, pad):
    """Return columns of shape (N, H', W', C*kh*kw) and the padded input shape."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * kh * kw)
    return cols, x.shape


def conv2d(x, kernel, stride=1, pad=0, bias=None):
    """2-D cross-correlation of ``x`` (N, C, H, W) with ``kernel`` (F, C, kh, kw)."""
    x = as_float(x)
    kernel = as_float(kernel)
    _check_conv_shapes(x, kernel, stride, pad)
    f, c, kh, kw = kernel.shape
    cols, _ = _im2col(x, kh, kw, stride, pad)
    out = cols @ kernel.reshape(f, -1).T
    if bias is not None:
        if bias.shape != (f,):
            raise ValueError(f"conv2d bias must have shape ({f},), got {bias.shape}")
        out += bias
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(grad_out, x, kernel, stride=1, pad=0, input_grad=True):
    """Gradients of :func:`conv2d` w.r.t. input, kernel and bias.

    With ``input_grad=False`` the input gradient is skipped and returned as None.
    """
    x = as_float(x)
    kernel = as_float(kernel)
    _check_conv_shapes(x, kernel, stride, pad)
    f, c, kh, kw = kernel.shape
    n, _, h, w = x.shape
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    if grad_out.shape != (n, f, ho, wo):
        raise ValueError(
            f"conv2d_backward grad_out shape {grad_out.shape} != forward output {(n, f, ho, wo)}"
        )
    g = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(-1, f)

    cols, padded_shape = _im2col(x, kh, kw, stride, pad)
    grad_kernel = _matmul_tn(g, cols.reshape(-1, c * kh * kw)).reshape(f, c, kh, kw)
    grad_bias = _sum_rows(g)
    if not input_grad:
        return None, grad_kernel, grad_bias

    gcols = (g @ kernel.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
    gpad = np.zeros(padded_shape, dtype=gcols.dtype)
    hi, wi = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for a in range(kh):
        for b in range(kw):
            gpad[:, :, a:a + hi:stride, b:b + wi:stride] += gcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
    grad_input = gpad[:, :, pad:pad + h, pad:pad + w] if pad else gpad
    return np.ascontiguousarray(grad_input), grad_kernel, grad_bias


def linear(x, weight, bias=None):
    """Affine map ``x @ weight.T + bias`` for ``x`` (N, D) and ``weight`` (K, D)."""
    x = as_float(x)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    out = x @ weight.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear bias must have shape ({weight.shape[0]},), got {bias.shape}")
        out += bias
    return out


def linear_backward(grad_out, x, weight):
    if grad_out.shape != (x.shape[0], weight.shape[0]):
        raise ValueError(
            f"linear_backward grad_out shape {grad_out.shape} != {(x.shape[0], weight.shape[0])}"
        )
    grad_input = grad_out @ weight
    grad_weight = _matmul_tn(grad_out, x)
    grad_bias = _sum_rows(grad_out)
    return grad_input, grad_weight, grad_bias


def avgpool2d(x, k):
    """Non-overlapping k x k mean pooling; spatial dims must be divisible by k."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avgpool2d: spatial dims {h}x{w} not divisible by pool size {k}")
    # strided sums are much faster than a reduction over interleaved axes
    out = x[:, :, 0::k, 0::k].copy()
    for a in range(k):
        for b in range(k):
            if a or b:
                out += x[:, :, a::k, b::k]
    out *= out.dtype.type(1.0 / (k * k))
    return out


def avgpool2d_backward(grad_out, k):
    scaled = grad_out * grad_out.dtype.type(1.0 / (k * k))
    return np.repeat(np.repeat(scaled, k, axis=2), k, axis=3)


def maxpool2d(x, k):
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"maxpool2d: spatial dims {h}x{w} not divisible by pool size {k}")
    return x.reshape(n, c, h // k, k, w // k, k).max(axis=(3, 5))


def maxpool2d_backward(grad_out, x, k):
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // k, k, w // k, k)
    peak = blocks.max(axis=(3, 5), keepdims=True)
    mask = blocks == peak
    # first maximum in each window takes the whole gradient
    flat = mask.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    first = np.zeros_like(flat)
    np.put_along_axis(first, flat.argmax(axis=-1)[..., None], True, axis=-1)
    first = first.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
    return (first * grad_out[:, :, :, None, :, None]).reshape(n, c, h, w).astype(grad_out.dtype)


def relu(x):
    return np.maximum(x, x.dtype.type(0))


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def batchnorm_train(x, gamma, beta, eps=1e-5):
    """Batch-statistics normalization over every axis except channels (axis 1).

    Returns the output, the batch mean/variance (biased), and a cache for
    :func:`batchnorm_backward`.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    mean = x.mean(axis=axes, dtype=np.float64).astype(x.dtype)
    var = x.var(axis=axes, dtype=np.float64).astype(x.dtype)
    shape = (1, -1) + (1,) * (x.ndim - 2)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return out, mean, var, (xhat, inv_std)


def batchnorm_eval(x, gamma, beta, running_mean, running_var, eps=1e-5):
    shape = (1, -1) + (1,) * (x.ndim - 2)
    inv_std = 1.0 / np.sqrt(running_var + running_var.dtype.type(eps))
    scale = (gamma * inv_std).reshape(shape)
    return (x - running_mean.reshape(shape)) * scale + beta.reshape(shape)


def batchnorm_backward(grad_out, gamma, cache):
    xhat, inv_std = cache
    axes = (0,) + tuple(range(2, grad_out.ndim))
    shape = (1, -1) + (1,) * (grad_out.ndim - 2)
    m = grad_out.size // grad_out.shape[1]
    grad_beta = grad_out.sum(axis=axes, dtype=np.float64).astype(grad_out.dtype)
    grad_gamma = (grad_out * xhat).sum(axis=axes, dtype=np.float64).astype(grad_out.dtype)
    gxhat = grad_out * gamma.reshape(shape)
    grad_input = (inv_std.reshape(shape) / m) * (
        m * gxhat
        - gxhat.sum(axis=axes, keepdims=True)
        - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
    )
    return grad_input.astype(grad_out.dtype), grad_gamma, grad_beta


def dropout_mask(rng, shape, p):
    """Inverted-dropout mask: zeros with probability ``p``, else ``1/(1-p)``."""
    if p <= 0:
        return np.ones(shape, dtype=DTYPE)
    keep = rng.random(shape) >= p
    return keep.astype(DTYPE) * DTYPE(1.0 / (1.0 - p))


def interpolate_bilinear(image, size):
    """Corner-aligned bilinear resampling of the last two axes to ``size``.

    Output pixel ``i`` samples source coordinate ``i * (H - 1) / (H2 - 1)``
    (0 when ``H2 == 1``). A same-size request returns an unchanged copy.
    """
    image = np.asarray(image)
    h2, w2 = (int(s) for s in size)
    if h2 < 1 or w2 < 1:
        raise ValueError(f"interpolate_bilinear: target size must be >= 1, got {size}")
    h, w = image.shape[-2:]
    if h < 1 or w < 1:
        raise ValueError(f"interpolate_bilinear: source size must be >= 1, got {(h, w)}")
    if (h2, w2) == (h, w):
        return image.copy()

    def axis_weights(n_in, n_out):
        pos = np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1) if n_out > 1 else 0.0)
        lo = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis_weights(h, h2)
    c0, c1, fc = axis_weights(w, w2)
    src = image.astype(np.float64)
    top = src[..., r0, :] * (1 - fr)[:, None] + src[..., r1, :] * fr[:, None]
    out = top[..., c0] * (1 - fc) + top[..., c1] * fc
    return out.astype(image.dtype if image.dtype.kind == "f" else np.float64)
