"""Input encoders turning normalized images into per-time-step SNN input.

Poisson coding emits signed spikes: at every step each pixel ``p`` fires
``sign(p)`` when a fresh uniform draw ``u`` satisfies ``u < |p|``. Direct
coding repeats the analog image at every step so the first layer receives
it as input current.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, make_rng

CODINGS = ("poisson", "direct")


@dataclass(frozen=True)
class SpikeTrain:
    values: np.ndarray  # (T, *image_shape) or (T, N, *image_shape)
    coding: str

    @property
    def time_steps(self):
        return self.values.shape[0]


def _check_time_steps(time_steps):
    if int(time_steps) < 1:
        raise ValueError(f"time_steps must be >= 1, got {time_steps}")


def poisson_encode(image, time_steps, rng):
    _check_time_steps(time_steps)
    image = np.asarray(image, dtype=DTYPE)
    u = rng.random((int(time_steps),) + image.shape, dtype=np.float32)
    values = (u < np.abs(image)) * np.sign(image)
    return SpikeTrain(values.astype(DTYPE), "poisson")


def direct_encode(image, time_steps):
    _check_time_steps(time_steps)
    image = np.asarray(image, dtype=DTYPE)
    values = np.broadcast_to(image, (int(time_steps),) + image.shape).copy()
    return SpikeTrain(values, "direct")


def encode_batch(images, time_steps, coding="poisson", seed=0, sample_ids=None):
    """Encode a batch into a time-major array of shape (T, N, *image_shape).

    Each sample draws from its own stream keyed by ``(*seed, sample_id)``
    (``seed`` is an int or a tuple of ints) so the result for one image does
    not depend on batch composition.
    """
    images = np.asarray(images, dtype=DTYPE)
    if coding == "direct":
        _check_time_steps(time_steps)
        return np.broadcast_to(images, (int(time_steps),) + images.shape).copy()
    if coding != "poisson":
        raise ValueError(f"unknown coding {coding!r}; expected one of {CODINGS}")
    if sample_ids is None:
        sample_ids = range(len(images))
    keys = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    out = np.empty((int(time_steps),) + images.shape, dtype=DTYPE)
    for j, (image, sid) in enumerate(zip(images, sample_ids)):
        out[:, j] = poisson_encode(image, time_steps, make_rng(*keys, sid)).values
    return out
