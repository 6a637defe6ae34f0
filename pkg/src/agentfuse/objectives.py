"""Training objectives: multi-label BCE and summed squared box error.

The functions accept numpy arrays or :class:`Tensor` objects.  With plain
arrays they return plain numbers; with tensors they return tensors that can
be differentiated.  Leading dimensions are batch dimensions.
"""
from __future__ import annotations

import numpy as np

from .numerics import Tensor, as_tensor, clip, log, square

BCE_EPS = 1e-7
DEFAULT_BOX_WEIGHT = 5.0


def _plain(*xs) -> bool:
    return not any(isinstance(x, Tensor) for x in xs)


def _unwrap(out: Tensor):
    return float(out.data) if out.data.ndim == 0 else out.data


def bce_loss(y, y_hat, eps: float = BCE_EPS):
    """Mean binary cross-entropy over the class axis, with predictions clamped to [eps, 1-eps]."""
    plain = _plain(y, y_hat)
    y, y_hat = as_tensor(y), as_tensor(y_hat)
    if y.shape[-1:] != y_hat.shape[-1:]:
        raise ValueError(f"label length {y.shape[-1:]} != prediction length {y_hat.shape[-1:]}")
    p = clip(y_hat, eps, 1.0 - eps)
    terms = y * log(p) + (1.0 - y) * log(1.0 - p)
    out = -terms.mean(axis=-1)
    return _unwrap(out) if plain else out


def mse_box_loss(b, b_hat):
    """Sum (not mean) of squared corner errors over the four coordinates."""
    plain = _plain(b, b_hat)
    out = square(as_tensor(b) - as_tensor(b_hat)).sum(axis=-1)
    return _unwrap(out) if plain else out


def total_loss(y, y_hat, b, b_hat, box_weight: float = DEFAULT_BOX_WEIGHT):
    if box_weight < 0:
        raise ValueError("box weight must be non-negative")
    plain = _plain(y, y_hat, b, b_hat)
    out = bce_loss(as_tensor(y), as_tensor(y_hat)) + mse_box_loss(as_tensor(b), as_tensor(b_hat)) * box_weight
    return _unwrap(out) if plain else out


def combine(bce: float, mse: float, box_weight: float = DEFAULT_BOX_WEIGHT) -> float:
    return bce + box_weight * mse
