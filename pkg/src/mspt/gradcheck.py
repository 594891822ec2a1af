"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def numerical_grad(f: Callable[[], float], p: Tensor, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[i] = (up - down) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(
    loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-5, floor: float = 1e-6
) -> dict[str, float]:
    """Per-parameter max relative error between backward and finite differences."""
    for p in params.values():
        p.grad = None
    with ad.Tape() as tape:
        loss = loss_fn()
    ad.backward(loss, tape)
    errors = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numerical_grad(lambda: loss_fn().item(), p, h)
        errors[name] = relative_error(analytic, numeric, floor)
    return errors
