"""Prototype re-calibration by cross-attention over all instances of a bag.

Prototypes act as queries and the bag's instances as keys and values::

    A = softmax_rows((P Wq)(X Wk)^T / sqrt(d_k))      K x n
    P_hat = A (X Wv)                                  K x d_k

With ``n_iters > 1`` the output is fed back as the next query, reusing the
same three matrices on every pass.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


@dataclass
class PTParams:
    w_q: list[Tensor]
    w_k: list[Tensor]
    w_v: list[Tensor]
    scales: tuple[str, ...]
    n_iters: int = 1

    @property
    def d_k(self) -> int:
        return self.w_q[0].rows

    def named(self, prefix: str = "pt") -> dict[str, Tensor]:
        out = {}
        for i, s in enumerate(self.scales):
            out[f"{prefix}.{s}.w_q"] = self.w_q[i]
            out[f"{prefix}.{s}.w_k"] = self.w_k[i]
            out[f"{prefix}.{s}.w_v"] = self.w_v[i]
        return out

    def index(self, scale: str) -> int:
        return self.scales.index(scale)


@dataclass
class PTOutput:
    p_hat: Tensor
    a_map: np.ndarray


def pt_init(d_k: int, scales: Sequence[str] = ("s20", "s10", "s5"), n_iters: int = 1, seed: int = 0) -> PTParams:
    """Independent N(0, 1/d_k) matrices per scale."""
    if d_k < 1:
        raise ValueError(f"d_k must be >= 1 (got {d_k})")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9717]))
    sd = 1.0 / math.sqrt(d_k)
    mats = {name: [] for name in ("q", "k", "v")}
    for s in scales:
        for name in ("q", "k", "v"):
            mats[name].append(ad.parameter(rng.normal(0.0, sd, (d_k, d_k)), name=f"{s}.w_{name}"))
    return PTParams(mats["q"], mats["k"], mats["v"], tuple(scales), n_iters)


def attend(queries: Tensor, X: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor) -> tuple[Tensor, Tensor]:
    """One scaled dot-product cross-attention pass; returns (output, attention).

    Computes softmax((Q W_q)(X W_k)^T / sqrt(d_k)) (X W_v), associated as
    ((Q W_q) W_k^T) X^T and (A X) W_v so that no n x d_k projection of the
    instances is ever formed and the cost stays O(K n d_k).
    """
    d_k = w_q.rows
    q = ad.matmul(queries, w_q)
    logits = ad.scale(ad.matmul_nt(ad.matmul_nt(q, w_k), X), 1.0 / math.sqrt(d_k))
    attn = ad.softmax_rows(logits)
    return ad.matmul(ad.matmul(attn, X), w_v), attn


def pt_forward(P: Tensor, X: Tensor, params: PTParams, scale: str | int = 0) -> PTOutput:
    i = scale if isinstance(scale, int) else params.index(scale)
    w_q, w_k, w_v = params.w_q[i], params.w_k[i], params.w_v[i]
    d_k = w_q.rows
    if P.cols != d_k or X.cols != d_k:
        raise DimensionError(f"pt_forward: prototypes {P.shape} and instances {X.shape} must have {d_k} columns")
    out = P
    attn = None
    for _ in range(max(1, params.n_iters)):
        out, attn = attend(out, X, w_q, w_k, w_v)
    return PTOutput(out, attn.data)


@dataclass(frozen=True)
class AttentionCost:
    projections: int
    attention: int

    @property
    def total(self) -> int:
        return self.projections + self.attention


def pt_attention_cost(n: int, K: int, d_k: int) -> AttentionCost:
    """Multiply-add FLOPs of one pass as implemented (2 per MAC, softmax ignored).

    ``attention`` covers the logits and the value mix (4*K*n*d_k). The
    projections act on the K-row side only (query, key fold, value output),
    giving 6*K*d_k^2 independent of n.
    """
    if min(n, K, d_k) < 1:
        raise ValueError("n, K and d_k must be positive")
    return AttentionCost(projections=6 * K * d_k * d_k, attention=4 * K * n * d_k)


def dense_self_attention(X: np.ndarray, w_q: np.ndarray, w_k: np.ndarray, w_v: np.ndarray) -> np.ndarray:
    """All-pairs self-attention over instances; the quadratic reference path."""
    d_k = w_q.shape[0]
    # the n x n buffer is reused in place so timing reflects arithmetic, not allocation
    logits = (X @ (w_q / math.sqrt(d_k))) @ (X @ w_k).T
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=1, keepdims=True)
    return logits @ (X @ w_v)


def write_attention_csv(path, rows: Iterable[tuple[str, str, np.ndarray]]) -> None:
    """Dump attention maps as (bag_id, scale, prototype_index, instance_index, weight)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bag_id", "scale", "prototype_index", "instance_index", "weight"])
        for bag_id, scale, a_map in rows:
            for p, row in enumerate(a_map):
                for j, val in enumerate(row):
                    w.writerow([bag_id, scale, p, j, repr(float(val))])
