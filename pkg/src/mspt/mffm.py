"""Multi-scale fusion: feature pyramid, Mixer layer, gated attention pooling, head.

Also hosts the baseline aggregators (mean / max / gated-attention pooling
over raw instances, full-bag, prototype-bag) and the alternative fusion
strategies used for comparison against the Mixer path.

Weights are stored for right-multiplication of row-major activations, so a
layer mapping width a to width b holds an ``a x b`` matrix.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .data import ConfigError

FUSION_STRATEGIES = ("concatenation", "ms-max", "ms-attention")
BASELINE_KINDS = ("mean", "max", "abmil", "full-bag", "prototype-bag")
LN_EPS = 1e-5


def _uniform(rng: np.random.Generator, fan_in: int, shape, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return ad.parameter(rng.uniform(-bound, bound, shape), name=name)


def _zeros(shape, name: str) -> Tensor:
    return ad.parameter(np.zeros(shape), name=name)


# ---------------------------------------------------------------------------
# parameter containers

@dataclass
class MixerParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    tok_w1: Tensor  # K x c
    tok_b1: Tensor | None
    tok_w2: Tensor  # c x K
    tok_b2: Tensor | None
    ln2_gain: Tensor
    ln2_bias: Tensor
    ch_w1: Tensor  # C x d_s
    ch_b1: Tensor | None
    ch_w2: Tensor  # d_s x C
    ch_b2: Tensor | None

    @classmethod
    def init(cls, K: int, C: int, c: int, d_s: int, rng: np.random.Generator, bias: bool = True) -> "MixerParams":
        if c < 1 or d_s < 1:
            raise ConfigError(f"Mixer hidden widths must be >= 1 (c={c}, d_s={d_s})")

        def b(width, fan_in, name):
            return _uniform(rng, fan_in, (1, width), name) if bias else None

        return cls(
            ln1_gain=ad.parameter(np.ones((1, C)), "ln1_gain"),
            ln1_bias=_zeros((1, C), "ln1_bias"),
            tok_w1=_uniform(rng, K, (K, c), "tok_w1"),
            tok_b1=b(c, K, "tok_b1"),
            tok_w2=_uniform(rng, c, (c, K), "tok_w2"),
            tok_b2=b(K, c, "tok_b2"),
            ln2_gain=ad.parameter(np.ones((1, C)), "ln2_gain"),
            ln2_bias=_zeros((1, C), "ln2_bias"),
            ch_w1=_uniform(rng, C, (C, d_s), "ch_w1"),
            ch_b1=b(d_s, C, "ch_b1"),
            ch_w2=_uniform(rng, d_s, (d_s, C), "ch_w2"),
            ch_b2=b(C, d_s, "ch_b2"),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in vars(self).items() if v is not None}


@dataclass
class GAPParams:
    v: Tensor  # D x L
    v_b: Tensor
    u: Tensor  # D x L
    u_b: Tensor
    w: Tensor  # L x 1

    @classmethod
    def init(cls, D: int, L: int, rng: np.random.Generator) -> "GAPParams":
        return cls(
            v=_uniform(rng, D, (D, L), "gap_v"),
            v_b=_uniform(rng, D, (1, L), "gap_v_b"),
            u=_uniform(rng, D, (D, L), "gap_u"),
            u_b=_uniform(rng, D, (1, L), "gap_u_b"),
            w=_uniform(rng, L, (L, 1), "gap_w"),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


@dataclass
class HeadParams:
    w: Tensor  # D x d_out
    b: Tensor

    @classmethod
    def init(cls, D: int, d_out: int, rng: np.random.Generator) -> "HeadParams":
        if d_out < 2:
            raise ConfigError(f"d_out must be >= 2 (got {d_out})")
        return cls(_uniform(rng, D, (D, d_out), "head_w"), _uniform(rng, D, (1, d_out), "head_b"))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


# ---------------------------------------------------------------------------
# operations

def concat_pyramid(p_hats: Sequence[Tensor]) -> Tensor:
    """Stitch per-scale prototypes side by side, finest scale first."""
    return ad.concat_cols(p_hats)


def _mlp(x: Tensor, w1: Tensor, b1: Tensor | None, w2: Tensor, b2: Tensor | None) -> Tensor:
    return ad.linear(ad.gelu(ad.linear(x, w1, b1)), w2, b2)


def token_mixing(x: Tensor, p: MixerParams) -> Tensor:
    # LayerNorm per prototype over channels, then mix along the prototype axis
    if p.tok_w1.rows != x.rows:
        raise DimensionError(f"token mixing expects {p.tok_w1.rows} prototypes, got {x.rows}")
    y = ad.layer_norm(x, p.ln1_gain, p.ln1_bias, LN_EPS)
    mixed = _mlp(ad.transpose(y), p.tok_w1, p.tok_b1, p.tok_w2, p.tok_b2)
    return ad.add(x, ad.transpose(mixed))


def channel_mixing(x: Tensor, p: MixerParams) -> Tensor:
    if p.ch_w1.rows != x.cols:
        raise DimensionError(f"channel mixing expects {p.ch_w1.rows} channels, got {x.cols}")
    y = ad.layer_norm(x, p.ln2_gain, p.ln2_bias, LN_EPS)
    return ad.add(x, _mlp(y, p.ch_w1, p.ch_b1, p.ch_w2, p.ch_b2))


def mixer_layer(x: Tensor, p: MixerParams) -> Tensor:
    return channel_mixing(token_mixing(x, p), p)


def gated_attention_pool(H: Tensor, p: GAPParams) -> tuple[Tensor, Tensor]:
    """Gated attention pooling over rows of ``H``; returns (Z, weights 1 x rows)."""
    gate = ad.mul(
        ad.tanh(ad.linear(H, p.v, p.v_b)),
        ad.sigmoid(ad.linear(H, p.u, p.u_b)),
    )
    scores = ad.transpose(ad.matmul(gate, p.w))
    weights = ad.softmax_rows(scores)
    return ad.matmul(weights, H), weights


def head_logits(Z: Tensor, p: HeadParams) -> Tensor:
    return ad.linear(Z, p.w, p.b)


def classify(Z: Tensor, p: HeadParams) -> Tensor:
    return ad.softmax_rows(head_logits(Z, p))


def fuse_baseline(strategy: str, p_hats: Sequence[Tensor], gaps: Sequence[GAPParams] | None = None) -> Tensor:
    """Alternative multi-scale fusion producing the bag vector Z.

    ``concatenation`` flattens the K x (S*d_k) pyramid to width K*S*d_k,
    ``ms-max`` and ``ms-attention`` return width d_k.
    """
    if strategy == "concatenation":
        return ad.flatten(concat_pyramid(p_hats))
    if strategy == "ms-max":
        pooled = [ad.max_rows(p) for p in p_hats]
    elif strategy == "ms-attention":
        if gaps is None or len(gaps) != len(p_hats):
            raise ConfigError("ms-attention needs one GAPParams per scale")
        pooled = [gated_attention_pool(p, g)[0] for p, g in zip(p_hats, gaps)]
    else:
        raise ConfigError(f"unknown fusion strategy {strategy!r}; expected one of {FUSION_STRATEGIES}")
    out = pooled[0]
    for z in pooled[1:]:
        out = ad.add(out, z)
    return out


def pool_baseline(kind: str, H: Tensor, gap: GAPParams | None = None) -> tuple[Tensor, Tensor | None]:
    """Single-scale bag vector for the baseline kinds; returns (Z, attention or None)."""
    if kind == "mean":
        return ad.mean_rows(H), None
    if kind == "max":
        return ad.max_rows(H), None
    if kind in ("abmil", "full-bag", "prototype-bag"):
        if gap is None:
            raise ConfigError(f"{kind} pooling needs GAPParams")
        return gated_attention_pool(H, gap)
    raise ConfigError(f"unknown baseline kind {kind!r}; expected one of {BASELINE_KINDS}")


def write_gap_csv(path, rows: Iterable[tuple[str, np.ndarray]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bag_id", "prototype_index", "weight"])
        for bag_id, weights in rows:
            for i, val in enumerate(np.ravel(weights)):
                w.writerow([bag_id, i, repr(float(val))])
