"""Model kinds assembled from the prototype transformer and fusion blocks.

==============  ======================================================
kind            forward
==============  ======================================================
mspt            PT per scale -> pyramid -> Mixer -> GAP -> head
pt              PT on one scale -> GAP -> head
prototype-bag   static K-means prototypes on one scale -> GAP -> head
full-bag        every instance queries the bag (dense) -> GAP -> head
mean / max      column pooling of raw instances -> head
abmil           GAP over raw instances -> head
concatenation   PT per scale -> flattened pyramid -> head
ms-max          PT per scale -> per-scale max, summed -> head
ms-attention    PT per scale -> per-scale GAP, summed -> head
==============  ======================================================
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SCALES, ConfigError
from .mffm import (
    GAPParams,
    HeadParams,
    MixerParams,
    concat_pyramid,
    fuse_baseline,
    gated_attention_pool,
    head_logits,
    mixer_layer,
    pool_baseline,
)
from .prototransformer import PTParams, attend, pt_forward, pt_init

MODEL_KINDS = (
    "mspt",
    "pt",
    "prototype-bag",
    "full-bag",
    "mean",
    "max",
    "abmil",
    "concatenation",
    "ms-max",
    "ms-attention",
)
MULTI_SCALE = {"mspt", "concatenation", "ms-max", "ms-attention"}
NEEDS_PROTOTYPES = MULTI_SCALE | {"pt", "prototype-bag"}
USES_PT = MULTI_SCALE | {"pt", "full-bag"}


@dataclass
class ModelConfig:
    kind: str = "mspt"
    K: int = 16
    d_k: int = 512
    d_out: int = 2
    c: int | None = None
    d_s: int | None = None
    gap_hidden: int | None = None
    n_iters: int = 1
    mixer_layers: int = 1
    bias: bool = True
    scales: tuple[str, ...] = SCALES
    single_scale: str = "s20"

    def __post_init__(self):
        self.scales = tuple(self.scales)
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {', '.join(MODEL_KINDS)}")
        if self.K < 1 or self.d_k < 1:
            raise ConfigError(f"K and d_k must be >= 1 (got K={self.K}, d_k={self.d_k})")
        if self.single_scale not in self.scales:
            raise ConfigError(f"single_scale {self.single_scale!r} not among scales {self.scales}")

    @property
    def hidden_c(self) -> int:
        return self.c if self.c is not None else 2 * self.K

    @property
    def hidden_ds(self) -> int:
        return self.d_s if self.d_s is not None else math.ceil(len(self.scales) * self.d_k / 2)

    @property
    def hidden_gap(self) -> int:
        return self.gap_hidden if self.gap_hidden is not None else max(4, (128 * self.d_k) // 512)

    @property
    def active_scales(self) -> tuple[str, ...]:
        return self.scales if self.kind in MULTI_SCALE else (self.single_scale,)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["scales"] = list(self.scales)
        return out


@dataclass
class BagInput:
    """Arrays one forward pass needs: instances and (optionally) prototypes per scale."""

    bag_id: str
    label: int
    features: dict[str, np.ndarray]
    prototypes: dict[str, np.ndarray] | None = None


@dataclass
class Trace:
    a_maps: dict[str, np.ndarray] = field(default_factory=dict)
    gap_weights: np.ndarray | None = None


class Model:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB1A5]))
        S = len(cfg.active_scales)
        self.pt: PTParams | None = None
        self.mixers: list[MixerParams] = []
        self.gaps: list[GAPParams] = []
        if cfg.kind in USES_PT:
            self.pt = pt_init(cfg.d_k, cfg.active_scales, cfg.n_iters, seed)
        if cfg.kind == "mspt":
            C = S * cfg.d_k
            self.mixers = [
                MixerParams.init(cfg.K, C, cfg.hidden_c, cfg.hidden_ds, rng, cfg.bias)
                for _ in range(cfg.mixer_layers)
            ]
            self.gaps = [GAPParams.init(C, cfg.hidden_gap, rng)]
            head_in = C
        elif cfg.kind == "concatenation":
            head_in = cfg.K * S * cfg.d_k
        elif cfg.kind == "ms-attention":
            self.gaps = [GAPParams.init(cfg.d_k, cfg.hidden_gap, rng) for _ in range(S)]
            head_in = cfg.d_k
        elif cfg.kind in ("pt", "prototype-bag", "full-bag", "abmil"):
            self.gaps = [GAPParams.init(cfg.d_k, cfg.hidden_gap, rng)]
            head_in = cfg.d_k
        else:  # mean, max, ms-max
            head_in = cfg.d_k
        self.head = HeadParams.init(head_in, cfg.d_out, rng)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.pt is not None:
            out.update(self.pt.named("pt"))
        for i, m in enumerate(self.mixers):
            out.update(m.named(f"mixer{i}"))
        for i, g in enumerate(self.gaps):
            out.update(g.named(f"gap{i}"))
        out.update(self.head.named("head"))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(params) != set(state):
            raise ConfigError(f"state keys do not match model: {sorted(set(params) ^ set(state))}")
        for k, p in params.items():
            if p.shape != state[k].shape:
                raise ConfigError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path.with_suffix(".npz"), **self.state_dict())
        path.with_suffix(".json").write_text(json.dumps(self.cfg.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        path = Path(path)
        cfg = ModelConfig(**json.loads(path.with_suffix(".json").read_text()))
        model = cls(cfg)
        with np.load(path.with_suffix(".npz")) as z:
            model.load_state_dict({k: z[k] for k in z.files})
        return model

    # -- forward ------------------------------------------------------------

    def logits(self, bag: BagInput, trace: Trace | None = None) -> Tensor:
        cfg = self.cfg
        kind = cfg.kind
        scales = cfg.active_scales
        X = {s: ad.constant(bag.features[s]) for s in scales}
        if kind in NEEDS_PROTOTYPES:
            if bag.prototypes is None:
                raise ConfigError(f"model kind {kind} needs prototypes for bag {bag.bag_id}")
            P = {s: ad.constant(bag.prototypes[s]) for s in scales}

        if kind in ("mean", "max", "abmil"):
            Z, w = pool_baseline(kind, X[scales[0]], self.gaps[0] if self.gaps else None)
        elif kind == "prototype-bag":
            Z, w = pool_baseline(kind, P[scales[0]], self.gaps[0])
        elif kind == "full-bag":
            s = scales[0]
            H, attn = attend(X[s], X[s], self.pt.w_q[0], self.pt.w_k[0], self.pt.w_v[0])
            if trace is not None:
                trace.a_maps[s] = attn.data
            Z, w = pool_baseline(kind, H, self.gaps[0])
        else:
            p_hats = []
            for i, s in enumerate(scales):
                out = pt_forward(P[s], X[s], self.pt, i)
                if trace is not None:
                    trace.a_maps[s] = out.a_map
                p_hats.append(out.p_hat)
            w = None
            if kind == "pt":
                Z, w = gated_attention_pool(p_hats[0], self.gaps[0])
            elif kind == "mspt":
                H = concat_pyramid(p_hats)
                for m in self.mixers:
                    H = mixer_layer(H, m)
                Z, w = gated_attention_pool(H, self.gaps[0])
            else:
                Z = fuse_baseline(kind, p_hats, self.gaps or None)
        if trace is not None and w is not None:
            trace.gap_weights = w.data
        return head_logits(Z, self.head)

    def predict_proba(self, bag: BagInput, trace: Trace | None = None) -> np.ndarray:
        return ad.softmax_rows(self.logits(bag, trace)).data[0]

    def loss(self, bag: BagInput) -> Tensor:
        return ad.cross_entropy_loss(self.logits(bag), bag.label)


def aggregate_baseline(kind: str, bag: BagInput, model: Model) -> np.ndarray:
    """Class probabilities of a single-scale baseline model on one bag."""
    if model.cfg.kind != kind:
        raise ConfigError(f"model is {model.cfg.kind!r}, not {kind!r}")
    return model.predict_proba(bag)


def with_kind(cfg: ModelConfig, kind: str, **changes) -> ModelConfig:
    return replace(cfg, kind=kind, **changes)
