"""Training loop, evaluation, k-fold runs and the ablation grids."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import autodiff as ad
from .clustering import KMeansConfig, PrototypeBag, extract_all
from .data import ConfigError, Dataset, FoldPlan
from .metrics import accuracy, auc, mean_sd
from .models import NEEDS_PROTOTYPES, BagInput, Model, ModelConfig

log = logging.getLogger(__name__)


class NumericError(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 1
    max_epochs: int = 150
    early_stop_patience: int = 30
    seed: int = 0
    val_fraction: float = 0.0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0 (got {self.lr})")
        if self.batch_size != 1:
            raise ConfigError("only batch_size=1 is supported")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1 (got {self.max_epochs})")
        if not 1 <= self.early_stop_patience <= self.max_epochs:
            raise ConfigError(
                f"early_stop_patience must lie in [1, max_epochs={self.max_epochs}] (got {self.early_stop_patience})"
            )
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1) (got {self.val_fraction})")

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["model"] = self.model.to_dict()
        return out


def config_digest(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def make_inputs(
    ds: Dataset, protos: dict[str, PrototypeBag] | None, ids: Sequence[str] | None = None
) -> list[BagInput]:
    bags = ds.bags if ids is None else ds.subset(ids)
    out = []
    for b in bags:
        p = protos[b.bag_id].centers if protos is not None else None
        out.append(BagInput(b.bag_id, b.label, b.features, p))
    return out


@dataclass
class TrainResult:
    model: Model
    loss_curve: list[float]
    best_epoch: int
    epochs_run: int
    val_curve: list[float] = field(default_factory=list)


def _mean_loss(model: Model, bags: Sequence[BagInput]) -> float:
    total = 0.0
    for b in bags:
        total += model.loss(b).item()
    return total / len(bags)


def train(bags: Sequence[BagInput], cfg: TrainConfig, model: Model | None = None) -> TrainResult:
    """Adam with batch size 1 and early stopping on the monitored loss.

    Each epoch visits the bags in a seeded shuffled order with one update per
    bag, then records the mean loss of the post-epoch parameters over the
    monitored set (training bags, or a held-out slice when ``val_fraction``
    is set). Training stops once that loss has not beaten its best value for
    ``early_stop_patience`` epochs; the best parameters are returned.
    """
    if not bags:
        raise ConfigError("cannot train on an empty bag list")
    if model is None:
        model = Model(cfg.model, seed=cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7EA1]))
    train_bags = list(bags)
    monitor = train_bags
    if cfg.val_fraction > 0:
        perm = rng.permutation(len(train_bags))
        n_val = max(1, int(round(cfg.val_fraction * len(train_bags))))
        monitor = [train_bags[i] for i in perm[:n_val]]
        train_bags = [train_bags[i] for i in sorted(perm[n_val:])]

    params = model.named_parameters()
    state = ad.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    curve: list[float] = []
    best = math.inf
    best_state = model.state_dict()
    best_epoch = 0
    since_best = 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        for i in rng.permutation(len(train_bags)):
            bag = train_bags[i]
            ad.zero_grads(params.values())
            with ad.Tape() as tape:
                loss = model.loss(bag)
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at epoch {epoch}, bag {bag.bag_id}")
            ad.backward(loss, tape)
            ad.adam_step(params, state)
        epoch_loss = _mean_loss(model, monitor)
        if not math.isfinite(epoch_loss):
            raise NumericError(f"non-finite loss at epoch {epoch} (epoch mean)")
        curve.append(epoch_loss)
        if epoch_loss < best:
            best, best_epoch, since_best = epoch_loss, epoch, 0
            best_state = model.state_dict()
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    model.load_state_dict(best_state)
    ad.zero_grads(params.values())
    return TrainResult(model, curve, best_epoch, epoch)


@dataclass
class EvalResult:
    accuracy: float
    auc: float | None
    scores: np.ndarray
    labels: np.ndarray
    probs: np.ndarray


def evaluate(model: Model, bags: Sequence[BagInput]) -> EvalResult:
    """Accuracy (argmax, ties to the lowest class) and positive-class scores."""
    if not bags:
        raise ConfigError("cannot evaluate an empty bag list")
    probs = np.stack([model.predict_proba(b) for b in bags])
    labels = np.array([b.label for b in bags])
    scores = probs[:, 1]
    has_both = len(set(labels.tolist()) & {0, 1}) == 2
    return EvalResult(accuracy(probs, labels), auc(scores, labels) if has_both else None, scores, labels, probs)


# ---------------------------------------------------------------------------
# reports

@dataclass
class FoldResult:
    fold: int
    accuracy: float
    auc: float | None
    best_epoch: int
    epochs_run: int
    loss_curve: list[float]


@dataclass
class MetricsReport:
    config: dict[str, Any]
    digest: str
    folds: list[FoldResult]
    wall_time: float = 0.0

    @property
    def accuracy(self) -> tuple[float, float]:
        return mean_sd([f.accuracy for f in self.folds])

    @property
    def auc(self) -> tuple[float, float]:
        vals = [f.auc for f in self.folds if f.auc is not None]
        return mean_sd(vals)

    def to_dict(self, include_timing: bool = True) -> dict[str, Any]:
        acc_m, acc_sd = self.accuracy
        auc_m, auc_sd = self.auc
        out = {
            "config": self.config,
            "digest": self.digest,
            "folds": [asdict(f) for f in self.folds],
            "summary": {"accuracy_mean": acc_m, "accuracy_sd": acc_sd, "auc_mean": auc_m, "auc_sd": auc_sd},
        }
        if include_timing:
            out["timing"] = {"wall_time_s": self.wall_time}
        return out

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=1, sort_keys=True)

    def write(self, out_dir: str | Path, stem: str = "metrics") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(self.to_json())
        with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "accuracy", "auc", "best_epoch", "epochs_run", "digest"])
            for f in self.folds:
                w.writerow([f.fold, repr(f.accuracy), "" if f.auc is None else repr(f.auc), f.best_epoch, f.epochs_run, self.digest])


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold, 0xF01D]).generate_state(1)[0])


def run_kfold(
    ds: Dataset,
    protos: dict[str, PrototypeBag] | None,
    cfg: TrainConfig,
    plan: FoldPlan,
    extra_config: dict[str, Any] | None = None,
    on_fold: Callable[[int, TrainResult, EvalResult], None] | None = None,
) -> MetricsReport:
    """Train a fresh model per fold of ``plan`` and collect test metrics."""
    if cfg.model.kind in NEEDS_PROTOTYPES and protos is None:
        raise ConfigError(f"model kind {cfg.model.kind} needs a prototype cache")
    t0 = time.perf_counter()
    folds = []
    for i, (train_ids, test_ids) in enumerate(plan.splits()):
        fcfg = replace(cfg, seed=fold_seed(cfg.seed, i))
        result = train(make_inputs(ds, protos, train_ids), fcfg)
        ev = evaluate(result.model, make_inputs(ds, protos, test_ids))
        folds.append(FoldResult(i, ev.accuracy, ev.auc, result.best_epoch, result.epochs_run, result.loss_curve))
        if on_fold is not None:
            on_fold(i, result, ev)
    config = {"train": cfg.to_dict(), "folds": plan.to_dict(), **(extra_config or {})}
    return MetricsReport(config, config_digest(config), folds, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# ablations

@dataclass
class AblationRow:
    variant: str
    K: int | None
    accuracy_mean: float
    accuracy_sd: float
    auc_mean: float
    auc_sd: float
    digest: str


@dataclass
class AblationTable:
    name: str
    rows: list[AblationRow]
    wall_time: float = 0.0

    def to_dict(self, include_timing: bool = True) -> dict[str, Any]:
        out: dict[str, Any] = {"name": self.name, "rows": [asdict(r) for r in self.rows]}
        if include_timing:
            out["timing"] = {"wall_time_s": self.wall_time}
        return out

    def cell(self, variant: str, K: int | None = None) -> AblationRow:
        for r in self.rows:
            if r.variant == variant and (K is None or r.K == K):
                return r
        raise KeyError((variant, K))

    def write_long_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "K", "accuracy_mean", "accuracy_sd", "auc_mean", "auc_sd", "digest"])
            for r in self.rows:
                w.writerow([r.variant, "" if r.K is None else r.K, repr(r.accuracy_mean), repr(r.accuracy_sd),
                            repr(r.auc_mean), repr(r.auc_sd), r.digest])


def _row(variant: str, K: int | None, report: MetricsReport) -> AblationRow:
    acc_m, acc_sd = report.accuracy
    auc_m, auc_sd = report.auc
    return AblationRow(variant, K, acc_m, acc_sd, auc_m, auc_sd, report.digest)


ABLATE_K_VARIANTS = {"PT": "pt", "Prototype-bag": "prototype-bag", "Full-bag": "full-bag"}
ABLATE_FUSION_VARIANTS = {
    "Concatenation": "concatenation",
    "MS-Max": "ms-max",
    "MS-Attention": "ms-attention",
    "MFFM": "mspt",
}


def ablate_k(
    ds: Dataset,
    cfg: TrainConfig,
    plan: FoldPlan,
    k_values: Sequence[int] = (1, 2, 4, 8, 16, 32),
    kmeans: KMeansConfig | None = None,
    prototype_source: Callable[[KMeansConfig], dict[str, PrototypeBag]] | None = None,
) -> AblationTable:
    """PT and Prototype-bag at every K plus one K-independent Full-bag row."""
    t0 = time.perf_counter()
    kmeans = kmeans or KMeansConfig()
    source = prototype_source or (lambda kc: extract_all(ds, kc))
    rows = []
    for K in k_values:
        kc = replace(kmeans, K=K)
        protos = source(kc)
        for variant in ("PT", "Prototype-bag"):
            mcfg = replace(cfg.model, kind=ABLATE_K_VARIANTS[variant], K=K)
            rep = run_kfold(ds, protos, replace(cfg, model=mcfg), plan, {"kmeans": asdict(kc)})
            rows.append(_row(variant, K, rep))
    mcfg = replace(cfg.model, kind="full-bag")
    rep = run_kfold(ds, None, replace(cfg, model=mcfg), plan)
    rows.append(_row("Full-bag", None, rep))
    return AblationTable("ablate-k", rows, time.perf_counter() - t0)


def write_fig3_csv(table: AblationTable, path, metric: str = "accuracy_mean") -> None:
    """Wide grid: one row per K, columns PT / Prototype-bag / Full-bag."""
    ks = sorted({r.K for r in table.rows if r.K is not None})
    full = table.cell("Full-bag")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["K", "PT", "Prototype-bag", "Full-bag"])
        for K in ks:
            w.writerow([K, repr(getattr(table.cell("PT", K), metric)),
                        repr(getattr(table.cell("Prototype-bag", K), metric)), repr(getattr(full, metric))])


def ablate_fusion(
    ds: Dataset, protos: dict[str, PrototypeBag], cfg: TrainConfig, plan: FoldPlan
) -> AblationTable:
    """Every fusion strategy on the same folds, seeds and prototypes."""
    t0 = time.perf_counter()
    rows = []
    for variant, kind in ABLATE_FUSION_VARIANTS.items():
        mcfg = replace(cfg.model, kind=kind)
        rep = run_kfold(ds, protos, replace(cfg, model=mcfg), plan)
        rows.append(_row(variant, mcfg.K, rep))
    return AblationTable("ablate-fusion", rows, time.perf_counter() - t0)


def write_table2_csv(table: AblationTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "ACC", "ACC_sd", "AUC", "AUC_sd", "digest"])
        for r in table.rows:
            w.writerow([r.variant, repr(r.accuracy_mean), repr(r.accuracy_sd), repr(r.auc_mean), repr(r.auc_sd), r.digest])

