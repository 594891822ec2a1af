"""Command-line entry point.

Subcommands: gen, cluster, train, eval, ablate-k, ablate-fusion, bench, validate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.

Run configuration (JSON, every key optional; command-line flags win)::

    {
      "dataset": "data/",            # container produced by `gen`
      "protos": "protos/",           # cache produced by `cluster`; clustered in memory if absent
      "out": "runs/exp1",
      "seed": 7,                     # overrides kmeans.seed, train.seed and split_seed
      "split_seed": 7,
      "protocol": {"n_train": 200}   # holdout split, or {"folds": 5} for k-fold
      "kmeans": {"K": 8, "max_iters": 100, "tol": 1e-6, "n_restarts": 10, "seed": 7},
      "train": {"lr": 1e-4, "weight_decay": 1e-5, "max_epochs": 150,
                "early_stop_patience": 30, "seed": 7, "val_fraction": 0.0,
                "model": {"kind": "mspt", "n_iters": 1, "c": null, "d_s": null, ...}},
      "ablate": {"k_values": [1, 2, 4, 8, 16, 32]},
      "bench": {"n_values": [4096, 8192, 16384, 32768], "dense_n_values": [512, 1024, 2048, 4096],
                "K": 16, "d_k": 64, "repeats": 5}
    }

The model's K always follows ``kmeans.K`` and ``d_k`` follows the dataset.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

from .bench import bench_complexity
from .clustering import KMeansConfig, cache_prototypes, extract_all, load_prototypes
from .data import (
    ConfigError,
    DataError,
    Dataset,
    FoldPlan,
    SyntheticConfig,
    dataset_digest,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_holdout,
    split_kfold,
    validate_manifest,
)
from .mffm import write_gap_csv
from .models import Model, ModelConfig, Trace
from .prototransformer import write_attention_csv
from .training import (
    NumericError,
    TrainConfig,
    ablate_fusion,
    ablate_k,
    config_digest,
    evaluate,
    make_inputs,
    run_kfold,
    write_fig3_csv,
    write_table2_csv,
)

log = logging.getLogger("mspt")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


@dataclass
class RunConfig:
    dataset: str | None = None
    protos: str | None = None
    out: str = "runs/default"
    seed: int | None = None
    split_seed: int = 0
    protocol: dict[str, Any] = field(default_factory=lambda: {"folds": 5})
    kmeans: KMeansConfig = field(default_factory=KMeansConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablate: dict[str, Any] = field(default_factory=lambda: {"k_values": [1, 2, 4, 8, 16, 32]})
    bench: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["kmeans"] = asdict(self.kmeans)
        out["train"] = self.train.to_dict()
        return out

    def digest(self) -> str:
        return config_digest(self.to_dict())


_RUN_KEYS = set(RunConfig.__dataclass_fields__)


def _load_json(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return raw


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    raw = _load_json(getattr(args, "config", None))
    unknown = sorted(set(raw) - _RUN_KEYS)
    if unknown:
        raise ConfigError(f"run config has unknown field(s): {', '.join(unknown)}")
    for flag in ("dataset", "protos", "out", "seed"):
        val = getattr(args, flag, None)
        if val is not None:
            raw[flag] = val
    seed = raw.get("seed")
    km = dict(raw.get("kmeans", {}))
    tr = dict(raw.get("train", {}))
    model = dict(tr.get("model", {}))
    if seed is not None:
        km["seed"] = tr["seed"] = raw["split_seed"] = int(seed)
    if getattr(args, "K", None) is not None:
        km["K"] = args.K
    if getattr(args, "kind", None) is not None:
        model["kind"] = args.kind
    if getattr(args, "max_epochs", None) is not None:
        tr["max_epochs"] = args.max_epochs
        # patience may not exceed the epoch budget
        tr["early_stop_patience"] = min(tr.get("early_stop_patience", 30), args.max_epochs)
    protocol = dict(raw.get("protocol", {"folds": 5}))
    if getattr(args, "folds", None) is not None:
        protocol = {"folds": args.folds}
    if getattr(args, "n_train", None) is not None:
        protocol = {"n_train": args.n_train}
    try:
        kmeans = KMeansConfig(**km)
        model["K"] = kmeans.K
        tr["model"] = ModelConfig(**model)
        train = TrainConfig(**tr)
    except TypeError as exc:
        raise ConfigError(f"bad config field: {exc}") from exc
    return RunConfig(
        dataset=raw.get("dataset"),
        protos=raw.get("protos"),
        out=raw.get("out", "runs/default"),
        seed=seed,
        split_seed=int(raw.get("split_seed", 0)),
        protocol=protocol,
        kmeans=kmeans,
        train=train,
        ablate=dict(raw.get("ablate", {"k_values": [1, 2, 4, 8, 16, 32]})),
        bench=dict(raw.get("bench", {})),
    )


def _fit_to_dataset(rc: RunConfig, ds: Dataset) -> RunConfig:
    model = replace(rc.train.model, d_k=ds.d, scales=tuple(ds.scales),
                    single_scale=rc.train.model.single_scale if rc.train.model.single_scale in ds.scales else ds.scales[0])
    return replace(rc, train=replace(rc.train, model=model))


def _plan(rc: RunConfig, ds: Dataset) -> FoldPlan:
    if "n_train" in rc.protocol:
        return split_holdout(ds, int(rc.protocol["n_train"]), rc.split_seed)
    return split_kfold(ds, int(rc.protocol.get("folds", 5)), rc.split_seed)


def _require_dataset(rc: RunConfig) -> Dataset:
    if rc.dataset is None:
        raise ConfigError("no dataset given (use --dataset or the config's 'dataset' field)")
    return load_dataset(rc.dataset)


def _prototypes(rc: RunConfig, ds: Dataset, kmeans: KMeansConfig | None = None):
    kmeans = kmeans or rc.kmeans
    if rc.protos is not None and kmeans == rc.kmeans:
        return load_prototypes(rc.protos, kmeans)
    return extract_all(ds, kmeans)


def _write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _embed(rc: RunConfig, ds: Dataset) -> dict[str, Any]:
    return {"run": rc.to_dict(), "run_digest": rc.digest(), "dataset_digest": dataset_digest(ds)}


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    raw = _load_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = SyntheticConfig.from_dict(raw)
    ds = generate_synthetic(cfg)
    save_dataset(ds, args.out)
    print(json.dumps({"out": str(args.out), "bags": ds.N, "digest": dataset_digest(ds)}))
    return EXIT_OK


def cmd_cluster(args) -> int:
    raw = _load_json(args.config)
    if "kmeans" in raw:
        raw = raw["kmeans"]
    if args.K is not None:
        raw["K"] = args.K
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = KMeansConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad kmeans config: {exc}") from exc
    ds = load_dataset(args.dataset)
    protos = extract_all(ds, cfg)
    cache_prototypes(ds, cfg, args.out, protos)
    padded = [w for p in protos.values() for w in p.warnings]
    for w in padded:
        log.warning(w)
    print(json.dumps({"out": str(args.out), "bags": ds.N, "digest": cfg.digest(), "padded": len(padded)}))
    return EXIT_OK


def cmd_train(args) -> int:
    rc = resolve_run_config(args)
    ds = _require_dataset(rc)
    rc = _fit_to_dataset(rc, ds)
    out = Path(rc.out)
    protos = _prototypes(rc, ds)
    plan = _plan(rc, ds)

    def save_fold(i, result, _ev):
        result.model.save(out / "models" / f"fold{i}")

    report = run_kfold(ds, protos, rc.train, plan, _embed(rc, ds), on_fold=save_fold)
    report.write(out, "train")
    _write_json(out / "run_config.json", rc.to_dict())
    acc, auc = report.accuracy, report.auc
    print(f"accuracy {acc[0]:.4f} +/- {acc[1]:.4f}  auc {auc[0]:.4f} +/- {auc[1]:.4f}  digest {report.digest}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    raw = _load_json(str(run_dir / "run_config.json"))
    train_report = _load_json(str(run_dir / "train.json"))
    ds = load_dataset(args.dataset or raw["dataset"])
    kmeans = KMeansConfig(**raw["kmeans"])
    protos = load_prototypes(raw["protos"], kmeans) if raw.get("protos") else extract_all(ds, kmeans)
    plan = FoldPlan(**train_report["config"]["folds"])
    folds = []
    dumps = []
    for i, (_, test_ids) in enumerate(plan.splits()):
        model = Model.load(run_dir / "models" / f"fold{i}")
        inputs = make_inputs(ds, protos, test_ids)
        ev = evaluate(model, inputs)
        folds.append({"fold": i, "accuracy": ev.accuracy, "auc": ev.auc})
        if args.dump_attention:
            for b in inputs:
                tr = Trace()
                model.predict_proba(b, tr)
                dumps.append((b.bag_id, tr))
    out = Path(args.out) if args.out else run_dir
    payload = {"run_digest": train_report["config"].get("run_digest"), "folds": folds}
    _write_json(out / "eval.json", payload)
    if dumps:
        write_attention_csv(out / "attention.csv",
                            [(bid, s, a) for bid, tr in dumps for s, a in tr.a_maps.items()])
        write_gap_csv(out / "gap_weights.csv",
                      [(bid, tr.gap_weights) for bid, tr in dumps if tr.gap_weights is not None])
    for f in folds:
        print(f"fold {f['fold']}: accuracy {f['accuracy']:.4f} auc {f['auc']}")
    return EXIT_OK


def cmd_ablate_k(args) -> int:
    rc = resolve_run_config(args)
    ds = _require_dataset(rc)
    rc = _fit_to_dataset(rc, ds)
    out = Path(rc.out)
    plan = _plan(rc, ds)
    k_values = [int(k) for k in rc.ablate.get("k_values", [1, 2, 4, 8, 16, 32])]
    table = ablate_k(ds, rc.train, plan, k_values, rc.kmeans, lambda kc: _prototypes(rc, ds, kc))
    out.mkdir(parents=True, exist_ok=True)
    table.write_long_csv(out / "ablate_k.csv")
    write_fig3_csv(table, out / "fig3_accuracy.csv", "accuracy_mean")
    write_fig3_csv(table, out / "fig3_auc.csv", "auc_mean")
    _write_json(out / "ablate_k.json", {**table.to_dict(), **_embed(rc, ds)})
    print(f"wrote {len(table.rows)} cells to {out / 'ablate_k.csv'}")
    return EXIT_OK


def cmd_ablate_fusion(args) -> int:
    rc = resolve_run_config(args)
    ds = _require_dataset(rc)
    rc = _fit_to_dataset(rc, ds)
    out = Path(rc.out)
    table = ablate_fusion(ds, _prototypes(rc, ds), rc.train, _plan(rc, ds))
    out.mkdir(parents=True, exist_ok=True)
    write_table2_csv(table, out / "table2.csv")
    _write_json(out / "ablate_fusion.json", {**table.to_dict(), **_embed(rc, ds)})
    print(f"wrote {len(table.rows)} strategies to {out / 'table2.csv'}")
    return EXIT_OK


def cmd_bench(args) -> int:
    rc = resolve_run_config(args)
    b = rc.bench
    if args.n_values:
        b["n_values"] = args.n_values
    n_values = b.get("n_values", [4096, 8192, 16384, 32768])
    report = bench_complexity(
        n_values,
        K=int(b.get("K", 16)),
        d_k=int(b.get("d_k", 64)),
        repeats=int(b.get("repeats", 5)),
        dense_n_values=b.get("dense_n_values", n_values if args.n_values else [512, 1024, 2048, 4096]),
        seed=rc.seed or 0,
    )
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "bench.csv")
    _write_json(out / "bench.json", {**report.to_dict(), "run": rc.to_dict()})
    print(json.dumps({"slopes": report.slopes, "rows": len(report.rows)}))
    return EXIT_OK


def cmd_validate(args) -> int:
    report = validate_manifest(args.dataset)
    for f in report.findings:
        print(f)
    if report.ok:
        print("ok")
        return EXIT_OK
    return EXIT_DATA


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mspt", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset container")
    p.add_argument("config", help="SyntheticConfig JSON file")
    p.add_argument("out", help="output directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("cluster", help="K-means prototypes for every bag and scale")
    p.add_argument("dataset")
    p.add_argument("--config", help="KMeansConfig JSON (or run config with a 'kmeans' key)")
    p.add_argument("--out", required=True, help="prototype cache directory")
    p.add_argument("--K", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_cluster)

    def run_flags(p):
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--dataset")
        p.add_argument("--protos")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--K", type=int)
        p.add_argument("--kind")
        p.add_argument("--max-epochs", type=int, dest="max_epochs")
        p.add_argument("--folds", type=int)
        p.add_argument("--n-train", type=int, dest="n_train")

    p = sub.add_parser("train", help="train per fold and report test metrics")
    run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="re-evaluate the fold models of a training run")
    p.add_argument("run", help="output directory of a `train` run")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--dump-attention", action="store_true", dest="dump_attention")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-k", help="PT / Prototype-bag / Full-bag over K")
    run_flags(p)
    p.set_defaults(func=cmd_ablate_k)

    p = sub.add_parser("ablate-fusion", help="compare multi-scale fusion strategies")
    run_flags(p)
    p.set_defaults(func=cmd_ablate_fusion)

    p = sub.add_parser("bench", help="PT vs dense self-attention timing")
    run_flags(p)
    p.add_argument("--n-values", type=int, nargs="+", dest="n_values")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("validate", help="check a dataset container")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
