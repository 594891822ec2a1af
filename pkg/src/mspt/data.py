"""Multi-scale instance bags, the on-disk container, and fold splitting.

Container layout::

    <dir>/manifest.json
    <dir>/bags/<bag_id>.<scale>.f32     little-endian float32, row-major, no header

``manifest.json`` (format ``"mspt-bags"``, version 1)::

    {
      "format": "mspt-bags", "version": 1,
      "d": 32, "scales": ["s20", "s10", "s5"],
      "class_names": ["negative", "positive"],
      "provenance": {...},
      "bags": [
        {"id": "bag0000", "label": 1,
         "scales": {"s20": {"file": "bags/bag0000.s20.f32", "rows": 181, "cols": 32}, ...},
         "witnesses": {"s20": [3, 17], ...}}          # optional
      ]
    }
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np

SCALES = ("s20", "s10", "s5")
FORMAT_NAME = "mspt-bags"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


class ConfigError(ValueError):
    """Invalid configuration or arguments."""


class DataError(ValueError):
    """Base class for container problems."""


class ManifestError(DataError):
    pass


class SizeMismatchError(DataError):
    pass


class FormatVersionError(DataError):
    pass


@dataclass
class MultiScaleBag:
    bag_id: str
    label: int
    features: dict[str, np.ndarray]
    witnesses: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        dims = {x.shape[1] for x in self.features.values()}
        if len(dims) > 1:
            raise DataError(f"bag {self.bag_id}: scales disagree on feature dimension {sorted(dims)}")
        for s, x in self.features.items():
            if x.ndim != 2 or x.shape[0] < 1:
                raise DataError(f"bag {self.bag_id}: scale {s} must hold at least one instance")

    @property
    def d(self) -> int:
        return next(iter(self.features.values())).shape[1]

    def n(self, scale: str) -> int:
        return self.features[scale].shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, MultiScaleBag):
            return NotImplemented
        if (self.bag_id, self.label) != (other.bag_id, other.label):
            return False
        if list(self.features) != list(other.features):
            return False
        if not all(np.array_equal(self.features[s], other.features[s]) for s in self.features):
            return False
        a, b = self.witnesses or {}, other.witnesses or {}
        return a.keys() == b.keys() and all(np.array_equal(a[s], b[s]) for s in a)


@dataclass
class Dataset:
    bags: list[MultiScaleBag]
    d: int
    class_names: list[str] = field(default_factory=lambda: ["negative", "positive"])
    scales: tuple[str, ...] = SCALES
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        n_classes = len(self.class_names)
        for bag in self.bags:
            if bag.d != self.d:
                raise DataError(f"bag {bag.bag_id} has d={bag.d}, dataset d={self.d}")
            if not 0 <= bag.label < n_classes:
                raise DataError(f"bag {bag.bag_id} label {bag.label} outside {n_classes} classes")
            if tuple(bag.features) != tuple(self.scales):
                raise DataError(f"bag {bag.bag_id} scales {list(bag.features)} != {list(self.scales)}")

    @property
    def N(self) -> int:
        return len(self.bags)

    def __len__(self) -> int:
        return len(self.bags)

    def __iter__(self) -> Iterator[MultiScaleBag]:
        return iter(self.bags)

    def labels(self) -> np.ndarray:
        return np.array([b.label for b in self.bags], dtype=np.int64)

    def by_id(self) -> dict[str, MultiScaleBag]:
        return {b.bag_id: b for b in self.bags}

    def subset(self, ids) -> list[MultiScaleBag]:
        index = self.by_id()
        return [index[i] for i in ids]


# ---------------------------------------------------------------------------
# synthetic generator

@dataclass
class SyntheticConfig:
    n_bags: int = 100
    d: int = 32
    bag_size_range: tuple[int, int] = (128, 256)
    scale_ratio: int = 4
    witness_rate: float = 0.05
    mu: float = 1.5
    sigma: float = 1.0
    class_balance: float = 0.5
    seed: int = 0

    REQUIRED = ("n_bags", "d", "bag_size_range", "witness_rate", "mu", "sigma", "seed")

    def __post_init__(self):
        self.bag_size_range = tuple(int(v) for v in self.bag_size_range)

    def validate(self) -> None:
        lo, hi = self.bag_size_range
        problems = []
        if self.n_bags <= 0:
            problems.append(f"n_bags must be positive (got {self.n_bags})")
        if self.d < 1:
            problems.append(f"d must be >= 1 (got {self.d})")
        if not 1 <= lo <= hi:
            problems.append(f"bag_size_range must satisfy 1 <= lo <= hi (got {self.bag_size_range})")
        if self.scale_ratio < 1:
            problems.append(f"scale_ratio must be >= 1 (got {self.scale_ratio})")
        if not 0.0 < self.witness_rate <= 1.0:
            problems.append(f"witness_rate must lie in (0, 1] (got {self.witness_rate})")
        if self.mu < 0:
            problems.append(f"mu must be >= 0 (got {self.mu})")
        if not self.sigma > 0:
            problems.append(f"sigma must be > 0 (got {self.sigma})")
        if not 0.0 <= self.class_balance <= 1.0:
            problems.append(f"class_balance must lie in [0, 1] (got {self.class_balance})")
        if not 0 <= self.seed < 2**64:
            problems.append(f"seed must be a 64-bit unsigned integer (got {self.seed})")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["bag_size_range"] = list(self.bag_size_range)
        return out

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "SyntheticConfig":
        missing = [k for k in cls.REQUIRED if k not in raw]
        if missing:
            raise ConfigError(f"synthetic config missing required field(s): {', '.join(missing)}")
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"synthetic config has unknown field(s): {', '.join(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg


def scale_sizes(n_fine: int, ratio: int, n_scales: int = 3) -> list[int]:
    sizes = [n_fine]
    for _ in range(n_scales - 1):
        sizes.append(max(1, sizes[-1] // ratio))
    return sizes


def _witness_count(rate: float, n: int) -> int:
    return min(n, max(1, int(round(rate * n))))


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Draw a labelled multi-scale dataset; a pure function of ``cfg``.

    Fine-scale noise is N(0, sigma^2 I). A coarse instance is the mean of a
    disjoint group of finer noise vectors plus fresh noise sized so its
    marginal variance is again sigma^2. Each bag adds one context offset
    N(0, (sigma/4)^2 I) to every instance of every scale. In positive bags
    ``max(1, round(witness_rate * n_s))`` instances per scale carry the
    shift ``mu * u``; fine witnesses are packed into the coarse groups that
    become the coarse witnesses, so witnesses line up across scales.
    Values are rounded to float32 so a saved container reloads bit-exact.
    """
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    rng = np.random.default_rng(root.spawn(1)[0])
    u = rng.standard_normal(cfg.d)
    u /= np.linalg.norm(u)

    n_pos = int(round(cfg.class_balance * cfg.n_bags))
    labels = np.array([1] * n_pos + [0] * (cfg.n_bags - n_pos))
    rng.shuffle(labels)

    lo, hi = cfg.bag_size_range
    width = len(str(cfg.n_bags - 1))
    bags = []
    for i, bag_seed in enumerate(root.spawn(cfg.n_bags + 1)[1:]):
        brng = np.random.default_rng(bag_seed)
        label = int(labels[i])
        n_fine = int(brng.integers(lo, hi + 1))
        sizes = scale_sizes(n_fine, cfg.scale_ratio, len(SCALES))
        offset = brng.normal(0.0, cfg.sigma / 4.0, cfg.d)

        noise = brng.normal(0.0, cfg.sigma, (n_fine, cfg.d))
        wit = np.zeros(n_fine, dtype=bool)
        if label == 1:
            wit[brng.choice(n_fine, _witness_count(cfg.witness_rate, n_fine), replace=False)] = True
        feats, wits = {}, {}
        for level, scale in enumerate(SCALES):
            if level > 0:
                noise, wit = _coarsen(noise, wit, sizes[level], cfg, label, brng)
            x = noise + offset + np.outer(wit, cfg.mu * u)
            feats[scale] = x.astype(np.float32).astype(np.float64)
            wits[scale] = np.flatnonzero(wit)
        bags.append(MultiScaleBag(f"bag{i:0{width}d}", label, feats, wits))

    return Dataset(
        bags=bags,
        d=cfg.d,
        provenance={"generator": "synthetic", "config": cfg.to_dict()},
    )


def _coarsen(noise, wit, n_coarse, cfg, label, rng):
    n_fine = noise.shape[0]
    order = rng.permutation(n_fine)
    n_wit = _witness_count(cfg.witness_rate, n_coarse) if label == 1 else 0
    if n_wit:
        # pack fine witnesses into the first n_wit groups
        w_idx = order[wit[order]]
        rest = order[~wit[order]]
        groups = [list(g) for g in np.array_split(rest, n_coarse)]
        for j, w in enumerate(w_idx):
            groups[j % n_wit].append(w)
    else:
        groups = [list(g) for g in np.array_split(order, n_coarse)]
    out = np.empty((n_coarse, noise.shape[1]))
    for j, g in enumerate(groups):
        m = len(g)
        fresh_sd = cfg.sigma * np.sqrt(max(0.0, 1.0 - 1.0 / m)) if m else cfg.sigma
        base = noise[g].mean(axis=0) if m else 0.0
        out[j] = base + rng.normal(0.0, 1.0, noise.shape[1]) * fresh_sd
    coarse_wit = np.zeros(n_coarse, dtype=bool)
    coarse_wit[:n_wit] = True
    return out, coarse_wit


# ---------------------------------------------------------------------------
# container IO

def _bag_file(bag_id: str, scale: str) -> str:
    return f"bags/{bag_id}.{scale}.f32"


def save_dataset(ds: Dataset, path: str | os.PathLike) -> Path:
    root = Path(path)
    (root / "bags").mkdir(parents=True, exist_ok=True)
    entries = []
    for bag in ds.bags:
        scales = {}
        for s in ds.scales:
            x = bag.features[s]
            rel = _bag_file(bag.bag_id, s)
            x.astype(_F32).tofile(root / rel)
            scales[s] = {"file": rel, "rows": int(x.shape[0]), "cols": int(x.shape[1])}
        entry = {"id": bag.bag_id, "label": int(bag.label), "scales": scales}
        if bag.witnesses is not None:
            entry["witnesses"] = {s: [int(i) for i in w] for s, w in bag.witnesses.items()}
        entries.append(entry)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "d": ds.d,
        "scales": list(ds.scales),
        "class_names": list(ds.class_names),
        "provenance": ds.provenance,
        "bags": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def _read_manifest(root: Path) -> dict:
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise ManifestError(f"{mpath}: manifest not found")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{mpath}: not valid JSON ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
        raise ManifestError(f"{mpath}: not an {FORMAT_NAME} manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatVersionError(
            f"{mpath}: unsupported format version {manifest.get('version')!r} (expected {FORMAT_VERSION})"
        )
    for key in ("d", "scales", "class_names", "bags"):
        if key not in manifest:
            raise ManifestError(f"{mpath}: missing field {key!r}")
    return manifest


def load_dataset(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    manifest = _read_manifest(root)
    scales = tuple(manifest["scales"])
    bags = []
    for entry in manifest["bags"]:
        try:
            bag_id, label, spec = entry["id"], int(entry["label"]), entry["scales"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed bag entry {entry!r}") from exc
        feats = {}
        for s in scales:
            if s not in spec:
                raise ManifestError(f"bag {bag_id}: scale {s} missing from manifest")
            feats[s] = _read_matrix(root, bag_id, s, spec[s])
        wits = entry.get("witnesses")
        if wits is not None:
            wits = {s: np.asarray(v, dtype=np.int64) for s, v in wits.items()}
        bags.append(MultiScaleBag(bag_id, label, feats, wits))
    return Dataset(
        bags=bags,
        d=int(manifest["d"]),
        class_names=list(manifest["class_names"]),
        scales=scales,
        provenance=manifest.get("provenance", {}),
    )


def _read_matrix(root: Path, bag_id: str, scale: str, spec: dict) -> np.ndarray:
    try:
        rows, cols, rel = int(spec["rows"]), int(spec["cols"]), spec["file"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"bag {bag_id} scale {scale}: malformed matrix entry {spec!r}") from exc
    fpath = root / rel
    if not fpath.exists():
        raise ManifestError(f"bag {bag_id} scale {scale}: file {rel} not found")
    expected = rows * cols * _F32.itemsize
    actual = fpath.stat().st_size
    if actual != expected:
        raise SizeMismatchError(
            f"bag {bag_id} scale {scale}: manifest declares {rows}x{cols} "
            f"({expected} bytes) but {rel} holds {actual} bytes"
        )
    return np.fromfile(fpath, dtype=_F32).astype(np.float64).reshape(rows, cols)


@dataclass
class ValidationReport:
    path: str
    findings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings


def validate_manifest(path: str | os.PathLike) -> ValidationReport:
    """Check a container against its manifest using file sizes only."""
    root = Path(path)
    report = ValidationReport(str(root))
    try:
        manifest = _read_manifest(root)
    except DataError as exc:
        report.findings.append(str(exc))
        return report
    d = manifest["d"]
    scales = manifest["scales"]
    n_classes = len(manifest["class_names"])
    off_d: list[str] = []
    seen: set[str] = set()
    for entry in manifest["bags"]:
        bag_id = entry.get("id", "<missing id>")
        if bag_id in seen:
            report.findings.append(f"bag {bag_id}: duplicate id")
        seen.add(bag_id)
        label = entry.get("label")
        if not isinstance(label, int) or not 0 <= label < n_classes:
            report.findings.append(f"bag {bag_id}: label {label!r} outside [0, {n_classes})")
        spec = entry.get("scales", {})
        bag_dims = set()
        for s in scales:
            m = spec.get(s)
            if m is None:
                report.findings.append(f"bag {bag_id}: scale {s} missing from manifest")
                continue
            rows, cols, rel = m.get("rows"), m.get("cols"), m.get("file")
            bag_dims.add(cols)
            if not isinstance(rows, int) or rows < 1:
                report.findings.append(f"bag {bag_id} scale {s}: rows must be >= 1 (got {rows!r})")
                continue
            fpath = root / str(rel)
            if rel is None or not fpath.exists():
                report.findings.append(f"bag {bag_id} scale {s}: file {rel} not found")
                continue
            size = fpath.stat().st_size
            if isinstance(cols, int) and size != rows * cols * _F32.itemsize:
                report.findings.append(
                    f"bag {bag_id} scale {s}: declared {rows}x{cols} but file holds {size} bytes"
                )
        if any(c != d for c in bag_dims):
            off_d.append(bag_id)
    if off_d:
        report.findings.append(f"feature dimension differs from d={d} in bags: {', '.join(off_d)}")
    return report


# ---------------------------------------------------------------------------
# splitting

@dataclass
class FoldPlan:
    k_folds: int
    train_ids: list[list[str]]
    test_ids: list[list[str]]
    seed: int

    def splits(self) -> list[tuple[list[str], list[str]]]:
        return list(zip(self.train_ids, self.test_ids))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _stratified_buckets(ds: Dataset, seed: int) -> dict[int, list[str]]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    by_label: dict[int, list[str]] = {}
    for bag in ds.bags:
        by_label.setdefault(bag.label, []).append(bag.bag_id)
    out = {}
    for label in sorted(by_label):
        ids = sorted(by_label[label])
        out[label] = [ids[i] for i in rng.permutation(len(ids))]
    return out


def split_kfold(ds: Dataset, k: int, seed: int) -> FoldPlan:
    """Stratified, seeded k-fold plan; per-class fold sizes differ by at most one."""
    if k < 2:
        raise ConfigError(f"k must be >= 2 (got {k})")
    if k > ds.N:
        raise ConfigError(f"k={k} exceeds the number of bags ({ds.N})")
    folds: list[list[str]] = [[] for _ in range(k)]
    cursor = 0
    for ids in _stratified_buckets(ds, seed).values():
        # continue the round-robin across classes so total sizes stay balanced
        for bag_id in ids:
            folds[cursor % k].append(bag_id)
            cursor += 1
    order = [b.bag_id for b in ds.bags]
    rank = {b: i for i, b in enumerate(order)}
    test = [sorted(f, key=rank.__getitem__) for f in folds]
    train = []
    for t in test:
        held = set(t)
        train.append([b for b in order if b not in held])
    return FoldPlan(k, train, test, seed)


def split_holdout(ds: Dataset, n_train: int, seed: int) -> FoldPlan:
    """Stratified single train/test split expressed as a one-fold plan."""
    if not 0 < n_train < ds.N:
        raise ConfigError(f"n_train must lie in (0, {ds.N}) (got {n_train})")
    frac = n_train / ds.N
    train: list[str] = []
    buckets = _stratified_buckets(ds, seed)
    quotas = {lab: int(round(frac * len(ids))) for lab, ids in buckets.items()}
    # fix rounding drift on the largest class
    drift = n_train - sum(quotas.values())
    if drift:
        big = max(buckets, key=lambda lab: len(buckets[lab]))
        quotas[big] += drift
    for lab, ids in buckets.items():
        train.extend(ids[: quotas[lab]])
    order = [b.bag_id for b in ds.bags]
    chosen = set(train)
    return FoldPlan(
        1,
        [[b for b in order if b in chosen]],
        [[b for b in order if b not in chosen]],
        seed,
    )


def dataset_digest(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(json.dumps({"d": ds.d, "scales": list(ds.scales), "classes": ds.class_names}).encode())
    for bag in ds.bags:
        h.update(f"{bag.bag_id}:{bag.label}".encode())
        for s in ds.scales:
            x = bag.features[s]
            h.update(np.asarray(x.shape, dtype=np.int64).tobytes())
            h.update(x.astype(_F32).tobytes())
    return h.hexdigest()
