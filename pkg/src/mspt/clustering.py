"""Per-bag K-means prototype extraction and the prototype cache."""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import ConfigError, DataError, Dataset, MultiScaleBag

CACHE_FORMAT = "mspt-protos"
CACHE_VERSION = 1
_F32 = np.dtype("<f4")


class StaleCacheError(DataError):
    """Cached prototypes were built with a different configuration."""


@dataclass(frozen=True)
class KMeansConfig:
    K: int = 16
    max_iters: int = 100
    tol: float = 1e-6
    n_restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1 (got {self.K})")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1 (got {self.max_iters})")
        if self.tol < 0:
            raise ConfigError(f"tol must be >= 0 (got {self.tol})")
        if self.n_restarts < 1:
            raise ConfigError(f"n_restarts must be >= 1 (got {self.n_restarts})")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    objective: float
    history: list[float] = field(default_factory=list)
    repaired: bool = False


@dataclass
class PrototypeBag:
    bag_id: str
    centers: dict[str, np.ndarray]
    objective: dict[str, float]
    assignments: dict[str, np.ndarray]
    warnings: list[str] = field(default_factory=list)

    @property
    def K(self) -> int:
        return next(iter(self.centers.values())).shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PrototypeBag):
            return NotImplemented
        return (
            self.bag_id == other.bag_id
            and list(self.centers) == list(other.centers)
            and all(np.array_equal(self.centers[s], other.centers[s]) for s in self.centers)
            and self.objective == other.objective
            and all(np.array_equal(self.assignments[s], other.assignments[s]) for s in self.assignments)
        )


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # explicit differences rather than the expanded form: exact zeros on duplicates
    diff = X[:, None, :] - C[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeanspp_init(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """D^2-weighted seeding.

    If every remaining point already coincides with a chosen center (fewer
    than K distinct rows), the next center is drawn uniformly, which
    duplicates a center.
    """
    n = X.shape[0]
    if K > n:
        raise ConfigError(f"K={K} exceeds the number of instances ({n})")
    idx = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[idx[0]][None, :])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.integers(n))
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dists(X, X[nxt][None, :])[:, 0])
    return X[idx].copy()


def _lloyd(X: np.ndarray, centers: np.ndarray, max_iters: int, tol: float) -> KMeansResult:
    K = centers.shape[0]
    history: list[float] = []
    repaired = False
    assign = np.zeros(X.shape[0], dtype=np.int64)
    for _ in range(max_iters):
        d2 = _sq_dists(X, centers)
        assign = d2.argmin(axis=1)  # ties -> lowest index
        obj = float(d2[np.arange(X.shape[0]), assign].sum())
        if history and obj > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"K-means objective increased: {history[-1]} -> {obj}")
        history.append(obj)
        new = np.empty_like(centers)
        point_d2 = d2[np.arange(X.shape[0]), assign]
        for k in range(K):
            members = assign == k
            if members.any():
                new[k] = X[members].mean(axis=0)
            else:
                far = int(point_d2.argmax())
                new[k] = X[far]
                point_d2[far] = 0.0
                repaired = True
        centers = new
        if len(history) >= 2:
            prev = history[-2]
            if prev == 0 or (prev - obj) <= tol * prev:
                break
    d2 = _sq_dists(X, centers)
    assign = d2.argmin(axis=1)
    obj = float(d2[np.arange(X.shape[0]), assign].sum())
    if history and obj > history[-1] * (1 + 1e-12) + 1e-12:
        raise AssertionError(f"K-means objective increased: {history[-1]} -> {obj}")
    history.append(obj)
    return KMeansResult(centers, assign, obj, history, repaired)


def kmeans_fit(X: np.ndarray, cfg: KMeansConfig, rng: np.random.Generator | None = None) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds; best of ``n_restarts``."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < cfg.K:
        raise ConfigError(f"need at least K={cfg.K} instances, got {n}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    best = None
    for _ in range(cfg.n_restarts):
        res = _lloyd(X, kmeanspp_init(X, cfg.K, rng), cfg.max_iters, cfg.tol)
        if best is None or res.objective < best.objective:
            best = res
    return best


def _bag_stream(seed: int, bag_id: str, scale_index: int) -> np.random.Generator:
    tag = int.from_bytes(hashlib.sha256(bag_id.encode()).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, tag, scale_index]))


def _canonical_order(centers: np.ndarray) -> np.ndarray:
    # lexsort keys run last-to-first: primary key is column 0
    return np.lexsort(centers.T[::-1])


def extract_prototypes(bag: MultiScaleBag, cfg: KMeansConfig) -> PrototypeBag:
    """Cluster every scale of ``bag`` into exactly K prototypes.

    Scales with fewer than K instances are padded by cycling their rows,
    and a warning is recorded on the result. Centers are rounded to
    float32 and sorted lexicographically so cached and fresh prototypes are
    identical inputs downstream.
    """
    centers, objective, assignments, notes = {}, {}, {}, []
    for si, (scale, X) in enumerate(bag.features.items()):
        n = X.shape[0]
        if n < cfg.K:
            notes.append(f"bag {bag.bag_id} scale {scale}: {n} instances < K={cfg.K}, padded by duplication")
            X = X[np.arange(cfg.K) % n]
        res = kmeans_fit(X, cfg, _bag_stream(cfg.seed, bag.bag_id, si))
        order = _canonical_order(res.centers)
        remap = np.empty(cfg.K, dtype=np.int64)
        remap[order] = np.arange(cfg.K)
        centers[scale] = res.centers[order].astype(np.float32).astype(np.float64)
        assignments[scale] = remap[res.assignments[:n]]
        objective[scale] = res.objective
    for note in notes:
        warnings.warn(note, stacklevel=2)
    return PrototypeBag(bag.bag_id, centers, objective, assignments, notes)


def extract_all(ds: Dataset, cfg: KMeansConfig) -> dict[str, PrototypeBag]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return {bag.bag_id: extract_prototypes(bag, cfg) for bag in ds.bags}


# ---------------------------------------------------------------------------
# cache: <dir>/protos.manifest.json + <dir>/protos/<bag_id>.<scale>.f32

def cache_prototypes(
    ds: Dataset, cfg: KMeansConfig, path: str | os.PathLike, protos: dict[str, PrototypeBag] | None = None
) -> dict[str, PrototypeBag]:
    if protos is None:
        protos = extract_all(ds, cfg)
    root = Path(path)
    (root / "protos").mkdir(parents=True, exist_ok=True)
    entries = []
    for bag in ds.bags:
        pb = protos[bag.bag_id]
        scales = {}
        for s, C in pb.centers.items():
            rel = f"protos/{bag.bag_id}.{s}.f32"
            C.astype(_F32).tofile(root / rel)
            scales[s] = {
                "file": rel,
                "rows": int(C.shape[0]),
                "cols": int(C.shape[1]),
                "objective": pb.objective[s],
                "assignments": [int(a) for a in pb.assignments[s]],
            }
        entries.append({"id": bag.bag_id, "scales": scales, "warnings": pb.warnings})
    manifest = {
        "format": CACHE_FORMAT,
        "version": CACHE_VERSION,
        "kmeans": asdict(cfg),
        "digest": cfg.digest(),
        "bags": entries,
    }
    (root / "protos.manifest.json").write_text(json.dumps(manifest, indent=1))
    return protos


def load_prototypes(path: str | os.PathLike, cfg: KMeansConfig) -> dict[str, PrototypeBag]:
    root = Path(path)
    mpath = root / "protos.manifest.json"
    if not mpath.exists():
        raise DataError(f"{mpath}: prototype cache not found")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != CACHE_FORMAT or manifest.get("version") != CACHE_VERSION:
        raise DataError(f"{mpath}: not a version-{CACHE_VERSION} {CACHE_FORMAT} manifest")
    if manifest.get("digest") != cfg.digest():
        raise StaleCacheError(
            f"{mpath}: cache built with {manifest.get('kmeans')} (digest {manifest.get('digest')}), "
            f"requested {asdict(cfg)} (digest {cfg.digest()})"
        )
    out = {}
    for entry in manifest["bags"]:
        centers, objective, assignments = {}, {}, {}
        for s, m in entry["scales"].items():
            f = root / m["file"]
            expected = m["rows"] * m["cols"] * _F32.itemsize
            if not f.exists() or f.stat().st_size != expected:
                raise DataError(f"bag {entry['id']} scale {s}: prototype file missing or wrong size")
            centers[s] = np.fromfile(f, dtype=_F32).astype(np.float64).reshape(m["rows"], m["cols"])
            objective[s] = float(m["objective"])
            assignments[s] = np.asarray(m["assignments"], dtype=np.int64)
        out[entry["id"]] = PrototypeBag(entry["id"], centers, objective, assignments, list(entry["warnings"]))
    return out
