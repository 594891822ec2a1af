"""Wall-time scaling of prototype cross-attention against dense self-attention."""

from __future__ import annotations

import csv
import timeit
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .prototransformer import dense_self_attention, pt_forward, pt_init


@dataclass
class BenchRow:
    path: str
    n: int
    seconds: float


@dataclass
class BenchReport:
    K: int
    d_k: int
    repeats: int
    rows: list[BenchRow] = field(default_factory=list)
    slopes: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"K": self.K, "d_k": self.d_k, "repeats": self.repeats,
                "rows": [asdict(r) for r in self.rows], "slopes": self.slopes}

    def table(self) -> list[tuple[int, float | None, float | None]]:
        """One row per bag size: (n, pt seconds, dense seconds), None where not timed."""
        by_n: dict[int, dict[str, float]] = {}
        for r in self.rows:
            by_n.setdefault(r.n, {})[r.path] = r.seconds
        return [(n, t.get("pt"), t.get("dense")) for n, t in sorted(by_n.items())]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "pt_seconds", "dense_seconds"])
            for n, pt, dense in self.table():
                w.writerow([n, "" if pt is None else repr(pt), "" if dense is None else repr(dense)])


def loglog_slope(ns: Sequence[int], times: Sequence[float]) -> float | None:
    """Least-squares slope of log(time) on log(n); None with fewer than two points."""
    if len(ns) < 2:
        return None
    slope, _ = np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(times, float)), 1)
    return float(slope)


def _interleaved_best(fns: dict, repeats: int) -> dict:
    """Best per-call time of each callable.

    Every round times one block of each callable in turn, so a slow spell on
    a shared machine lands on all sizes rather than skewing one of them.
    """
    timers = {k: timeit.Timer(fn) for k, fn in fns.items()}
    numbers = {k: t.autorange()[0] for k, t in timers.items()}
    best = {k: float("inf") for k in fns}
    for _ in range(repeats):
        for k, t in timers.items():
            best[k] = min(best[k], t.timeit(numbers[k]) / numbers[k])
    return best


def _best_time(fn, repeats: int) -> float:
    return _interleaved_best({0: fn}, repeats)[0]


def bench_complexity(
    n_values: Sequence[int],
    K: int = 16,
    d_k: int = 64,
    repeats: int = 5,
    dense_n_values: Sequence[int] | None = None,
    seed: int = 0,
) -> BenchReport:
    """Time one PT forward and one dense self-attention pass per bag size.

    ``dense_n_values`` defaults to ``n_values``; the quadratic path usually
    needs a smaller range to stay affordable. Timings are the best block
    average over ``repeats`` interleaved rounds.
    """
    if list(n_values) != sorted(n_values):
        raise ValueError("n_values must be ascending")
    dense_n_values = list(n_values if dense_n_values is None else dense_n_values)
    rng = np.random.default_rng(seed)
    params = pt_init(d_k, ("s20",), 1, seed)
    w = [m.data for m in (params.w_q[0], params.w_k[0], params.w_v[0])]
    P = ad.constant(rng.standard_normal((K, d_k)))

    fns = {}
    for n in n_values:
        X = ad.constant(rng.standard_normal((n, d_k)))
        fns[("pt", int(n))] = lambda X=X: pt_forward(P, X, params)
    for n in dense_n_values:
        X = rng.standard_normal((n, d_k))
        fns[("dense", int(n))] = lambda X=X: dense_self_attention(X, *w)
    best = _interleaved_best(fns, repeats)

    report = BenchReport(K, d_k, repeats, [BenchRow(path, n, t) for (path, n), t in best.items()])
    slopes = {
        "pt": loglog_slope(list(n_values), [best[("pt", int(n))] for n in n_values]),
        "dense": loglog_slope(dense_n_values, [best[("dense", int(n))] for n in dense_n_values]),
    }
    report.slopes = {k: v for k, v in slopes.items() if v is not None}
    return report
