"""Outage, throughput PDF and the cross-scheme summary report."""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .fileio import atomic_path

DEFAULT_THRESHOLDS = tuple(float(t) for t in range(5, 101, 5))
DEFAULT_BIN_EDGES = tuple(float(e) for e in range(0, 101, 2))
SCHEME_ORDER = ("individual", "individual_reversed", "team", "distilled")


def compute_outage(rates, threshold: float, per_step: bool = False) -> float:
    """Percentage of samples with rate strictly below ``threshold`` (Mbps).

    ``rates`` is a (steps, users) array or a flat sequence of samples. With
    ``per_step`` a step counts as one sample that is in outage when any user
    is below the threshold.
    """
    r = np.asarray(rates, dtype=float)
    if r.size == 0:
        raise ValueError("empty rate log")
    if per_step:
        r = r.reshape(r.shape[0], -1).min(axis=1)
    return 100.0 * np.count_nonzero(r < threshold) / r.size


def outage_sweep(rates, thresholds: Sequence[float], per_step: bool = False) -> list[float]:
    return [compute_outage(rates, t, per_step) for t in thresholds]


def throughput_histogram(rates, bin_edges: Sequence[float]):
    """PDF estimate over ``bin_edges``; out-of-range samples go to the end bins.

    Returns ``(pdf, meta)`` where ``meta`` counts the clamped samples.
    """
    edges = np.asarray(bin_edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2:
        raise ValueError("need at least two bin edges")
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    r = np.asarray(rates, dtype=float).ravel()
    if r.size == 0:
        raise ValueError("empty rate log")
    below = int(np.count_nonzero(r < edges[0]))
    above = int(np.count_nonzero(r > edges[-1]))
    clamped = np.clip(r, edges[0], edges[-1])
    counts, _ = np.histogram(clamped, bins=edges)
    pdf = counts / (r.size * np.diff(edges))
    return pdf, {"samples": int(r.size), "below_range": below, "above_range": above}


@dataclass
class EvalMetrics:
    scheme: str
    seed: int
    thresholds: list[float]
    outage: list[float]
    bin_edges: list[float]
    pdf: list[float]
    hist_meta: dict
    direct_conflicts: int
    direct_losers: int
    rollbacks: int
    steps: int
    pf_mean: float
    pf_std: float
    pf_min: float
    pf_max: float
    rates: Optional[np.ndarray] = field(default=None, repr=False)  # (steps, users) Mbps
    serving: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def interrupts(self) -> int:
        return self.direct_losers + self.rollbacks

    @classmethod
    def from_log(cls, scheme, seed, rates, serving, pf, thresholds, bin_edges,
                 direct_conflicts=0, direct_losers=0, rollbacks=0, per_step=False):
        rates = np.asarray(rates, dtype=float)
        pdf, meta = throughput_histogram(rates, bin_edges)
        pf = np.asarray(pf, dtype=float)
        return cls(scheme, seed, [float(t) for t in thresholds],
                   outage_sweep(rates, thresholds, per_step), [float(e) for e in bin_edges],
                   pdf.tolist(), meta, int(direct_conflicts), int(direct_losers), int(rollbacks),
                   int(rates.shape[0]), float(pf.mean()), float(pf.std()), float(pf.min()),
                   float(pf.max()), rates, serving)

    def write(self, directory) -> list[Path]:
        """Write outage, histogram and summary CSVs named after the scheme."""
        d = Path(directory)
        paths = [d / f"{self.scheme}_outage.csv", d / f"{self.scheme}_histogram.csv",
                 d / f"{self.scheme}_summary.csv"]
        _write_rows(paths[0], ["threshold_mbps", "outage_pct"],
                    [[_fmt(t), _fmt(o)] for t, o in zip(self.thresholds, self.outage)])
        _write_rows(paths[1], ["bin_lo_mbps", "bin_hi_mbps", "pdf"],
                    [[_fmt(lo), _fmt(hi), _fmt(p)]
                     for lo, hi, p in zip(self.bin_edges[:-1], self.bin_edges[1:], self.pdf)])
        summary = [
            ("scheme", self.scheme), ("seed", self.seed), ("steps", self.steps),
            ("samples", self.hist_meta["samples"]),
            ("below_range", self.hist_meta["below_range"]),
            ("above_range", self.hist_meta["above_range"]),
            ("direct_conflicts", self.direct_conflicts), ("direct_losers", self.direct_losers),
            ("rollbacks", self.rollbacks), ("interrupts", self.interrupts),
            ("pf_mean", _fmt(self.pf_mean)), ("pf_std", _fmt(self.pf_std)),
            ("pf_min", _fmt(self.pf_min)), ("pf_max", _fmt(self.pf_max)),
        ]
        _write_rows(paths[2], ["key", "value"], summary)
        return paths


def _fmt(x) -> str:
    return repr(float(x))


def _write_rows(path: Path, header, rows) -> None:
    with atomic_path(path) as tmp, tmp.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def read_outage(path) -> list[tuple[float, float]]:
    with Path(path).open(newline="") as fh:
        return [(float(r["threshold_mbps"]), float(r["outage_pct"])) for r in csv.DictReader(fh)]


def _scheme_key(name: str):
    return (SCHEME_ORDER.index(name) if name in SCHEME_ORDER else len(SCHEME_ORDER), name)


def report(out_dir, dest: Optional[Path] = None) -> tuple[Path, Path]:
    """Aggregate every ``seed_*/eval/*_outage.csv`` under ``out_dir``.

    Writes ``outage_by_seed.csv`` (scheme, seed, threshold, outage) and
    ``outage_median.csv`` (threshold x scheme grid of medians over seeds).
    """
    out_dir = Path(out_dir)
    dest = Path(dest) if dest is not None else out_dir / "report"
    rows = []
    for f in sorted(out_dir.glob("seed_*/eval/*_outage.csv")):
        seed = int(f.parent.parent.name.split("_", 1)[1])
        scheme = f.name[: -len("_outage.csv")]
        for t, o in read_outage(f):
            rows.append((scheme, seed, t, o))
    if not rows:
        raise FileNotFoundError(f"no evaluation outputs under {out_dir}/seed_*/eval")
    rows.sort(key=lambda r: (_scheme_key(r[0]), r[1], r[2]))
    dest.mkdir(parents=True, exist_ok=True)
    by_seed = dest / "outage_by_seed.csv"
    _write_rows(by_seed, ["scheme", "seed", "threshold_mbps", "outage_pct"],
                [[s, seed, _fmt(t), _fmt(o)] for s, seed, t, o in rows])
    schemes = sorted({r[0] for r in rows}, key=_scheme_key)
    thresholds = sorted({r[2] for r in rows})
    grid = median_grid(rows)
    median = dest / "outage_median.csv"
    _write_rows(median, ["threshold_mbps"] + list(schemes),
                [[_fmt(t)] + [_fmt(grid[(s, t)]) if (s, t) in grid else "" for s in schemes]
                 for t in thresholds])
    return by_seed, median


def median_grid(rows) -> dict[tuple[str, float], float]:
    groups: dict[tuple[str, float], list[float]] = {}
    for scheme, _seed, t, o in rows:
        groups.setdefault((scheme, t), []).append(o)
    return {k: float(statistics.median(v)) for k, v in groups.items()}
