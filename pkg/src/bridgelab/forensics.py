"""Weight-distribution forensics: moments, heavy-tail measures, outliers.

Works on any named tensor set (a live model's state or a checkpoint
manifest), grouping tensors into per-block aggregates by the
"blocks.<i>." name convention. All moments are computed two-pass in
float64 with population (biased) normalization.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

HIST_BINS = 201
DEFAULT_Z = 6.0
TAIL_SIGMAS = (3.0, 6.0, 9.0)
_STD_FLOOR = 1e-12
_INDEX_CAP = 64


@dataclass
class TensorStats:
    name: str
    n: int
    mean: float
    std: float
    excess_kurtosis: float | None  # None when n < 4 or variance ~ 0
    max_abs: float
    outlier_count: int
    outlier_indices: list
    tail_fractions: dict  # sigma multiple -> fraction of |w - mean| > k sigma

    def to_json(self) -> dict:
        return {"name": self.name, "n": self.n, "mean": self.mean, "std": self.std,
                "excess_kurtosis": self.excess_kurtosis, "max_abs": self.max_abs,
                "outlier_count": self.outlier_count,
                "outlier_indices": self.outlier_indices,
                "tail_fractions": {str(k): v for k, v in self.tail_fractions.items()}}


def tensor_stats(w: np.ndarray) -> tuple[float, float, float | None, float]:
    """(mean, std, excess kurtosis, max |w|); kurtosis None if undefined."""
    flat = np.asarray(w, dtype=np.float64).reshape(-1)
    n = flat.size
    mean = float(flat.mean())
    d = flat - mean
    m2 = float((d * d).mean())
    std = float(np.sqrt(m2))
    kurt = None
    if n >= 4 and std > _STD_FLOOR:
        m4 = float((d ** 4).mean())
        kurt = m4 / (m2 * m2) - 3.0
    return mean, std, kurt, float(np.abs(flat).max(initial=0.0))


def outlier_count(w: np.ndarray, z: float = DEFAULT_Z) -> tuple[int, list]:
    """Elements with |w - mean| > z * std; zero by convention when std ~ 0."""
    flat = np.asarray(w, dtype=np.float64).reshape(-1)
    mean = flat.mean()
    std = float(np.sqrt(((flat - mean) ** 2).mean()))
    if std < _STD_FLOOR:
        return 0, []
    hits = np.nonzero(np.abs(flat - mean) > z * std)[0]
    return int(hits.size), hits[:_INDEX_CAP].tolist()


def tail_fractions(w: np.ndarray, sigmas=TAIL_SIGMAS) -> dict:
    flat = np.asarray(w, dtype=np.float64).reshape(-1)
    mean = flat.mean()
    std = float(np.sqrt(((flat - mean) ** 2).mean()))
    if std < _STD_FLOOR:
        return {float(s): 0.0 for s in sigmas}
    dev = np.abs(flat - mean)
    return {float(s): float((dev > s * std).mean()) for s in sigmas}


def histogram(w: np.ndarray, bins: int = HIST_BINS):
    """Symmetric fixed-width histogram over [-max|w|, +max|w|]."""
    flat = np.asarray(w, dtype=np.float64).reshape(-1)
    a = float(np.abs(flat).max(initial=0.0))
    if a == 0.0:
        counts = np.zeros(bins, dtype=np.int64)
        counts[bins // 2] = flat.size
        edges = np.linspace(-1.0, 1.0, bins + 1)
        return counts, edges
    counts, edges = np.histogram(flat, bins=bins, range=(-a, a))
    return counts.astype(np.int64), edges


def _block_of(name: str) -> str:
    if name.startswith("blocks."):
        return "block_" + name.split(".")[1]
    return "unassigned"


@dataclass
class OutlierReport:
    z: float
    tensors: list            # TensorStats in input order
    layers: dict             # block label -> aggregate dict
    histograms: dict = field(default_factory=dict)  # name -> (counts, edges)

    def to_json(self) -> dict:
        return {"z": self.z,
                "tensors": [t.to_json() for t in self.tensors],
                "layers": self.layers}

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)

    def histograms_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["tensor", "bin_left", "bin_right", "count"])
            for name, (counts, edges) in self.histograms.items():
                for i, c in enumerate(counts):
                    w.writerow([name, f"{edges[i]:.8g}", f"{edges[i + 1]:.8g}", int(c)])

    def mean_block_kurtosis(self) -> float:
        vals = [agg["mean_excess_kurtosis"] for label, agg in self.layers.items()
                if label != "unassigned" and agg["mean_excess_kurtosis"] is not None]
        return float(np.mean(vals)) if vals else float("nan")


def layer_report(tensors: dict[str, np.ndarray], z: float = DEFAULT_Z,
                 with_histograms: bool = True) -> OutlierReport:
    """Per-tensor stats plus per-block aggregates keyed by name convention."""
    stats = []
    hists = {}
    groups: dict[str, list] = {}
    for name, w in tensors.items():
        mean, std, kurt, max_abs = tensor_stats(w)
        cnt, idx = outlier_count(w, z)
        st = TensorStats(name, int(np.size(w)), mean, std, kurt, max_abs,
                         cnt, idx, tail_fractions(w))
        stats.append(st)
        groups.setdefault(_block_of(name), []).append(st)
        if with_histograms:
            hists[name] = histogram(w)

    layers = {}
    for label in sorted(groups):
        members = groups[label]
        kurts = [m.excess_kurtosis for m in members if m.excess_kurtosis is not None]
        layers[label] = {
            "tensors": [m.name for m in members],
            "n": int(sum(m.n for m in members)),
            "outlier_count": int(sum(m.outlier_count for m in members)),
            "mean_excess_kurtosis": float(np.mean(kurts)) if kurts else None,
            "max_abs": float(max(m.max_abs for m in members)),
        }
    return OutlierReport(z, stats, layers, hists)
