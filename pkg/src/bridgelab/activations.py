"""Per-layer neuron activation ratios on a fixed probe image set.

A neuron counts as activated by an image when its token-averaged
post-GELU response is strictly positive; r_l is the fraction of
(image, neuron) pairs activated at layer l. Probing always runs in
eval mode so drop-path cannot perturb paired comparisons.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .models import Model
from .tensor import ContractViolation

PROBE_IMAGES = 256


def token_average(acts: np.ndarray) -> np.ndarray:
    """Mean over the token axis: (..., T, d_mlp) -> (..., d_mlp)."""
    return np.asarray(acts).mean(axis=-2)


def activation_ratio(abar: np.ndarray) -> float:
    """Fraction of strictly positive entries; exact zeros count inactive."""
    a = np.asarray(abar)
    return float((a > 0).sum() / a.size)


@dataclass
class ActivationReport:
    ratios: list          # r_l for l = 1..L
    n_images: int
    n_tokens: int
    d_mlp: int
    tag: str              # init | post-bridge-random | post-bridge-correct | ...

    def to_json(self) -> dict:
        return {"ratios": self.ratios, "n_images": self.n_images,
                "n_tokens": self.n_tokens, "d_mlp": self.d_mlp, "tag": self.tag}

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)


def probe_model(model: Model, images: np.ndarray, tag: str,
                batch: int = 64) -> ActivationReport:
    """Activation ratios of every block on the given probe images."""
    spec = model.spec
    counts = np.zeros(spec.n_layers, dtype=np.int64)
    total = 0
    n_tokens = None
    for s in range(0, len(images), batch):
        out = model.forward(images[s:s + batch], collect=True)
        for l, act in enumerate(out.acts):
            abar = token_average(act.data)
            counts[l] += int((abar > 0).sum())
        n_tokens = out.acts[0].data.shape[1]
        total += abar.shape[0] * spec.d_mlp
    ratios = [float(c / total) for c in counts]
    return ActivationReport(ratios, len(images), int(n_tokens), spec.d_mlp, tag)


def compare_snapshots(before: ActivationReport, after: ActivationReport) -> dict:
    """Per-layer deltas r_after - r_before on a paired probe set."""
    if (before.n_images, before.n_tokens, before.d_mlp) != \
            (after.n_images, after.n_tokens, after.d_mlp):
        raise ContractViolation("activation reports come from different probes")
    if len(before.ratios) != len(after.ratios):
        raise ContractViolation("activation reports cover different layer counts")
    deltas = [a - b for b, a in zip(before.ratios, after.ratios)]
    return {"deltas": deltas,
            "layers_increased": int(sum(1 for d in deltas if d > 0)),
            "layers": len(deltas),
            "before_tag": before.tag, "after_tag": after.tag}


def comparison_csv(path: str, before: ActivationReport, after: ActivationReport) -> None:
    cmp = compare_snapshots(before, after)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "r_before", "r_after", "delta"])
        for i, (rb, ra, d) in enumerate(zip(before.ratios, after.ratios, cmp["deltas"])):
            w.writerow([i + 1, f"{rb:.8g}", f"{ra:.8g}", f"{d:.8g}"])
