"""Deterministic data sources and the random-label assignment machinery.

Sources: controlled-covariance Gaussian vectors, synthetic class-structured
images (a desk-scale CIFAR stand-in) and the CIFAR-10 binary format. All
sources are pure functions of (spec, seed).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict

import numpy as np

from . import checkpoint
from .tensor import ContractViolation, RngStream, random_orthogonal

# stream ids carved out of each source's seed
_S_ROTATION = 1
_S_SAMPLES = 2
_S_PATTERN = 3
_S_NOISE = 4
_S_PICK = 5
_S_RELABEL = 6

CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixel bytes


@dataclass(frozen=True)
class ChannelNorm:
    """Per-channel normalization constants; configuration, not code."""
    mean: tuple = (0.4914, 0.4822, 0.4465)
    std: tuple = (0.2470, 0.2435, 0.2616)


CIFAR10_NORM = ChannelNorm()


@dataclass(frozen=True)
class DatasetSpec:
    kind: str  # gaussian | synthetic-images | cifar-binary
    n: int
    n_classes: int
    extent: int = 0  # image side, or vector dimension for gaussian
    seed: int = 0

    def validate(self):
        if self.n <= 0:
            raise ContractViolation("dataset needs n > 0")
        if self.n_classes < 2:
            raise ContractViolation("dataset needs at least 2 classes")
        if self.kind not in ("gaussian", "synthetic-images", "cifar-binary"):
            raise ContractViolation(f"unknown dataset kind {self.kind!r}")


@dataclass
class LabelTable:
    """Deterministic index -> label mapping with corruption ratio rho."""
    true: np.ndarray
    effective: np.ndarray
    corrupted: np.ndarray  # sorted indices whose labels were resampled
    rho: float
    n_classes: int
    seed: int
    exclude_true_class: bool = False

    def meta(self) -> dict:
        return {"rho": self.rho, "n_classes": self.n_classes, "seed": self.seed,
                "exclude_true_class": self.exclude_true_class,
                "n": int(self.true.shape[0]), "n_corrupted": int(self.corrupted.shape[0])}


@dataclass
class GaussianSource:
    x: np.ndarray          # (n, d) float32 samples
    sigma_x: np.ndarray    # exact d x d covariance used
    basis: np.ndarray      # orthogonal Q with sigma_x = Q diag(eigvals) Q^T
    eigvals: np.ndarray


def gaussian_source(eigvals, rotation_seed: int, n: int, seed: int) -> GaussianSource:
    """Zero-mean Gaussian vectors with covariance Q diag(eigvals) Q^T."""
    ev = np.asarray(eigvals, dtype=np.float64)
    if np.any(ev <= 0):
        raise ContractViolation("covariance eigenvalues must be positive")
    d = ev.shape[0]
    q = random_orthogonal(d, RngStream(rotation_seed, _S_ROTATION))
    sigma = (q * ev) @ q.T
    z = RngStream(seed, _S_SAMPLES).normal((n, d))
    x = (z * np.sqrt(ev)) @ q.T
    return GaussianSource(x.astype(np.float32), sigma, q, ev)


def synthetic_images(n: int, n_classes: int, extent: int, seed: int,
                     noise: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """Class-structured images: per-class oriented gratings with random phase.

    Each class owns an orientation/frequency pair plus a channel-mixing
    vector; the phase is jittered per image, so class means vanish and the
    classes are not linearly separable in raw pixels, while a small
    trained model separates them easily. Generation is stratified: class
    counts differ by at most one.
    """
    if extent < 8:
        raise ContractViolation("synthetic images need extent >= 8")
    prng = RngStream(seed, _S_PATTERN)
    nrng = RngStream(seed, _S_NOISE)

    # per-class pattern parameters, fixed by the seed
    orient = np.pi * np.arange(n_classes) / n_classes
    freq = 1.5 + (np.arange(n_classes) % 4)
    mix = prng.normal((n_classes, 3))
    mix /= np.linalg.norm(mix, axis=1, keepdims=True)
    mix2 = prng.normal((n_classes, 3))
    mix2 /= np.linalg.norm(mix2, axis=1, keepdims=True)

    counts = [n // n_classes + (1 if c < n % n_classes else 0) for c in range(n_classes)]
    labels = np.concatenate([np.full(k, c, dtype=np.int64) for c, k in enumerate(counts)])

    yy, xx = np.meshgrid(np.arange(extent), np.arange(extent), indexing="ij")
    images = np.empty((n, 3, extent, extent), dtype=np.float32)
    row = 0
    for c, k in enumerate(counts):
        u = (xx * np.cos(orient[c]) + yy * np.sin(orient[c])) / extent
        u2 = (xx * np.cos(orient[c] + np.pi / 3) + yy * np.sin(orient[c] + np.pi / 3)) / extent
        phases = prng.uniform((k, 2), 0.0, 2.0 * np.pi)
        for j in range(k):
            g1 = np.sin(2 * np.pi * freq[c] * u + phases[j, 0])
            g2 = np.sin(2 * np.pi * (freq[c] + 2.0) * u2 + phases[j, 1])
            img = mix[c][:, None, None] * g1 + 0.5 * mix2[c][:, None, None] * g2
            images[row + j] = img
        row += k
    if noise > 0:
        images += nrng.normal(images.shape, noise).astype(np.float32)
    order = prng.permutation(n)  # stratified counts, shuffled order
    return images[order], labels[order]


def cifar_import(path: str, norm: ChannelNorm = CIFAR10_NORM) -> tuple[np.ndarray, np.ndarray]:
    """Read CIFAR-10 binary records: 1 label byte + 3x32x32 pixel bytes."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) == 0 or len(blob) % CIFAR_RECORD != 0:
        raise ContractViolation(
            f"format error: {len(blob)} bytes is not a multiple of {CIFAR_RECORD}")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.max(initial=0) >= 10:
        raise ContractViolation("format error: label byte >= 10")
    pixels = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    mean = np.asarray(norm.mean, dtype=np.float32)[None, :, None, None]
    std = np.asarray(norm.std, dtype=np.float32)[None, :, None, None]
    return (pixels - mean) / std, labels


def assign_random_labels(true_labels, rho: float, n_classes: int, seed: int,
                         exclude_true_class: bool = False) -> LabelTable:
    """Resample a rho-fraction of labels uniformly over the classes.

    The resampled label may coincide with the true one unless
    exclude_true_class is set; round(rho * n) indices are drawn without
    replacement from a dedicated stream, so the table is a pure function
    of (labels, rho, n_classes, seed).
    """
    if not 0.0 <= rho <= 1.0:
        raise ContractViolation("rho must lie in [0, 1]")
    true = np.asarray(true_labels, dtype=np.int64)
    n = true.shape[0]
    k = int(np.floor(rho * n + 0.5))
    pick = RngStream(seed, _S_PICK)
    rel = RngStream(seed, _S_RELABEL)
    idx = np.sort(pick.choice_no_replace(n, k)) if k else np.empty(0, dtype=np.int64)
    effective = true.copy()
    if k:
        if exclude_true_class:
            draw = rel.integers(0, n_classes - 1, (k,))
            draw = draw + (draw >= true[idx])
        else:
            draw = rel.integers(0, n_classes, (k,))
        effective[idx] = draw
    return LabelTable(true, effective, idx.astype(np.int64), rho, n_classes, seed,
                      exclude_true_class)


def save_dataset(path: str, images: np.ndarray, labels: LabelTable,
                 spec: DatasetSpec) -> None:
    """Persist data + labels via the checkpoint container and a JSON sidecar."""
    checkpoint.save({
        "x": images,
        "labels.true": labels.true,
        "labels.effective": labels.effective,
        "labels.corrupted": labels.corrupted,
    }, path)
    side = {"spec": asdict(spec), "labels": labels.meta()}
    with open(path + ".json", "w") as f:
        json.dump(side, f, indent=2, sort_keys=True)


def load_dataset(path: str) -> tuple[np.ndarray, LabelTable, DatasetSpec]:
    tensors = checkpoint.load(path)
    with open(path + ".json") as f:
        side = json.load(f)
    meta = side["labels"]
    labels = LabelTable(
        true=tensors["labels.true"], effective=tensors["labels.effective"],
        corrupted=tensors["labels.corrupted"], rho=meta["rho"],
        n_classes=meta["n_classes"], seed=meta["seed"],
        exclude_true_class=meta["exclude_true_class"])
    return tensors["x"], labels, DatasetSpec(**side["spec"])
