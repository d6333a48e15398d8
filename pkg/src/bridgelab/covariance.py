"""First-layer weight/data covariance alignment under random-label training.

After SGD on random labels from an isotropic init, the uncentered second
moment of the first-layer weights shares eigenvectors with the data
covariance, and eigenvalues map through a monotone transfer curve. This
module measures that: eigensystems via a 64-bit cyclic Jacobi solver,
principal-angle subspace alignment, eigenvector-matched transfer pairs
with Spearman rank correlation, and a rotation-invariance paired run.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import spearmanr

from . import tensor as tz
from .data import assign_random_labels, gaussian_source
from .tensor import ContractViolation, RngStream, Tensor, random_orthogonal
from .training import TrainConfig, fit

_S_INIT = 21
_S_BASELINE = 22
_S_ROTCHECK = 23
_S_TRUE = 24


def weight_second_moment(w: np.ndarray) -> tuple[np.ndarray, bool]:
    """Uncentered (1/m) sum of w_i w_i^T over rows; no mean subtraction.

    Returns the d x d moment and a rank-deficiency warning flag (m < d).
    """
    w = np.asarray(w, dtype=np.float64)
    m, d = w.shape
    return (w.T @ w) / m, m < d


@dataclass
class EigSystem:
    values: np.ndarray   # descending
    vectors: np.ndarray  # columns match values
    degenerate: bool
    blocks: list         # list of (start, end) index ranges of equal eigenvalues


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 64):
    """Cyclic-by-rows Jacobi eigendecomposition of a symmetric matrix.

    Rotations zero each off-diagonal pair in turn; sweeps repeat until the
    off-diagonal Frobenius mass falls below tol * ||A||_F.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    norm = np.linalg.norm(a)
    if norm == 0.0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        off = math_off(a)
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= tol * norm / n:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:  # avoid theta^2 overflow; t ~ 1/(2 theta)
                    t = 1.0 / (2.0 * theta)
                elif theta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                rot_p = c * v[:, p] - s * v[:, q]
                rot_q = s * v[:, p] + c * v[:, q]
                v[:, p], v[:, q] = rot_p, rot_q
    return np.diag(a).copy(), v


def math_off(a: np.ndarray) -> float:
    return float(np.sqrt(max(0.0, (a * a).sum() - (np.diag(a) ** 2).sum())))


def eig_sym(sigma: np.ndarray, degeneracy_rtol: float = 1e-6) -> EigSystem:
    """Sorted (descending) eigenpairs with a deterministic sign convention."""
    sigma = np.asarray(sigma, dtype=np.float64)
    scale = max(1.0, float(np.abs(sigma).max()))
    if np.abs(sigma - sigma.T).max() > 1e-8 * scale:
        raise ContractViolation("matrix is not symmetric")
    vals, vecs = jacobi_eigh(sigma)
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    vecs = vecs[:, order]
    for j in range(vecs.shape[1]):
        i = int(np.argmax(np.abs(vecs[:, j])))
        if vecs[i, j] < 0:
            vecs[:, j] = -vecs[:, j]
    blocks = []
    start = 0
    vmax = max(1.0, float(np.abs(vals).max()))
    for i in range(1, len(vals) + 1):
        if i == len(vals) or abs(vals[i] - vals[start]) > degeneracy_rtol * vmax:
            blocks.append((start, i))
            start = i
    degenerate = any(e - s > 1 for s, e in blocks)
    return EigSystem(vals, vecs, degenerate, blocks)


def eig_residual(sigma: np.ndarray, es: EigSystem) -> float:
    r = sigma @ es.vectors - es.vectors * es.values
    return float(np.abs(r).max())


def subspace_alignment(vx: np.ndarray, vw: np.ndarray) -> float:
    """Mean squared cosine of principal angles: ||Vx^T Vw||_F^2 / k in [0,1]."""
    for v in (vx, vw):
        gram = v.T @ v
        if np.abs(gram - np.eye(v.shape[1])).max() > 1e-6:
            raise ContractViolation("subspace columns must be orthonormal")
    if vx.shape != vw.shape:
        raise ContractViolation("subspaces must have matching shapes")
    k = vx.shape[1]
    m = vx.T @ vw
    return float((m * m).sum() / k)


def random_alignment_baseline(d: int, k: int, n_draws: int, seed: int,
                              reference: np.ndarray | None = None) -> dict:
    """Alignment of random k-frames against a fixed frame; mean ~= k/d."""
    rng = RngStream(seed, _S_BASELINE)
    ref = reference if reference is not None else np.eye(d)[:, :k]
    scores = []
    for _ in range(n_draws):
        q, r = np.linalg.qr(rng.normal((d, k)))
        q = q * np.sign(np.diag(r))
        scores.append(subspace_alignment(ref, q))
    arr = np.array(scores)
    return {"mean": float(arr.mean()), "std": float(arr.std()),
            "q95": float(np.quantile(arr, 0.95)), "n_draws": n_draws,
            "expected": k / d}


def transfer_curve(es_x: EigSystem, es_w: EigSystem) -> tuple[list, float]:
    """Pair eigenvalues by best eigenvector match; report Spearman rho.

    The assignment maximizes total |v_i . u_j|; inside degenerate blocks of
    the data spectrum the matched weight eigenvalues are re-sorted
    descending, since eigenvector identity is arbitrary there.
    """
    overlap = np.abs(es_x.vectors.T @ es_w.vectors)
    row, col = linear_sum_assignment(-overlap)
    tau = es_w.values[col[np.argsort(row)]]
    for s, e in es_x.blocks:
        tau[s:e] = np.sort(tau[s:e])[::-1]
    sigma_sq = es_x.values
    pairs = [(float(np.sqrt(max(sv, 0.0))), float(np.sqrt(max(tv, 0.0))))
             for sv, tv in zip(sigma_sq, tau)]
    rho = spearmanr(sigma_sq, tau).statistic
    return pairs, float(rho)


@dataclass
class CovarianceReport:
    sigma_vals: list
    tau_vals_init: list
    tau_vals_final: list
    alignment_by_k: list          # post-training, k = 1..d
    alignment_init_by_k: list
    baseline: dict
    pairs: list                   # matched (sigma_i, tau_i) after training
    spearman: float
    degenerate: bool
    rank_deficient: bool
    rotation_alignment_diff: float | None
    top_k: int
    config: dict = field(default_factory=dict)

    def alignment(self, k: int | None = None) -> float:
        k = k if k is not None else self.top_k
        return self.alignment_by_k[k - 1]

    def to_json(self) -> dict:
        return {
            "sigma_vals": self.sigma_vals,
            "tau_vals_init": self.tau_vals_init,
            "tau_vals_final": self.tau_vals_final,
            "alignment_by_k": self.alignment_by_k,
            "alignment_init_by_k": self.alignment_init_by_k,
            "baseline": self.baseline,
            "pairs": self.pairs,
            "spearman": self.spearman,
            "degenerate": self.degenerate,
            "rank_deficient": self.rank_deficient,
            "rotation_alignment_diff": self.rotation_alignment_diff,
            "top_k": self.top_k,
            "config": self.config,
        }

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)

    def curve_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sigma", "tau"])
            for s, t in self.pairs:
                w.writerow([f"{s:.10g}", f"{t:.10g}"])


class TwoLayerNet:
    """One hidden layer: gelu(x W1^T + b1) W2 + b2, rows of W1 live in x-space."""

    def __init__(self, d: int, m: int, c: int, init_std: float, rng: RngStream,
                 w2_std: float | None = None):
        w2_std = init_std if w2_std is None else w2_std
        self.params = {
            "w1": Tensor(rng.normal((m, d), init_std, dtype=np.float32),
                         requires_grad=True, name="w1"),
            "b1": Tensor(np.zeros(m, dtype=np.float32), requires_grad=True, name="b1"),
            "w2": Tensor(rng.normal((m, c), w2_std, dtype=np.float32),
                         requires_grad=True, name="w2"),
            "b2": Tensor(np.zeros(c, dtype=np.float32), requires_grad=True, name="b2"),
        }

    def logits_fn(self):
        p = self.params

        def fn(xb, train, rng):
            h = tz.gelu(tz.linear(Tensor(np.asarray(xb, dtype=np.float32)),
                                  tz.transpose(p["w1"], (1, 0)), p["b1"]))
            return tz.linear(h, p["w2"], p["b2"])
        return fn


def run_theorem_check(d: int, sigma_sq, m: int, c: int, n: int, epochs: int,
                      *, lr: float = 0.05, batch_size: int = 64, seed: int = 0,
                      init_std: float = 0.05, w2_std: float | None = None,
                      rotation_check: bool = True, train_second_layer: bool = True,
                      top_k: int | None = None) -> CovarianceReport:
    """Train a one-hidden-layer net on fully random labels and measure how
    the first-layer weight second moment aligns with the data covariance,
    before vs after training vs a random-frame baseline. The paired
    rotation run re-trains on G x with G orthogonal and G^T Sigma_x G =
    Sigma_x; alignment must be statistically unchanged.
    """
    sigma_sq = np.asarray(sigma_sq, dtype=np.float64)
    if top_k is None:
        top_k = max(1, d // 2)
    src = gaussian_source(sigma_sq, rotation_seed=seed, n=n, seed=seed)
    es_x = eig_sym(src.sigma_x)

    def one_run(x: np.ndarray) -> tuple[list, list, EigSystem, EigSystem]:
        rng = RngStream(seed, _S_INIT)
        net = TwoLayerNet(d, m, c, init_std, rng, w2_std=w2_std)
        true = RngStream(seed, _S_TRUE).integers(0, c, (n,))
        labels = assign_random_labels(true, 1.0, c, seed)
        cfg = TrainConfig(optimizer="sgd", lr=lr, weight_decay=0.0, epochs=epochs,
                          batch_size=batch_size, clip_norm=float("inf"), seed=seed,
                          stage="bridge")
        s0, _ = weight_second_moment(net.params["w1"].data)
        es0 = eig_sym(s0)
        trainable = list(net.params) if train_second_layer else ["w1", "b1"]
        fit(net.logits_fn(), net.params, x, labels.effective, cfg, trainable=trainable)
        s1, _ = weight_second_moment(net.params["w1"].data)
        es1 = eig_sym(s1)
        a_init = [subspace_alignment(es_x.vectors[:, :k], es0.vectors[:, :k])
                  for k in range(1, d + 1)]
        a_final = [subspace_alignment(es_x.vectors[:, :k], es1.vectors[:, :k])
                   for k in range(1, d + 1)]
        return a_init, a_final, es0, es1

    a_init, a_final, es0, es1 = one_run(src.x)
    pairs, rho = transfer_curve(es_x, es1)
    baseline = random_alignment_baseline(d, top_k, 1000, seed,
                                         reference=es_x.vectors[:, :top_k])

    rot_diff = None
    if rotation_check:
        g = _sigma_preserving_rotation(es_x, RngStream(seed, _S_ROTCHECK))
        _, a_final_rot, _, _ = one_run((src.x.astype(np.float64) @ g.T).astype(np.float32))
        rot_diff = abs(a_final_rot[top_k - 1] - a_final[top_k - 1])

    return CovarianceReport(
        sigma_vals=[float(v) for v in es_x.values],
        tau_vals_init=[float(v) for v in es0.values],
        tau_vals_final=[float(v) for v in es1.values],
        alignment_by_k=a_final,
        alignment_init_by_k=a_init,
        baseline=baseline,
        pairs=pairs,
        spearman=rho,
        degenerate=es_x.degenerate,
        rank_deficient=m < d,
        rotation_alignment_diff=rot_diff,
        top_k=top_k,
        config={"d": d, "sigma_sq": [float(v) for v in sigma_sq], "m": m, "c": c,
                "n": n, "epochs": epochs, "lr": lr, "batch_size": batch_size,
                "seed": seed, "init_std": init_std,
                "w2_std": init_std if w2_std is None else w2_std,
                "train_second_layer": train_second_layer},
    )


def _sigma_preserving_rotation(es_x: EigSystem, rng: RngStream) -> np.ndarray:
    """Orthogonal G with G^T Sigma_x G = Sigma_x: random signs on simple
    eigendirections, random orthogonal mixing inside degenerate blocks."""
    d = es_x.vectors.shape[0]
    b = np.zeros((d, d))
    for s, e in es_x.blocks:
        w = e - s
        if w == 1:
            b[s, s] = 1.0 if float(rng.uniform(())) < 0.5 else -1.0
        else:
            b[s:e, s:e] = random_orthogonal(w, rng)
    return es_x.vectors @ b @ es_x.vectors.T
