"""Loss-landscape diagnostics: 2D cross-sections, HVPs, spectra, metrics.

Directions for the surface are the training displacement and a random
orthogonal complement, optionally per-tensor rescaled to the anchor's
layer norms. Curvature probes go through a finite-difference
Hessian-vector product in float64, feeding a Hutchinson trace estimator
and Lanczos with full reorthogonalization. The nine summary metrics use
the definitions fixed here and are stamped with a definitions version so
numbers from other conventions are never conflated with these.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import DEFINITIONS_VERSION
from . import tensor as tz
from .models import Model
from .tensor import ContractViolation, RngStream, Tensor

HVP_H = 1e-3
LANCZOS_M = 32
LANCZOS_STARTS = 8
NEG_EPS_REL = 1e-6
DECAY_TOP = 20
NOISE_SIGMAS = np.logspace(-3, -1, 7)
NOISE_PROBES = 8
WINDOW_STEPS = 32

_S_D2 = 41
_S_HUTCH = 42
_S_LANCZOS = 43
_S_NOISE = 44


# ---------------------------------------------------------------------------
# parameter vector helpers


def flatten_state(state: dict[str, np.ndarray]) -> tuple[np.ndarray, list]:
    meta = [(k, v.shape, v.size) for k, v in state.items()]
    vec = np.concatenate([np.asarray(state[k], dtype=np.float64).reshape(-1)
                          for k, _, _ in meta])
    return vec, meta


def unflatten(vec: np.ndarray, meta: list) -> dict[str, np.ndarray]:
    out = {}
    pos = 0
    for k, shape, size in meta:
        out[k] = vec[pos:pos + size].reshape(shape)
        pos += size
    return out


# ---------------------------------------------------------------------------
# probe directions and the loss surface


@dataclass
class SurfaceSpec:
    alphas: list
    betas: list
    d2_seed: int = 0
    normalize: bool = True   # per-tensor rescale to the anchor's layer norms
    grid_cap: int = 64

    def validate(self):
        if 0.0 not in self.alphas or 0.0 not in self.betas:
            raise ContractViolation("surface grids must include 0")
        if len(self.alphas) > self.grid_cap or len(self.betas) > self.grid_cap:
            raise ContractViolation(f"grid exceeds cap {self.grid_cap}")


def make_directions(theta0: dict[str, np.ndarray], theta_t: dict[str, np.ndarray],
                    seed: int, normalize: bool = True):
    """Training direction theta_T - theta_0 plus a random orthogonal one.

    The random direction is Gram-Schmidt-orthogonalized against the
    training direction over the full flattened vector, then (optionally)
    both are rescaled per named tensor to match theta0's layer norms;
    layers with zero anchor norm get a zero direction.
    """
    d1 = {k: np.asarray(theta_t[k], dtype=np.float64) - np.asarray(theta0[k], dtype=np.float64)
          for k in theta0}
    v1, meta = flatten_state(d1)
    n1 = np.linalg.norm(v1)
    if n1 == 0.0:
        raise ContractViolation("degenerate training direction: theta_T equals theta_0")
    rng = RngStream(seed, _S_D2)
    v2 = rng.normal(v1.shape)
    v2 -= (v2 @ v1) / (n1 * n1) * v1
    d2 = unflatten(v2, meta)
    if normalize:
        for k in d1:
            anchor = np.linalg.norm(np.asarray(theta0[k], dtype=np.float64))
            for d in (d1, d2):
                norm = np.linalg.norm(d[k])
                d[k] = d[k] * (anchor / norm) if norm > 0 else d[k] * 0.0
    return d1, d2


def surface_grid(loss_fn, theta0: dict[str, np.ndarray], d1: dict, d2: dict,
                 spec: SurfaceSpec) -> np.ndarray:
    """matrix[i][j] = loss at theta0 + alpha_i d1 + beta_j d2.

    The (0, 0) entry evaluates the untouched anchor state, so it equals
    the directly computed loss bit-for-bit.
    """
    spec.validate()
    out = np.zeros((len(spec.alphas), len(spec.betas)))
    for i, a in enumerate(spec.alphas):
        for j, b in enumerate(spec.betas):
            state = {k: theta0[k] + a * d1[k] + b * d2[k] for k in theta0}
            out[i, j] = loss_fn(state)
    return out


def surface_csv(path: str, grid: np.ndarray, spec: SurfaceSpec) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["alpha\\beta"] + [f"{b:.8g}" for b in spec.betas])
        for a, row in zip(spec.alphas, grid):
            w.writerow([f"{a:.8g}"] + [f"{v:.10g}" for v in row])


# ---------------------------------------------------------------------------
# curvature probes


def hvp_fd(grad_fn, theta: np.ndarray, v: np.ndarray, h: float = HVP_H) -> np.ndarray:
    """Central-difference Hessian-vector product in float64."""
    nv = np.linalg.norm(v)
    if nv == 0.0:
        raise ContractViolation("hvp direction must be nonzero")
    vhat = v / nv
    gp = grad_fn(theta + h * vhat)
    gm = grad_fn(theta - h * vhat)
    return (gp - gm) * (nv / (2.0 * h))


def hutchinson_trace(hvp, dim: int, n_probes: int, seed: int) -> tuple[float, float]:
    """Rademacher-probe trace estimate with its standard error."""
    if n_probes < 1:
        raise ContractViolation("need at least one probe")
    rng = RngStream(seed, _S_HUTCH)
    samples = np.empty(n_probes)
    for i in range(n_probes):
        v = rng.rademacher((dim,))
        samples[i] = float(v @ hvp(v))
    est = float(samples.mean())
    stderr = float(samples.std(ddof=1) / math.sqrt(n_probes)) if n_probes > 1 else 0.0
    return est, stderr


def lanczos_spectrum(hvp, dim: int, m: int = LANCZOS_M, starts: int = LANCZOS_STARTS,
                     seed: int = 0) -> list[np.ndarray]:
    """Ritz values from `starts` independent Lanczos runs.

    Full reorthogonalization against all previous basis vectors; a
    breakdown (tiny beta) terminates early with the valid smaller
    tridiagonal.
    """
    if m < 2:
        raise ContractViolation("lanczos needs m >= 2")
    rng = RngStream(seed, _S_LANCZOS)
    all_ritz = []
    for s in range(starts):
        v = rng.normal((dim,))
        v /= np.linalg.norm(v)
        basis = [v]
        alphas: list[float] = []
        betas: list[float] = []
        w = hvp(v)
        a = float(v @ w)
        alphas.append(a)
        w = w - a * v
        for _ in range(m - 1):
            for u in basis:  # full reorthogonalization, twice for stability
                w -= (u @ w) * u
            for u in basis:
                w -= (u @ w) * u
            b = float(np.linalg.norm(w))
            if b < 1e-12 * max(1.0, abs(alphas[0])):
                break
            v = w / b
            basis.append(v)
            w = hvp(v)
            a = float(v @ w)
            w = w - a * v - b * basis[-2]
            alphas.append(a)
            betas.append(b)
        t = np.diag(alphas)
        if betas:
            off = np.array(betas)
            t += np.diag(off, 1) + np.diag(off, -1)
        all_ritz.append(np.linalg.eigvalsh(t))
    return all_ritz


# ---------------------------------------------------------------------------
# summary metrics


@dataclass
class SpectrumReport:
    ritz: list                    # per-start Ritz arrays (as lists)
    trace: float
    trace_stderr: float
    eigenvalue_decay_rate: float | None
    eigenvalue_kurtosis: float | None
    spectral_gap: float
    participation_ratio: float
    negative_ratio: float
    noise_auc: float | None
    gradient_predictiveness: float | None
    max_parameter_sensitivity: float | None
    constants: dict = field(default_factory=dict)
    definitions_version: str = DEFINITIONS_VERSION

    def to_json(self) -> dict:
        return {
            "ritz": [list(map(float, r)) for r in self.ritz],
            "trace": self.trace, "trace_stderr": self.trace_stderr,
            "metrics": {
                "eigenvalue_decay_rate": self.eigenvalue_decay_rate,
                "eigenvalue_kurtosis": self.eigenvalue_kurtosis,
                "hessian_trace": self.trace,
                "spectral_gap": self.spectral_gap,
                "participation_ratio": self.participation_ratio,
                "negative_eigenvalue_ratio": self.negative_ratio,
                "noise_sensitivity_auc": self.noise_auc,
                "gradient_predictiveness": self.gradient_predictiveness,
                "max_parameter_sensitivity": self.max_parameter_sensitivity,
            },
            "constants": self.constants,
            "definitions_version": self.definitions_version,
        }

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)


def decay_rate(ritz: np.ndarray, top: int = DECAY_TOP) -> float | None:
    """Least-squares slope of log lambda_i vs log i over top positive values."""
    pos = np.sort(ritz[ritz > 0])[::-1][:top]
    if pos.size < 3:
        return None
    x = np.log(np.arange(1, pos.size + 1, dtype=np.float64))
    y = np.log(pos)
    slope = float(np.polyfit(x, y, 1)[0])
    return slope


def excess_kurtosis(values: np.ndarray) -> float | None:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 4:
        return None
    d = v - v.mean()
    m2 = (d * d).mean()
    if m2 <= 0:
        return None
    return float((d ** 4).mean() / (m2 * m2) - 3.0)


def participation_ratio(ritz: np.ndarray) -> float:
    """(sum |l|)^2 / (m * sum l^2); 1 for a flat spectrum, 1/m for rank one."""
    mag = np.abs(np.asarray(ritz, dtype=np.float64))
    denom = float((mag * mag).sum()) * mag.size
    if denom == 0:
        return 1.0
    return float(mag.sum() ** 2 / denom)


def landscape_metrics(ritz_runs: list, trace: float, trace_stderr: float, *,
                      grad0: np.ndarray | None = None, noise_curve=None,
                      window=None, m: int = LANCZOS_M,
                      starts: int = LANCZOS_STARTS) -> SpectrumReport:
    """Summarize Ritz runs + probe curves into the nine fixed metrics."""
    merged = np.sort(np.concatenate([np.asarray(r) for r in ritz_runs]))[::-1]
    lam1 = float(merged[0])
    lam2 = float(merged[1]) if merged.size > 1 else lam1
    neg_eps = NEG_EPS_REL * abs(lam1)
    noise_auc = None
    sigmas = None
    if noise_curve is not None:
        sigmas, deltas = noise_curve
        noise_auc = float(np.trapezoid(deltas, x=sigmas))
    gp = None
    if window is not None:
        pred, real = window
        gp = pearson(pred, real)
    return SpectrumReport(
        ritz=[list(map(float, r)) for r in ritz_runs],
        trace=trace, trace_stderr=trace_stderr,
        eigenvalue_decay_rate=decay_rate(merged),
        eigenvalue_kurtosis=excess_kurtosis(merged),
        spectral_gap=lam1 - lam2,
        participation_ratio=participation_ratio(merged),
        negative_ratio=float((merged < -neg_eps).mean()),
        noise_auc=noise_auc,
        gradient_predictiveness=gp,
        max_parameter_sensitivity=(float(np.abs(grad0).max()) if grad0 is not None else None),
        constants={"lanczos_m": m, "lanczos_starts": starts,
                   "neg_eps_rel": NEG_EPS_REL, "decay_top": DECAY_TOP,
                   "hvp_h": HVP_H,
                   "noise_sigmas": [float(s) for s in (sigmas if sigmas is not None else [])],
                   "noise_probes": NOISE_PROBES},
    )


def pearson(a, b) -> float | None:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2:
        return None
    da = a - a.mean()
    db = b - b.mean()
    denom = math.sqrt(float((da * da).sum() * (db * db).sum()))
    if denom == 0:
        return None
    return float((da * db).sum() / denom)


# ---------------------------------------------------------------------------
# model-backed closures


def model_loss_fn(model: Model, x: np.ndarray, y: np.ndarray):
    """Full-batch eval-mode loss as a function of a parameter state."""
    work = model.copy()
    y = np.asarray(y)

    def fn(state: dict[str, np.ndarray]) -> float:
        work.load_state(state)
        out = work.forward(x)
        return float(tz.softmax_cross_entropy(out.logits, y).item())

    return fn


def model_grad_fn(model: Model, x: np.ndarray, y: np.ndarray):
    """Full-batch gradient in float64 as a function of a flat vector."""
    work = model.astype(np.float64)
    _, meta = flatten_state(work.state())
    x64 = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)

    def fn(vec: np.ndarray) -> np.ndarray:
        state = unflatten(vec, meta)
        work.load_state(state)
        for p in work.params.values():
            p.grad = None
        loss = tz.softmax_cross_entropy(work.forward(x64).logits, y)
        tz.backward(loss)
        grads = [work.params[k].grad if work.params[k].grad is not None
                 else np.zeros(shape) for k, shape, _ in meta]
        return np.concatenate([g.reshape(-1) for g in grads])

    return fn


def model_hvp_fn(model: Model, x: np.ndarray, y: np.ndarray):
    grad_fn = model_grad_fn(model, x, y)
    theta, _ = flatten_state(model.state())

    def hvp(v: np.ndarray) -> np.ndarray:
        return hvp_fd(grad_fn, theta, v)

    return hvp, theta, grad_fn


def noise_sensitivity_curve(loss_fn, theta0: dict[str, np.ndarray], seed: int,
                            sigmas=NOISE_SIGMAS, probes: int = NOISE_PROBES):
    """Mean loss increase under isotropic parameter noise per sigma."""
    rng = RngStream(seed, _S_NOISE)
    base = loss_fn(theta0)
    vec, meta = flatten_state(theta0)
    deltas = []
    for s in sigmas:
        acc = 0.0
        for _ in range(probes):
            xi = rng.normal(vec.shape)
            acc += loss_fn(unflatten(vec + s * xi, meta))
        deltas.append(acc / probes - base)
    return np.asarray(sigmas, dtype=np.float64), np.asarray(deltas)


def gradient_window(model: Model, x: np.ndarray, y: np.ndarray, lr: float,
                    steps: int = WINDOW_STEPS):
    """Full-batch SGD window recording predicted vs realized loss changes.

    Predicted change is the first-order g . delta-theta; realized is the
    actual loss difference after the step on the same batch.
    """
    grad_fn = model_grad_fn(model, x, y)
    loss_fn = model_loss_fn(model, x, y)
    vec, meta = flatten_state(model.state())
    pred, real = [], []
    last = loss_fn(unflatten(vec, meta))
    for _ in range(steps):
        g = grad_fn(vec)
        dtheta = -lr * g
        pred.append(float(g @ dtheta))
        vec = vec + dtheta
        now = loss_fn(unflatten(vec, meta))
        real.append(now - last)
        last = now
    return np.asarray(pred), np.asarray(real)


def analyze_model_landscape(model: Model, x: np.ndarray, y: np.ndarray, *,
                            seed: int = 0, m: int = LANCZOS_M,
                            starts: int = LANCZOS_STARTS,
                            hutchinson_probes: int = 64,
                            window_lr: float = 1e-2) -> SpectrumReport:
    """End-to-end spectrum report for a model on a probe dataset."""
    hvp, theta, grad_fn = model_hvp_fn(model, x, y)
    ritz = lanczos_spectrum(hvp, theta.size, m=m, starts=starts, seed=seed)
    trace, stderr = hutchinson_trace(hvp, theta.size, hutchinson_probes, seed)
    grad0 = grad_fn(theta)
    loss_fn = model_loss_fn(model, x, y)
    curve = noise_sensitivity_curve(loss_fn, model.state(), seed)
    window = gradient_window(model.copy(), x, y, window_lr)
    return landscape_metrics(ritz, trace, stderr, grad0=grad0, noise_curve=curve,
                             window=window, m=m, starts=starts)
