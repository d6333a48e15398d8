"""GPT-2-style transformer blocks for an image classifier and a toy LM.

Blocks are pre-norm (LN -> attention -> residual, LN -> MLP -> residual);
the classifier reads out by mean-pooling the final hidden states. Both
tasks share block parameter names so pretrained LM blocks can be
transplanted bit-exactly into a classifier.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tz
from .tensor import ContractViolation, RngStream, Tensor

INIT_STD = 0.02  # Normal(0, 0.02^2) for embeddings and linear weights
MASK_NEG = -1e9


class SpecError(ValueError):
    """A ModelSpec violates one of its invariants."""


class TransplantError(ValueError):
    """Block transplant failed; message names the offending tensors."""


@dataclass(frozen=True)
class ModelSpec:
    n_layers: int
    d_model: int
    n_heads: int
    max_tokens: int
    task: str  # "classifier" | "lm"
    d_mlp: int = 0  # 0 -> 4 * d_model
    n_classes: int = 0
    vocab: int = 0
    image_size: int = 0
    patch_size: int = 0
    channels: int = 3
    causal_patches: bool = False

    def __post_init__(self):
        if self.d_mlp == 0:
            object.__setattr__(self, "d_mlp", 4 * self.d_model)

    @property
    def n_patches(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    def validate(self) -> None:
        if self.n_layers < 1:
            raise SpecError("need at least one layer")
        if self.d_model % self.n_heads != 0:
            raise SpecError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.task == "classifier":
            if self.n_classes < 2:
                raise SpecError("classifier needs n_classes >= 2")
            if self.patch_size <= 0 or self.image_size % self.patch_size != 0:
                raise SpecError(
                    f"patch grid mismatch: image {self.image_size} not divisible by patch {self.patch_size}")
            if self.n_patches > self.max_tokens:
                raise SpecError(f"{self.n_patches} patches exceed max_tokens={self.max_tokens}")
        elif self.task == "lm":
            if self.vocab < 2:
                raise SpecError("lm needs vocab >= 2")
        else:
            raise SpecError(f"unknown task {self.task!r}")


@dataclass(frozen=True)
class FreezeSelector:
    """Which transformer blocks stay trainable: all, first:k or last:k."""
    mode: str = "all"
    k: int = 0

    def validate(self, n_layers: int) -> None:
        if self.mode == "all":
            return
        if self.mode not in ("first", "last"):
            raise SpecError(f"unknown freeze mode {self.mode!r}")
        if not 1 <= self.k <= n_layers:
            raise SpecError(f"freeze k={self.k} outside [1, {n_layers}]")

    def trainable_blocks(self, n_layers: int) -> list[bool]:
        self.validate(n_layers)
        if self.mode == "all":
            return [True] * n_layers
        if self.mode == "first":
            return [i < self.k for i in range(n_layers)]
        return [i >= n_layers - self.k for i in range(n_layers)]

    @staticmethod
    def parse(text: str) -> "FreezeSelector":
        if text == "all":
            return FreezeSelector("all")
        mode, _, k = text.partition(":")
        if mode not in ("first", "last") or not k.isdigit():
            raise SpecError(f"bad freeze selector {text!r} (want all | first:k | last:k)")
        return FreezeSelector(mode, int(k))


@dataclass
class ForwardOut:
    logits: Tensor
    hidden: list  # per-block output, each (B, T, d_model)
    acts: list    # per-block post-GELU MLP activations, each (B, T, d_mlp)
    final: Tensor  # post-final-LN hidden states (B, T, d_model)
    pooled: Tensor  # mean over tokens (B, d_model)


def _block_names(i: int, spec: ModelSpec) -> dict:
    d, dm = spec.d_model, spec.d_mlp
    p = f"blocks.{i}."
    return {
        p + "ln1.g": (d,), p + "ln1.b": (d,),
        p + "attn.w_qkv": (d, 3 * d), p + "attn.b_qkv": (3 * d,),
        p + "attn.w_out": (d, d), p + "attn.b_out": (d,),
        p + "ln2.g": (d,), p + "ln2.b": (d,),
        p + "mlp.w_in": (d, dm), p + "mlp.b_in": (dm,),
        p + "mlp.w_out": (dm, d), p + "mlp.b_out": (d,),
    }


def _shapes(spec: ModelSpec) -> dict:
    d = spec.d_model
    shapes: dict = {}
    if spec.task == "classifier":
        shapes["embed.patch.w"] = (spec.patch_dim, d)
        shapes["embed.patch.b"] = (d,)
    else:
        shapes["embed.token.w"] = (spec.vocab, d)
    shapes["embed.pos"] = (spec.max_tokens, d)
    for i in range(spec.n_layers):
        shapes.update(_block_names(i, spec))
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    out = spec.n_classes if spec.task == "classifier" else spec.vocab
    shapes["head.w"] = (d, out)
    shapes["head.b"] = (out,)
    return shapes


def param_count(spec: ModelSpec) -> int:
    """Closed-form parameter count; kept in sync with _shapes by test."""
    d, dm, L = spec.d_model, spec.d_mlp, spec.n_layers
    block = (4 * d) + (3 * d * d + 3 * d) + (d * d + d) + (d * dm + dm) + (dm * d + d)
    out = spec.n_classes if spec.task == "classifier" else spec.vocab
    emb = (spec.patch_dim * d + d) if spec.task == "classifier" else spec.vocab * d
    return emb + spec.max_tokens * d + L * block + 2 * d + (d * out + out)


class Model:
    """A parameter set plus its spec and per-block trainable flags."""

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor], block_trainable: list[bool]):
        self.spec = spec
        self.params = params
        self.block_trainable = block_trainable

    # -- parameter bookkeeping ------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise SpecError(f"state shape mismatch for {k}: {arr.shape} vs {t.data.shape}")
            t.data = arr.copy()

    def copy(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return Model(self.spec, params, list(self.block_trainable))

    def astype(self, dtype) -> "Model":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return Model(self.spec, params, list(self.block_trainable))

    def trainable_names(self) -> list[str]:
        """Block tensors gated by the freeze flags; everything else trainable."""
        names = []
        for k in self.params:
            if k.startswith("blocks."):
                i = int(k.split(".")[1])
                if self.block_trainable[i]:
                    names.append(k)
            else:
                names.append(k)
        return names

    def no_decay_names(self) -> list[str]:
        """Layernorm gains/biases are exempt from decoupled weight decay."""
        return [k for k in self.params
                if k.endswith(("ln1.g", "ln1.b", "ln2.g", "ln2.b", "ln_f.g", "ln_f.b"))]

    # -- forward --------------------------------------------------------------

    def forward(self, batch, *, train: bool = False, drop_path: float = 0.0,
                drop_rng: RngStream | None = None, collect: bool = False) -> ForwardOut:
        spec = self.spec
        P = self.params
        if spec.task == "classifier":
            x_tok = patchify(np.asarray(batch), spec)
            if x_tok.shape[-1] != spec.patch_dim:
                raise ContractViolation("batch does not match the spec's image layout")
            h = tz.linear(Tensor(x_tok), P["embed.patch.w"], P["embed.patch.b"])
            T = x_tok.shape[1]
        else:
            ids = np.asarray(batch)
            if ids.ndim != 2 or ids.shape[1] > spec.max_tokens:
                raise ContractViolation("lm batch must be (B, T) with T <= max_tokens")
            h = tz.embed(P["embed.token.w"], ids)
            T = ids.shape[1]

        pos = Tensor(P["embed.pos"].data[:T][None, :, :], requires_grad=P["embed.pos"].requires_grad,
                     op="possl", parents=(P["embed.pos"],),
                     bwd=lambda g, T=T: (_pos_grad(g, P["embed.pos"].data.shape, T),))
        h = tz.add(h, pos)

        causal = spec.task == "lm" or spec.causal_patches
        mask = None
        if causal:
            m = np.triu(np.full((T, T), MASK_NEG, dtype=h.data.dtype), k=1)
            mask = Tensor(m[None, None, :, :])

        hidden, acts = [], []
        for i in range(spec.n_layers):
            if train and drop_path > 0.0:
                if drop_rng is None:
                    raise ContractViolation("drop_path > 0 requires an RngStream")
                if float(drop_rng.uniform(())) < drop_path:
                    hidden.append(h)
                    acts.append(None)
                    continue
            h, a = self._block(h, i, mask)
            if collect:
                hidden.append(h)
                acts.append(a)

        final = tz.layer_norm(h, P["ln_f.g"], P["ln_f.b"])
        pooled = tz.mean(final, axis=1)
        logits = tz.linear(pooled, P["head.w"], P["head.b"]) if spec.task == "classifier" \
            else tz.linear(final, P["head.w"], P["head.b"])
        return ForwardOut(logits, hidden, acts, final, pooled)

    def _block(self, h: Tensor, i: int, mask: Tensor | None):
        spec = self.spec
        P = self.params
        p = f"blocks.{i}."
        B, T, d = h.data.shape
        H = spec.n_heads
        dh = d // H

        x = tz.layer_norm(h, P[p + "ln1.g"], P[p + "ln1.b"])
        qkv = tz.linear(x, P[p + "attn.w_qkv"], P[p + "attn.b_qkv"])
        q, k, v = tz.split_last(qkv, 3)
        q = tz.transpose(tz.reshape(q, (B, T, H, dh)), (0, 2, 1, 3))
        k = tz.transpose(tz.reshape(k, (B, T, H, dh)), (0, 2, 1, 3))
        v = tz.transpose(tz.reshape(v, (B, T, H, dh)), (0, 2, 1, 3))
        scores = tz.scale(tz.matmul(q, tz.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = tz.add(scores, mask)
        att = tz.softmax(scores)
        ctx = tz.matmul(att, v)
        ctx = tz.reshape(tz.transpose(ctx, (0, 2, 1, 3)), (B, T, d))
        h = tz.add(h, tz.linear(ctx, P[p + "attn.w_out"], P[p + "attn.b_out"]))

        x = tz.layer_norm(h, P[p + "ln2.g"], P[p + "ln2.b"])
        a = tz.gelu(tz.linear(x, P[p + "mlp.w_in"], P[p + "mlp.b_in"]))
        h = tz.add(h, tz.linear(a, P[p + "mlp.w_out"], P[p + "mlp.b_out"]))
        return h, a


def _pos_grad(g: np.ndarray, full_shape: tuple, T: int) -> np.ndarray:
    out = np.zeros(full_shape, dtype=g.dtype)
    out[:T] = g.sum(axis=0)
    return out


def patchify(images: np.ndarray, spec: ModelSpec) -> np.ndarray:
    """(B, C, H, W) images -> (B, n_patches, patch_dim) row-major tokens."""
    b, c, hh, ww = images.shape
    ps = spec.patch_size
    if c != spec.channels or hh != spec.image_size or ww != spec.image_size:
        raise ContractViolation(
            f"image batch {images.shape[1:]} does not match spec "
            f"({spec.channels}, {spec.image_size}, {spec.image_size})")
    g = hh // ps
    x = images.reshape(b, c, g, ps, g, ps)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # (B, gy, gx, C, ps, ps)
    return np.ascontiguousarray(x.reshape(b, g * g, c * ps * ps))


def _init_params(spec: ModelSpec, rng: RngStream) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for name, shape in _shapes(spec).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape, dtype=np.float32)
        elif leaf.startswith("b"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            data = rng.normal(shape, INIT_STD, dtype=np.float32)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def build_classifier(spec: ModelSpec, init: RngStream) -> Model:
    spec.validate()
    if spec.task != "classifier":
        raise SpecError("build_classifier needs a classifier spec")
    return Model(spec, _init_params(spec, init), [True] * spec.n_layers)


def build_toy_lm(spec: ModelSpec, init: RngStream) -> Model:
    spec.validate()
    if spec.task != "lm":
        raise SpecError("build_toy_lm needs an lm spec")
    return Model(spec, _init_params(spec, init), [True] * spec.n_layers)


def transplant_blocks(src: Model, dst: Model) -> Model:
    """Copy all transformer-block tensors from src into a copy of dst.

    Patch embedding, positional embedding, final LN and head keep dst's
    fresh initialization; mismatched geometry raises naming the first
    offending tensors.
    """
    out = dst.copy()
    missing = []
    mismatched = []
    for name, t in out.params.items():
        if not name.startswith("blocks."):
            continue
        if name not in src.params:
            missing.append(name)
            continue
        s = src.params[name].data
        if s.shape != t.data.shape:
            mismatched.append(f"{name}: {s.shape} vs {t.data.shape}")
            continue
        t.data = s.copy()
    if missing or mismatched:
        raise TransplantError(
            "transplant failed; missing=" + ", ".join(missing[:4]) +
            (" mismatched=" + "; ".join(mismatched[:4]) if mismatched else ""))
    return out


def apply_freeze(model: Model, sel: FreezeSelector) -> Model:
    """Set the per-block trainable flags; non-block tensors stay trainable."""
    model.block_trainable = sel.trainable_blocks(model.spec.n_layers)
    return model
