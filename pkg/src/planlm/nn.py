"""Transformer building blocks shared by the planner and the language model.

Pre-layer-norm blocks, learned position embeddings, Gaussian(0, 0.02) init
for projections and embeddings, zeros for biases.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_STD = 0.02
MASK_BIAS = -1e9


def normal_param(rng: np.random.Generator, shape: tuple[int, ...],
                 std: float = INIT_STD) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32),
                  requires_grad=True)


def zeros_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def ones_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


class Linear:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.w = normal_param(rng, (d_in, d_out))
        self.b = zeros_param((d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ self.w) + self.b

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class LayerNorm:
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = ones_param((d,))
        self.bias = zeros_param((d,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, eps=self.eps)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


def causal_bias(n: int, dtype=np.float32) -> Tensor:
    """(n, n) additive bias masking attention to future positions."""
    bias = np.triu(np.full((n, n), MASK_BIAS, dtype=dtype), k=1)
    return Tensor(bias)


class SelfAttention:
    """Multi-head scaled dot-product self-attention.

    `extra_context`, when given, is added to the concatenated head outputs
    just before the output projection (the action-adapter insertion point).
    """

    def __init__(self, rng: np.random.Generator, d: int, n_heads: int,
                 causal: bool):
        if d % n_heads != 0:
            raise ValueError(f"model dim {d} not divisible by {n_heads} heads")
        self.d = d
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.causal = causal
        self.wq = Linear(rng, d, d)
        self.wk = Linear(rng, d, d)
        self.wv = Linear(rng, d, d)
        self.wo = Linear(rng, d, d)

    def __call__(self, x: Tensor, extra_context: Tensor | None = None) -> Tensor:
        b, t, d = x.shape
        h, dh = self.n_heads, self.d_head

        def heads(lin: Linear) -> Tensor:
            return lin(x).reshape(b, t, h, dh).swapaxes(1, 2)

        q, k, v = heads(self.wq), heads(self.wk), heads(self.wv)
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        if self.causal:
            scores = scores + causal_bias(t, dtype=x.dtype)
        ctx = scores.softmax() @ v
        ctx = ctx.swapaxes(1, 2).reshape(b, t, d)
        if extra_context is not None:
            ctx = ctx + extra_context
        return self.wo(ctx)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk),
                          ("wv", self.wv), ("wo", self.wo)):
            out.update(lin.params(f"{prefix}.{name}"))
        return out


class Block:
    """Pre-norm transformer block: attention then a GELU feed-forward."""

    def __init__(self, rng: np.random.Generator, d: int, n_heads: int,
                 causal: bool, d_ff: int | None = None):
        d_ff = 4 * d if d_ff is None else d_ff
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(rng, d, n_heads, causal)
        self.ln2 = LayerNorm(d)
        self.ff1 = Linear(rng, d, d_ff)
        self.ff2 = Linear(rng, d_ff, d)

    def __call__(self, x: Tensor, extra_context: Tensor | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), extra_context=extra_context)
        return x + self.ff2(ad.gelu(self.ff1(self.ln2(x))))

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.ln1.params(f"{prefix}.ln1"))
        out.update(self.attn.params(f"{prefix}.attn"))
        out.update(self.ln2.params(f"{prefix}.ln2"))
        out.update(self.ff1.params(f"{prefix}.ff1"))
        out.update(self.ff2.params(f"{prefix}.ff2"))
        return out


def set_trainable(params: dict[str, Tensor], trainable: bool) -> None:
    for p in params.values():
        p.requires_grad = trainable
        if not trainable:
            p.grad = None


def load_params(params: dict[str, Tensor], sections: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into an assembled parameter dict, by name."""
    missing = sorted(set(params) - set(sections))
    if missing:
        raise KeyError(f"checkpoint is missing sections: {missing}")
    for name, tensor in params.items():
        arr = sections[name]
        if arr.shape != tensor.shape:
            raise ad.ShapeError(
                f"section {name} shape {arr.shape} != expected {tensor.shape}")
        tensor.values = arr.astype(np.float32, copy=True)
