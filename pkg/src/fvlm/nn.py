"""Parameter containers and the small set of layers the encoders need."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from fvlm import autodiff as ad
from fvlm.autodiff import Tensor

MASK_NEG = -1e9


class Module:
    """Named parameter tree, walked in attribute-definition order."""

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_parameters(f"{name}.{i}.")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def param(array, name: str | None = None) -> Tensor:
    return Tensor(np.array(array, dtype=np.float64), requires_grad=True, name=name)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = param(_xavier(rng, fan_in, fan_out))
        self.bias = param(np.zeros(fan_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class Attention(Module):
    """Single-head scaled dot-product attention with Q/K/V/output projections.

    No positional information is injected here; callers that want it add it
    to the inputs beforehand.
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self._scale = 1.0 / np.sqrt(dim)

    def __call__(self, queries: Tensor, keys: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        """``queries``: [..., tq, d]; ``keys``: [..., tk, d]; ``key_mask``: bool [..., tk], True = keep."""
        q = self.q(queries)
        k = self.k(keys)
        v = self.v(keys)
        logits = ad.matmul(q, k.swapaxes(-1, -2)) * self._scale
        if key_mask is not None:
            bias = np.where(key_mask, 0.0, MASK_NEG)[..., None, :]
            logits = logits + bias
        weights = ad.softmax(logits, axis=-1)
        return self.out(ad.matmul(weights, v))


def self_attention(tokens: Tensor, attn: Attention, key_mask: np.ndarray | None = None) -> Tensor:
    if tokens.shape[-2] < 1:
        raise ad.ContractError("self_attention needs at least one token")
    return attn(tokens, tokens, key_mask)


class Block(Module):
    """Pre-norm transformer block: attention then a GELU MLP, both residual."""

    def __init__(self, dim: int, rng: np.random.Generator, mlp_ratio: int = 2):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        h = self.norm1(x)
        x = x + self_attention(h, self.attn, key_mask)
        return x + self.fc2(ad.gelu(self.fc1(self.norm2(x))))


class Adam:
    """Adam with bias correction; learning rate is supplied per step.

    ``scales`` optionally multiplies the step size per parameter.
    """

    def __init__(self, params: list[Tensor], betas=(0.9, 0.999), eps: float = 1e-8, scales: list[float] | None = None):
        self.params = params
        self.scales = [1.0] * len(params) if scales is None else list(scales)
        if len(self.scales) != len(params):
            raise ValueError("one lr scale per parameter required")
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v, k in zip(self.params, self.m, self.v, self.scales):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if lr != 0.0:
                p.data -= k * lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def warmup_cosine(step: int, total: int, warmup: int, peak: float, floor: float) -> float:
    """Linear warmup to ``peak`` then cosine decay to ``floor``."""
    if warmup > 0 and step < warmup:
        return peak * (step + 1) / warmup
    span = max(total - warmup, 1)
    frac = min(max(step - warmup, 0) / span, 1.0)
    return floor + 0.5 * (peak - floor) * (1.0 + np.cos(np.pi * frac))
