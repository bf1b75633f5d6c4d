"""Trainable layers, parameter management, and optimization.

Linear projections, the 4x feed-forward block, scaled-dot-product
attention plumbing (query / key / value projections without biases),
a decoupled-weight-decay Adam step, and the cosine learning-rate
schedule. All parameters are plain diffcore Tensors registered in a
ParameterSet so checkpointing and the optimizer see one flat namespace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc


@dataclass
class OptimizerConfig:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 1
    min_lr: float = 0.0

    def validate(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.min_lr > self.lr:
            raise ValueError("min_lr must not exceed lr")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        return self


class ParameterSet:
    """Ordered name -> Tensor registry with per-parameter Adam moments."""

    def __init__(self):
        self._params: dict[str, dc.Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.t = 0

    def add(self, name: str, param: dc.Tensor) -> dc.Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        param.requires_grad = True
        self._params[name] = param
        self._m[name] = np.zeros_like(param.data)
        self._v[name] = np.zeros_like(param.data)
        return param

    def merge(self, other: "ParameterSet", prefix: str = ""):
        for name, p in other.items():
            self.add(prefix + name, p)

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def __getitem__(self, name) -> dc.Tensor:
        return self._params[name]

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self):
        for p in self._params.values():
            p.grad = None

    def moment_state(self, name):
        return self._m[name], self._v[name]


def adamw_step(params: ParameterSet, cfg: OptimizerConfig, lr_t: float):
    """One decoupled-weight-decay Adam update at learning rate ``lr_t``.

    Applies weight decay first, then the bias-corrected moment update.
    Gradients are left untouched; the caller zeroes them.
    """
    if lr_t <= 0:
        raise ValueError("lr_t must be positive")
    for name, p in params.items():
        if p.grad is None:
            raise dc.GradientUsageError(f"parameter {name!r} has no gradient")
    params.t += 1
    t = params.t
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = p.grad
        m, v = params.moment_state(name)
        if cfg.weight_decay:
            p.data -= lr_t * cfg.weight_decay * p.data
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def cosine_lr(cfg: OptimizerConfig, step: int) -> float:
    """Half-cosine decay from lr to min_lr over [0, total_steps]."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    frac = step / cfg.total_steps
    return cfg.min_lr + (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * frac)) / 2.0


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

@dataclass
class LinearLayer:
    weight: dc.Tensor
    bias: dc.Tensor | None = None


def init_linear(rng: np.random.Generator, c_in: int, c_out: int,
                bias: bool = True) -> LinearLayer:
    """Uniform +-sqrt(6/(c_in+c_out)) weights, zero bias."""
    bound = math.sqrt(6.0 / (c_in + c_out))
    w = dc.Tensor(rng.uniform(-bound, bound, size=(c_in, c_out)))
    b = dc.Tensor(np.zeros(c_out)) if bias else None
    return LinearLayer(weight=w, bias=b)


def register_linear(params: ParameterSet, name: str, layer: LinearLayer):
    params.add(f"{name}.weight", layer.weight)
    if layer.bias is not None:
        params.add(f"{name}.bias", layer.bias)


def linear_forward(layer: LinearLayer, x: dc.Tensor) -> dc.Tensor:
    if x.shape[-1] != layer.weight.shape[0]:
        raise dc.ShapeMismatch("linear_forward", x.shape, layer.weight.shape)
    out = dc.matmul(x, layer.weight)
    if layer.bias is not None:
        out = dc.badd(out, layer.bias)
    return out


@dataclass
class FeedForwardBlock:
    """Two linear layers around a GELU; hidden width is exactly 4x."""

    lin1: LinearLayer
    lin2: LinearLayer


def init_ffn(rng: np.random.Generator, c: int) -> FeedForwardBlock:
    return FeedForwardBlock(
        lin1=init_linear(rng, c, 4 * c),
        lin2=init_linear(rng, 4 * c, c),
    )


def register_ffn(params: ParameterSet, name: str, block: FeedForwardBlock):
    register_linear(params, f"{name}.lin1", block.lin1)
    register_linear(params, f"{name}.lin2", block.lin2)


def ffn_forward(block: FeedForwardBlock, x: dc.Tensor) -> dc.Tensor:
    return linear_forward(block.lin2, dc.gelu(linear_forward(block.lin1, x)))


# ---------------------------------------------------------------------------
# Attention plumbing
# ---------------------------------------------------------------------------

@dataclass
class AttentionParams:
    """Projection matrices for one attention direction (no biases)."""

    wq: dc.Tensor
    wk: dc.Tensor
    wv: dc.Tensor
    heads: int = 1


def init_attention(rng: np.random.Generator, c: int, heads: int = 1) -> AttentionParams:
    if c % heads != 0:
        raise ValueError(f"head count {heads} must divide embedding dim {c}")

    def proj():
        bound = math.sqrt(6.0 / (c + c))
        return dc.Tensor(rng.uniform(-bound, bound, size=(c, c)))

    return AttentionParams(wq=proj(), wk=proj(), wv=proj(), heads=heads)


def register_attention(params: ParameterSet, name: str, attn: AttentionParams):
    params.add(f"{name}.wq", attn.wq)
    params.add(f"{name}.wk", attn.wk)
    params.add(f"{name}.wv", attn.wv)


def attention_forward(attn: AttentionParams, q_in: dc.Tensor,
                      kv_in: dc.Tensor) -> dc.Tensor:
    """softmax(QWq (KWk)^T / sqrt(d)) VWv over the last two axes.

    With one head the scale is sqrt(C); with H heads each slice of width
    C/H is attended independently and the outputs are re-concatenated.
    """
    c = attn.wq.shape[0]
    if q_in.shape[-1] != c or kv_in.shape[-1] != c:
        raise dc.ShapeMismatch("attention_forward", q_in.shape, attn.wq.shape)
    q = dc.matmul(q_in, attn.wq)
    k = dc.matmul(kv_in, attn.wk)
    v = dc.matmul(kv_in, attn.wv)
    head_dim = c // attn.heads
    outs = []
    for h in range(attn.heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh = dc.slice_last(q, lo, hi) if attn.heads > 1 else q
        kh = dc.slice_last(k, lo, hi) if attn.heads > 1 else k
        vh = dc.slice_last(v, lo, hi) if attn.heads > 1 else v
        scores = dc.scale(dc.matmul(qh, dc.transpose(kh)), 1.0 / math.sqrt(head_dim))
        outs.append(dc.matmul(dc.softmax_rows(scores), vh))
    return outs[0] if attn.heads == 1 else dc.concat_last(outs)
