"""Transformer building blocks over flat ``name -> Value`` parameter dicts."""
from __future__ import annotations

import numpy as np

from . import tensor_engine as te
from .tensor_engine import Value

Params = dict[str, Value]

NEG_INF = -1e9


def init_linear(rng: np.random.Generator, params: Params, name: str,
                fan_in: int, fan_out: int, bias: bool = True, std: float = 0.02):
    params[f"{name}.w"] = te.parameter(rng.normal(0.0, std, size=(fan_in, fan_out)))
    if bias:
        params[f"{name}.b"] = te.parameter(np.zeros(fan_out))


def init_norm(params: Params, name: str, dim: int):
    params[f"{name}.g"] = te.parameter(np.ones(dim))
    params[f"{name}.b"] = te.parameter(np.zeros(dim))


def linear(x: Value, params: Params, name: str) -> Value:
    out = te.matmul(x, params[f"{name}.w"])
    b = params.get(f"{name}.b")
    return out if b is None else te.add(out, b)


def norm(x: Value, params: Params, name: str) -> Value:
    return te.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def init_attention(rng, params: Params, name: str, dim: int):
    for part in ("q", "k", "v", "o"):
        init_linear(rng, params, f"{name}.{part}", dim, dim)


def _split_heads(x: Value, heads: int) -> Value:
    b, t, d = x.shape
    return te.transpose(te.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def attention(xq: Value, xkv: Value, params: Params, name: str, heads: int,
              key_mask: np.ndarray | None = None) -> Value:
    """Multi-head attention; ``key_mask`` is (batch, keys) with True = attend."""
    b, t, d = xq.shape
    q = _split_heads(linear(xq, params, f"{name}.q"), heads)
    k = _split_heads(linear(xkv, params, f"{name}.k"), heads)
    v = _split_heads(linear(xkv, params, f"{name}.v"), heads)
    scores = te.scale(te.matmul(q, te.swapaxes(k, -1, -2)), 1.0 / np.sqrt(d // heads))
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, NEG_INF)[:, None, None, :]
        scores = te.add_const(scores, bias)
    ctx = te.matmul(te.softmax(scores), v)
    ctx = te.reshape(te.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    return linear(ctx, params, f"{name}.o")


def init_mlp(rng, params: Params, name: str, dim: int, hidden: int):
    init_linear(rng, params, f"{name}.fc1", dim, hidden)
    init_linear(rng, params, f"{name}.fc2", hidden, dim)


def mlp(x: Value, params: Params, name: str) -> Value:
    return linear(te.gelu(linear(x, params, f"{name}.fc1")), params, f"{name}.fc2")


def init_block(rng, params: Params, name: str, dim: int, cross: bool = False):
    init_norm(params, f"{name}.ln1", dim)
    init_attention(rng, params, f"{name}.attn", dim)
    if cross:
        init_norm(params, f"{name}.ln_x", dim)
        init_attention(rng, params, f"{name}.xattn", dim)
    init_norm(params, f"{name}.ln2", dim)
    init_mlp(rng, params, f"{name}.mlp", dim, 4 * dim)


def block(x: Value, params: Params, name: str, heads: int,
          key_mask: np.ndarray | None = None,
          context: Value | None = None, context_mask: np.ndarray | None = None) -> Value:
    """Pre-norm block: self-attention, optional cross-attention, GELU MLP."""
    h = norm(x, params, f"{name}.ln1")
    x = te.add(x, attention(h, h, params, f"{name}.attn", heads, key_mask))
    if context is not None:
        h = norm(x, params, f"{name}.ln_x")
        x = te.add(x, attention(h, context, params, f"{name}.xattn", heads, context_mask))
    h = norm(x, params, f"{name}.ln2")
    return te.add(x, mlp(h, params, f"{name}.mlp"))
