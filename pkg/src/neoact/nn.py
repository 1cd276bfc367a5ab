"""Layer building blocks on top of :mod:`neoact.tensor`.

Parameters live in flat ``dict[str, Tensor]`` maps; linear weights are
stored ``(out_features, in_features)`` and applied as ``x @ W.T``.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import truncnorm

from . import tensor as ops
from .tensor import DimensionError, NumericError, Tensor, parameter

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng).astype(np.float64)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = x @ ops.transpose(w)
    return y if b is None else y + b


def init_linear(rng, prefix: str, d_out: int, d_in: int, bias: bool = True) -> dict[str, Tensor]:
    p = {f"{prefix}.w": parameter(trunc_normal(rng, (d_out, d_in)), name=f"{prefix}.w")}
    if bias:
        p[f"{prefix}.b"] = parameter(np.zeros(d_out), name=f"{prefix}.b")
    return p


def init_layer_norm(prefix: str, d: int) -> dict[str, Tensor]:
    return {
        f"{prefix}.g": parameter(np.ones(d), name=f"{prefix}.g"),
        f"{prefix}.b": parameter(np.zeros(d), name=f"{prefix}.b"),
    }


def init_attention(rng, prefix: str, d: int) -> dict[str, Tensor]:
    p = init_layer_norm(f"{prefix}.ln", d)
    for proj in ("q", "k", "v", "o"):
        p.update(init_linear(rng, f"{prefix}.{proj}", d, d))
    return p


def init_ffn(rng, prefix: str, d: int, ratio: int = 4) -> dict[str, Tensor]:
    p = init_layer_norm(f"{prefix}.ln", d)
    p.update(init_linear(rng, f"{prefix}.fc1", ratio * d, d))
    p.update(init_linear(rng, f"{prefix}.fc2", d, ratio * d))
    return p


def sub_params(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    """Strip ``prefix.`` from matching keys."""
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _project(x: Tensor, params: dict, name: str, adapters: dict | None) -> Tensor:
    w, b = params[f"{name}.w"], params[f"{name}.b"]
    if adapters and name in adapters:
        return adapters[name](x, w) + b
    return linear(x, w, b)


def attention_core(x: Tensor, params: dict, n_heads: int, mask: np.ndarray | None = None,
                   adapters: dict | None = None) -> Tensor:
    """Multi-head attention over the second-to-last axis, without norm or residual."""
    *lead, n, d = x.shape
    dh = d // n_heads

    def heads(t: Tensor) -> Tensor:
        t = t.reshape(*lead, n, n_heads, dh)
        nl = len(lead)
        return ops.transpose(t, tuple(range(nl)) + (nl + 1, nl, nl + 2))

    q = heads(_project(x, params, "q", adapters))
    k = heads(_project(x, params, "k", adapters))
    v = heads(_project(x, params, "v", adapters))
    scores = (q @ ops.swap_last(k)) * (1.0 / np.sqrt(dh))
    attn = ops.softmax(scores, axis=-1, mask=mask)
    ctx = attn @ v
    nl = len(lead)
    ctx = ops.transpose(ctx, tuple(range(nl)) + (nl + 1, nl, nl + 2)).reshape(*lead, n, d)
    return _project(ctx, params, "o", adapters)


def mhsa(tokens: Tensor, params: dict, n_heads: int, mask: np.ndarray | None = None,
         adapters: dict | None = None) -> Tensor:
    """Pre-norm multi-head self-attention with residual: ``x + Attn(LN(x))``.

    ``tokens`` has shape ``(..., n_tokens, d)``; leading axes are independent
    sequences.  ``mask`` (broadcastable to ``(n, n)``) is True where a query
    may attend to a key.
    """
    if tokens.ndim < 2:
        raise DimensionError("mhsa expects (..., n_tokens, d)")
    d = tokens.shape[-1]
    if n_heads <= 0 or d % n_heads:
        raise DimensionError(f"d={d} not divisible by n_heads={n_heads}")
    if params["q.w"].shape != (d, d):
        raise DimensionError(f"attention weights {params['q.w'].shape} do not match d={d}")
    if not np.all(np.isfinite(tokens.data)):
        raise NumericError("non-finite tokens entering attention")
    h = ops.layer_norm(tokens, params["ln.g"], params["ln.b"])
    return tokens + attention_core(h, params, n_heads, mask, adapters)


def ffn(x: Tensor, params: dict) -> Tensor:
    """Pre-norm GELU feed-forward sublayer with residual."""
    h = ops.layer_norm(x, params["ln.g"], params["ln.b"])
    h = ops.gelu(linear(h, params["fc1.w"], params["fc1.b"]))
    return x + linear(h, params["fc2.w"], params["fc2.b"])


def count_params(params: dict[str, Tensor]) -> int:
    return int(sum(p.size for p in params.values()))
