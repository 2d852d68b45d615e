"""Bidirectional transformer over feature tokens.

Pre-normalization blocks (norm -> attention -> residual -> norm -> FFN ->
residual) with GELU feed-forward at 4x width.  There are no positional
encodings: feature identity comes entirely from the name embeddings, so the
encoder is permutation-equivariant over tokens.  Row representations are mean
pooled over all tokens; a zero-layer stack is exactly the identity.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, ProtocolError

FFN_MULTIPLIER = 4
INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int
    n_heads: int
    head_width: int  # key/value width per head
    width: int  # token width h

    def __post_init__(self):
        if self.n_layers < 0 or self.n_heads < 1 or self.head_width < 1 or self.width < 1:
            raise ProtocolError(f"invalid encoder dimensions: {self}")

    @property
    def inner(self) -> int:
        return self.n_heads * self.head_width

    @property
    def ffn_width(self) -> int:
        return FFN_MULTIPLIER * self.width


# Size ladder: layer/head/width ratios mirror a production family scaled to
# desk size.  Head width times head count equals the token width throughout.
PRESETS: dict[str, EncoderConfig] = {
    "base": EncoderConfig(2, 4, 8, 32),
    "s": EncoderConfig(2, 6, 8, 48),
    "m": EncoderConfig(3, 6, 8, 48),
    "l": EncoderConfig(3, 8, 8, 64),
    "xl": EncoderConfig(4, 8, 8, 64),
}


def preset(name: str) -> EncoderConfig:
    if name not in PRESETS:
        raise ProtocolError(f"unknown size preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]


def _trunc_normal(rng: np.random.Generator, shape) -> np.ndarray:
    return np.clip(rng.standard_normal(shape) * INIT_STD, -2.0 * INIT_STD, 2.0 * INIT_STD)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> "OrderedDict[str, ad.Tensor]":
    """Truncated-normal(0.02) projections, unit/zero LayerNorm params."""
    params: "OrderedDict[str, ad.Tensor]" = OrderedDict()
    h, inner, ffn = cfg.width, cfg.inner, cfg.ffn_width
    for layer in range(cfg.n_layers):
        p = f"enc.{layer:02d}"
        params[f"{p}.ln1.gamma"] = ad.Tensor(np.ones(h), requires_grad=True)
        params[f"{p}.ln1.beta"] = ad.Tensor(np.zeros(h), requires_grad=True)
        for proj in ("wq", "wk", "wv"):
            params[f"{p}.attn.{proj}"] = ad.Tensor(_trunc_normal(rng, (h, inner)), requires_grad=True)
            params[f"{p}.attn.b{proj[1]}"] = ad.Tensor(np.zeros(inner), requires_grad=True)
        params[f"{p}.attn.wo"] = ad.Tensor(_trunc_normal(rng, (inner, h)), requires_grad=True)
        params[f"{p}.attn.bo"] = ad.Tensor(np.zeros(h), requires_grad=True)
        params[f"{p}.ln2.gamma"] = ad.Tensor(np.ones(h), requires_grad=True)
        params[f"{p}.ln2.beta"] = ad.Tensor(np.zeros(h), requires_grad=True)
        params[f"{p}.ffn.w1"] = ad.Tensor(_trunc_normal(rng, (h, ffn)), requires_grad=True)
        params[f"{p}.ffn.b1"] = ad.Tensor(np.zeros(ffn), requires_grad=True)
        params[f"{p}.ffn.w2"] = ad.Tensor(_trunc_normal(rng, (ffn, h)), requires_grad=True)
        params[f"{p}.ffn.b2"] = ad.Tensor(np.zeros(h), requires_grad=True)
    return params


def encoder_forward(params, cfg: EncoderConfig, tokens: ad.Tensor) -> ad.Tensor:
    """(B, d, h) -> (B, d, h) contextualized tokens; full bidirectional attention."""
    if tokens.ndim != 3 or tokens.shape[2] != cfg.width:
        raise DimensionError(f"expected (B, d, {cfg.width}) tokens, got {tokens.shape}")
    B, d, h = tokens.shape
    scale = 1.0 / math.sqrt(cfg.head_width)
    x = tokens
    for layer in range(cfg.n_layers):
        p = f"enc.{layer:02d}"
        pre = ad.layer_norm(x, params[f"{p}.ln1.gamma"], params[f"{p}.ln1.beta"])

        def heads(name: str) -> ad.Tensor:
            y = ad.matmul(pre, params[f"{p}.attn.w{name}"]) + params[f"{p}.attn.b{name}"]
            y = ad.reshape(y, (B, d, cfg.n_heads, cfg.head_width))
            return ad.transpose(y, (0, 2, 1, 3))  # (B, heads, d, head_width)

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * scale
        attn = ad.softmax(scores)
        ctx = ad.matmul(attn, v)  # (B, heads, d, head_width)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, d, cfg.inner))
        x = x + (ad.matmul(ctx, params[f"{p}.attn.wo"]) + params[f"{p}.attn.bo"])

        pre2 = ad.layer_norm(x, params[f"{p}.ln2.gamma"], params[f"{p}.ln2.beta"])
        hidden = ad.gelu(ad.matmul(pre2, params[f"{p}.ffn.w1"]) + params[f"{p}.ffn.b1"])
        x = x + (ad.matmul(hidden, params[f"{p}.ffn.w2"]) + params[f"{p}.ffn.b2"])
    return x


def pool(tokens: ad.Tensor) -> ad.Tensor:
    """Mean over the token axis: (B, d, h) -> (B, h)."""
    if tokens.ndim != 3:
        raise DimensionError(f"pool expects (B, d, h), got {tokens.shape}")
    return ad.mean(tokens, axis=1)


def init_task_head(width: int, n_out: int, rng: np.random.Generator) -> "OrderedDict[str, ad.Tensor]":
    params: "OrderedDict[str, ad.Tensor]" = OrderedDict()
    params["head.task.weight"] = ad.Tensor(_trunc_normal(rng, (width, n_out)), requires_grad=True)
    params["head.task.bias"] = ad.Tensor(np.zeros(n_out), requires_grad=True)
    return params


def task_logits(pooled: ad.Tensor, params) -> ad.Tensor:
    """(B, h) -> (B,) for single-output heads, else (B, n_out)."""
    out = ad.matmul(pooled, params["head.task.weight"]) + params["head.task.bias"]
    n_out = params["head.task.bias"].shape[0]
    if n_out == 1:
        return ad.reshape(out, (pooled.shape[0],))
    return out


def param_count(cfg: EncoderConfig, n_out: int = 1) -> int:
    """Exact trainable scalar count of the encoder stack plus task head.

    Embedding-side tables (name/value/mask vectors, token LayerNorm) are
    excluded; this is the size the learning-rate scaling rule keys on.
    """
    h, inner, ffn = cfg.width, cfg.inner, cfg.ffn_width
    per_layer = (
        2 * h  # ln1
        + 3 * (h * inner + inner)  # q, k, v projections
        + inner * h + h  # output projection
        + 2 * h  # ln2
        + h * ffn + ffn  # ffn in
        + ffn * h + h  # ffn out
    )
    return cfg.n_layers * per_layer + (h * n_out + n_out)
