"""Mixture-of-experts reconstruction head.

One always-on shared expert plus ``n_experts`` routed experts, all affine
h -> h maps feeding the same type-aware decoders as the plain head.  Routing
scores are softmaxed dot products against learnable centroids; only the
``n_active`` largest gates survive, without renormalization, so the routed
mixture's total weight is below 1 unless every expert is active.  There is no
load-balancing term; utilization is observed, not enforced.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ProtocolError

INIT_STD = 0.02


@dataclass(frozen=True)
class MoEConfig:
    n_experts: int = 4  # routed experts
    n_active: int = 2  # gates kept per token
    alpha: float = 0.5  # shared-term loss weight
    beta: float = 0.5  # routed-term loss weight

    def __post_init__(self):
        if not 1 <= self.n_active <= self.n_experts:
            raise ProtocolError(
                f"need 1 <= n_active <= n_experts, got {self.n_active}/{self.n_experts}"
            )
        if self.alpha < 0 or self.beta < 0:
            raise ProtocolError("loss weights must be >= 0")

    def to_json(self) -> dict:
        return {
            "n_experts": self.n_experts,
            "n_active": self.n_active,
            "alpha": self.alpha,
            "beta": self.beta,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MoEConfig":
        return cls(int(doc["n_experts"]), int(doc["n_active"]), float(doc["alpha"]), float(doc["beta"]))


def init_moe_params(width: int, cfg: MoEConfig, rng: np.random.Generator) -> "OrderedDict[str, ad.Tensor]":
    """Unit-norm random centroids; truncated-normal expert weights."""
    params: "OrderedDict[str, ad.Tensor]" = OrderedDict()
    c = rng.standard_normal((cfg.n_experts, width))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    params["moe.centroids"] = ad.Tensor(c, requires_grad=True)

    def affine(prefix: str):
        w = np.clip(rng.standard_normal((width, width)) * INIT_STD, -2 * INIT_STD, 2 * INIT_STD)
        params[f"{prefix}.weight"] = ad.Tensor(w, requires_grad=True)
        params[f"{prefix}.bias"] = ad.Tensor(np.zeros(width), requires_grad=True)

    affine("moe.shared")
    for i in range(cfg.n_experts):
        affine(f"moe.expert.{i:02d}")
    return params


def top_k_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """0/1 selector of the k largest entries along the last axis.

    Boundary ties go to the lower expert index (stable descending sort).
    """
    order = np.argsort(-scores, axis=-1, kind="stable")
    mask = np.zeros(scores.shape, dtype=np.float64)
    np.put_along_axis(mask, order[..., :k], 1.0, axis=-1)
    return mask


def route(z: np.ndarray, centroids: np.ndarray, n_active: int) -> np.ndarray:
    """Gate vector for one token: softmaxed centroid scores, top-k kept as-is."""
    if n_active < 1 or n_active > centroids.shape[0]:
        raise ProtocolError(f"n_active {n_active} outside [1, {centroids.shape[0]}]")
    scores = centroids @ np.asarray(z, dtype=np.float64)
    e = np.exp(scores - scores.max())
    s = e / e.sum()
    return s * top_k_mask(s, n_active)


def gate_tensor(tokens: ad.Tensor, centroids: ad.Tensor, n_active: int) -> ad.Tensor:
    """Differentiable gates for a (B, d, h) token block: (B, d, n_experts).

    The top-k selector is a constant computed from the current scores, so
    unselected experts receive exactly zero gradient.
    """
    scores = ad.matmul(tokens, ad.transpose(centroids, (1, 0)))
    s = ad.softmax(scores)
    return s * ad.Tensor(top_k_mask(s.data, n_active))


def expert_outputs(tokens: ad.Tensor, params, cfg: MoEConfig) -> tuple[ad.Tensor, ad.Tensor]:
    """(shared, routed) decode inputs, both shaped like ``tokens``."""
    shared = ad.matmul(tokens, params["moe.shared.weight"]) + params["moe.shared.bias"]
    gates = gate_tensor(tokens, params["moe.centroids"], cfg.n_active)
    routed = None
    B, d, _ = tokens.shape
    for i in range(cfg.n_experts):
        out_i = ad.matmul(tokens, params[f"moe.expert.{i:02d}.weight"]) + params[f"moe.expert.{i:02d}.bias"]
        g_i = ad.reshape(ad.index_select(gates, 2, [i]), (B, d, 1))
        term = g_i * out_i
        routed = term if routed is None else routed + term
    return shared, routed
