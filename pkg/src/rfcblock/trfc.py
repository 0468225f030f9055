"""Temporal region feature completion.

Each region of each frame queries the same region in every other frame by
unscaled dot-product attention; a sigmoid gate with non-negative weights
then mixes the query with its temporal context.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import DimensionError, UnsupportedSequenceError
from .tensor import Parameter, Tensor


@dataclass
class TrfcParams:
    weight_raw: Parameter  # D x D, applied as o @ relu(weight_raw)
    bias: Parameter  # D

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, prefix: str = "trfc",
             low: float = 0.0) -> TrfcParams:
        w = rng.uniform(low, 0.1, (channels, channels))
        return cls(Parameter(f"{prefix}.weight", w), Parameter(f"{prefix}.bias", np.zeros(channels)))

    def parameters(self) -> list[Parameter]:
        return [self.weight_raw, self.bias]


@dataclass
class AttentionTrace:
    alpha: np.ndarray  # (..., T, N, T-1), memory frames in increasing order, query frame removed
    gates: np.ndarray  # (..., T, N, D)
    contexts: np.ndarray  # (..., T, N, D)


def _attention(o: Tensor) -> tuple[Tensor, Tensor]:
    """Full (..., N, T, T) attention with the query frame masked out, and contexts (..., T, N, D)."""
    t = o.shape[-3]
    if t < 2:
        raise UnsupportedSequenceError("temporal completion needs at least two frames")
    by_region = tn.swapaxes(o, -3, -2)  # (..., N, T, D)
    scores = tn.matmul(by_region, tn.swapaxes(by_region, -1, -2))
    weights = tn.softmax_rows(scores, mask=~np.eye(t, dtype=bool))
    contexts = tn.swapaxes(tn.matmul(weights, by_region), -3, -2)
    return weights, contexts


def _compress(weights: np.ndarray) -> np.ndarray:
    """(..., N, T, T) with zero diagonal -> (..., T, N, T-1)."""
    t = weights.shape[-1]
    keep = ~np.eye(t, dtype=bool)
    w = np.swapaxes(weights, -3, -2)  # (..., T, N, T)
    rows = [w[..., q, :, :][..., keep[q]] for q in range(t)]
    return np.stack(rows, axis=-3)


def temporal_context(o, t: int, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Attention weights over frames k != t and the context vector for one (frame, region)."""
    o = tn.as_tensor(o)
    with tn.no_grad():
        weights, contexts = _attention(o)
    alpha = np.delete(weights.data[..., i, t, :], t, axis=-1)
    return alpha, contexts.data[..., t, i, :]


def gate_fuse(query, context, params: TrfcParams) -> tuple[Tensor, Tensor]:
    """Return (e, g) with g = sigmoid(query @ relu(W) + b) and e = g*query + (1-g)*context."""
    query, context = tn.as_tensor(query), tn.as_tensor(context)
    d = query.shape[-1]
    if context.shape != query.shape or params.weight_raw.shape != (d, d):
        raise DimensionError(f"gate shapes: query {query.shape}, context {context.shape}, "
                             f"weight {params.weight_raw.shape}")
    lead = query.shape[:-1]
    flat = tn.reshape(query, (-1, d))
    logits = tn.add(tn.matmul(flat, tn.relu(params.weight_raw)), params.bias)
    g = tn.reshape(tn.sigmoid(logits), (*lead, d))
    e = tn.add(tn.mul(g, query), tn.mul(tn.sub(1.0, g), context))
    return e, g


def trfc_forward(o, params: TrfcParams) -> tuple[Tensor, AttentionTrace]:
    """Complete ``o`` of shape ``(..., T, N, D)`` along time."""
    o = tn.as_tensor(o.values if hasattr(o, "values") else o)
    weights, contexts = _attention(o)
    e, g = gate_fuse(o, contexts, params)
    trace = AttentionTrace(_compress(weights.data), g.data, contexts.data)
    return e, trace
