"""Foreground-guided region pooling and its supervision loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import DegenerateRegionError, DimensionError, ValidationError
from .partition import RegionMasks
from .tensor import Parameter, Tensor

BCE_CLAMP = 1e-9
_UNDERFLOW = 1e-300


@dataclass
class ForegroundParams:
    weight: Parameter  # D x 1
    bias: Parameter  # 1

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, prefix: str = "foreground") -> ForegroundParams:
        w = rng.normal(0.0, 1.0 / np.sqrt(channels), (channels, 1))
        return cls(Parameter(f"{prefix}.weight", w), Parameter(f"{prefix}.bias", np.zeros(1)))

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


@dataclass
class RegionFeatures:
    values: Tensor  # (..., N, D)
    stage: str = "extracted"
    empty: np.ndarray | None = None  # (..., N) bool, regions with no pixels


def foreground_map(frame: Tensor, params: ForegroundParams) -> Tensor:
    """Per-pixel body probability, shape ``(..., H, W)``."""
    frame = tn.as_tensor(frame)
    if params.weight.shape != (frame.shape[-1], 1):
        raise DimensionError(f"foreground head {params.weight.shape} vs {frame.shape[-1]} channels")
    logits = tn.linear(frame, params.weight, params.bias)
    return tn.sigmoid(tn.reshape(logits, frame.shape[:-1]))


def extract_region_features(frame: Tensor, masks: RegionMasks | np.ndarray, fg: Tensor) -> RegionFeatures:
    """Pool each region with weights proportional to the foreground map.

    An empty region yields a zero vector and is flagged in ``empty``.
    """
    frame = tn.as_tensor(frame)
    fg = tn.as_tensor(fg)
    m = masks.masks if isinstance(masks, RegionMasks) else np.asarray(masks, dtype=np.float64)
    h, w, d = frame.shape[-3:]
    if m.shape[-2:] != (h, w) or fg.shape[-2:] != (h, w):
        raise DimensionError(f"masks {m.shape} / foreground {fg.shape} vs frame {frame.shape}")
    lead = frame.shape[:-3]
    n = m.shape[-3]
    weights = tn.mul(tn.reshape(fg, (*lead, 1, h, w)), m)  # (..., N, H, W)
    mass = weights.data.sum(axis=(-2, -1))
    empty = ~m.astype(bool).any(axis=(-2, -1))
    if np.any(~empty & (mass < _UNDERFLOW)):
        raise DegenerateRegionError("a non-empty region has vanishing foreground weight")
    denom = tn.sum_(weights, axis=(-2, -1), keepdims=True)
    denom = tn.add(denom, empty[..., None, None].astype(np.float64))
    normalized = tn.reshape(tn.div(weights, denom), (*lead, n, h * w))
    pooled = tn.matmul(normalized, tn.reshape(frame, (*lead, h * w, d)))
    return RegionFeatures(pooled, "extracted", np.broadcast_to(empty, pooled.shape[:-1]).copy())


def _check_binary(labels: np.ndarray) -> None:
    if not np.all((labels == 0) | (labels == 1)):
        raise ValidationError("foreground labels must be 0 or 1")


def foreground_loss(fg: Tensor, labels) -> Tensor:
    """Binary cross-entropy averaged over every frame and pixel."""
    fg = tn.as_tensor(fg)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != fg.shape:
        raise ValidationError(f"label shape {labels.shape} != map shape {fg.shape}")
    _check_binary(labels)
    p = tn.clip(fg, BCE_CLAMP, 1.0 - BCE_CLAMP)
    ll = tn.add(tn.mul(tn.log(p), labels), tn.mul(tn.log(tn.sub(1.0, p)), 1.0 - labels))
    return tn.mul(tn.sum_(ll), -1.0 / labels.size)
