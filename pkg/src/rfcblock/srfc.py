"""Spatial region feature completion.

Regions are softly assigned to K < N clusters using both their appearance
and their position on the grid; clusters are pooled from the region
features, transformed, and redistributed to the regions through the same
assignment, then added back to the input as a residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import DimensionError, ValidationError
from .partition import RegionGeometry
from .tensor import Parameter, Tensor


@dataclass
class SrfcParams:
    appearance: Parameter  # D x K
    position1: Parameter  # 4 x D
    position2: Parameter  # D x K
    encoder_weight: Parameter  # D x D
    encoder_bias: Parameter  # D
    decoder_weight: Parameter  # D x D
    decoder_bias: Parameter  # D

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, clusters: int = 3,
             prefix: str = "srfc") -> SrfcParams:
        d, k = channels, clusters
        s = 1.0 / np.sqrt(d)
        return cls(
            appearance=Parameter(f"{prefix}.appearance", rng.normal(0.0, s, (d, k))),
            # raw pixel coordinates feed this map, so keep it small
            position1=Parameter(f"{prefix}.position1", rng.normal(0.0, 0.1, (4, d))),
            position2=Parameter(f"{prefix}.position2", rng.normal(0.0, s, (d, k))),
            encoder_weight=Parameter(f"{prefix}.encoder.weight", rng.normal(0.0, s, (d, d))),
            encoder_bias=Parameter(f"{prefix}.encoder.bias", np.zeros(d)),
            decoder_weight=Parameter(f"{prefix}.decoder.weight", rng.normal(0.0, s, (d, d))),
            decoder_bias=Parameter(f"{prefix}.decoder.bias", np.zeros(d)),
        )

    def parameters(self) -> list[Parameter]:
        return [self.appearance, self.position1, self.position2, self.encoder_weight,
                self.encoder_bias, self.decoder_weight, self.decoder_bias]

    @property
    def clusters(self) -> int:
        return self.appearance.shape[1]


@dataclass
class PositionEncoding:
    values: np.ndarray  # (..., N, 4): y, x, h, w in pixels
    height: int
    width: int


@dataclass
class AssignmentBundle:
    appearance: Tensor  # S_A, (..., N, K)
    position: Tensor  # S_P
    combined: Tensor  # S
    encoding: Tensor  # A, column-normalized S
    decoding: Tensor  # B = S^T, (..., K, N)
    clusters: Tensor  # transformed cluster features, (..., K, D)


def appearance_assignment(f: Tensor, weight: Tensor) -> Tensor:
    f = tn.as_tensor(f)
    if f.shape[-1] != weight.shape[0]:
        raise DimensionError(f"region features {f.shape} vs appearance head {weight.shape}")
    return tn.softmax_rows(tn.matmul(f, weight))


def position_encoding(geom: RegionGeometry) -> PositionEncoding:
    return PositionEncoding(np.array(geom.boxes, dtype=np.float64), geom.height, geom.width)


def position_assignment(L: PositionEncoding, w1: Tensor, w2: Tensor) -> Tensor:
    values = L.values if isinstance(L, PositionEncoding) else np.asarray(L, dtype=np.float64)
    if w1.shape[0] != 4 or w1.shape[1] != w2.shape[0]:
        raise DimensionError(f"position MLP shapes {w1.shape} -> {w2.shape}")
    hidden = tn.relu(tn.matmul(tn.Tensor(values), w1))
    return tn.softmax_rows(tn.matmul(hidden, w2))


def position_similarity(L: PositionEncoding) -> np.ndarray:
    """1 - 2 * normalized center distance, without clamping."""
    if L.height <= 0 or L.width <= 0:
        raise ValidationError("grid extents must be positive")
    y = L.values[..., 0] / L.height
    x = L.values[..., 1] / L.width
    dy = y[..., :, None] - y[..., None, :]
    dx = x[..., :, None] - x[..., None, :]
    return 1.0 - 2.0 * np.sqrt(dy * dy + dx * dx)


def combine_assignment(s_a: Tensor, s_p: Tensor) -> Tensor:
    if s_a.shape != s_p.shape:
        raise DimensionError(f"assignment shapes {s_a.shape} and {s_p.shape} differ")
    return tn.mul(tn.add(s_a, s_p), 0.5)


def raw_clusters(f: Tensor, s: Tensor) -> tuple[Tensor, Tensor]:
    """(A, A^T f): column-normalized assignment and pooled clusters."""
    a = tn.l1_normalize_columns(s)
    return a, tn.matmul(tn.swapaxes(a, -1, -2), f)


def encode_regions(f: Tensor, s: Tensor, params: SrfcParams) -> Tensor:
    _, c = raw_clusters(tn.as_tensor(f), s)
    return tn.linear(c, params.encoder_weight, params.encoder_bias)


def raw_decode(clusters: Tensor, s: Tensor) -> Tensor:
    if clusters.shape[-2] != s.shape[-1]:
        raise DimensionError(f"{clusters.shape[-2]} clusters vs assignment {s.shape}")
    return tn.matmul(s, clusters)


def decode_regions(clusters: Tensor, s: Tensor, params: SrfcParams) -> Tensor:
    return tn.linear(raw_decode(clusters, s), params.decoder_weight, params.decoder_bias)


def srfc_forward(f, geom: RegionGeometry, params: SrfcParams) -> tuple[Tensor, AssignmentBundle]:
    """Complete region features; returns ``o = f + z`` and the assignment bundle."""
    f = tn.as_tensor(f.values if hasattr(f, "values") else f)
    if params.clusters >= f.shape[-2]:
        raise ValidationError(f"need fewer clusters than regions, got K={params.clusters}, N={f.shape[-2]}")
    s_a = appearance_assignment(f, params.appearance)
    s_p = position_assignment(position_encoding(geom), params.position1, params.position2)
    s = combine_assignment(s_a, s_p)
    a, c = raw_clusters(f, s)
    clusters = tn.linear(c, params.encoder_weight, params.encoder_bias)
    z = decode_regions(clusters, s, params)
    bundle = AssignmentBundle(s_a, s_p, s, a, tn.swapaxes(s, -1, -2), clusters)
    return tn.add(f, z), bundle


def _pairwise_gap(rows: Tensor, target) -> Tensor:
    """sum_{i,j} |cos(rows_i, rows_j) - target_ij|, averaged over leading axes."""
    gap = tn.abs_(tn.sub(tn.cosine_matrix(rows), target))
    per_item = tn.sum_(gap, axis=(-2, -1))
    return tn.mean(per_item)


def appearance_regularizer(s_a: Tensor, f) -> Tensor:
    f = tn.as_tensor(f.values if hasattr(f, "values") else f)
    if s_a.shape[-2] < 2:
        raise ValidationError("regularizer needs at least two regions")
    return _pairwise_gap(s_a, tn.cosine_matrix(f))


def position_regularizer(s_p: Tensor, ps) -> Tensor:
    if s_p.shape[-2] < 2:
        raise ValidationError("regularizer needs at least two regions")
    return _pairwise_gap(s_p, np.asarray(ps, dtype=np.float64))
