"""The complete region feature completion block.

Partition -> foreground-weighted pooling -> spatial and/or temporal
completion -> projection of the completed region vectors back onto their
pixels, fused with the input through a batch-normalized residual branch.

Feature maps carry any leading batch axes in front of ``T x H x W x D``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import DimensionError, UnsupportedSequenceError, ValidationError
from .partition import (
    KeypointEstimate,
    LocatorParams,
    RegionGeometry,
    RegionMasks,
    locate_keypoints,
    parse_partition,
    region_masks,
)
from .region_features import ForegroundParams, extract_region_features, foreground_map
from .srfc import AssignmentBundle, SrfcParams, srfc_forward
from .tensor import Parameter, Tensor
from .trfc import AttentionTrace, TrfcParams, trfc_forward

ARRANGEMENTS = ("st", "ts", "s+t", "s", "t")
_ALIASES = {
    "s-t": "st", "t-s": "ts", "s-only": "s", "t-only": "t",
    "st": "st", "ts": "ts", "s+t": "s+t", "s": "s", "t": "t",
}


def normalize_arrangement(name: str) -> str:
    try:
        return _ALIASES[name.strip().lower()]
    except KeyError:
        raise ValidationError(f"unknown arrangement {name!r}; pick one of {ARRANGEMENTS}") from None


@dataclass(frozen=True)
class BlockConfig:
    arrangement: str = "st"
    regions: int = 6
    clusters: int = 3
    partition: str = "adaptive"
    stages: tuple[int, ...] = (2, 3)

    def __post_init__(self):
        object.__setattr__(self, "arrangement", normalize_arrangement(self.arrangement))
        object.__setattr__(self, "stages", tuple(sorted(set(int(s) for s in self.stages))))
        kind, parts = parse_partition(self.partition)
        if kind == "adaptive" and self.regions != parts:
            raise ValidationError(f"adaptive partition always yields {parts} regions, not {self.regions}")
        if kind == "fixed" and self.regions != parts:
            raise ValidationError(f"fixed:{parts} partition cannot give {self.regions} regions")
        if self.uses_spatial and not 1 <= self.clusters < self.regions:
            raise ValidationError(f"need 1 <= K < N, got K={self.clusters}, N={self.regions}")

    @property
    def adaptive(self) -> bool:
        return parse_partition(self.partition)[0] == "adaptive"

    @property
    def uses_spatial(self) -> bool:
        return self.arrangement != "t"

    @property
    def uses_temporal(self) -> bool:
        return self.arrangement != "s"


@dataclass
class ProjectionParams:
    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9

    @classmethod
    def init(cls, channels: int, prefix: str = "bn", gamma: float = 0.0) -> ProjectionParams:
        return cls(
            Parameter(f"{prefix}.gamma", np.full(channels, gamma)),
            Parameter(f"{prefix}.beta", np.zeros(channels)),
            np.zeros(channels),
            np.ones(channels),
        )

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]


def batch_norm(x: Tensor, params: ProjectionParams, training: bool) -> Tensor:
    """Per-channel normalization over every axis but the last."""
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = tn.mean(x, axis=axes, keepdims=True)
        centered = tn.sub(x, mu)
        var = tn.mean(tn.mul(centered, centered), axis=axes, keepdims=True)
        xhat = tn.div(centered, tn.sqrt(tn.add(var, params.eps)))
        m = params.momentum
        params.running_mean = m * params.running_mean + (1 - m) * mu.data.reshape(-1)
        params.running_var = m * params.running_var + (1 - m) * var.data.reshape(-1)
    else:
        scale = 1.0 / np.sqrt(params.running_var + params.eps)
        xhat = tn.mul(tn.sub(x, params.running_mean), scale)
    return tn.add(tn.mul(xhat, params.gamma), params.beta)


def scatter_regions(e: Tensor, masks: np.ndarray) -> Tensor:
    """Give every pixel the feature of its region: (..., N, D) -> (..., H, W, D)."""
    e = tn.as_tensor(e)
    n, h, w = masks.shape[-3:]
    if e.shape[-2] != n:
        raise DimensionError(f"{e.shape[-2]} region vectors vs {n} masks")
    flat = np.swapaxes(masks.reshape(*masks.shape[:-2], h * w), -1, -2)  # (..., HW, N)
    projected = tn.matmul(tn.Tensor(flat), e)
    return tn.reshape(projected, (*projected.shape[:-2], h, w, e.shape[-1]))


def reverse_projection(e, masks, frame, params: ProjectionParams, training: bool = True) -> Tensor:
    """E = BN(M^T e) + F over the whole batch of frames given."""
    frame = tn.as_tensor(frame)
    m = masks.masks if isinstance(masks, RegionMasks) else np.asarray(masks, dtype=np.float64)
    projected = scatter_regions(e, m)
    if projected.shape != frame.shape:
        raise DimensionError(f"projected {projected.shape} vs feature map {frame.shape}")
    return tn.add(batch_norm(projected, params, training), frame)


@dataclass
class RfcBlockParams:
    projection: ProjectionParams
    foreground: ForegroundParams
    locator: LocatorParams | None = None
    srfc: SrfcParams | None = None
    trfc: TrfcParams | None = None

    @classmethod
    def init(cls, rng: np.random.Generator, height: int, width: int, channels: int,
             config: BlockConfig, prefix: str = "block") -> RfcBlockParams:
        return cls(
            projection=ProjectionParams.init(channels, f"{prefix}.bn"),
            foreground=ForegroundParams.init(rng, channels, f"{prefix}.foreground"),
            locator=LocatorParams.init(rng, height, width, channels, prefix=f"{prefix}.locator")
            if config.adaptive else None,
            srfc=SrfcParams.init(rng, channels, config.clusters, f"{prefix}.srfc")
            if config.uses_spatial else None,
            trfc=TrfcParams.init(rng, channels, f"{prefix}.trfc") if config.uses_temporal else None,
        )

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        if self.locator is not None:
            params += self.locator.parameters()
        params += self.foreground.parameters()
        if self.srfc is not None:
            params += self.srfc.parameters()
        if self.trfc is not None:
            params += self.trfc.parameters()
        return params + self.projection.parameters()


@dataclass
class BlockDiagnostics:
    masks: RegionMasks
    geometry: RegionGeometry
    foreground: Tensor
    extracted: Tensor  # f
    completed: Tensor  # region vectors handed to the projection
    keypoints: KeypointEstimate | None = None
    srfc_input: Tensor | None = None
    srfc_output: Tensor | None = None  # o
    trfc_output: Tensor | None = None  # e
    bundle: AssignmentBundle | None = None
    trace: AttentionTrace | None = None
    extras: dict = field(default_factory=dict)


def rfc_block_forward(F, config: BlockConfig, params: RfcBlockParams,
                      training: bool = True) -> tuple[Tensor, BlockDiagnostics]:
    """Run one block on ``F`` of shape ``(..., T, H, W, D)``."""
    F = tn.as_tensor(F)
    if F.ndim < 4:
        raise DimensionError(f"feature map needs shape (..., T, H, W, D), got {F.shape}")
    t, h, w = F.shape[-4:-1]
    if config.uses_temporal and t < 2:
        raise UnsupportedSequenceError(
            f"arrangement {config.arrangement!r} needs T >= 2; use 's' for single frames")

    keypoints = None
    if config.adaptive:
        keypoints = locate_keypoints(F, params.locator)
        masks, geom = region_masks(keypoints.coords, h, w, "adaptive")
    else:
        masks, geom = region_masks(np.zeros((*F.shape[:-3], 4), dtype=np.int64), h, w, config.partition)

    fg = foreground_map(F, params.foreground)
    f = extract_region_features(F, masks, fg).values

    diag = BlockDiagnostics(masks=masks, geometry=geom, foreground=fg, extracted=f, completed=f,
                            keypoints=keypoints)
    arrangement = config.arrangement
    if arrangement in ("s", "st", "s+t"):
        o, bundle = srfc_forward(f, geom, params.srfc)
        diag.srfc_input, diag.srfc_output, diag.bundle = f, o, bundle
    if arrangement == "s":
        out = o
    elif arrangement == "st":
        out, diag.trace = trfc_forward(o, params.trfc)
        diag.trfc_output = out
    elif arrangement == "ts":
        e, diag.trace = trfc_forward(f, params.trfc)
        out, bundle = srfc_forward(e, geom, params.srfc)
        diag.trfc_output, diag.srfc_input, diag.srfc_output, diag.bundle = e, e, out, bundle
    elif arrangement == "s+t":
        e, diag.trace = trfc_forward(f, params.trfc)
        diag.trfc_output = e
        out = tn.mul(tn.add(o, e), 0.5)
    else:
        out, diag.trace = trfc_forward(f, params.trfc)
        diag.trfc_output = out
    diag.completed = out
    E = reverse_projection(out, masks, F, params.projection, training)
    return E, diag
