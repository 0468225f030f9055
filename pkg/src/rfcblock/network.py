"""Toy backbone with optional RFC blocks, identity head and the full objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .block import BlockConfig, BlockDiagnostics, RfcBlockParams, rfc_block_forward
from .errors import DimensionError, ValidationError
from .losses import LossReport, LossWeights, batch_hard_triplet, cross_entropy, total_loss
from .partition import keypoints_loss, one_hot
from .region_features import foreground_loss
from .srfc import appearance_regularizer, position_encoding, position_regularizer, position_similarity
from .tensor import Parameter, Tensor


@dataclass
class StageParams:
    weight: Parameter  # C_in x C_out
    bias: Parameter
    pool: bool = True

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


def mean_pool2(x: Tensor) -> Tensor:
    """2x2 spatial mean pooling on (..., H, W, C)."""
    h, w, c = x.shape[-3:]
    if h % 2 or w % 2:
        raise DimensionError(f"2x2 pooling needs even extents, got {h}x{w}")
    lead = x.shape[:-3]
    blocks = tn.reshape(x, (*lead, h // 2, 2, w // 2, 2, c))
    return tn.mean(blocks, axis=(-4, -2))


def stage_forward(x: Tensor, stage: StageParams) -> Tensor:
    if x.shape[-1] != stage.weight.shape[0]:
        raise DimensionError(f"stage expects {stage.weight.shape[0]} channels, got {x.shape[-1]}")
    y = tn.relu(tn.linear(x, stage.weight, stage.bias))
    return mean_pool2(y) if stage.pool else y


def toy_backbone_forward(images, stages: list[StageParams], config: BlockConfig,
                         blocks: dict[int, RfcBlockParams] | None = None, training: bool = True):
    """Run the stage stack on ``(..., T, H0, W0, C)`` images.

    Stages are numbered from 1; an RFC block runs right after every stage
    listed in ``config.stages`` that has parameters in ``blocks``.
    Returns (final feature map, sequence feature, {stage: diagnostics}).
    """
    x = tn.as_tensor(images)
    blocks = blocks or {}
    diagnostics: dict[int, BlockDiagnostics] = {}
    for index, stage in enumerate(stages, start=1):
        x = stage_forward(x, stage)
        if index in config.stages and index in blocks:
            x, diagnostics[index] = rfc_block_forward(x, config, blocks[index], training)
    frame_features = tn.mean(x, axis=(-3, -2))  # (..., T, D)
    sequence = tn.mean_over_axis(frame_features, -2)
    return x, sequence, diagnostics


@dataclass(frozen=True)
class ModelConfig:
    image_shape: tuple[int, int, int] = (32, 16, 3)
    channels: tuple[int, ...] = (16, 32, 32)
    num_identities: int = 10
    block: BlockConfig = field(default_factory=BlockConfig)

    def stage_grids(self) -> list[tuple[int, int, int]]:
        h, w, _ = self.image_shape
        grids = []
        for c in self.channels:
            h, w = h // 2, w // 2
            grids.append((h, w, c))
        return grids


class RFCNet:
    """Toy re-identification network: stages, RFC blocks, linear identity head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c_in = config.image_shape[2]
        self.stages: list[StageParams] = []
        for i, c_out in enumerate(config.channels, start=1):
            w = rng.normal(0.0, np.sqrt(2.0 / c_in), (c_in, c_out))
            self.stages.append(StageParams(Parameter(f"stage{i}.weight", w),
                                           Parameter(f"stage{i}.bias", np.zeros(c_out))))
            c_in = c_out
        grids = config.stage_grids()
        self.blocks: dict[int, RfcBlockParams] = {}
        for s in config.block.stages:
            if not 1 <= s <= len(self.stages):
                raise ValidationError(f"insertion stage {s} outside 1..{len(self.stages)}")
            h, w, d = grids[s - 1]
            if h < 2:
                raise ValidationError(f"stage {s} grid {h}x{w} is too small for a block")
            self.blocks[s] = RfcBlockParams.init(rng, h, w, d, config.block, prefix=f"block{s}")
        d = config.channels[-1]
        self.classifier_weight = Parameter("classifier.weight",
                                           rng.normal(0.0, 1.0 / np.sqrt(d), (d, config.num_identities)))
        self.classifier_bias = Parameter("classifier.bias", np.zeros(config.num_identities))

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for stage in self.stages:
            params += stage.parameters()
        for s in sorted(self.blocks):
            params += self.blocks[s].parameters()
        return params + [self.classifier_weight, self.classifier_bias]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for s in sorted(self.blocks):
            bn = self.blocks[s].projection
            out[f"block{s}.bn.running_mean"] = bn.running_mean
            out[f"block{s}.bn.running_var"] = bn.running_var
        return out

    def state(self) -> dict[str, np.ndarray]:
        state = {p.name: p.data.copy() for p in self.parameters()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise ValidationError(f"checkpoint lacks {p.name}")
            if state[p.name].shape != p.shape:
                raise DimensionError(f"{p.name}: checkpoint {state[p.name].shape} vs model {p.shape}")
            p.data = np.array(state[p.name], dtype=np.float64)
        for s in sorted(self.blocks):
            bn = self.blocks[s].projection
            bn.running_mean = np.array(state[f"block{s}.bn.running_mean"])
            bn.running_var = np.array(state[f"block{s}.bn.running_var"])

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, images, training: bool = True):
        """images (B, T, H0, W0, C) -> (sequence features (B, D), logits, diagnostics)."""
        images = tn.as_tensor(images)
        if images.shape[-3:] != tuple(self.config.image_shape):
            raise DimensionError(f"images {images.shape} vs configured {self.config.image_shape}")
        _, seq, diag = toy_backbone_forward(images, self.stages, self.config.block, self.blocks, training)
        logits = tn.linear(seq, self.classifier_weight, self.classifier_bias)
        return seq, logits, diag

    def embed(self, clip) -> np.ndarray:
        """Inference-mode sequence feature of one (T, H0, W0, C) clip."""
        block = self.config.block
        if block.uses_temporal and self.blocks and np.shape(clip)[0] < 2:
            raise ValidationError("temporal arrangements need clips of at least two frames")
        with tn.no_grad():
            seq, _, _ = self.forward(np.asarray(clip)[None], training=False)
        return seq.data[0]

    def loss(self, images, identities, keypoints, foreground, weights: LossWeights,
             training: bool = True) -> LossReport:
        """Full objective for a batch.

        ``keypoints``: (B, T, 4) label positions at image resolution.
        ``foreground``: (B, T, H0, W0) binary body masks.
        """
        seq, logits, diag = self.forward(images, training)
        parts = {
            "ce": cross_entropy(logits, identities),
            "triplet": batch_hard_triplet(seq, identities, weights.margin),
        }
        parts.update(auxiliary_losses(diag, keypoints, foreground, self.config.image_shape))
        return total_loss(parts, weights)


def scale_keypoints(keypoints: np.ndarray, image_hw: tuple[int, int], grid_hw: tuple[int, int]) -> np.ndarray:
    """Map image-resolution rows/column to grid cells (floor)."""
    kp = np.asarray(keypoints, dtype=np.int64)
    h0, w0 = image_hw
    h, w = grid_hw
    out = kp.copy()
    out[..., :3] = kp[..., :3] * h // h0
    out[..., 3] = kp[..., 3] * w // w0
    return out


def downsample_mask(mask: np.ndarray, grid_hw: tuple[int, int]) -> np.ndarray:
    """Majority vote of each cell of a binary mask."""
    mask = np.asarray(mask, dtype=np.float64)
    h0, w0 = mask.shape[-2:]
    h, w = grid_hw
    fy, fx = h0 // h, w0 // w
    cells = mask.reshape(*mask.shape[:-2], h, fy, w, fx).mean(axis=(-3, -1))
    return (cells >= 0.5).astype(np.float64)


def auxiliary_losses(diagnostics: dict[int, BlockDiagnostics], keypoints, foreground,
                     image_shape) -> dict[str, Tensor | float]:
    """Key-point, foreground and assignment terms averaged over blocks."""
    sums: dict[str, list] = {"keypoints": [], "foreground": [], "appearance_reg": [], "position_reg": []}
    h0, w0 = image_shape[:2]
    for s in sorted(diagnostics):
        d = diagnostics[s]
        h, w = d.geometry.height, d.geometry.width
        if d.keypoints is not None:
            kp = scale_keypoints(keypoints, (h0, w0), (h, w))
            labels = [one_hot(kp[..., i], h) for i in range(3)] + [one_hot(kp[..., 3], w)]
            sums["keypoints"].append(keypoints_loss(d.keypoints, labels))
        sums["foreground"].append(foreground_loss(d.foreground, downsample_mask(foreground, (h, w))))
        if d.bundle is not None:
            sums["appearance_reg"].append(appearance_regularizer(d.bundle.appearance, d.srfc_input))
            ps = position_similarity(position_encoding(d.geometry))
            sums["position_reg"].append(position_regularizer(d.bundle.position, ps))
    out: dict[str, Tensor | float] = {}
    for name, terms in sums.items():
        if not terms:
            out[name] = 0.0
            continue
        acc = terms[0]
        for term in terms[1:]:
            acc = tn.add(acc, term)
        out[name] = tn.mul(acc, 1.0 / len(terms))
    return out
