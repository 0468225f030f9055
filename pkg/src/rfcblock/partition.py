"""Adaptive body-region partition.

A key-points locator predicts three row indices (shoulder, hip, knee) and
one column index (knee) per frame; every grid position is then assigned to
one of six regions: head, upper body, and the four leg quadrants. A fixed
mode that slices the grid into equal horizontal bands is kept for
comparison.

All functions accept arbitrary leading (batch, frame) axes in front of the
per-frame ``H x W x D`` layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import DimensionError, ValidationError
from .tensor import Parameter, Tensor

ADAPTIVE_REGIONS = 6
HEAD_GAIN = 0.01


def reduced_width(channels: int) -> int:
    return max(channels // 8, 4)


@dataclass
class LocatorParams:
    reduce_weight: Parameter  # D x Dr
    reduce_bias: Parameter  # Dr
    row_weights: list[Parameter]  # three (H*Dr) x H maps
    row_biases: list[Parameter]
    col_weight: Parameter  # (W*Dr) x W
    col_bias: Parameter

    @classmethod
    def init(cls, rng: np.random.Generator, height: int, width: int, channels: int,
             reduced: int | None = None, prefix: str = "locator") -> LocatorParams:
        dr = reduced or reduced_width(channels)

        def dense(name, n_in, n_out, gain=1.0):
            scale = gain / np.sqrt(n_in)
            return Parameter(f"{prefix}.{name}", rng.normal(0.0, scale, (n_in, n_out)))

        return cls(
            reduce_weight=dense("reduce.weight", channels, dr),
            reduce_bias=Parameter(f"{prefix}.reduce.bias", np.zeros(dr)),
            # heads start near uniform (gain HEAD_GAIN) so early argmaxes are not set by init noise
            row_weights=[dense(f"row{i}.weight", height * dr, height, HEAD_GAIN) for i in (1, 2, 3)],
            row_biases=[Parameter(f"{prefix}.row{i}.bias", np.zeros(height)) for i in (1, 2, 3)],
            col_weight=dense("col.weight", width * dr, width, HEAD_GAIN),
            col_bias=Parameter(f"{prefix}.col.bias", np.zeros(width)),
        )

    def parameters(self) -> list[Parameter]:
        params = [self.reduce_weight, self.reduce_bias]
        for w, b in zip(self.row_weights, self.row_biases):
            params += [w, b]
        return params + [self.col_weight, self.col_bias]

    @property
    def grid(self) -> tuple[int, int, int]:
        """(H, W, D) this locator was built for."""
        return (self.row_weights[0].shape[1], self.col_weight.shape[1], self.reduce_weight.shape[0])

    def check(self, frame_shape) -> None:
        h, w, d = frame_shape[-3:]
        dr = self.reduce_weight.shape[1]
        if self.reduce_weight.shape[0] != d:
            raise DimensionError(f"locator expects {self.reduce_weight.shape[0]} channels, got {d}")
        for rw in self.row_weights:
            if rw.shape != (h * dr, h):
                raise DimensionError(f"row head {rw.shape} does not fit a {h}x{w} grid")
        if self.col_weight.shape != (w * dr, w):
            raise DimensionError(f"column head {self.col_weight.shape} does not fit a {h}x{w} grid")


@dataclass
class KeypointEstimate:
    """Per-frame key-point distributions and their argmax coordinates.

    ``logits``/``probs`` hold four tensors: three over rows (length H) and
    one over columns (length W). ``coords`` has shape ``(..., 4)``.
    """

    probs: list[Tensor]
    coords: np.ndarray
    logits: list[Tensor] | None = None


def first_argmax(p: np.ndarray) -> np.ndarray:
    # np.argmax already returns the lowest index among ties
    return np.argmax(p, axis=-1)


def locate_keypoints(frame: Tensor, params: LocatorParams) -> KeypointEstimate:
    frame = tn.as_tensor(frame)
    params.check(frame.shape)
    h, w = frame.shape[-3], frame.shape[-2]
    reduced = tn.linear(frame, params.reduce_weight, params.reduce_bias)  # (..., H, W, Dr)
    lead = reduced.shape[:-3]
    rows = tn.reshape(tn.mean_over_axis(reduced, -2), (*lead, -1))  # (..., H*Dr)
    cols = tn.reshape(tn.mean_over_axis(reduced, -3), (*lead, -1))  # (..., W*Dr)
    logits = [tn.linear(rows, wt, b) for wt, b in zip(params.row_weights, params.row_biases)]
    logits.append(tn.linear(cols, params.col_weight, params.col_bias))
    probs = [tn.softmax_rows(z) for z in logits]
    coords = np.stack([first_argmax(p.data) for p in probs], axis=-1)
    assert coords[..., :3].max() < h and coords[..., 3].max() < w
    return KeypointEstimate(probs=probs, coords=coords, logits=logits)


@dataclass
class RegionMasks:
    masks: np.ndarray  # (..., N, H, W) of 0.0 / 1.0

    @property
    def count(self) -> int:
        return self.masks.shape[-3]


@dataclass
class RegionGeometry:
    """Bounding boxes as ``(y_center, x_center, height, width)`` rows."""

    boxes: np.ndarray  # (..., N, 4)
    height: int
    width: int


def parse_partition(mode) -> tuple[str, int]:
    """``"adaptive"`` -> ("adaptive", 6); ``"fixed:4"`` or ("fixed", 4) -> ("fixed", 4)."""
    if isinstance(mode, tuple):
        kind, parts = mode
    elif mode == "adaptive":
        return "adaptive", ADAPTIVE_REGIONS
    elif isinstance(mode, str) and mode.startswith("fixed:"):
        kind, parts = "fixed", mode.split(":", 1)[1]
    else:
        raise ValidationError(f"unknown partition mode {mode!r}")
    if kind == "adaptive":
        return "adaptive", ADAPTIVE_REGIONS
    if kind != "fixed":
        raise ValidationError(f"unknown partition mode {mode!r}")
    try:
        parts = int(parts)
    except ValueError:
        raise ValidationError(f"bad band count in {mode!r}") from None
    if not 2 <= parts <= 8:
        raise ValidationError(f"fixed partition takes 2..8 bands, got {parts}")
    return "fixed", parts


def adaptive_masks(coords: np.ndarray, height: int, width: int) -> np.ndarray:
    coords = np.asarray(coords)
    a1, a2, a3, a4 = (coords[..., i, None, None] for i in range(4))
    h = np.arange(height)[:, None]
    w = np.arange(width)[None, :]
    left = w <= a4
    # the rule is piecewise: branches are tried top-down, so key points out of
    # order (e.g. a3 < a2) empty later regions instead of overlapping them
    r1 = h <= a1
    r2 = ~r1 & (h <= a2)
    r34 = ~r1 & ~r2 & (h <= a3)
    r56 = ~r1 & ~r2 & ~r34
    regions = [r1, r2, r34 & left, r34 & ~left, r56 & left, r56 & ~left]
    shape = (*coords.shape[:-1], height, width)
    return np.stack([np.broadcast_to(r, shape) for r in regions], axis=-3).astype(np.float64)


def fixed_masks(lead: tuple[int, ...], parts: int, height: int, width: int) -> np.ndarray:
    edges = [(i * height) // parts for i in range(parts + 1)]
    masks = np.zeros((parts, height, width))
    for i in range(parts):
        masks[i, edges[i]:edges[i + 1], :] = 1.0
    return np.broadcast_to(masks, (*lead, parts, height, width)).copy()


def region_geometry(masks: np.ndarray) -> np.ndarray:
    """Bounding-box center/size per region; empty regions give zeros."""
    rows = masks.any(axis=-1)  # (..., N, H)
    cols = masks.any(axis=-2)  # (..., N, W)
    nonempty = rows.any(axis=-1)
    h, w = rows.shape[-1], cols.shape[-1]
    y0 = np.argmax(rows, axis=-1)
    y1 = h - 1 - np.argmax(rows[..., ::-1], axis=-1)
    x0 = np.argmax(cols, axis=-1)
    x1 = w - 1 - np.argmax(cols[..., ::-1], axis=-1)
    boxes = np.stack([(y0 + y1) / 2.0, (x0 + x1) / 2.0, y1 - y0 + 1.0, x1 - x0 + 1.0], axis=-1)
    return np.where(nonempty[..., None], boxes, 0.0)


def region_masks(coords, height: int, width: int, mode="adaptive") -> tuple[RegionMasks, RegionGeometry]:
    coords = np.asarray(coords, dtype=np.int64)
    if coords.shape[-1] != 4:
        raise DimensionError("coords must end with an axis of length 4")
    if np.any(coords < 0) or np.any(coords[..., :3] >= height) or np.any(coords[..., 3] >= width):
        raise ValidationError(f"key points {coords.tolist()} fall outside a {height}x{width} grid")
    kind, parts = parse_partition(mode)
    if kind == "adaptive":
        masks = adaptive_masks(coords, height, width)
    else:
        masks = fixed_masks(coords.shape[:-1], parts, height, width)
    return RegionMasks(masks), RegionGeometry(region_geometry(masks), height, width)


def one_hot(index, length: int) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    return (np.arange(length) == index[..., None]).astype(np.float64)


def _label_indices(label: np.ndarray, length: int) -> np.ndarray:
    label = np.asarray(label, dtype=np.float64)
    if label.shape[-1] != length:
        raise ValidationError(f"label length {label.shape[-1]} != probability length {length}")
    if not (np.all((label == 0) | (label == 1)) and np.all(label.sum(axis=-1) == 1)):
        raise ValidationError("key-point labels must be one-hot")
    return np.argmax(label, axis=-1)


def keypoints_loss(estimate: KeypointEstimate, labels) -> Tensor:
    """Mean cross-entropy over all frames and the four key points.

    ``labels`` is a sequence of four one-hot arrays matching ``estimate.probs``.
    """
    if len(labels) != 4:
        raise ValidationError("need four key-point labels per frame")
    terms = []
    for i, label in enumerate(labels):
        probs = estimate.probs[i]
        idx = _label_indices(label, probs.shape[-1])
        if idx.shape != probs.shape[:-1]:
            raise ValidationError(f"label batch shape {idx.shape} != {probs.shape[:-1]}")
        lead = np.indices(idx.shape)
        if estimate.logits is not None:
            picked = tn.take(tn.log_softmax(estimate.logits[i]), (*lead, idx))
        else:
            picked = tn.log(tn.take(probs, (*lead, idx)))
        terms.append(tn.sum_(picked))
    count = 4 * int(np.prod(estimate.probs[0].shape[:-1], dtype=np.int64))
    total = terms[0] + terms[1] + terms[2] + terms[3]
    return tn.mul(total, -1.0 / count)
