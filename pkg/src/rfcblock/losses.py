"""Identity classification, batch-hard triplet and the weighted total objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import MiningError, NumericError, ValidationError
from .tensor import Tensor

PART_NAMES = ("ce", "triplet", "keypoints", "foreground", "appearance_reg", "position_reg")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.5
    lambda3: float = 0.05
    margin: float = 0.3

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "margin"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")


@dataclass
class LossReport:
    ce: float
    triplet: float
    keypoints: float
    foreground: float
    appearance_reg: float
    position_reg: float
    total: float
    graph: Tensor | None = field(default=None, repr=False, compare=False)

    def csv_line(self, step: int) -> str:
        values = (self.ce, self.triplet, self.keypoints, self.foreground,
                  self.appearance_reg, self.position_reg, self.total)
        return ",".join([str(step), *(repr(float(v)) for v in values)])


CSV_HEADER = "step,ce,triplet,lk,lf,la,lp,total"


def cross_entropy(logits, labels) -> Tensor:
    logits = tn.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValidationError(f"expected {b} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValidationError(f"labels must lie in [0, {c})")
    picked = tn.take(tn.log_softmax(logits), (np.arange(b), labels))
    return tn.mul(tn.sum_(picked), -1.0 / b)


def hardest_pairs(features: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the farthest positive and nearest negative for every anchor.

    Ties go to the lowest index.
    """
    labels = np.asarray(labels)
    ids, counts = np.unique(labels, return_counts=True)
    single = ids[counts < 2]
    if single.size:
        raise MiningError(f"identity {single[0]} has a single instance in the batch")
    if ids.size < 2:
        raise MiningError("batch holds a single identity, no negatives available")
    diff = features[:, None, :] - features[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    same = labels[:, None] == labels[None, :]
    positive = same & ~np.eye(len(labels), dtype=bool)
    hp = np.argmax(np.where(positive, dist, -np.inf), axis=1)
    hn = np.argmin(np.where(same, np.inf, dist), axis=1)
    return hp, hn


def batch_hard_triplet(features, labels, margin: float = 0.3) -> Tensor:
    """Mean over anchors of max(0, margin + d(a, hardest+) - d(a, hardest-)), euclidean."""
    features = tn.as_tensor(features)
    labels = np.asarray(labels)
    if labels.shape != (features.shape[0],):
        raise ValidationError("one label per feature row is required")
    hp, hn = hardest_pairs(features.data, labels)
    d_pos = tn.norm_rows(tn.sub(features, tn.take(features, hp)))
    d_neg = tn.norm_rows(tn.sub(features, tn.take(features, hn)))
    hinge = tn.relu(tn.add(tn.sub(d_pos, d_neg), margin))
    return tn.mean(hinge)


def total_loss(parts: dict, weights: LossWeights) -> LossReport:
    """Weighted sum of the six terms; tensors keep their graph in ``report.graph``."""
    missing = [name for name in PART_NAMES if name not in parts]
    if missing:
        raise ValidationError(f"missing loss parts: {missing}")
    values = {}
    for name in PART_NAMES:
        v = parts[name]
        value = float(v.data) if isinstance(v, Tensor) else float(v)
        if not math.isfinite(value):
            raise NumericError(f"loss part {name!r} is not finite ({value})")
        values[name] = value
    coeffs = {
        "ce": 1.0,
        "triplet": 1.0,
        "keypoints": weights.lambda1,
        "foreground": weights.lambda2,
        "appearance_reg": weights.lambda3,
        "position_reg": weights.lambda3,
    }
    total = ((values["ce"] + values["triplet"]) + weights.lambda1 * values["keypoints"]
             + weights.lambda2 * values["foreground"]
             + weights.lambda3 * (values["appearance_reg"] + values["position_reg"]))
    graph = None
    live = [name for name in PART_NAMES if isinstance(parts[name], Tensor) and coeffs[name] != 0]
    if live:
        terms = [tn.mul(parts[name], coeffs[name]) for name in live]
        graph = terms[0]
        for term in terms[1:]:
            graph = tn.add(graph, term)
    return LossReport(total=total, graph=graph, **values)
