"""Single-query retrieval scoring (cosine ranking, AP, CMC) and clip averaging."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, EvaluationError, ValidationError


@dataclass
class GallerySet:
    features: np.ndarray  # G x D
    identities: np.ndarray
    cameras: np.ndarray

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.identities = np.asarray(self.identities)
        self.cameras = np.asarray(self.cameras)
        g = self.features.shape[0]
        if self.identities.shape != (g,) or self.cameras.shape != (g,):
            raise ValidationError(f"gallery has {g} features but {self.identities.shape} ids, "
                                  f"{self.cameras.shape} cameras")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class EvalResult:
    mAP: float
    cmc: np.ndarray  # cmc[k-1] = top-k accuracy
    skipped: int = 0

    def lines(self, ks=(1, 5, 10)) -> list[str]:
        out = [f"mAP {self.mAP!r}"]
        for k in ks:
            if k <= len(self.cmc):
                out.append(f"top-{k} {float(self.cmc[k - 1])!r}")
        return out

    def text(self, ks=(1, 5, 10)) -> str:
        return "\n".join(self.lines(ks)) + "\n"


def clip_split_average(sequence, clip_len: int = 64, model=None) -> np.ndarray:
    """Mean feature over consecutive clips; a shorter tail is its own clip.

    ``model`` is either an object with ``embed(clip)`` or a plain callable.
    """
    sequence = np.asarray(sequence)
    if sequence.shape[0] < 1:
        raise ValidationError("sequence needs at least one frame")
    if clip_len < 1:
        raise ValidationError("clip_len must be positive")
    embed = getattr(model, "embed", model)
    if embed is None:
        raise ValidationError("a model or feature callable is required")
    feats = [np.asarray(embed(sequence[s:s + clip_len]), dtype=np.float64)
             for s in range(0, sequence.shape[0], clip_len)]
    return np.mean(np.stack(feats), axis=0)


def cosine_distances(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.shape[-1] != g.shape[-1]:
        raise DimensionError(f"query dim {q.shape[-1]} vs gallery dim {g.shape[-1]}")
    qn = np.linalg.norm(q)
    gn = np.linalg.norm(g, axis=1)
    denom = qn * gn
    cos = np.divide(g @ q, denom, out=np.zeros(len(g)), where=denom > 0)
    return 1.0 - cos


def rank_gallery(query, gallery: GallerySet, qid, qcam) -> tuple[np.ndarray, np.ndarray]:
    """Kept gallery indices in rank order and their distances.

    Same-identity same-camera entries are dropped; ties keep gallery order.
    """
    dist = cosine_distances(query, gallery.features)
    keep = ~((gallery.identities == qid) & (gallery.cameras == qcam))
    idx = np.flatnonzero(keep)
    order = idx[np.argsort(dist[idx], kind="stable")]
    return order, dist[order]


def rank_and_score(query, qid, qcam, gallery: GallerySet) -> tuple[float, int] | None:
    """(AP, 1-based first-match rank), or None when the query has no valid match."""
    order, _ = rank_gallery(query, gallery, qid, qcam)
    hits = gallery.identities[order] == qid
    ranks = np.flatnonzero(hits) + 1
    if ranks.size == 0:
        return None
    # sequential sums keep AP bit-reproducible against a plain loop
    ap = sum(m / int(r) for m, r in enumerate(ranks, start=1)) / ranks.size
    return float(ap), int(ranks[0])


def evaluate(query_features, query_ids, query_cams, gallery: GallerySet, k_max: int = 10) -> EvalResult:
    q = np.asarray(query_features, dtype=np.float64)
    if q.size == 0:
        raise EvaluationError("no queries to evaluate")
    q = np.atleast_2d(q)
    query_ids = np.asarray(query_ids)
    query_cams = np.asarray(query_cams)
    if query_ids.shape != (q.shape[0],) or query_cams.shape != (q.shape[0],):
        raise ValidationError("one id and one camera per query are required")
    if k_max < 1:
        raise ValidationError("k_max must be positive")
    aps, firsts = [], []
    for i in range(q.shape[0]):
        scored = rank_and_score(q[i], query_ids[i], query_cams[i], gallery)
        if scored is None:
            continue
        aps.append(scored[0])
        firsts.append(scored[1])
    if not aps:
        raise EvaluationError("every query was skipped: no valid gallery match")
    firsts = np.array(firsts)
    cmc = np.array([np.count_nonzero(firsts <= k) / firsts.size for k in range(1, k_max + 1)])
    return EvalResult(sum(aps) / len(aps), cmc, skipped=q.shape[0] - len(aps))


def write_rankings(path, query_features, query_ids, query_cams, gallery: GallerySet) -> None:
    """CSV of (query_index, gallery_index, distance, rank) for every kept pair."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_index", "gallery_index", "distance", "rank"])
        for i, q in enumerate(np.atleast_2d(query_features)):
            order, dist = rank_gallery(q, gallery, query_ids[i], query_cams[i])
            for r, (g, d) in enumerate(zip(order, dist), start=1):
                writer.writerow([i, int(g), repr(float(d)), r])
