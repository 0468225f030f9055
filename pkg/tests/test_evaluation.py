import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_eval
from rfcblock.errors import EvaluationError, ValidationError
from rfcblock.evaluation import (EvalResult, GallerySet, clip_split_average, cosine_distances, evaluate,
                                 rank_and_score, rank_gallery, write_rankings)


def hand_case():
    """One query, six gallery entries, matches land at ranks 2 and 5."""
    q = np.array([1.0, 0.0])
    angles = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    feats = np.column_stack([np.cos(angles), np.sin(angles)])
    ids = np.array([9, 7, 9, 9, 7, 9])
    return q, GallerySet(feats, ids, np.ones(6, dtype=int))


# ---------------------------------------------------------------- clip averaging


def test_single_clip_equals_feature(rng):
    seq = rng.normal(size=(64, 2))
    assert np.array_equal(clip_split_average(seq, 64, lambda c: c.sum(axis=0)), seq.sum(axis=0))


def test_identical_halves(rng):
    half = rng.normal(size=(64, 3))
    out = clip_split_average(np.concatenate([half, half]), 64, lambda c: c.mean(axis=0))
    assert np.array_equal(out, half.mean(axis=0))


def test_remainder_clip_hand_composition(rng):
    seq = rng.normal(size=(100, 3))
    seen = []

    def embed(clip):
        seen.append(len(clip))
        return clip.mean(axis=0)

    out = clip_split_average(seq, 64, embed)
    assert seen == [64, 36]
    assert np.allclose(out, (seq[:64].mean(axis=0) + seq[64:].mean(axis=0)) / 2, atol=1e-15)


def test_clip_split_uses_model_embed(rng):
    class Model:
        def embed(self, clip):
            return np.array([len(clip)], dtype=float)

    assert clip_split_average(np.zeros((10, 1)), 4, Model()).tolist() == [(4 + 4 + 2) / 3]
    with pytest.raises(ValidationError):
        clip_split_average(np.zeros((0, 1)), 4, Model())
    with pytest.raises(ValidationError):
        clip_split_average(np.zeros((3, 1)), 0, Model())


# ---------------------------------------------------------------- ranking and AP


def test_cosine_distance_zero_vector():
    d = cosine_distances(np.zeros(2), np.eye(2))
    assert np.array_equal(d, [1.0, 1.0])


def test_single_match_first():
    g = GallerySet(np.eye(3), [5, 6, 7], [1, 1, 1])
    assert rank_and_score(np.array([1.0, 0, 0]), 5, 0, g) == (1.0, 1)


def test_two_matches_top_two():
    g = GallerySet(np.array([[1.0, 0], [0.9, 0.1], [0, 1]]), [5, 5, 6], [1, 2, 1])
    assert rank_and_score(np.array([1.0, 0]), 5, 0, g) == (1.0, 1)


def test_hand_computed_ap():
    q, g = hand_case()
    ap, first = rank_and_score(q, 9, 0, g)
    assert first == 1
    q, g = hand_case()
    g.identities = np.array([7, 9, 7, 7, 9, 7])
    ap, first = rank_and_score(q, 9, 0, g)
    assert ap == (1 / 2 + 2 / 5) / 2 and first == 2
    assert evaluate(q[None], [9], [0], g).mAP == 0.45


def test_same_camera_same_id_filtered():
    g = GallerySet(np.array([[1.0, 0], [0.5, 0.5]]), [3, 3], [0, 1])
    order, _ = rank_gallery(np.array([1.0, 0]), g, 3, 0)
    assert order.tolist() == [1]
    assert rank_and_score(np.array([1.0, 0]), 3, 0, GallerySet([[1.0, 0]], [3], [0])) is None


def test_ties_break_by_gallery_index():
    g = GallerySet(np.tile([1.0, 1.0], (4, 1)), [1, 2, 3, 4], [1, 1, 1, 1])
    order, dist = rank_gallery(np.array([2.0, 2.0]), g, 0, 0)
    assert order.tolist() == [0, 1, 2, 3] and np.all(dist == dist[0])


# ---------------------------------------------------------------- evaluate


def test_perfect_retrieval(rng):
    feats = rng.normal(size=(4, 5))
    res = evaluate(feats, [0, 1, 2, 3], [0] * 4, GallerySet(feats, [0, 1, 2, 3], [1] * 4), k_max=4)
    assert res.mAP == 1.0 and np.all(res.cmc == 1.0)


def test_all_skipped_and_empty():
    g = GallerySet([[1.0, 0]], [3], [0])
    with pytest.raises(EvaluationError):
        evaluate([[1.0, 0]], [3], [0], g)
    with pytest.raises(EvaluationError):
        evaluate(np.zeros((0, 2)), [], [], g)


def test_skipped_queries_excluded(rng):
    g = GallerySet(np.eye(3), [0, 1, 2], [1, 1, 1])
    res = evaluate(np.eye(3)[[0, 1]], [0, 9], [0, 0], g)
    assert res.mAP == 1.0 and res.skipped == 1


def test_result_lines():
    r = EvalResult(0.5, np.array([0.5, 0.75, 1.0, 1.0, 1.0]))
    assert r.lines() == ["mAP 0.5", "top-1 0.5", "top-5 1.0"]
    assert r.text((1, 2)) == "mAP 0.5\ntop-1 0.5\ntop-2 0.75\n"


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    qf, gf = rng.normal(size=(10, 6)), rng.normal(size=(50, 6))
    # coarse values force distance ties
    qf, gf = np.round(qf), np.round(gf)
    qids, gids = rng.integers(0, 8, 10), rng.integers(0, 8, 50)
    qcams, gcams = rng.integers(0, 3, 10), rng.integers(0, 3, 50)
    gallery = GallerySet(gf, gids, gcams)
    ref_map, ref_cmc, per_query = brute_force_eval(qf, qids, qcams, gf, gids, gcams, 10)
    for i in range(10):
        assert rank_and_score(qf[i], qids[i], qcams[i], gallery) == per_query[i]
    if ref_map is None:
        with pytest.raises(EvaluationError):
            evaluate(qf, qids, qcams, gallery)
        return
    res = evaluate(qf, qids, qcams, gallery, k_max=10)
    assert res.mAP == ref_map and res.cmc.tolist() == ref_cmc
    assert np.all(np.diff(res.cmc) >= 0) and 0 <= res.mAP <= 1


def test_ranking_invariant_to_positive_scaling(rng):
    qf, gf = rng.normal(size=(5, 4)), rng.normal(size=(20, 4))
    ids, cams = rng.integers(0, 4, 20), rng.integers(1, 3, 20)
    qids = rng.integers(0, 4, 5)
    a = evaluate(qf, qids, [0] * 5, GallerySet(gf, ids, cams))
    scale = rng.uniform(0.1, 10, (20, 1))
    b = evaluate(qf * 3.0, qids, [0] * 5, GallerySet(gf * scale, ids, cams))
    assert a.mAP == pytest.approx(b.mAP, abs=1e-15) and np.array_equal(a.cmc, b.cmc)


def test_write_rankings(tmp_path):
    q, g = hand_case()
    write_rankings(tmp_path / "r.csv", q[None], [9], [0], g)
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert [int(r["gallery_index"]) for r in rows] == list(range(6))
    assert [int(r["rank"]) for r in rows] == list(range(1, 7))


def test_gallery_shape_validation():
    with pytest.raises(ValidationError):
        GallerySet(np.eye(3), [0, 1], [0, 0, 0])
