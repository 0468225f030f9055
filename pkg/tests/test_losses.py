import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfcblock import tensor as tn
from rfcblock.errors import MiningError, NumericError, ValidationError
from rfcblock.losses import (CSV_HEADER, PART_NAMES, LossWeights, batch_hard_triplet, cross_entropy,
                             hardest_pairs, total_loss)
from rfcblock.tensor import Parameter, finite_diff_grad, max_relative_error

COEFFS = {"ce": 1, "triplet": 1, "keypoints": "lambda1", "foreground": "lambda2",
          "appearance_reg": "lambda3", "position_reg": "lambda3"}


def coefficient(name, w):
    c = COEFFS[name]
    return c if isinstance(c, int) else getattr(w, c)


def exhaustive_triplet(x, labels, margin):
    total = 0.0
    for a in range(len(x)):
        pos = [np.linalg.norm(x[a] - x[p]) for p in range(len(x)) if p != a and labels[p] == labels[a]]
        neg = [np.linalg.norm(x[a] - x[n]) for n in range(len(x)) if labels[n] != labels[a]]
        total += max(0.0, margin + max(pos) - min(neg))
    return total / len(x)


# ---------------------------------------------------------------- cross entropy


def test_cross_entropy_examples(rng):
    assert cross_entropy(np.zeros((3, 4)), [0, 1, 3]).item() == pytest.approx(math.log(4), abs=1e-15)
    sat = np.zeros((2, 5))
    sat[[0, 1], [2, 4]] = 30.0
    assert cross_entropy(sat, [2, 4]).item() <= 1e-12
    z = rng.normal(size=(5, 7))
    y = rng.integers(0, 7, 5)
    direct = -sum(z[b, y[b]] - math.log(sum(math.exp(v) for v in z[b])) for b in range(5)) / 5
    assert abs(cross_entropy(z, y).item() - direct) <= 1e-12


def test_cross_entropy_label_range():
    with pytest.raises(ValidationError):
        cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ValidationError):
        cross_entropy(np.zeros((2, 3)), [0, -1])
    with pytest.raises(ValidationError):
        cross_entropy(np.zeros((2, 3)), [0])


def test_cross_entropy_gradient(rng):
    z = Parameter("z", rng.normal(size=(4, 6)))
    y = rng.integers(0, 6, 4)
    cross_entropy(z, y).backward()
    numeric = finite_diff_grad(lambda v: cross_entropy(v, y), z, 1e-5)
    assert max_relative_error(z.grad, numeric) <= 1e-6


# ---------------------------------------------------------------- triplet


def test_triplet_separated_clusters_is_zero():
    x = np.array([[0.0, 0], [0, 0], [10, 0], [10, 0]])
    assert batch_hard_triplet(x, [0, 0, 1, 1], 0.3).item() == 0.0


def test_triplet_identical_features_is_margin():
    assert batch_hard_triplet(np.ones((4, 3)), [0, 0, 1, 1], 0.3).item() == pytest.approx(0.3, abs=1e-15)


def test_triplet_matches_exhaustive_oracle(rng):
    x = rng.normal(size=(8, 4))
    labels = np.repeat(np.arange(4), 2)
    assert abs(batch_hard_triplet(x, labels, 0.3).item() - exhaustive_triplet(x, labels, 0.3)) <= 1e-12


@given(st.integers(0, 2**31 - 1), st.integers(2, 4), st.integers(2, 3))
@settings(max_examples=40, deadline=None)
def test_triplet_property_oracle_and_permutation(seed, p, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(p * k, 5))
    labels = np.repeat(np.arange(p), k)
    value = batch_hard_triplet(x, labels, 0.5).item()
    assert abs(value - exhaustive_triplet(x, labels, 0.5)) <= 1e-12
    perm = rng.permutation(p * k)
    assert abs(batch_hard_triplet(x[perm], labels[perm], 0.5).item() - value) <= 1e-12


def test_mining_errors():
    with pytest.raises(MiningError, match="identity 2"):
        hardest_pairs(np.zeros((5, 2)), np.array([0, 0, 1, 1, 2]))
    with pytest.raises(MiningError):
        hardest_pairs(np.zeros((2, 2)), np.array([0, 0]))
    with pytest.raises(ValidationError):
        batch_hard_triplet(np.zeros((4, 2)), [0, 0, 1])


def test_triplet_gradient_margin_active():
    rng = np.random.default_rng(11)
    labels = np.repeat(np.arange(4), 2)
    while True:
        x0 = rng.normal(size=(8, 4))
        dist = np.linalg.norm(x0[:, None] - x0[None], axis=-1)
        same = labels[:, None] == labels[None]
        hinge = [dist[a][same[a] & (np.arange(8) != a)].max() - dist[a][~same[a]].min() + 2.0 for a in range(8)]
        neg = np.sort(np.where(same, np.inf, dist), axis=1)
        if min(hinge) > 1e-3 and np.all(neg[:, 1] - neg[:, 0] > 1e-3):
            break
    x = Parameter("x", x0)
    batch_hard_triplet(x, labels, 2.0).backward()
    numeric = finite_diff_grad(lambda v: batch_hard_triplet(v, labels, 2.0), x, 1e-5)
    assert max_relative_error(x.grad, numeric) <= 1e-4


# ---------------------------------------------------------------- total


def test_weights_validation():
    with pytest.raises(ValidationError):
        LossWeights(lambda2=-0.1)
    with pytest.raises(ValidationError):
        LossWeights(margin=-1)


def test_total_zero_lambdas():
    parts = dict(zip(PART_NAMES, (0.7, 0.2, 5.0, 5.0, 5.0, 5.0)))
    r = total_loss(parts, LossWeights(0, 0, 0))
    assert r.total == 0.7 + 0.2


def test_total_default_weights_all_ones():
    r = total_loss(dict.fromkeys(PART_NAMES, 1.0), LossWeights())
    assert abs(r.total - 2.7) <= 1e-15


def test_total_random_and_linear(rng):
    w = LossWeights(*rng.uniform(0, 1, 3))
    values = dict(zip(PART_NAMES, rng.uniform(0, 3, 6)))
    r = total_loss(values, w)
    formula = (values["ce"] + values["triplet"]) + w.lambda1 * values["keypoints"] \
        + w.lambda2 * values["foreground"] + w.lambda3 * (values["appearance_reg"] + values["position_reg"])
    assert abs(r.total - formula) <= 1e-15
    for name in PART_NAMES:
        bumped = dict(values)
        bumped[name] += 0.25
        moved = total_loss(bumped, w).total - r.total
        assert abs(moved - 0.25 * coefficient(name, w)) <= 1e-12, name


def test_total_rejects_nonfinite_and_missing():
    parts = dict.fromkeys(PART_NAMES, 1.0)
    parts["foreground"] = float("nan")
    with pytest.raises(NumericError, match="foreground"):
        total_loss(parts, LossWeights())
    with pytest.raises(ValidationError):
        total_loss({"ce": 1.0}, LossWeights())


def test_total_graph_carries_weighted_gradients(rng):
    params = {name: Parameter(name, [rng.normal()]) for name in PART_NAMES}
    w = LossWeights(0.1, 0.5, 0.05)
    parts = {name: tn.sum_(p) for name, p in params.items()}
    r = total_loss(parts, w)
    assert abs(r.graph.item() - r.total) <= 1e-12
    r.graph.backward()
    for name, p in params.items():
        assert p.grad[0] == coefficient(name, w)


def test_csv_line_format():
    r = total_loss(dict(zip(PART_NAMES, (1.0, 2.0, 3.0, 4.0, 5.0, 6.0))), LossWeights())
    fields = r.csv_line(7).split(",")
    assert len(fields) == len(CSV_HEADER.split(",")) and fields[0] == "7"
    assert [float(v) for v in fields[1:]] == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, r.total]


def test_all_orderings_of_parts_same_total(rng):
    values = dict(zip(PART_NAMES, rng.uniform(0, 1, 6)))
    totals = {total_loss(dict(order), LossWeights()).total for order in
              itertools.islice(itertools.permutations(values.items()), 20)}
    assert len(totals) == 1
