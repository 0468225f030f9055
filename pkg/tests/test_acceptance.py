"""Acceptance criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines, or
``python3 tests/test_acceptance.py`` for a plain summary.
"""

from __future__ import annotations

import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import oracles  # noqa: E402
from rfcblock import tensor as tn  # noqa: E402
from rfcblock.block import ARRANGEMENTS, BlockConfig, RfcBlockParams, reverse_projection, rfc_block_forward  # noqa: E402
from rfcblock.cli import cmd_train  # noqa: E402
from rfcblock.evaluation import GallerySet, evaluate  # noqa: E402
from rfcblock.gradcheck import TOLERANCE, check_parameters, tiny_case  # noqa: E402
from rfcblock.losses import LossWeights, total_loss  # noqa: E402
from rfcblock.partition import region_masks  # noqa: E402
from rfcblock.region_features import ForegroundParams, extract_region_features, foreground_map  # noqa: E402
from rfcblock.srfc import SrfcParams, srfc_forward  # noqa: E402
from rfcblock.trfc import TrfcParams, trfc_forward  # noqa: E402
from rfcblock.training import RunConfig, evaluate_model, evaluation_split, train  # noqa: E402

RESULTS: list[str] = []


def criterion(name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line


def _random_coords(rng, lead, h, w):
    rows = rng.integers(0, h, (*lead, 3))
    return np.concatenate([rows, rng.integers(0, w, (*lead, 1))], axis=-1)


# ---------------------------------------------------------------- 1


def test_gradient_contract():
    start = time.perf_counter()
    case = tiny_case(seed=0, block=BlockConfig(arrangement="st", regions=6, clusters=3, stages=(1,)), frames=2)
    grid = case.model.config.stage_grids()[0]
    errors = check_parameters(case, eps=1e-5)
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = errors[worst] <= TOLERANCE and elapsed <= 60 and grid == (16, 8, 8)
    criterion("gradient contract", ok,
              f"{len(errors)} parameters on a T=2 {grid[0]}x{grid[1]}x{grid[2]} block, worst {worst} "
              f"rel err {errors[worst]:.2e} (limit {TOLERANCE:g}), {elapsed:.1f}s (limit 60s)")


# ---------------------------------------------------------------- 2


def test_stochasticity_invariants():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    count, n, k, d, h, w = 1000, 6, 3, 8, 16, 8
    worst = dict(sa=0.0, sp=0.0, s=0.0, a=0.0, alpha=0.0)
    b_exact, gates_open = True, True
    for chunk in range(10):
        lead = (count // 10,)
        f = tn.Tensor(rng.normal(0, 2, (*lead, n, d)))
        _, geom = region_masks(_random_coords(rng, lead, h, w), h, w)
        params = SrfcParams.init(rng, d, k)
        params.position1.data = rng.normal(0, 1, (4, d))
        _, bundle = srfc_forward(f, geom, params)
        worst["sa"] = max(worst["sa"], np.abs(bundle.appearance.data.sum(-1) - 1).max())
        worst["sp"] = max(worst["sp"], np.abs(bundle.position.data.sum(-1) - 1).max())
        worst["s"] = max(worst["s"], np.abs(bundle.combined.data.sum(-1) - 1).max())
        worst["a"] = max(worst["a"], np.abs(bundle.encoding.data.sum(-2) - 1).max())
        b_exact &= np.array_equal(bundle.decoding.data, np.swapaxes(bundle.combined.data, -1, -2))
        t = 2 + chunk % 4
        o = rng.normal(0, 1, (*lead, t, n, d))
        trfc = TrfcParams(tn.Parameter("w", rng.normal(0, 0.3, (d, d))), tn.Parameter("b", rng.normal(0, 1, d)))
        _, trace = trfc_forward(o, trfc)
        worst["alpha"] = max(worst["alpha"], np.abs(trace.alpha.sum(-1) - 1).max())
        gates_open &= bool(np.all((trace.gates > 0) & (trace.gates < 1)))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-12 and b_exact and gates_open and elapsed <= 10
    criterion("stochasticity invariants", ok,
              f"{count} instances; max row-sum dev S_A {worst['sa']:.1e}, S_P {worst['sp']:.1e}, "
              f"S {worst['s']:.1e}; A col-sum dev {worst['a']:.1e}; alpha dev {worst['alpha']:.1e}; "
              f"B==S^T {b_exact}; gates in (0,1) {gates_open}; {elapsed:.2f}s")


# ---------------------------------------------------------------- 3


def test_partition_exactness():
    start = time.perf_counter()
    h, w = 8, 4
    coords = np.array([(a1, a2, a3, a4) for a1 in range(h) for a2 in range(h) for a3 in range(h)
                       for a4 in range(w)])
    masks, _ = region_masks(coords, h, w)
    m = masks.masks
    partitions = bool(np.all(m.sum(axis=1) == 1.0)) and set(np.unique(m)) <= {0.0, 1.0}
    mismatches = 0
    for c, mk in zip(coords, m):
        for y in range(h):
            for x in range(w):
                region = oracles.predicate_region(y, x, *c)
                if mk[region, y, x] != 1.0:
                    mismatches += 1
    elapsed = time.perf_counter() - start
    ok = len(coords) == 2048 and partitions and mismatches == 0 and elapsed <= 5
    criterion("partition exactness", ok,
              f"{len(coords)} coordinate tuples on 8x4; exact partition {partitions}; "
              f"{mismatches} pixel mismatches vs per-pixel rule; {elapsed:.2f}s")


# ---------------------------------------------------------------- 4


def _random_block(rng, config, h, w, d):
    params = RfcBlockParams.init(rng, h, w, d, config)
    params.projection.gamma.data = rng.uniform(0.5, 1.5, d)
    params.projection.beta.data = rng.normal(0, 0.1, d)
    if params.locator is not None:
        for p in params.locator.parameters():
            p.data = rng.normal(0, 1, p.shape)
    if params.trfc is not None:
        params.trfc.weight_raw.data = rng.normal(0, 0.2, (d, d))
        params.trfc.bias.data = rng.normal(0, 0.5, d)
    return params


def test_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = {"srfc": 0.0, "trfc": 0.0, "extract": 0.0, "projection": 0.0, "block": 0.0}
    instances = 100
    for it in range(instances):
        h, w, d, n, k = 4, 4, 8, 6, 3
        # srfc
        f = rng.normal(0, 1, (n, d))
        masks, geom = region_masks(_random_coords(rng, (), h, w), h, w)
        sp = SrfcParams.init(rng, d, k)
        o, _ = srfc_forward(tn.Tensor(f), geom, sp)
        ref, _ = oracles.srfc_oracle(f, geom.boxes, h, w, oracles.params_numpy(sp))
        worst["srfc"] = max(worst["srfc"], np.abs(o.data - ref).max())
        # trfc
        t = 2 + it % 3
        ot = rng.normal(0, 1, (t, n, d))
        tp = TrfcParams(tn.Parameter("w", rng.normal(0, 0.3, (d, d))), tn.Parameter("b", rng.normal(0, 1, d)))
        e, _ = trfc_forward(ot, tp)
        worst["trfc"] = max(worst["trfc"], np.abs(e.data - oracles.trfc_oracle(ot, tp.weight_raw.data,
                                                                               tp.bias.data)[0]).max())
        # extraction
        frame = rng.normal(0, 1, (h, w, d))
        fgp = ForegroundParams.init(rng, d)
        fg = foreground_map(tn.Tensor(frame), fgp)
        got = extract_region_features(tn.Tensor(frame), masks, fg).values.data
        want = oracles.extract_oracle(frame, masks.masks, oracles.foreground_oracle(frame, fgp.weight.data,
                                                                                    fgp.bias.data))
        worst["extract"] = max(worst["extract"], np.abs(got - want).max())
        # projection (alternate training / inference statistics)
        frames = rng.normal(0, 1, (2, h, w, d))
        pm, _ = region_masks(_random_coords(rng, (2,), h, w), h, w)
        ev = rng.normal(0, 1, (2, n, d))
        bn = RfcBlockParams.init(rng, h, w, d, BlockConfig()).projection
        bn.gamma.data = rng.uniform(0.5, 1.5, d)
        bn.beta.data = rng.normal(0, 0.1, d)
        bn.running_mean = rng.normal(0, 1, d)
        bn.running_var = rng.uniform(0.5, 2, d)
        training = bool(it % 2)
        want = oracles.projection_oracle(ev, pm.masks, frames, bn.gamma.data, bn.beta.data, training,
                                         bn.running_mean.copy(), bn.running_var.copy(), bn.eps)
        got = reverse_projection(ev, pm, frames, bn, training=training).data
        worst["projection"] = max(worst["projection"], np.abs(got - want).max())
        # full block, every arrangement and both partition modes in turn
        arrangement = ARRANGEMENTS[it % len(ARRANGEMENTS)]
        partition = "adaptive" if it % 4 else "fixed:6"
        config = BlockConfig(arrangement=arrangement, partition=partition, stages=(1,))
        bp = _random_block(rng, config, h, w, d)
        F = rng.normal(0, 1, (2, h, w, d))
        want = oracles.block_oracle(F, config, bp, training=True)
        got, _ = rfc_block_forward(F, config, bp, training=True)
        worst["block"] = max(worst["block"], np.abs(got.data - want).max())
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-10 and elapsed <= 30
    criterion("oracle equivalence", ok,
              f"{instances} instances each; max abs err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
              + f"; {elapsed:.1f}s")


# ---------------------------------------------------------------- 5


def test_identity_at_init():
    rng = np.random.default_rng(5)
    worst = 0.0
    cases = 0
    for arrangement in ARRANGEMENTS:
        for it in range(100):
            partition = "adaptive" if it % 2 else "fixed:4"
            config = BlockConfig(arrangement=arrangement, partition=partition,
                                 regions=6 if partition == "adaptive" else 4, stages=(1,))
            h, w, d = 4 + 2 * (it % 3), 4, 8
            params = RfcBlockParams.init(rng, h, w, d, config)
            F = rng.normal(0, 3, (2, h, w, d))
            E, _ = rfc_block_forward(F, config, params, training=bool(it % 2))
            worst = max(worst, float(np.abs(E.data - F).max()))
            cases += 1
    criterion("identity at init", worst <= 1e-15,
              f"{cases} inputs over arrangements {', '.join(ARRANGEMENTS)}; max |E - F| = {worst:.1e}")


# ---------------------------------------------------------------- 6


def test_metric_correctness():
    start = time.perf_counter()
    # hand case: 1 query, 6 gallery items, matches at ranks 2 and 5
    q = np.array([[1.0, 0.0]])
    angles = np.deg2rad([10, 20, 30, 40, 50, 60])
    g = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    ids = np.array([9, 1, 9, 9, 1, 9])
    hand = evaluate(q, [1], [0], GallerySet(g, ids, np.ones(6, dtype=int)), k_max=6)
    hand_ok = hand.mAP == 0.45
    rng = np.random.default_rng(6)
    mismatches = 0
    for it in range(50):
        gsize = int(rng.integers(5, 101))
        d = int(rng.integers(2, 8))
        nq = int(rng.integers(1, 11))
        ids_g = rng.integers(0, 6, gsize)
        cams_g = rng.integers(0, 3, gsize)
        ids_q = rng.integers(0, 6, nq)
        cams_q = rng.integers(0, 3, nq)
        if it % 2:  # small integer features produce exact distance ties
            gf = rng.integers(-2, 3, (gsize, d)).astype(float)
            qf = rng.integers(-2, 3, (nq, d)).astype(float)
        else:
            gf = rng.normal(0, 1, (gsize, d))
            qf = rng.normal(0, 1, (nq, d))
        k_max = min(10, gsize)
        ref_map, ref_cmc, _ = oracles.brute_force_eval(qf, ids_q, cams_q, gf, ids_g, cams_g, k_max)
        if ref_map is None:
            continue
        res = evaluate(qf, ids_q, cams_q, GallerySet(gf, ids_g, cams_g), k_max=k_max)
        if res.mAP != ref_map or list(res.cmc) != ref_cmc:
            mismatches += 1
    elapsed = time.perf_counter() - start
    ok = hand_ok and mismatches == 0 and elapsed <= 5
    criterion("metric correctness", ok,
              f"hand case AP {hand.mAP!r} (expect 0.45); {mismatches} mismatches vs brute force on 50 "
              f"instances; {elapsed:.2f}s")


# ---------------------------------------------------------------- 7


def test_loss_weight_defaults():
    weights = LossWeights()
    defaults_ok = (weights.lambda1, weights.lambda2, weights.lambda3) == (0.1, 0.5, 0.05)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        parts = dict(zip(("ce", "triplet", "keypoints", "foreground", "appearance_reg", "position_reg"),
                         rng.uniform(0, 10, 6)))
        report = total_loss(parts, weights)
        expect = ((parts["ce"] + parts["triplet"]) + 0.1 * parts["keypoints"] + 0.5 * parts["foreground"]
                  + 0.05 * (parts["appearance_reg"] + parts["position_reg"]))
        worst = max(worst, abs(report.total - expect))
    ones = total_loss(dict.fromkeys(("ce", "triplet", "keypoints", "foreground", "appearance_reg",
                                     "position_reg"), 1.0), weights).total
    ok = defaults_ok and worst <= 1e-15 and abs(ones - 2.7) <= 1e-15
    criterion("loss-weight defaults", ok,
              f"defaults {(weights.lambda1, weights.lambda2, weights.lambda3)}; max |total - formula| "
              f"{worst:.1e} over 1000 draws; all-ones total {ones!r}")


# ---------------------------------------------------------------- 8


@pytest.mark.slow
def test_directional_experiment():
    start = time.perf_counter()
    gaps, rows = [], []
    base = RunConfig()
    queries, gallery = evaluation_split(base)
    for seed in (0, 1, 2):
        scores = {}
        for label, stages in (("baseline", ()), ("rfc", (2, 3))):
            config = base.replace(seed=seed, stages=stages, arrangement="st")
            model, _ = train(config)
            scores[label] = evaluate_model(model, queries, gallery, config.eval_clip).mAP
        gaps.append(scores["rfc"] - scores["baseline"])
        rows.append(f"seed {seed}: rfc {scores['rfc']:.4f} baseline {scores['baseline']:.4f}")
    elapsed = time.perf_counter() - start
    mean_gap = float(np.mean(gaps))
    ok = mean_gap >= 0.05 and elapsed <= 600
    criterion("directional desk-scale experiment", ok,
              f"{base.num_identities} identities, query occlusion {base.query_occlusion}; "
              + "; ".join(rows) + f"; mean gap {100 * mean_gap:.2f} mAP points (need >= 5); {elapsed:.0f}s")


# ---------------------------------------------------------------- 9


def test_determinism():
    with tempfile.TemporaryDirectory() as tmp:
        logs = []
        for run in ("a", "b"):
            config = RunConfig(seed=7, epochs=2, out=str(Path(tmp) / run))
            cmd_train(config, out=lambda *_: None)
            logs.append((Path(tmp) / run / "loss_log.csv").read_bytes())
        same = logs[0] == logs[1]
        lines = logs[0].count(b"\n") - 1
    criterion("determinism", same and lines > 0,
              f"two seed-7 runs of cmd_train, {lines} logged steps each, byte-identical logs {same}")


if __name__ == "__main__":
    failures = 0
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            try:
                fn()
            except AssertionError:
                failures += 1
    print(f"{len(RESULTS) - failures}/{len(RESULTS)} criteria passed")
    sys.exit(1 if failures else 0)
