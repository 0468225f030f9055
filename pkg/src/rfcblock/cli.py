"""Command-line interface.

Subcommands: gradcheck, train, eval, inspect, ablate, generate.
Exit codes: 0 success, 1 validation error, 2 numeric or tolerance failure,
3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import sys
from pathlib import Path

import numpy as np

from . import rfct
from . import tensor as tn
from .block import BlockConfig
from .errors import NumericError, RFCTFormatError, ValidationError
from .gradcheck import TOLERANCE, check_parameters, tiny_case
from .evaluation import GallerySet, write_rankings
from .synthdata import export_dataset, generate_tracklet
from .training import (
    RunConfig,
    build_config,
    embed_all,
    evaluate_model,
    evaluation_split,
    load_run,
    load_split,
    read_config_file,
    save_run,
    train,
)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value file; flags override it")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--arrangement", choices=["st", "ts", "s+t", "s", "t"])
    parser.add_argument("--regions", type=int)
    parser.add_argument("--clusters", type=int)
    parser.add_argument("--partition", help="adaptive or fixed:P")
    parser.add_argument("--stages", help="comma list of insertion stages; 'none' for the baseline")
    parser.add_argument("--lambda1", type=float)
    parser.add_argument("--lambda2", type=float)
    parser.add_argument("--lambda3", type=float)
    parser.add_argument("--margin", type=float)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--out")


_CONFIG_FLAGS = ("seed", "arrangement", "regions", "clusters", "partition", "stages",
                 "lambda1", "lambda2", "lambda3", "margin", "epochs", "out")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rfcblock", description="Region feature completion toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gradcheck", help="reverse-mode vs finite differences on a tiny model")
    _common(p)
    p.add_argument("--frames", type=int, default=None, help="frames per sequence (default 2, 1 for 's')")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--corrupt", metavar="PARAM", help=argparse.SUPPRESS)

    p = sub.add_parser("train", help="train the toy model, write loss log and checkpoint")
    _common(p)

    p = sub.add_parser("eval", help="retrieval mAP / CMC of a trained run")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="run directory written by train")
    p.add_argument("--dataset", help="manifest.csv from generate; default regenerates the split")
    p.add_argument("--rankings", help="optional CSV with the full ranking")
    p.add_argument("--k-max", type=int, default=10)

    p = sub.add_parser("inspect", help="dump intermediate block tensors for one tracklet")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--identity", type=int, default=0)
    p.add_argument("--tracklet", type=int, default=0)
    p.add_argument("--occlusion", type=float, default=None, help="per-frame occlusion probability")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--stage", type=int, default=None, help="block to dump (default: first)")

    p = sub.add_parser("ablate", help="train and evaluate a grid of configurations")
    _common(p)
    p.add_argument("--grid-arrangement", default=None, help="e.g. st,ts,s+t")
    p.add_argument("--grid-partition", default=None, help="e.g. adaptive,fixed:4,fixed:6")
    p.add_argument("--grid-stages", default=None, help="';'-separated stage lists, e.g. '2,3;none'")
    p.add_argument("--grid-loss", default=None, help="subset of full,no-lk,no-lf,no-reg")

    p = sub.add_parser("generate", help="export the synthetic benchmark as RFCT + manifest")
    _common(p)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    flags = {k: getattr(args, k, None) for k in _CONFIG_FLAGS}
    return build_config(file_values, flags)


# ---------------------------------------------------------------- commands


def cmd_gradcheck(config: RunConfig, frames: int | None = None, eps: float = 1e-5,
                  backward_hook=None, out=print) -> int:
    """Per-parameter max relative error; returns the exit code."""
    block = BlockConfig(config.arrangement, config.regions, config.clusters, config.partition, (1,))
    if frames is None:
        frames = 1 if config.arrangement == "s" else 2
    case = tiny_case(seed=config.seed, block=block, frames=frames, weights=config.loss_weights())
    errors = check_parameters(case, eps=eps, backward_hook=backward_hook)
    worst = None
    for name, err in errors.items():
        ok = err <= TOLERANCE
        out(f"{name} {err:.3e} {'ok' if ok else 'FAIL'}")
        if not ok and (worst is None or err > errors[worst]):
            worst = name
    if worst is not None:
        out(f"gradcheck FAILED: {worst} max rel err {errors[worst]:.3e} > {TOLERANCE:g}")
        return EXIT_NUMERIC
    out(f"gradcheck passed: {len(errors)} parameters within {TOLERANCE:g}")
    return EXIT_OK


def cmd_train(config: RunConfig, out=print) -> Path:
    directory = Path(config.out)
    directory.mkdir(parents=True, exist_ok=True)
    log_path = directory / "loss_log.csv"
    with open(log_path, "w") as fh:
        model, reports = train(config, log=lambda line: fh.write(line + "\n"))
    save_run(directory, config, model)
    last = f", final total {reports[-1].total!r}" if reports else ""
    out(f"trained {len(reports)} steps{last}; wrote {log_path} and {directory / 'checkpoint'}")
    return directory


def cmd_eval(run_dir, dataset=None, rankings=None, k_max: int = 10, out=print):
    config, model = load_run(run_dir)
    queries, gallery = load_split(dataset) if dataset else evaluation_split(config)
    result = evaluate_model(model, queries, gallery, config.eval_clip, k_max)
    for line in result.lines():
        out(line)
    if rankings:
        q = embed_all(model, queries, config.eval_clip)
        gal = GallerySet(embed_all(model, gallery, config.eval_clip),
                         np.array([t.identity for t in gallery]), np.array([t.camera for t in gallery]))
        write_rankings(rankings, q, [t.identity for t in queries], [t.camera for t in queries], gal)
    return result


def _occluded_regions(masks: np.ndarray, occlusion: np.ndarray, image_h: int) -> np.ndarray:
    """(T, N) flags: more than half of the region's cells lie under the occluder."""
    t, n, h, _ = masks.shape
    flags = np.zeros((t, n), dtype=bool)
    for k in range(t):
        fraction, start = occlusion[k]
        if fraction <= 0:
            continue
        rows = int(round(fraction * image_h))
        covered = np.zeros(h, dtype=bool)
        covered[int(start) * h // image_h:-(-(int(start) + rows) * h // image_h)] = True
        for i in range(n):
            area = masks[k, i].sum()
            if area > 0:
                flags[k, i] = masks[k, i][covered].sum() > 0.5 * area
    return flags


def cmd_inspect(run_dir, out_dir, identity: int = 0, tracklet: int = 0, occlusion: float | None = None,
                frames: int | None = None, stage: int | None = None, out=print) -> dict:
    config, model = load_run(run_dir)
    if not model.blocks:
        raise ValidationError("this run has no RFC blocks to inspect")
    stage = min(model.blocks) if stage is None else stage
    if stage not in model.blocks:
        raise ValidationError(f"no block at stage {stage}; have {sorted(model.blocks)}")
    prob = config.query_occlusion if occlusion is None else occlusion
    sample = generate_tracklet(identity, config.synth_config(), tracklet=tracklet,
                               occlusion_prob=prob, frames=frames)
    with tn.no_grad():
        _, _, diag = model.forward(sample.images[None], training=False)
    d = diag[stage]
    dumps = {
        "f": d.extracted, "o": d.srfc_output, "e": d.trfc_output,
        "foreground": d.foreground, "masks": d.masks.masks,
    }
    if d.bundle is not None:
        b = d.bundle
        dumps.update(S_A=b.appearance, S_P=b.position, S=b.combined, A=b.encoding, B=b.decoding)
    if d.trace is not None:
        dumps.update(alpha=d.trace.alpha, g=d.trace.gates)
    arrays = {}
    for name, value in dumps.items():
        if value is None:
            continue
        arr = np.asarray(getattr(value, "data", value), dtype=np.float64)[0]
        arrays[name] = arr
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, arr in arrays.items():
        rfct.save(out_dir / f"{name}.rfct", arr)
    out(f"wrote {len(arrays)} tensors to {out_dir}")
    if "g" in arrays:
        occluded = _occluded_regions(arrays["masks"], sample.occlusion, config.height)
        gate = arrays["g"].mean(axis=-1)
        if occluded.any() and (~occluded).any():
            occ, vis = float(gate[occluded].mean()), float(gate[~occluded].mean())
            out(f"mean gate occluded {occ!r} visible {vis!r}")
            arrays["_gate_summary"] = np.array([occ, vis])
        else:
            out("mean gate: sample lacks either occluded or visible regions")
    return arrays


_LOSS_ABLATIONS = {
    "full": {},
    "no-lk": {"lambda1": 0.0},
    "no-lf": {"lambda2": 0.0},
    "no-reg": {"lambda3": 0.0},
}


def _split(text, sep=","):
    return [v.strip() for v in text.split(sep) if v.strip()]


def ablation_grid(config: RunConfig, arrangements=None, partitions=None, stages=None, losses=None):
    """Cartesian product of the requested axes; axes left as None use the base config."""
    arrangements = _split(arrangements) if arrangements else [config.arrangement]
    partitions = _split(partitions) if partitions else [config.partition]
    stage_lists = _split(stages, ";") if stages else [",".join(map(str, config.stages)) or "none"]
    losses = _split(losses) if losses else ["full"]
    for name in losses:
        if name not in _LOSS_ABLATIONS:
            raise ValidationError(f"unknown loss ablation {name!r}; pick from {sorted(_LOSS_ABLATIONS)}")
    cells = []
    for arr, part, st, loss in itertools.product(arrangements, partitions, stage_lists, losses):
        regions = 6 if part == "adaptive" else int(part.split(":", 1)[1]) if ":" in part else config.regions
        cell = config.replace(arrangement=arr, partition=part, regions=regions,
                              clusters=min(config.clusters, max(regions - 1, 1)), stages=st,
                              **_LOSS_ABLATIONS[loss])
        cells.append((arr, part, st, loss, cell))
    return cells


def cmd_ablate(config: RunConfig, arrangements=None, partitions=None, stages=None, losses=None,
               out=print) -> Path:
    directory = Path(config.out)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "ablation.csv"
    queries, gallery = evaluation_split(config)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arrangement", "partition", "regions", "stages", "loss", "mAP", "top1"])
        for arr, part, st, loss, cell in ablation_grid(config, arrangements, partitions, stages, losses):
            model, _ = train(cell)
            result = evaluate_model(model, queries, gallery, cell.eval_clip)
            row = [arr, part, cell.regions, st, loss, repr(result.mAP), repr(float(result.cmc[0]))]
            writer.writerow(row)
            out(",".join(map(str, row)))
    out(f"wrote {path}")
    return path


def cmd_generate(config: RunConfig, out=print) -> Path:
    manifest = export_dataset(config.out, config.synth_config(), config.query_occlusion,
                              config.gallery_occlusion)
    out(f"wrote {manifest}")
    return manifest


# ---------------------------------------------------------------- entry point


def _corrupting_hook(name):
    def hook(model):
        for p in model.parameters():
            if p.name == name:
                p.grad = p.grad * 1.5 + 1e-3
                return
        raise ValidationError(f"--corrupt: no parameter named {name!r}")
    return hook


def run(argv=None) -> int:
    args = make_parser().parse_args(argv)
    config = resolve_config(args)
    if args.command == "gradcheck":
        hook = _corrupting_hook(args.corrupt) if args.corrupt else None
        return cmd_gradcheck(config, frames=args.frames, eps=args.eps, backward_hook=hook)
    if args.command == "train":
        cmd_train(config)
    elif args.command == "eval":
        cmd_eval(args.checkpoint, args.dataset, args.rankings, args.k_max)
    elif args.command == "inspect":
        cmd_inspect(args.checkpoint, Path(config.out) / "inspect", args.identity, args.tracklet,
                    args.occlusion, args.frames, args.stage)
    elif args.command == "ablate":
        cmd_ablate(config, args.grid_arrangement, args.grid_partition, args.grid_stages, args.grid_loss)
    elif args.command == "generate":
        cmd_generate(config)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RFCTFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
