"""Command-line driver: search, params, ensemble, metrics, pareto.

Exit codes: 0 success, 2 usage/validation error, 3 evaluator failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from .archmodel import InvalidGenomeError, build_plan, describe
from .evaluator import (
    EvaluationError, ProtocolError, SurrogateEvaluator, WorkerClient, WorkerPool,
)
from .genome import Genome, default_search_space
from .moead import Search, SearchConfig, search_from_state, search_state_to_json, select_final
from .objectives import dice_coefficient
from .volume import (
    MetricUndefinedError, SvolError, argmax_labels,
    average_probability_maps, keep_largest_component, majority_vote,
    read_probability_map, read_volume, surface_distance_metrics, write_volume, arvd,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_EVALUATOR = 3
EXIT_IO = 4


class UsageError(Exception):
    pass


def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON: {exc}") from exc


def _parse_shape(text: str) -> tuple:
    parts = text.replace("x", ",").split(",")
    try:
        shape = tuple(int(p) for p in parts if p != "")
    except ValueError as exc:
        raise UsageError(f"bad shape {text!r}; use e.g. 128x128 or 96,96,16") from exc
    if not shape:
        raise UsageError(f"bad shape {text!r}")
    return shape


def _archive_json(search: Search) -> dict:
    return {
        "dim": search.cfg.dim,
        "entries": [
            {
                "genome": e.genome.to_json(),
                "f1": e.objectives.f1,
                "f2": e.objectives.f2,
                "eval": e.result.to_json(),
            }
            for e in search.archive.sorted_entries()
        ],
    }


# -- search --------------------------------------------------------------------


def _make_evaluator(args, dims_shape):
    if args.evaluator == "surrogate":
        return SurrogateEvaluator(input_shape=None)
    if args.evaluator == "subprocess":
        if not args.worker_cmd:
            raise UsageError("--worker-cmd is required with --evaluator subprocess")
        clients = [WorkerClient(args.worker_cmd, timeout=args.eval_timeout)
                   for _ in range(max(1, args.workers))]
        return WorkerPool(clients)
    raise UsageError(f"unknown evaluator {args.evaluator!r}")


def _run_one_dim(cfg: SearchConfig, args, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    space = default_search_space(cfg.dim)
    evaluator = _make_evaluator(args, cfg.resolved_input_shape())
    checkpoint_path = os.path.join(out_dir, "checkpoint.json")
    history_path = os.path.join(out_dir, "history.jsonl")
    config_path = os.path.join(out_dir, "config.json")

    state = None
    if args.resume:
        if not os.path.exists(checkpoint_path):
            raise UsageError(f"{checkpoint_path}: no checkpoint to resume from")
        state = _load_json(checkpoint_path)
    else:
        _dump_json(cfg.to_json(), config_path)

    try:
        search = search_from_state(cfg, space, evaluator, state, args.workers) \
            if state is not None else Search(cfg, space, evaluator, args.workers)

        def on_generation(s: Search):
            _dump_json(search_state_to_json(s), checkpoint_path)
            with open(history_path, "w", encoding="utf-8") as f:
                for row in s.history:
                    f.write(json.dumps(row, sort_keys=True) + "\n")
            if args.stop_after_generation is not None \
                    and s.generation >= args.stop_after_generation \
                    and not s.finished:
                log.info("stopping after generation %d as requested", s.generation)
                raise _StopRequested()

        try:
            search.run(on_generation)
        except _StopRequested:
            return {"stopped": True, "generation": search.generation}
    finally:
        close = getattr(evaluator, "close", None)
        if close:
            close()

    _dump_json(_archive_json(search), os.path.join(out_dir, "archive.json"))
    best = select_final(search.archive, cfg)
    selected = {
        "genome": best.genome.to_json(),
        "f1": best.objectives.f1,
        "f2": best.objectives.f2,
        "eval": best.result.to_json(),
    }
    return {
        "stopped": False,
        "selected": selected,
        "archive_size": len(search.archive),
        "evaluations": search.eval_calls,
    }


class _StopRequested(Exception):
    pass


def cmd_search(args) -> int:
    out_dir = args.out
    if args.resume:
        out_dir = args.resume

    if args.resume:
        # both single-dim (config.json at top) and dual-dim (per-dim subdirs)
        if os.path.exists(os.path.join(out_dir, "config.json")):
            dim_dirs = {None: out_dir}
        else:
            dim_dirs = {d: os.path.join(out_dir, d) for d in ("2d", "3d")
                        if os.path.exists(os.path.join(out_dir, d, "config.json"))}
            if not dim_dirs:
                raise UsageError(f"{out_dir}: nothing to resume")
    else:
        if not args.config:
            raise UsageError("--config is required unless resuming")
        if not out_dir:
            raise UsageError("--out is required unless resuming")
        dim_dirs = None

    manifest_path = os.path.join(out_dir, "run_manifest.json")
    if args.resume and os.path.exists(manifest_path):
        # the config snapshot and creation time are immutable across resumes
        manifest = _load_json(manifest_path)
        manifest.setdefault("artifacts", {})
    else:
        manifest = {
            "run_id": os.path.basename(os.path.normpath(out_dir)),
            "phase": "search",
            "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "artifacts": {},
        }

    if args.resume:
        runs = []
        for dim_key, d in dim_dirs.items():
            cfg = SearchConfig.from_json(_load_json(os.path.join(d, "config.json")))
            runs.append((cfg, d))
    else:
        base_cfg = _load_json(args.config)
        if args.dim in ("2d", "3d"):
            dims = [args.dim]
        elif args.dim is None and "dim" in base_cfg:
            dims = [base_cfg["dim"]]
        else:
            dims = ["2d", "3d"]
        runs = []
        for dim in dims:
            cfg_obj = dict(base_cfg)
            cfg_obj["dim"] = dim
            shape = cfg_obj.get("input_shape")
            if shape is not None and len(shape) != (2 if dim == "2d" else 3):
                # a config shape only applies to its matching dimensionality;
                # the other run falls back to the per-dim default
                cfg_obj["input_shape"] = None
            cfg = SearchConfig.from_json(cfg_obj)
            if args.seed is not None:
                cfg.seed = args.seed
            if args.fold is not None:
                cfg.fold = args.fold
            elif "fold" not in base_cfg:
                # seeded random fold choice, shared across dims
                cfg.fold = int(np.random.default_rng(cfg.seed).integers(cfg.n_folds))
            run_dir = os.path.join(out_dir, dim) if len(dims) > 1 else out_dir
            runs.append((cfg, run_dir))
        manifest["fold"] = runs[0][0].fold
        manifest["config"] = base_cfg

    stopped = False
    for cfg, run_dir in runs:
        outcome = _run_one_dim(cfg, args, run_dir)
        if outcome["stopped"]:
            stopped = True
            print(json.dumps({"status": "stopped", "run_dir": run_dir,
                              "generation": outcome["generation"]}))
            continue
        sel_path = os.path.join(out_dir, f"selected_{cfg.dim}.json")
        _dump_json(outcome["selected"], sel_path)
        manifest["artifacts"][f"selected_{cfg.dim}"] = sel_path
        manifest["artifacts"][f"archive_{cfg.dim}"] = os.path.join(run_dir, "archive.json")
        print(json.dumps({
            "status": "done",
            "dim": cfg.dim,
            "run_dir": run_dir,
            "archive_size": outcome["archive_size"],
            "evaluations": outcome["evaluations"],
            "selected_f1": outcome["selected"]["f1"],
            "selected_params": outcome["selected"]["eval"]["param_count"],
        }))
    if not stopped:
        _dump_json(manifest, manifest_path)
    return EXIT_OK


# -- params --------------------------------------------------------------------


def cmd_params(args) -> int:
    obj = _load_json(args.genome)
    genome = Genome.from_json(obj)
    input_shape = _parse_shape(args.input_shape) if args.input_shape else None
    try:
        plan = build_plan(genome, args.dim, input_shape,
                          in_channels=args.in_channels, n_classes=args.classes)
    except InvalidGenomeError as exc:
        for v in exc.violations:
            print(f"violation: {v}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(describe(plan), indent=2))
    return EXIT_OK


# -- ensemble ------------------------------------------------------------------


def cmd_ensemble(args) -> int:
    fold_labels = []
    for pair in args.pair:
        maps = [read_probability_map(p) for p in pair]
        fold_labels.append(argmax_labels(average_probability_maps(maps)))
    voted = majority_vote(fold_labels, allow_even=args.allow_even)
    if int(voted.data.max(initial=0)) <= 1:
        voted = keep_largest_component(voted, connectivity=args.connectivity)
    else:
        log.warning("skipping largest-component post-processing: "
                    "segmentation has more than 2 classes")
    write_volume(voted, args.out)
    print(json.dumps({"out": args.out, "foreground_voxels": int(voted.data.sum())}))
    return EXIT_OK


# -- metrics -------------------------------------------------------------------


def cmd_metrics(args) -> int:
    pred = read_volume(args.pred)
    truth = read_volume(args.truth)
    if pred.dims != truth.dims:
        raise UsageError(f"dims mismatch: {pred.dims} vs {truth.dims}")
    report = {"dsc": dice_coefficient(pred, truth)}
    try:
        hd95, abd = surface_distance_metrics(pred, truth)
        report["hd95"] = hd95
        report["abd"] = abd
    except MetricUndefinedError:
        report["hd95"] = None
        report["abd"] = None
    try:
        report["arvd"] = arvd(pred, truth)
    except MetricUndefinedError:
        report["arvd"] = None
    print(json.dumps(report, indent=2))
    return EXIT_OK


# -- pareto --------------------------------------------------------------------


def _scatter_svg(points: list[tuple], path: str, width=640, height=480, margin=56):
    xs = [p[1] for p in points]  # f2 on x
    ys = [p[0] for p in points]  # f1 on y
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def sx(v):
        return margin + (v - x_lo) / x_span * (width - 2 * margin)

    def sy(v):
        return height - margin - (v - y_lo) / y_span * (height - 2 * margin)

    rows = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-size="13">parameter count (f2)</text>',
        f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 14 {height / 2:.1f})">segmentation error (f1)</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        xv = x_lo + frac * x_span
        yv = y_lo + frac * y_span
        rows.append(f'<text x="{sx(xv):.1f}" y="{height - margin + 18}" '
                    f'text-anchor="middle" font-size="11">{xv:.3g}</text>')
        rows.append(f'<text x="{margin - 8}" y="{sy(yv) + 4:.1f}" '
                    f'text-anchor="end" font-size="11">{yv:.3g}</text>')
    for f1, f2 in points:
        rows.append(f'<circle cx="{sx(f2):.2f}" cy="{sy(f1):.2f}" r="3.5" '
                    f'fill="steelblue" fill-opacity="0.75"/>')
    rows.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(rows) + "\n")


def cmd_pareto(args) -> int:
    archive_path = args.archive or os.path.join(args.run, "archive.json")
    obj = _load_json(archive_path)
    entries = obj.get("entries", [])
    if not entries:
        raise UsageError(f"{archive_path}: archive is empty")
    if args.csv:
        import csv
        with open(args.csv, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["f1", "f2", "n_blocks", "base_filters", "k1", "k2", "k3",
                        "activation", "merge", "dropout", "lr"])
            for e in entries:
                g = e["genome"]
                w.writerow([e["f1"], e["f2"], g["n_blocks"], g["base_filters"],
                            g["k1"], g["k2"], g["k3"], g["activation"], g["merge"],
                            g["dropout"], g["lr"]])
    if args.svg:
        _scatter_svg([(e["f1"], e["f2"]) for e in entries], args.svg)
    print(json.dumps({"entries": len(entries),
                      "csv": args.csv or None, "svg": args.svg or None}))
    return EXIT_OK


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moenas",
        description="Multiobjective evolutionary architecture search for "
                    "2D/3D encoder-decoder segmentation networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run the evolutionary search")
    p.add_argument("--config", help="search config JSON")
    p.add_argument("--out", help="run directory to create")
    p.add_argument("--resume", help="existing run directory to resume")
    p.add_argument("--evaluator", choices=["surrogate", "subprocess"],
                   default="surrogate")
    p.add_argument("--worker-cmd", help="worker command line (subprocess evaluator)")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel evaluation workers")
    p.add_argument("--dim", choices=["2d", "3d", "both"], default=None,
                   help="override the config dimensionality")
    p.add_argument("--fold", type=int, default=None,
                   help="fold id passed to the evaluator (default: seeded random)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--eval-timeout", type=float, default=3600.0,
                   help="per-request worker timeout in seconds")
    p.add_argument("--stop-after-generation", type=int, default=None,
                   help="checkpoint and exit after this many generations")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("params", help="expand a genome and count parameters")
    p.add_argument("--genome", required=True, help="genome JSON file")
    p.add_argument("--dim", choices=["2d", "3d"], required=True)
    p.add_argument("--input-shape", help="e.g. 128x128 or 96x96x16")
    p.add_argument("--in-channels", type=int, default=1)
    p.add_argument("--classes", type=int, default=2)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("ensemble", help="average per-fold probability maps, vote, post-process")
    p.add_argument("--pair", nargs=2, action="append", required=True,
                   metavar=("MAP_A", "MAP_B"),
                   help="two probability-map index JSONs for one fold (repeat per fold)")
    p.add_argument("--out", required=True, help="output label SVOL")
    p.add_argument("--connectivity", type=int, choices=[6, 26], default=26)
    p.add_argument("--allow-even", action="store_true",
                   help="permit an even number of folds")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("metrics", help="segmentation metric report")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("pareto", help="dump/plot an archive as CSV and SVG")
    p.add_argument("--run", help="run directory containing archive.json")
    p.add_argument("--archive", help="explicit archive.json path")
    p.add_argument("--csv", help="CSV output path")
    p.add_argument("--svg", help="SVG scatter output path")
    p.set_defaults(func=cmd_pareto)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "pareto" and not (args.run or args.archive):
        parser.error("pareto needs --run or --archive")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidGenomeError as exc:
        print(f"invalid genome: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EvaluationError, ProtocolError) as exc:
        print(f"evaluator failure: {exc}", file=sys.stderr)
        return EXIT_EVALUATOR
    except SvolError as exc:
        print(f"volume I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
