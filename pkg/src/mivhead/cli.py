"""Command-line entry point.

Subcommands:

* ``synth``     generate a synthetic pack plus a tasks.jsonl from a config
* ``run``       evaluate one method (miv / ncc / cosine) on a task list
* ``ablate``    run a grid of head-config variants, one results file each
* ``gradcheck`` run the gradient suite; nonzero exit on failure
* ``report``    aggregate results files into report.txt / report.json

Exit codes: 0 success, 1 internal failure, 2 usage error. All randomness
derives from a single ``--seed`` through sha256-based sub-seeds
(`adapt.derive_seed`). Output directories are staged in a temp dir and
renamed into place, so partial outputs are never left behind.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import shutil
import sys
import tempfile
from dataclasses import asdict

import numpy as np

from . import __version__
from . import adapt, head, stats
from .adapt import derive_seed
from .episodes import (SampleParams, SynthConfig, read_tasks, sample_tasks,
                       synth_generate, write_tasks)
from .fmpack import read_pack


def _write_json(path: str, payload) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _resolved_config(payload: dict) -> dict:
    return {"tool_version": __version__, **payload}


def _load_head_config(path: str | None, pack) -> head.HeadConfig:
    shapes = {bid: pack.block_shape(bid) for bid in pack.block_ids}
    if path is None:
        return head.default_config(shapes, pack.backbone_family)
    with open(path, encoding="utf-8") as fh:
        return head.config_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        raw = json.load(fh)
    synth_kw = dict(raw["synth"])
    task_kw = dict(raw.get("tasks", {}))
    if args.seed is not None:
        synth_kw["seed"] = derive_seed(args.seed, "synth")
        synth_kw.setdefault("map_seed", derive_seed(args.seed, "maps"))
        task_seed = derive_seed(args.seed, "tasks")
    else:
        task_seed = task_kw.pop("seed", 0)
    cfg = SynthConfig(**synth_kw)
    n_tasks = task_kw.pop("n_tasks", 100)
    mode = task_kw.pop("mode", "varying")
    task_kw.pop("seed", None)
    params = SampleParams(**task_kw)

    parent = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(parent, exist_ok=True)
    staging = tempfile.mkdtemp(prefix=".synth-", dir=parent)
    try:
        pack = synth_generate(cfg, os.path.join(staging, "pack"))
        tasks = sample_tasks(pack, n_tasks, mode, params, seed=task_seed)
        write_tasks(tasks, os.path.join(staging, "tasks.jsonl"))
        _write_json(os.path.join(staging, "config.resolved.json"),
                    _resolved_config({
                        "synth": asdict(cfg),
                        "tasks": {"n_tasks": n_tasks, "mode": mode,
                                  "seed": task_seed, **asdict(params)},
                        "seed": args.seed,
                    }))
        if os.path.exists(args.out):
            raise RuntimeError(f"output directory {args.out!r} already exists")
        os.rename(staging, args.out)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    print(f"wrote pack + {len(tasks)} tasks to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _write_results(rows: list[dict], out_path: str) -> None:
    """results.jsonl next to traces.jsonl; loss traces are referenced."""
    base = os.path.dirname(os.path.abspath(out_path)) or "."
    os.makedirs(base, exist_ok=True)
    stem = os.path.basename(out_path)
    for suffix in (".results.jsonl", ".jsonl"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
            break
    traces_name = stem + ".traces.jsonl"
    traces_path = os.path.join(base, traces_name)
    have_traces = any("loss_trace" in r for r in rows)
    tmp_r, tmp_t = out_path + ".tmp", traces_path + ".tmp"
    with open(tmp_r, "w", encoding="utf-8") as fr:
        ft = open(tmp_t, "w", encoding="utf-8") if have_traces else None
        try:
            for row in rows:
                row = dict(row)
                trace = row.pop("loss_trace", None)
                if trace is not None:
                    ft.write(json.dumps({"task_id": row["task_id"],
                                         "loss_trace": trace},
                                        sort_keys=True) + "\n")
                    row["loss_trace_ref"] = f"{traces_name}#{row['task_id']}"
                fr.write(json.dumps(row, sort_keys=True) + "\n")
        finally:
            if ft is not None:
                ft.close()
    os.replace(tmp_r, out_path)
    if have_traces:
        os.replace(tmp_t, traces_path)


def cmd_run(args) -> int:
    pack = read_pack(args.pack)
    tasks = read_tasks(args.tasks)
    method = {"name": args.method}
    if args.block_id is not None:
        method["block_id"] = args.block_id
    cfg = None
    if args.method == "miv":
        cfg = _load_head_config(args.head_config, pack)
    rows = adapt.run_suite(args.pack, tasks, method, cfg,
                           workers=args.workers, seed=args.seed or 0)
    _write_results(rows, args.out)
    _write_json(args.out + ".config.json", _resolved_config({
        "method": method,
        "head_config": asdict(cfg) if cfg else None,
        "config_hash": adapt.method_hash(method, cfg),
        "pack": os.path.abspath(args.pack),
        "tasks": os.path.abspath(args.tasks),
        "seed": args.seed or 0,
        "workers": args.workers,
    }))
    mean = float(np.mean([r["accuracy"] for r in rows])) if rows else 0.0
    print(f"{args.method}: {len(rows)} tasks, mean accuracy {mean:.4f}")
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

GRID_AXES = ("n_blocks", "candidates", "cross_attention", "coexcitation",
             "skip_mode", "cas_kind", "augmentation")


def _grid_variant(base: head.HeadConfig, point: dict) -> head.HeadConfig:
    blocks = base.blocks
    if "n_blocks" in point:
        blocks = blocks[-point["n_blocks"]:]
    if "candidates" in point:
        blocks = tuple(
            head.BlockHead(block_id=b.block_id,
                           shapes=b.shapes[-point["candidates"]:],
                           use_cls=b.use_cls, heads=b.heads)
            for b in blocks)
    kw = dict(
        blocks=blocks,
        cross_attention=point.get("cross_attention", base.cross_attention),
        coexcitation=point.get("coexcitation", base.coexcitation),
        skip_mode=point.get("skip_mode", base.skip_mode),
        cas_kind=point.get("cas_kind", base.cas_kind),
    )
    if "augmentation" in point:
        kw["aug_threshold"] = base.aug_threshold if point["augmentation"] else 0
    return head.HeadConfig(**{**asdict(base), **{
        k: v for k, v in kw.items() if k != "blocks"},
        "blocks": blocks, "train": base.train})


def _point_name(point: dict) -> str:
    parts = []
    for key in GRID_AXES:
        if key not in point:
            continue
        val = point[key]
        if isinstance(val, bool):
            val = int(val)
        parts.append(f"{key}-{val}")
    return "_".join(parts) if parts else "base"


def cmd_ablate(args) -> int:
    pack = read_pack(args.pack)
    tasks = read_tasks(args.tasks)
    base = _load_head_config(args.head_config, pack)
    with open(args.grid, encoding="utf-8") as fh:
        grid = json.load(fh)["axes"]
    unknown = set(grid) - set(GRID_AXES)
    if unknown:
        raise RuntimeError(f"unknown grid axes: {sorted(unknown)}")
    keys = sorted(grid)
    points = [dict(zip(keys, combo))
              for combo in itertools.product(*(grid[k] for k in keys))]

    parent = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(parent, exist_ok=True)
    staging = tempfile.mkdtemp(prefix=".ablate-", dir=parent)
    try:
        index = []
        for point in points:
            cfg = _grid_variant(base, point)
            name = _point_name(point)
            rows = adapt.run_suite(args.pack, tasks, {"name": "miv"}, cfg,
                                   workers=args.workers, seed=args.seed or 0)
            _write_results(rows, os.path.join(staging, f"{name}.results.jsonl"))
            index.append({"name": name, "point": point,
                          "config_hash": head.config_hash(cfg),
                          "mean_accuracy": float(np.mean(
                              [r["accuracy"] for r in rows]))})
            print(f"{name}: mean accuracy {index[-1]['mean_accuracy']:.4f}")
        _write_json(os.path.join(staging, "grid.resolved.json"),
                    _resolved_config({
                        "axes": grid, "points": index,
                        "base_head_config": asdict(base),
                        "seed": args.seed or 0,
                    }))
        if os.path.exists(args.out):
            raise RuntimeError(f"output directory {args.out!r} already exists")
        os.rename(staging, args.out)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    worst = 0.0
    failed = False
    for k in range(args.seeds):
        report = adapt.episode_grad_check(seed=1000 + k)
        worst = max(worst, report.max_rel_err)
        status = "ok" if report.passed else "FAIL"
        print(f"episode seed {1000 + k}: {report.n_checked} params, "
              f"max rel err {report.max_rel_err:.3e} [{status}]")
        failed = failed or not report.passed
    print(f"gradcheck summary: max relative error {worst:.3e} over "
          f"{args.seeds} episodes")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args) -> int:
    series = []
    for path in args.inputs:
        rows = stats.load_results_rows(path)
        label = os.path.basename(path)
        for suffix in (".results.jsonl", ".jsonl"):
            if label.endswith(suffix):
                label = label[: -len(suffix)]
                break
        series.append(stats.MethodSeries.from_rows(rows, method=label))
    pairings = []
    for spec in args.pair or []:
        if ":" not in spec:
            raise RuntimeError(f"--pair expects A:B, got {spec!r}")
        a, b = spec.split(":", 1)
        pairings.append((a, b))
    text, payload = stats.render_report(series, pairings,
                                        bold_threshold=args.bold_threshold)

    parent = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(parent, exist_ok=True)
    staging = tempfile.mkdtemp(prefix=".report-", dir=parent)
    try:
        with open(os.path.join(staging, "report.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write(text)
        _write_json(os.path.join(staging, "report.json"), payload)
        if os.path.exists(args.out):
            raise RuntimeError(f"output directory {args.out!r} already exists")
        os.rename(staging, args.out)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mivhead",
        description="few-shot head on frozen feature packs")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    default_workers = int(os.environ.get("MIVHEAD_WORKERS", "1"))

    p = sub.add_parser("synth", help="generate a synthetic pack + tasks")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="run one method over a task list")
    p.add_argument("--pack", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--method", required=True, choices=sorted(adapt.METHODS))
    p.add_argument("--head-config", default=None)
    p.add_argument("--block-id", type=int, default=None,
                   help="baseline block (default: last)")
    p.add_argument("--workers", type=int, default=default_workers)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run a head-config grid")
    p.add_argument("--pack", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--head-config", default=None)
    p.add_argument("--workers", type=int, default=default_workers)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="gradient suite (nonzero exit on fail)")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="aggregate results into a report")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--pair", action="append", default=[],
                   help="A:B series labels to compare (repeatable)")
    p.add_argument("--bold-threshold", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # argparse handles usage errors with exit 2
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
