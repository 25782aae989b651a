"""Command-line benchmark harness: ``fragsolve gen|solve|eval|render``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 partial failure.
``FRAGSOLVE_THREADS`` bounds the number of groups processed concurrently.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .dataset_io import (
    atomic_write_bytes,
    atomic_write_text,
    discover_groups,
    load_group,
    load_solution,
    save_group_2d,
    save_solution,
)
from .metrics import CSV_COLUMNS, MetricsConfig, evaluate
from .puzzle_gen import GenConfig, generate_puzzle, synthetic_image
from .render import render_side_by_side, render_solution
from .solver_genetic import GeneticConfig, solve_genetic
from .solver_greedy import GreedyConfig, solve_greedy

log = logging.getLogger("fragsolve")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PARTIAL = 0, 1, 2, 3
REPORT_COLUMNS = CSV_COLUMNS + ["status"]
METHODS = ("genetic", "greedy")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def thread_budget() -> int:
    raw = os.environ.get("FRAGSOLVE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"FRAGSOLVE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("FRAGSOLVE_THREADS must be >= 1")
    return n


def _map_groups(func, items):
    """Apply ``func`` to every item with a bounded pool; results keep input order."""
    workers = min(thread_budget(), max(len(items), 1))
    if workers == 1:
        return [func(i) for i in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(func, items))


def _write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Configuration: flags > config file > defaults
# ---------------------------------------------------------------------------


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {path}: top level must be an object")
    return data


def build_config(cls, file_section: dict | None, flags: dict):
    """Dataclass ``cls`` from its defaults, overridden by the file section, then by non-None flags."""
    names = {f.name for f in fields(cls)}
    values = {}
    for key, val in (file_section or {}).items():
        if key not in names:
            raise UsageError(f"unknown {cls.__name__} option {key!r} in config file")
        values[key] = val
    values.update({k: v for k, v in flags.items() if v is not None and k in names})
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from None


def _read_split(path, subset: str) -> set[str]:
    """Group names of one subset from a JSON split manifest ``{"train": [...], "test": [...]}``."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"split manifest {path}: {exc}") from None
    if subset not in data:
        raise UsageError(f"split manifest {path} has no subset {subset!r}")
    return set(data[subset])


def _select_groups(dataset, split, subset) -> list[Path]:
    try:
        groups = discover_groups(dataset)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    if split:
        keep = _read_split(split, subset)
        groups = [g for g in groups if g.name in keep]
    if not groups:
        raise DataError(f"no groups found under {dataset}")
    return groups


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def _read_image(path: str) -> np.ndarray:
    if path.startswith("synthetic:"):
        try:
            h, w = (int(v) for v in path.split(":", 1)[1].lower().split("x"))
        except ValueError:
            raise UsageError(f"expected synthetic:HxW, got {path!r}") from None
        return synthetic_image(h, w, seed=0)
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None


def cmd_gen(args) -> int:
    cfg = build_config(
        GenConfig,
        _load_config_file(args.config).get("gen"),
        {
            "n_cuts": args.cuts,
            "erosion_px": args.erosion,
            "erosion_jitter": args.erosion_jitter,
            "drop_fraction": args.drop,
            "seed": args.seed,
            "min_fragment_px": args.min_fragment_px,
        },
    )
    if args.groups < 1:
        raise UsageError("--groups must be >= 1")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    entries = []
    for src in args.images:
        image = _read_image(src)
        stem = "synthetic" if src.startswith("synthetic:") else Path(src).stem
        for k in range(args.groups):
            gcfg = replace(cfg, seed=cfg.seed + k)
            name = stem if args.groups == 1 else f"{stem}_{k:03d}"
            try:
                puzzle = generate_puzzle(image, gcfg, group_id=name)
            except ValueError as exc:
                raise DataError(f"{src}: {exc}") from None
            try:
                save_group_2d(puzzle, out / name)
            except OSError as exc:
                raise DataError(f"cannot write {out / name}: {exc}") from None
            entries.append({"group": name, "source": src, "seed": gcfg.seed, "fragments": len(puzzle)})
            log.info("generated %s (%d fragments)", name, len(puzzle))
    manifest = {"command": "gen", "version": __version__, "config": asdict(cfg), "groups": entries}
    _write_json(out / "manifest_gen.json", manifest)
    return EXIT_OK


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------


def _solver_config(args):
    file_cfg = _load_config_file(args.config)
    threads_flag = args.threads
    if args.method == "genetic":
        return build_config(
            GeneticConfig,
            file_cfg.get("genetic"),
            {
                "population": args.population,
                "generations": args.generations,
                "sigma_t": args.sigma_t,
                "sigma_theta": args.sigma_theta,
                "lambda_bbox": args.lambda_bbox,
                "lambda_overlap": args.lambda_overlap,
                "angle_mean": args.angle_mean,
                "seed": args.seed,
                "threads": threads_flag,
            },
        )
    return build_config(
        GreedyConfig,
        file_cfg.get("greedy"),
        {
            "dp_epsilon": args.dp_epsilon,
            "curvature_threshold": args.curvature_threshold,
            "min_segment_len": args.min_segment_len,
            "top_k": args.top_k,
            "seed": args.seed,
        },
    )


def _solve_one(method, cfg, out: Path, group: Path) -> dict:
    entry = {"group": group.name, "status": "ok"}
    t0 = time.perf_counter()
    try:
        puzzle = load_group(group)
        if method == "genetic":
            res = solve_genetic(puzzle, cfg)
            atomic_write_text(out / f"{group.name}.trace.csv", res.trace_csv())
            entry["fitness"] = res.fitness
        else:
            res = solve_greedy(puzzle, cfg)
            atomic_write_text(out / f"{group.name}.log.jsonl", res.log_jsonl())
            entry["seed_fragment"] = res.seed_fragment
        save_solution(res.solution, out / f"{group.name}.txt")
        entry["solution"] = f"{group.name}.txt"
        entry["unplaced"] = sorted(res.solution.unplaced)
    except Exception as exc:  # one bad group must not stop the batch
        log.error("group %s failed: %s", group.name, exc)
        entry["status"] = "error"
        entry["error"] = f"{type(exc).__name__}: {exc}"
    entry["seconds"] = round(time.perf_counter() - t0, 6)
    return entry


def cmd_solve(args) -> int:
    cfg = _solver_config(args)
    groups = _select_groups(args.dataset, args.split, args.subset)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    entries = _map_groups(lambda g: _solve_one(args.method, cfg, out, g), groups)
    manifest = {
        "command": "solve",
        "version": __version__,
        "dataset": str(Path(args.dataset)),
        "method": args.method,
        "seed": cfg.seed,
        "config": asdict(cfg),
        "groups": entries,
    }
    _write_json(out / "manifest.json", manifest)
    failed = [e["group"] for e in entries if e["status"] != "ok"]
    return EXIT_PARTIAL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _method_name(sol_dir: Path, override: str | None) -> str:
    if override:
        return override
    manifest = sol_dir / "manifest.json"
    if manifest.exists():
        try:
            return json.loads(manifest.read_text()).get("method", sol_dir.name)
        except json.JSONDecodeError:
            pass
    return sol_dir.name


def _nan_row(group: str, method: str, status: str) -> dict:
    row = {c: math.nan for c in CSV_COLUMNS}
    row.update(group=group, method=method, status=status)
    return row


def _eval_one(group: Path, sol_dirs, methods, mcfg) -> list[dict]:
    rows = []
    try:
        puzzle = load_group(group)
    except Exception as exc:
        log.error("group %s: %s", group.name, exc)
        return [_nan_row(group.name, m, "error") for m in methods]
    if puzzle.ground_truth is None:
        log.error("group %s has no ground truth", group.name)
        return [_nan_row(group.name, m, "error") for m in methods]
    for sol_dir, method in zip(sol_dirs, methods):
        path = sol_dir / f"{group.name}.txt"
        if not path.exists():
            rows.append(_nan_row(group.name, method, "missing"))
            continue
        try:
            report = evaluate(load_solution(path), puzzle, mcfg)
        except Exception as exc:
            log.error("group %s, %s: %s", group.name, method, exc)
            rows.append(_nan_row(group.name, method, "error"))
            continue
        row = report.row(group.name, method)
        row["status"] = "ok"
        rows.append(row)
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def cmd_eval(args) -> int:
    mcfg = build_config(
        MetricsConfig,
        _load_config_file(args.config).get("metrics"),
        {
            "neighbor_tau": args.tau,
            "classic_rmse": True if args.classic_rmse else None,
            "rmse_after_anchor": False if args.no_anchor else None,
            "rotation_distance": args.rotation_distance,
        },
    )
    groups = _select_groups(args.dataset, args.split, args.subset)
    sol_dirs = [Path(s) for s in args.solutions]
    for s in sol_dirs:
        if not s.is_dir():
            raise DataError(f"solutions directory {s} not found")
    if args.method and len(args.method) != len(sol_dirs):
        raise UsageError("give one --method per solutions directory")
    methods = [_method_name(s, args.method[i] if args.method else None) for i, s in enumerate(sol_dirs)]
    per_group = _map_groups(lambda g: _eval_one(g, sol_dirs, methods, mcfg), groups)
    rows = [r for rs in per_group for r in rs]
    means = []
    for m in methods:
        ok = [r for r in rows if r["method"] == m and r["status"] == "ok"]
        mean = {"group": "mean", "method": m, "status": f"n={len(ok)}"}
        for c in CSV_COLUMNS[2:]:
            mean[c] = float(np.mean([r[c] for r in ok])) if ok else math.nan
        means.append(mean)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in rows + means:
        writer.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
    text = buf.getvalue()
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    if args.json:
        _write_json(Path(args.json), {"config": asdict(mcfg), "rows": rows, "mean": means})
    bad = [r for r in rows if r["status"] != "ok"]
    if bad and args.strict:
        log.error("%d group/method pairs missing or failed", len(bad))
        return EXIT_PARTIAL
    return EXIT_OK


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------


def cmd_render(args) -> int:
    try:
        puzzle = load_group(args.group)
        solution = load_solution(args.solution)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from None
    if puzzle.dimension != "2D":
        raise DataError("render supports 2D groups only")
    missing = set(puzzle.ids) - set(solution.poses)
    if missing:
        raise DataError(f"solution lacks poses for {sorted(missing)}")
    if args.compare:
        if puzzle.ground_truth is None:
            raise DataError("--compare needs a ground-truth file")
        canvas = render_side_by_side(puzzle, solution, margin=args.margin)
    else:
        canvas = render_solution(puzzle, solution, margin=args.margin)
    buf = io.BytesIO()
    Image.fromarray(canvas, "RGBA").save(buf, format="PNG")
    try:
        atomic_write_bytes(args.out, buf.getvalue())
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc}") from None
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fragsolve", description="Fragment reassembly benchmark harness.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate crossing-cuts puzzles from images")
    g.add_argument("images", nargs="+", help="source images (or synthetic:HxW)")
    g.add_argument("out", help="output dataset directory")
    g.add_argument("--cuts", type=int)
    g.add_argument("--erosion", type=_nonneg_int, help="erosion depth in px")
    g.add_argument("--erosion-jitter", type=float)
    g.add_argument("--drop", type=float, help="fraction of fragments to drop (floor)")
    g.add_argument("--seed", type=int)
    g.add_argument("--min-fragment-px", type=int)
    g.add_argument("--groups", type=int, default=1, help="puzzles per image (consecutive seeds)")
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("solve", help="run a solver on every group")
    s.add_argument("dataset")
    s.add_argument("out")
    s.add_argument("--method", required=True, choices=METHODS)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--split")
    s.add_argument("--subset", default="test")
    s.add_argument("--population", type=int)
    s.add_argument("--generations", type=int)
    s.add_argument("--sigma-t", type=float)
    s.add_argument("--sigma-theta", type=float)
    s.add_argument("--lambda-bbox", type=float)
    s.add_argument("--lambda-overlap", type=float)
    s.add_argument("--angle-mean", choices=("circular", "literal"))
    s.add_argument("--threads", type=int, help="fitness-evaluation threads (genetic)")
    s.add_argument("--dp-epsilon", type=float)
    s.add_argument("--curvature-threshold", type=float)
    s.add_argument("--min-segment-len", type=float)
    s.add_argument("--top-k", type=int)
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("eval", help="score solutions against ground truth")
    e.add_argument("dataset")
    e.add_argument("solutions", nargs="+", help="one or more solution directories")
    e.add_argument("--method", action="append", help="method label per solutions directory")
    e.add_argument("--out", help="CSV path (default: stdout)")
    e.add_argument("--json", help="also write a JSON report")
    e.add_argument("--strict", action="store_true", help="exit nonzero on missing solutions")
    e.add_argument("--tau", type=float, help="neighbour distance threshold")
    e.add_argument("--classic-rmse", action="store_true")
    e.add_argument("--no-anchor", action="store_true", help="skip anchor alignment before RMSE")
    e.add_argument("--rotation-distance", choices=("geodesic", "chordal"))
    e.add_argument("--config")
    e.add_argument("--split")
    e.add_argument("--subset", default="test")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="composite a solution into a PNG")
    r.add_argument("group")
    r.add_argument("solution")
    r.add_argument("out")
    r.add_argument("--compare", action="store_true", help="ground truth side by side")
    r.add_argument("--margin", type=_nonneg_int, default=10)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fragsolve: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"fragsolve: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
