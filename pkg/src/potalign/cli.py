"""Command-line entry point: ``potalign solve | train | bench-noise | report``.

Exit status: 0 success, 2 configuration error, 3 file-system error,
4 numeric divergence, 5 bad input (parse error, infeasible problem,
schema mismatch).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import save_checkpoint
from .config import OUTPUT_ROOT_ENV, ExperimentConfig, load_config
from .errors import (ConfigError, ContractError, DimensionError, DivergenceError, InfeasibleError,
                     NumericError, ParseError, PotAlignError)
from .ot_solvers import SolverConfig, exact_pot_lp, partial_ot, plan_diagnostics
from .synth import generate_world
from .train_eval import METRIC_COLUMNS, METRICS_FORMAT, metrics_csv, metrics_document, mispair_mass, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_INPUT = 0, 2, 3, 4, 5

log = logging.getLogger("potalign")


class SchemaError(PotAlignError):
    """Metrics files that cannot be merged."""


# ---------------------------------------------------------------------------
# matrix text format


def parse_matrix(text: str, name: str = "<input>") -> np.ndarray:
    """Whitespace-separated decimal rows, one per line; '#' starts a comment."""
    rows, width = [], None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            row = [float(tok) for tok in line.split()]
        except ValueError:
            raise ParseError(f"{name}:{lineno}: not a row of decimal numbers") from None
        if not all(np.isfinite(row)):
            raise ParseError(f"{name}:{lineno}: non-finite entry")
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ParseError(f"{name}:{lineno}: row has {len(row)} entries, expected {width}")
        rows.append(row)
    if not rows:
        raise ParseError(f"{name}: no data rows")
    return np.array(rows, dtype=np.float64)


def parse_vector(text: str, name: str = "<input>") -> np.ndarray:
    """A vector is a single row or a single column of the matrix format."""
    m = parse_matrix(text, name)
    if m.shape[0] != 1 and m.shape[1] != 1:
        raise ParseError(f"{name}: expected a single row or column, got {m.shape[0]}x{m.shape[1]}")
    return m.reshape(-1)


def format_matrix(M: np.ndarray) -> str:
    return "".join(" ".join(repr(float(x)) for x in row) + "\n" for row in np.atleast_2d(M))


def _read(path, kind):
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read {kind} file {path}: {exc.strerror or exc}") from exc


def _output_dir(arg: str | None, default_name: str) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / default_name


def _prepare_dir(d: Path) -> Path:
    d.mkdir(parents=True, exist_ok=True)
    if not os.access(d, os.W_OK):
        raise PermissionError(f"output directory {d} is not writable")
    return d


def _provenance(config: dict) -> list[str]:
    return [f"potalign {__version__}", "config " + json.dumps(config, sort_keys=True)]


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# solve


def cmd_solve(args) -> int:
    C = parse_matrix(_read(args.cost, "cost"), args.cost)
    p = parse_vector(_read(args.p, "p"), args.p)
    q = parse_vector(_read(args.q, "q"), args.q)
    if C.shape != (p.size, q.size):
        raise ParseError(f"cost is {C.shape[0]}x{C.shape[1]} but p has {p.size} and q has {q.size} entries")
    if np.any(p < 0) or np.any(q < 0):
        raise ParseError("marginals must be nonnegative")
    solver = SolverConfig(epsilon=args.epsilon, mass=args.mass, max_iterations=args.max_iterations,
                          tolerance=args.tolerance)
    s = solver.resolve_mass(p, q)
    if args.exact:
        plan = exact_pot_lp(C, p, q, s)
    else:
        plan = partial_ot(C, p, q, solver)
    config = {"solver": asdict(solver), "resolved_mass": s, "exact": bool(args.exact),
              "inputs": {"cost": str(args.cost), "p": str(args.p), "q": str(args.q)}}
    diag = {"tool_version": __version__, "config": config, "route": plan.info.get("route"),
            "iterations": plan.iterations_used, "converged": plan.converged,
            "achieved_mass": plan.achieved_mass, "transport_cost": plan.cost(C),
            **plan_diagnostics(plan, p, q, s)}
    if "objective" in plan.info:
        diag["lp_objective"] = plan.info["objective"]
    out = _prepare_dir(_output_dir(args.out, "solve"))
    header = "".join(f"# {line}\n" for line in _provenance(config))
    (out / "plan.csv").write_text(header + "".join(
        ",".join(repr(float(x)) for x in row) + "\n" for row in plan.plan))
    _write_json(out / "diagnostics.json", diag)
    print(format_matrix(plan.plan), end="")
    print(json.dumps({k: diag[k] for k in ("route", "iterations", "converged", "achieved_mass",
                                             "row_violation", "col_violation")}, sort_keys=True))
    if not plan.converged:
        log.warning("solver hit max_iterations=%d before tolerance %.1e", solver.max_iterations,
                    solver.tolerance)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def run_training(cfg: ExperimentConfig, out: Path | None):
    dataset = generate_world(cfg.world)
    result = train(cfg.train, dataset, checkpoint_dir=out)
    return dataset, result


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg = replace(cfg, output=replace(cfg.output, directory=args.out))
    resolved = cfg.to_dict()
    print(json.dumps(resolved, indent=2, sort_keys=True))
    out = _prepare_dir(cfg.output.resolved_dir())
    _, result = run_training(cfg, out if cfg.train.checkpoint_every else None)
    (out / "metrics.csv").write_text(metrics_csv(result.history, _provenance(resolved)))
    _write_json(out / "metrics.json", metrics_document(result.history, resolved, __version__))
    if cfg.output.save_checkpoint:
        save_checkpoint(result.params, out / "final.pota",
                        {"tool_version": __version__, "config": resolved, "steps": result.steps})
    if result.history:
        last = result.history[-1]
        print(f"epoch {last.epoch}: total={last.total:.4f} top1_s={last.top1_s:.3f} gap={last.gap:.4f}")
    print(f"artifacts in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench-noise

BENCH_COLUMNS = ("kind", "rho", "loss", "seed", "top1_s", "top1_s_sd", "top5_s", "gap", "gap_sd",
                 "mispair_mass", "mispair_mass_full")


def bench_cell(doc: dict, rho: float, loss: str, seed: int) -> dict:
    """One factorial cell: its own world (seeded) and its own training run."""
    base = ExperimentConfig.from_dict(doc)
    world = replace(base.world, seed=seed, misalignment_rate=rho)
    tcfg = replace(base.train, loss=loss, seed=seed)
    dataset = generate_world(world)
    result = train(tcfg, dataset)
    last = result.history[-1]
    cell = {"rho": rho, "loss": loss, "seed": seed, "top1_s": last.top1_s, "top5_s": last.top5_s,
            "gap": last.gap, "mispair_mass": float("nan"), "mispair_mass_full": float("nan")}
    if loss == "mpot":
        cell["mispair_mass"] = mispair_mass(result.params, dataset, tcfg)
        cell["mispair_mass_full"] = mispair_mass(result.params, dataset, tcfg, mass=1.0)
    return cell


def _bench_cell_star(a):
    return bench_cell(*a)


def bench_table(cells: list[dict]) -> list[dict]:
    rows = [dict(c, kind="cell") for c in cells]
    groups: dict[tuple, list[dict]] = {}
    for c in cells:
        groups.setdefault((c["rho"], c["loss"]), []).append(c)
    for (rho, loss), cs in groups.items():
        t1 = np.array([c["top1_s"] for c in cs])
        gp = np.array([c["gap"] for c in cs])
        rows.append({"kind": "mean", "rho": rho, "loss": loss, "seed": "all",
                     "top1_s": float(t1.mean()), "top1_s_sd": float(t1.std(ddof=1)) if len(cs) > 1 else 0.0,
                     "top5_s": float(np.mean([c["top5_s"] for c in cs])),
                     "gap": float(gp.mean()), "gap_sd": float(gp.std(ddof=1)) if len(cs) > 1 else 0.0,
                     "mispair_mass": float(np.mean([c["mispair_mass"] for c in cs])),
                     "mispair_mass_full": float(np.mean([c["mispair_mass_full"] for c in cs]))})
    return rows


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def bench_csv(rows: list[dict], header_lines: list[str]) -> str:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in BENCH_COLUMNS])
    return buf.getvalue()


def _float_list(s: str) -> list[float]:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad number list {s!r}") from None


def run_bench(doc: dict, rhos, losses, seeds, jobs: int = 1) -> list[dict]:
    if not rhos or not losses or not seeds:
        raise ConfigError("rho, loss and seed lists must all be non-empty")
    for r in rhos:
        if not 0.0 <= r <= 1.0:
            raise ConfigError(f"rho {r} outside [0, 1]")
    for l_ in losses:
        if l_ not in ("mpot", "contrastive"):
            raise ConfigError(f"unknown loss {l_!r}")
    ExperimentConfig.from_dict(doc)  # validate before any compute
    tasks = [(doc, r, l_, s) for r in rhos for l_ in losses for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_bench_cell_star, tasks))
    else:
        cells = [bench_cell(*t) for t in tasks]
    return bench_table(cells)


def cmd_bench_noise(args) -> int:
    cfg = load_config(args.config)
    doc = cfg.to_dict()
    rhos = _float_list(args.rho_list)
    losses = [x.strip() for x in args.losses.split(",") if x.strip()]
    try:
        seeds = [int(x) for x in args.seeds.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad seed list {args.seeds!r}") from None
    out = _prepare_dir(Path(args.out) if args.out else cfg.output.resolved_dir())
    rows = run_bench(doc, rhos, losses, seeds, args.jobs)
    provenance = dict(doc, bench={"rho": rhos, "losses": losses, "seeds": seeds})
    text = bench_csv(rows, _provenance(provenance))
    (out / "bench_noise.csv").write_text(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


def build_report(docs: list[tuple[str, dict]]) -> tuple[dict, str]:
    if not docs:
        raise ConfigError("report needs at least one metrics file")
    for path, doc in docs:
        for key in ("format_version", "config", "columns", "records"):
            if key not in doc:
                raise SchemaError(f"{path}: missing {key!r}; not a metrics document")
        if doc["format_version"] != METRICS_FORMAT:
            raise SchemaError(f"{path}: metrics format {doc['format_version']}, expected {METRICS_FORMAT}")
        if list(doc["columns"]) != list(METRIC_COLUMNS):
            raise SchemaError(f"{path}: unexpected column set")
    runs = []
    for path, doc in docs:
        recs = doc["records"]
        runs.append({"path": path, "tool_version": doc.get("tool_version"), "config": doc["config"],
                     "epochs": len(recs), "final": recs[-1] if recs else None})
    finals = [r["final"] for r in runs if r["final"] is not None]
    agg = {}
    for c in METRIC_COLUMNS[1:]:
        vals = np.array([f[c] for f in finals], dtype=np.float64)
        if vals.size:
            agg[c] = {"mean": float(vals.mean()), "sd": float(vals.std(ddof=1)) if vals.size > 1 else 0.0}
    summary = {"format_version": METRICS_FORMAT, "tool_version": __version__, "runs": runs,
               "aggregate": agg}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("run",) + METRIC_COLUMNS)
    for k, (_, doc) in enumerate(docs):
        for rec in doc["records"]:
            w.writerow([k] + [_fmt(rec[c]) if c != "epoch" else str(rec[c]) for c in METRIC_COLUMNS])
    return summary, buf.getvalue()


def cmd_report(args) -> int:
    docs = []
    for p in args.metrics:
        try:
            docs.append((p, json.loads(_read(p, "metrics"))))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{p}: not JSON ({exc})") from exc
    summary, table = build_report(docs)
    out = _prepare_dir(_output_dir(args.out, "report"))
    _write_json(out / "summary.json", summary)
    versions = ", ".join(sorted({str(r["tool_version"]) for r in summary["runs"]}))
    (out / "runs.csv").write_text(f"# potalign {__version__}\n# inputs from {versions}\n" + table)
    print(json.dumps(summary["aggregate"], indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="potalign", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"potalign {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve one partial transport problem from text files")
    s.add_argument("cost")
    s.add_argument("p")
    s.add_argument("q")
    s.add_argument("--epsilon", type=float, default=0.05)
    s.add_argument("--mass", type=float, default=None, help="default: 0.9 * min(sum p, sum q)")
    s.add_argument("--exact", action="store_true", help="unregularised LP oracle (n, m <= 6)")
    s.add_argument("--max-iterations", type=int, default=10_000)
    s.add_argument("--tolerance", type=float, default=1e-9)
    s.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/solve)")
    s.set_defaults(func=cmd_solve)

    t = sub.add_parser("train", help="train on a synthetic world described by a config file")
    t.add_argument("config")
    t.add_argument("--out", help="override output.directory")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench-noise", help="factorial sweep over misalignment rate, loss and seed")
    b.add_argument("config")
    b.add_argument("--rho-list", default="0.0,0.3")
    b.add_argument("--losses", default="mpot,contrastive")
    b.add_argument("--seeds", default="0,1,2")
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench_noise)

    r = sub.add_parser("report", help="merge metrics.json files into one summary")
    r.add_argument("metrics", nargs="+")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ParseError, InfeasibleError, SchemaError, DimensionError, ContractError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
