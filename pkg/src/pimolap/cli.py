"""Command-line front end: generate/load data, run queries, benchmark.

Exit codes: 0 success, 2 usage or query parse errors, 3 plan/load/execute
errors. All machine output is JSON; ``--pretty`` renders a table for
humans instead. ``PIMOLAP_CONFIG`` may point at a JSON file of defaults
(flags override it).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import engine, schema
from .engine import CostParams, EngineMode, PlanError
from .isa import Circuit
from .layout import Split
from .queryparse import ParseError, parse_query, query_text
from .table import ResultTable

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_RUN = 3

_ENGINES = {m.value: m for m in EngineMode}
_LAYOUTS = {s.value: s for s in Split}
_CIRCUITS = {"pure": Circuit.PURE_PIM, "peripheral": Circuit.PERIPHERAL}

_DEFAULTS = {
    "seed": 0,
    "sample_fraction": 0.01,
    "engine": "hybrid-groupby",
    "layout": "one_xb",
    "circuit": "pure",
    "array_rows": 1024,
    "array_cols": 1024,
    "scratch_bits": 160,
    "cost_params": {},
}


class _CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_RUN):
        super().__init__(message)
        self.code = code


def _load_config() -> dict:
    path = os.environ.get("PIMOLAP_CONFIG")
    if not path:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise _CliError(f"PIMOLAP_CONFIG {path}: {e}", EXIT_PARSE) from None
    unknown = set(cfg) - set(_DEFAULTS)
    if unknown:
        raise _CliError(f"PIMOLAP_CONFIG {path}: unknown keys {sorted(unknown)}", EXIT_PARSE)
    return cfg


def _setting(args: argparse.Namespace, cfg: dict, key: str):
    v = getattr(args, key.replace("-", "_"), None)
    if v is not None:
        return v
    return cfg.get(key, _DEFAULTS[key])


def _positive_int(s: str) -> int:
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{s!r} is not an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _fraction(s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{s!r} is not a number") from None
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"must be in (0, 1], got {v}")
    return v


def _cost_params(args: argparse.Namespace, cfg: dict) -> CostParams:
    merged = dict(_DEFAULTS["cost_params"])
    merged.update(cfg.get("cost_params", {}))
    path = getattr(args, "cost_params", None)
    if path:
        try:
            with open(path) as f:
                merged.update(json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            raise _CliError(f"--cost-params {path}: {e}", EXIT_PARSE) from None
    return CostParams.from_dict(merged)


def _build_memory(args: argparse.Namespace, cfg: dict, wide: schema.WideRelation,
                  layout_name: str):
    return schema.build_memory(
        wide,
        split=_LAYOUTS[layout_name],
        array_rows=int(_setting(args, cfg, "array_rows")),
        array_cols=int(_setting(args, cfg, "array_cols")),
        scratch_bits=int(_setting(args, cfg, "scratch_bits")),
    )


def _emit(payload: dict, out: str | None, pretty_text: str | None = None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    if pretty_text is not None:
        print(pretty_text)
    elif not out:
        print(text)


# ---------------------------------------------------------------------------
# Reports

def make_report(ir, qp, table: ResultTable, delta, wall_s: float,
                config_echo: dict) -> dict:
    stats = delta.as_dict()
    ratio = None
    if stats["host_baseline_bits"] > 0 and stats["pim_to_host_bits"] > 0:
        ratio = stats["host_baseline_bits"] / stats["pim_to_host_bits"]
    costs = None
    if qp.cost_hybrid is not None:
        costs = {
            "hybrid": qp.cost_hybrid,
            "pure_pim": qp.cost_pure_pim,
            "pure_host": qp.cost_pure_host,
        }
    return {
        "query": query_text(ir),
        "engine": qp.mode.value,
        "layout": config_echo["layout"],
        "circuit": "pure" if qp.circuit is Circuit.PURE_PIM else "peripheral",
        "result": table.to_json_dict(),
        "stats": stats,
        "reduction_ratio": ratio,
        "modeled_costs": costs,
        "wall_time_s": wall_s,
        "config": config_echo,
    }


def _pretty_report(report: dict) -> str:
    res = report["result"]
    cells = [[_pretty_cell(v) for v in row] for row in res["rows"]]
    widths = [
        max([len(c)] + [len(r[i]) for r in cells])
        for i, c in enumerate(res["columns"])
    ]
    lines = [
        "  ".join(c.ljust(w) for c, w in zip(res["columns"], widths)).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    for r in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    s = report["stats"]
    lines.append("")
    lines.append(
        f"{report['engine']}/{report['layout']}/{report['circuit']}: "
        f"{len(res['rows'])} row(s) in {report['wall_time_s']:.3f}s"
    )
    lines.append(
        f"bits pim->host {s['pim_to_host_bits']}, host->pim {s['host_to_pim_bits']}, "
        f"col ops {s['pim_col_ops']}, cell writes {s['cell_writes']}"
    )
    if report["reduction_ratio"] is not None:
        lines.append(
            f"host baseline {s['host_baseline_bits']} bits -> "
            f"reduction ratio {report['reduction_ratio']:.2f}x"
        )
    return "\n".join(lines)


def _pretty_cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, dict):  # exact average
        return f"{v['num']}/{v['den']} (~{v['value']:.4f})"
    return str(v)


# ---------------------------------------------------------------------------
# Commands

def cmd_gen(args: argparse.Namespace, cfg: dict) -> int:
    seed = int(_setting(args, cfg, "seed"))
    star = schema.gen_ssb_lite(args.scale, seed)
    try:
        paths = schema.save_star(star, args.out, force=args.force)
    except FileExistsError as e:
        raise _CliError(str(e)) from None
    _emit(
        {
            "out_dir": str(args.out),
            "files": sorted(p.name for p in paths),
            "fact_rows": star.fact.n_rows,
            "seed": seed,
            "scale": args.scale,
        },
        None,
    )
    return EXIT_OK


def cmd_load(args: argparse.Namespace, cfg: dict) -> int:
    star = schema.load_dir(args.data)
    wide = schema.prejoin(star)
    _emit(
        {
            "relations": {
                "lineorder": star.fact.n_rows,
                **{n: r.n_rows for n, r in star.dimensions.items()},
            },
            "wide_attrs": len(wide.schema),
            "record_bits": sum(s.width for s in wide.schema),
        },
        None,
    )
    return EXIT_OK


def _read_query(args: argparse.Namespace) -> str:
    if args.query is not None:
        return args.query
    try:
        return Path(args.query_file).read_text()
    except OSError as e:
        raise _CliError(f"query file: {e}") from None


def cmd_run(args: argparse.Namespace, cfg: dict) -> int:
    text = _read_query(args)
    ir = parse_query(text)
    engine_name = _setting(args, cfg, "engine")
    layout_name = _setting(args, cfg, "layout")
    circuit_name = _setting(args, cfg, "circuit")
    seed = int(_setting(args, cfg, "seed"))
    fraction = float(_setting(args, cfg, "sample_fraction"))
    params = _cost_params(args, cfg)

    star = schema.load_dir(args.data)
    wide = schema.prejoin(star)
    memory = _build_memory(args, cfg, wide, layout_name)
    qp = engine.plan(
        ir, memory, params, fraction, seed,
        mode=_ENGINES[engine_name], circuit=_CIRCUITS[circuit_name],
    )
    if args.explain:
        _emit({"query": query_text(ir), "plan": qp.explain()}, args.out_file)
        return EXIT_OK
    t0 = time.perf_counter()
    table, delta = engine.execute(ir, qp, memory)
    wall = time.perf_counter() - t0
    report = make_report(
        ir, qp, table, delta, wall,
        {
            "data_dir": str(args.data),
            "engine": engine_name,
            "layout": layout_name,
            "circuit": circuit_name,
            "seed": seed,
            "sample_fraction": fraction,
            "cost_params": params.to_dict(),
            "array_rows": int(_setting(args, cfg, "array_rows")),
            "array_cols": int(_setting(args, cfg, "array_cols")),
            "scratch_bits": int(_setting(args, cfg, "scratch_bits")),
        },
    )
    _emit(report, args.out_file, _pretty_report(report) if args.pretty else None)
    return EXIT_OK


def _bench_cell(args, cfg, wide, entry, engine_name, layout_name, circuit_name,
                seed, fraction, params) -> dict:
    base = {
        "name": entry["name"],
        "engine": engine_name,
        "layout": layout_name,
        "circuit": circuit_name,
    }
    try:
        ir = parse_query(entry["query"])
        memory = _build_memory(args, cfg, wide, layout_name)
        qp = engine.plan(
            ir, memory, params, fraction, seed,
            mode=_ENGINES[engine_name], circuit=_CIRCUITS[circuit_name],
        )
        t0 = time.perf_counter()
        table, delta = engine.execute(ir, qp, memory)
        wall = time.perf_counter() - t0
    except (ValueError, ParseError) as e:
        return {**base, "failed": True, "error": str(e)}
    report = make_report(
        ir, qp, table, delta, wall,
        {
            "data_dir": str(args.data),
            "engine": engine_name,
            "layout": layout_name,
            "circuit": circuit_name,
            "seed": seed,
            "sample_fraction": fraction,
            "cost_params": params.to_dict(),
            "array_rows": int(_setting(args, cfg, "array_rows")),
            "array_cols": int(_setting(args, cfg, "array_cols")),
            "scratch_bits": int(_setting(args, cfg, "scratch_bits")),
        },
    )
    return {**base, "failed": False, **report}


def _geo_mean(values: list[float]) -> float | None:
    usable = [v for v in values if v and v > 0]
    if not usable:
        return None
    return math.exp(sum(math.log(v) for v in usable) / len(usable))


def cmd_bench(args: argparse.Namespace, cfg: dict) -> int:
    try:
        suite = json.loads(Path(args.suite).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise _CliError(f"suite file: {e}") from None
    if not isinstance(suite, list) or not all(
        isinstance(q, dict) and {"name", "query"} <= set(q) for q in suite
    ):
        raise _CliError("suite must be a JSON array of {name, query} objects")

    engines = (args.engines or "pim,host,hybrid-groupby").split(",")
    layouts = (args.layouts or "one_xb,two_xb").split(",")
    circuits = (args.circuits or "pure").split(",")
    for name, pool in (("engine", _ENGINES), ("layout", _LAYOUTS), ("circuit", _CIRCUITS)):
        vals = {"engine": engines, "layout": layouts, "circuit": circuits}[name]
        bad = [v for v in vals if v not in pool]
        if bad:
            raise _CliError(f"unknown {name}(s) {bad}; choose from {sorted(pool)}")

    seed = int(_setting(args, cfg, "seed"))
    fraction = float(_setting(args, cfg, "sample_fraction"))
    params = _cost_params(args, cfg)
    star = schema.load_dir(args.data)
    wide = schema.prejoin(star)

    cells = [
        (entry, e, l, c)
        for entry in suite
        for e in engines
        for l in layouts
        for c in circuits
    ]
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(
                pool.map(
                    lambda cell: _bench_cell(
                        args, cfg, wide, cell[0], cell[1], cell[2], cell[3],
                        seed, fraction, params,
                    ),
                    cells,
                )
            )
    else:
        reports = [
            _bench_cell(args, cfg, wide, entry, e, l, c, seed, fraction, params)
            for entry, e, l, c in cells
        ]

    summary = []
    for e in engines:
        for l in layouts:
            for c in circuits:
                mine = [
                    r for r in reports
                    if r["engine"] == e and r["layout"] == l and r["circuit"] == c
                ]
                ok = [r for r in mine if not r["failed"]]
                summary.append(
                    {
                        "engine": e,
                        "layout": l,
                        "circuit": c,
                        "queries_ok": len(ok),
                        "queries_failed": len(mine) - len(ok),
                        "geo_mean_reduction": _geo_mean(
                            [r["reduction_ratio"] for r in ok if r["reduction_ratio"]]
                        ),
                        "total_pim_to_host_bits": sum(
                            r["stats"]["pim_to_host_bits"] for r in ok
                        ),
                        "total_moved_bits": sum(
                            r["stats"]["pim_to_host_bits"] + r["stats"]["host_to_pim_bits"]
                            for r in ok
                        ),
                    }
                )
    failed = any(r["failed"] for r in reports)
    _emit({"reports": reports, "summary": summary, "suite_failed": failed},
          args.out_file)
    return EXIT_RUN if failed else EXIT_OK


# ---------------------------------------------------------------------------
# Argument wiring

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pimolap",
        description="Bulk-bitwise PIM OLAP simulator: data generation, "
        "query execution, and transfer benchmarking.",
    )
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate an SSB-lite star as CSV files")
    g.add_argument("--scale", type=_positive_int, default=1)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--force", action="store_true", help="overwrite existing files")
    g.set_defaults(fn=cmd_gen)

    l = sub.add_parser("load", help="load + validate a data directory")
    l.add_argument("--data", required=True)
    l.set_defaults(fn=cmd_load)

    r = sub.add_parser("run", help="run one query")
    q = r.add_mutually_exclusive_group(required=True)
    q.add_argument("--query", help="query text")
    q.add_argument("--query-file", help="file containing the query")
    r.add_argument("--data", required=True)
    r.add_argument("--engine", choices=sorted(_ENGINES), default=None)
    r.add_argument("--layout", choices=sorted(_LAYOUTS), default=None)
    r.add_argument("--circuit", choices=sorted(_CIRCUITS), default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--sample-fraction", type=_fraction, default=None,
                   dest="sample_fraction")
    r.add_argument("--cost-params", default=None, help="JSON file of cost constants")
    r.add_argument("--explain", action="store_true",
                   help="print the plan as JSON and skip execution")
    r.add_argument("--out", dest="out_file", default=None, help="write JSON here")
    r.add_argument("--pretty", action="store_true", help="human-readable result")
    r.add_argument("--array-rows", type=_positive_int, default=None, dest="array_rows")
    r.add_argument("--array-cols", type=_positive_int, default=None, dest="array_cols")
    r.add_argument("--scratch-bits", type=_positive_int, default=None, dest="scratch_bits")
    r.set_defaults(fn=cmd_run)

    b = sub.add_parser("bench", help="run a suite across engine/layout configs")
    b.add_argument("--suite", required=True, help="JSON array of {name, query}")
    b.add_argument("--data", required=True)
    b.add_argument("--engines", default=None, help="comma list (default all three)")
    b.add_argument("--layouts", default=None, help="comma list (default both)")
    b.add_argument("--circuits", default=None, help="comma list (default pure)")
    b.add_argument("--seed", type=int, default=None)
    b.add_argument("--sample-fraction", type=_fraction, default=None,
                   dest="sample_fraction")
    b.add_argument("--cost-params", default=None)
    b.add_argument("--jobs", type=_positive_int, default=1)
    b.add_argument("--out", dest="out_file", default=None)
    b.add_argument("--array-rows", type=_positive_int, default=None, dest="array_rows")
    b.add_argument("--array-cols", type=_positive_int, default=None, dest="array_cols")
    b.add_argument("--scratch-bits", type=_positive_int, default=None, dest="scratch_bits")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config()
        return args.fn(args, cfg)
    except ParseError as e:
        print(f"parse error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except _CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUN


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
