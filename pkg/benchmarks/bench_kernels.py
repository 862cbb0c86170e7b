#!/usr/bin/env python3
"""Time the compiled column-op kernel against the numpy fallback.

Two workloads:

* a synthetic stream of random column ops executed on one array, which
  isolates raw kernel dispatch, and
* a grouped aggregation query over a generated star, where kernel time
  is diluted by planning, layout, and host-side folding.

The backend is chosen per array, so both run in one process. Use
``--json`` for machine-readable output.
"""

import argparse
import json
import os
import random
import time

import numpy as np

from pimolap import engine, schema
from pimolap.crossbar import (
    CellArray, ColOp, OpKind, available_backends, encode_ops,
)
from pimolap.queryparse import parse_query

_ARITY = {OpKind.NOT: 1, OpKind.AND: 2, OpKind.OR: 2, OpKind.NOR: 2,
          OpKind.XOR: 2, OpKind.COPY: 1, OpKind.SET0: 0, OpKind.SET1: 0}

QUERY = ("SELECT SUM(quantity), COUNT(*) FROM w "
         "WHERE discount BETWEEN 1 AND 3 GROUP BY customer.region")


def random_ops(rng, n, cols):
    ops = []
    for _ in range(n):
        kind = rng.choice(list(OpKind))
        srcs = tuple(rng.randrange(cols) for _ in range(_ARITY[kind]))
        ops.append(ColOp(kind, srcs, rng.randrange(cols)))
    return ops


def best_of(repeat, fn):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_stream(backend, rows, cols, n_ops, repeat):
    rng = random.Random(7)
    arr = CellArray(rows, cols, backend=backend)
    arr.write_rows(np.random.default_rng(7).integers(0, 2, size=(rows, cols),
                                                     dtype=np.uint8))
    encoded = encode_ops(random_ops(rng, n_ops, cols), cols)
    secs = best_of(repeat, lambda: arr.exec_encoded(encoded))
    return {"seconds": secs, "ops_per_s": n_ops / secs}


def bench_query(backend, wide, repeat):
    os.environ["PIMOLAP_KERNEL"] = backend
    try:
        memory = schema.build_memory(wide)
        ir = parse_query(QUERY)
        secs = best_of(repeat, lambda: engine.run_query(
            memory, ir, mode=engine.EngineMode.PIM))
    finally:
        del os.environ["PIMOLAP_KERNEL"]
    return {"seconds": secs}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=1024)
    ap.add_argument("--cols", type=int, default=1024)
    ap.add_argument("--ops", type=int, default=4000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=int, default=1, help="star scale for the query")
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)

    backends = available_backends()
    wide = schema.prejoin(schema.gen_ssb_lite(args.scale, seed=7))
    results = {}
    for b in backends:
        results[b] = {
            "stream": bench_stream(b, args.rows, args.cols, args.ops, args.repeat),
            "query": bench_query(b, wide, args.repeat),
        }

    if args.json:
        print(json.dumps({"config": vars(args), "results": results}, indent=2))
        return 0

    print(f"column-op stream: {args.ops} ops on {args.rows}x{args.cols} "
          f"(best of {args.repeat})")
    for b in backends:
        r = results[b]["stream"]
        print(f"  {b:7s} {r['seconds'] * 1e3:8.2f} ms   {r['ops_per_s']:12.0f} ops/s")
    print(f"grouped query, scale {args.scale} ({wide.n_rows} records)")
    for b in backends:
        print(f"  {b:7s} {results[b]['query']['seconds'] * 1e3:8.2f} ms")
    if "native" in results:
        s = results["py"]["stream"]["seconds"] / results["native"]["stream"]["seconds"]
        q = results["py"]["query"]["seconds"] / results["native"]["query"]["seconds"]
        print(f"native speedup: {s:.2f}x on the stream, {q:.2f}x on the query")
    else:
        print("compiled kernel not built; only the numpy fallback was timed")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
