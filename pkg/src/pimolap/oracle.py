"""Reference executor: plain row scans over host tables.

Ground truth for query results and for the bits a host-only scan engine
would have to pull from memory. Arithmetic is exact (Python integers), so
no aggregate can overflow regardless of declared attribute widths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .isa import (
    Add,
    AggKind,
    And,
    ArithNode,
    AttrRef,
    Cmp,
    Const,
    Mul,
    Not,
    Or,
    PredNode,
    expr_attrs,
    pred_attrs,
)
from .layout import AttributeSpec
from .queryparse import QueryIR, agg_label
from .table import AvgValue, ResultTable


class OracleError(ValueError):
    pass


class HostTable:
    """Column-major integer table with declared attribute widths."""

    def __init__(self, schema: tuple[AttributeSpec, ...], columns: dict[str, list[int]]):
        self.schema = tuple(schema)
        names = [a.name for a in self.schema]
        if set(columns) != set(names):
            raise OracleError("columns do not match schema")
        lengths = {len(c) for c in columns.values()} or {0}
        if len(lengths) != 1:
            raise OracleError("ragged columns")
        self.columns = {n: list(columns[n]) for n in names}
        self.n_rows = lengths.pop()

    def attr(self, name: str) -> AttributeSpec:
        for a in self.schema:
            if a.name == name:
                return a
        raise OracleError(f"unknown attribute {name!r}")


def referenced_attrs(ir: QueryIR) -> set[str]:
    out = pred_attrs(ir.predicate)
    for agg in ir.aggregates:
        if agg.arg is not None:
            out |= expr_attrs(agg.arg)
    out |= set(ir.group_by)
    return out


def host_baseline_bits(ir: QueryIR, schema: tuple[AttributeSpec, ...], n_rows: int) -> int:
    """Bits a scanning host engine reads: every referenced attribute, every row."""
    widths = {a.name: a.width for a in schema}
    try:
        return n_rows * sum(widths[name] for name in referenced_attrs(ir))
    except KeyError as e:
        raise OracleError(f"unknown attribute {e.args[0]!r}") from None


def eval_expr(expr: ArithNode, row: dict[str, int], width: int | None = None) -> int:
    """Exact expression value; with ``width``, wrapped modulo 2**width."""
    if isinstance(expr, AttrRef):
        v = row[expr.name]
    elif isinstance(expr, Const):
        v = expr.value
    elif isinstance(expr, Add):
        v = eval_expr(expr.left, row, width) + eval_expr(expr.right, row, width)
    elif isinstance(expr, Mul):
        v = eval_expr(expr.left, row, width) * eval_expr(expr.right, row, width)
    else:
        raise OracleError(f"not an arithmetic node: {expr!r}")
    return v if width is None else v & ((1 << width) - 1)


def eval_pred(pred: PredNode, row: dict[str, int]) -> bool:
    if isinstance(pred, Cmp):
        a = row[pred.left.name]
        b = row[pred.right.name] if isinstance(pred.right, AttrRef) else pred.right.value
        return {
            "eq": a == b, "ne": a != b, "lt": a < b,
            "le": a <= b, "gt": a > b, "ge": a >= b,
        }[pred.op]
    if isinstance(pred, And):
        return all(eval_pred(a, row) for a in pred.args)
    if isinstance(pred, Or):
        return any(eval_pred(a, row) for a in pred.args)
    if isinstance(pred, Not):
        return not eval_pred(pred.arg, row)
    raise OracleError(f"not a predicate node: {pred!r}")


def _pred_mask(pred: PredNode, table: HostTable) -> np.ndarray:
    """Vectorized predicate over all rows (int64 columns are exact here)."""
    if isinstance(pred, Cmp):
        a = np.asarray(table.columns[pred.left.name], dtype=np.int64)
        if isinstance(pred.right, AttrRef):
            b = np.asarray(table.columns[pred.right.name], dtype=np.int64)
        else:
            b = np.int64(pred.right.value)
        return {
            "eq": a == b, "ne": a != b, "lt": a < b,
            "le": a <= b, "gt": a > b, "ge": a >= b,
        }[pred.op]
    if isinstance(pred, And):
        out = np.ones(table.n_rows, dtype=bool)
        for child in pred.args:
            out &= _pred_mask(child, table)
        return out
    if isinstance(pred, Or):
        out = np.zeros(table.n_rows, dtype=bool)
        for child in pred.args:
            out |= _pred_mask(child, table)
        return out
    if isinstance(pred, Not):
        return ~_pred_mask(pred.arg, table)
    raise OracleError(f"not a predicate node: {pred!r}")


def _validate(ir: QueryIR, table: HostTable) -> None:
    for name in referenced_attrs(ir):
        table.attr(name)
    if any(table.attr(a).width > 62 for a in referenced_attrs(ir)):
        raise OracleError("attributes wider than 62 bits are not supported here")


def _fold_group(ir: QueryIR, rows: list[dict[str, int]]):
    out = []
    for agg in ir.aggregates:
        if agg.kind is AggKind.COUNT:
            out.append(len(rows))
            continue
        vals = [eval_expr(agg.arg, r) for r in rows]
        if not vals:
            out.append(None)
        elif agg.kind is AggKind.SUM:
            out.append(sum(vals))
        elif agg.kind is AggKind.MIN:
            out.append(min(vals))
        elif agg.kind is AggKind.MAX:
            out.append(max(vals))
        elif agg.kind is AggKind.AVG:
            out.append(AvgValue(sum(vals), len(vals)))
        else:
            raise OracleError(f"unknown aggregate {agg.kind}")
    return out


def _result_columns(ir: QueryIR) -> tuple[str, ...]:
    return tuple(ir.group_by) + tuple(agg_label(a) for a in ir.aggregates)


def execute_host(ir: QueryIR, table: HostTable) -> tuple[ResultTable, int]:
    """Full-scan evaluation; returns the result and the baseline read bits."""
    _validate(ir, table)
    baseline = host_baseline_bits(ir, table.schema, table.n_rows)
    mask = _pred_mask(ir.predicate, table)
    sel = np.nonzero(mask)[0]
    needed = referenced_attrs(ir) - pred_attrs(ir.predicate) | set(ir.group_by)
    for agg in ir.aggregates:
        if agg.arg is not None:
            needed |= expr_attrs(agg.arg)
    sel_rows = [
        {name: table.columns[name][i] for name in needed} for i in sel
    ]
    if not ir.group_by:
        rows = [tuple(_fold_group(ir, sel_rows))]
        return ResultTable(_result_columns(ir), rows, 0), baseline
    buckets: dict[tuple, list] = {}
    for r in sel_rows:
        key = tuple(r[g] for g in ir.group_by)
        buckets.setdefault(key, []).append(r)
    rows = [key + tuple(_fold_group(ir, grp)) for key, grp in buckets.items()]
    return ResultTable(_result_columns(ir), rows, len(ir.group_by)), baseline


def execute_host_naive(ir: QueryIR, table: HostTable) -> ResultTable:
    """Independent re-scan implementation guarding the main oracle.

    Evaluates the predicate per row with Python integers, finds group keys,
    then re-scans the whole table once per group.
    """
    _validate(ir, table)
    names = [a.name for a in table.schema]
    all_rows = [
        {n: table.columns[n][i] for n in names} for i in range(table.n_rows)
    ]
    selected = [r for r in all_rows if eval_pred(ir.predicate, r)]
    if not ir.group_by:
        return ResultTable(_result_columns(ir), [tuple(_fold_group(ir, selected))], 0)
    keys = []
    for r in selected:
        k = tuple(r[g] for g in ir.group_by)
        if k not in keys:
            keys.append(k)
    rows = []
    for k in keys:
        members = [
            r for r in all_rows
            if eval_pred(ir.predicate, r) and tuple(r[g] for g in ir.group_by) == k
        ]
        rows.append(k + tuple(_fold_group(ir, members)))
    return ResultTable(_result_columns(ir), rows, len(ir.group_by))
