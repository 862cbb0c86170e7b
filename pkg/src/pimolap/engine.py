"""Query planning and execution over PIM-resident relations.

Three engine modes:

* ``pim`` — everything in memory: filters, masked aggregation, and for
  grouped queries one aggregation pass per group ("one by one").
* ``host`` — the filter runs in PIM, but selected records' attribute
  values cross to the host, which aggregates. This is the filter-only
  baseline: cheap per filter, expensive per selected record.
* ``hybrid-groupby`` — grouped queries split group-wise between the two
  routes using sampled size estimates and a cost model; big groups
  aggregate in PIM, the long tail is classified on the host.

All data movement runs through the PimMemory facade, so the returned
TransferStats delta is a faithful account of the query.
"""

from __future__ import annotations

import itertools
import math
import random
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import isa, oracle
from .isa import (
    AggKind,
    And,
    AttrRef,
    Circuit,
    Cmp,
    Const,
    TAUTOLOGY,
    eq_op_count,
    expr_attrs,
    partial_width,
    pred_attrs,
    reduction_tree_ops,
)
from .layout import ColRange, PimMemory
from .queryparse import AggSpec, QueryIR, agg_label
from .stats import TransferStats
from .table import AvgValue, ResultTable


class PlanError(ValueError):
    pass


class EngineMode(Enum):
    PIM = "pim"
    HOST = "host"
    HYBRID = "hybrid-groupby"


GROUP_ENUM_CAP = 65536  # largest group-key domain the pim engine will sweep


@dataclass
class CostParams:
    """Dimensionless model constants (overridable via config)."""

    c_pim_op: float = 1.0
    c_bit_xfer: float = 4.0
    c_host_rec: float = 16.0
    c_periph_row: float = 1.0

    def __post_init__(self):
        for name in ("c_pim_op", "c_bit_xfer", "c_host_rec", "c_periph_row"):
            if getattr(self, name) < 0:
                raise PlanError(f"cost parameter {name} must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "CostParams":
        known = {"c_pim_op", "c_bit_xfer", "c_host_rec", "c_periph_row"}
        unknown = set(d) - known
        if unknown:
            raise PlanError(f"unknown cost parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return {
            "c_pim_op": self.c_pim_op,
            "c_bit_xfer": self.c_bit_xfer,
            "c_host_rec": self.c_host_rec,
            "c_periph_row": self.c_periph_row,
        }


@dataclass
class GroupEstimates:
    sample_fraction: float
    groups: dict[tuple, float]
    unseen_mass_flag: bool

    @property
    def total(self) -> float:
        return sum(self.groups.values())


@dataclass(frozen=True)
class CostModel:
    """Shape numbers the cost function combines with CostParams.

    The per-group PIM cost is group-independent by construction: the
    compiled base filter and mask programs are shared, and the group-key
    equality chain is modeled by width (immediate folding ignored).
    """

    pages: int
    rows: int
    circuit: Circuit
    base_filter_ops: int
    group_eq_ops: int
    mask_ops: int
    copy_cols: int          # columns staged across arrays, per page
    tree_ops: int           # pure-PIM reduction ops per page, all partials
    periph_passes: int      # per-array row scans under the peripheral circuit
    partial_bits: int       # sum of per-array partial widths
    host_bits_per_record: int

    def pim_group_cost(self, params: CostParams) -> float:
        ops = self.base_filter_ops + self.group_eq_ops + self.mask_ops
        cost = params.c_pim_op * self.pages * ops
        cost += params.c_bit_xfer * 2 * self.rows * self.copy_cols * self.pages
        if self.circuit is Circuit.PURE_PIM:
            cost += params.c_pim_op * self.pages * self.tree_ops
        else:
            cost += params.c_periph_row * self.rows * self.pages * self.periph_passes
        cost += params.c_bit_xfer * self.partial_bits * self.pages
        return cost

    def host_cost(self, n_records: float, params: CostParams) -> float:
        return (params.c_bit_xfer * self.host_bits_per_record + params.c_host_rec) * n_records

    def as_dict(self) -> dict:
        return {
            "pages": self.pages,
            "rows": self.rows,
            "circuit": self.circuit.value,
            "base_filter_ops": self.base_filter_ops,
            "group_eq_ops": self.group_eq_ops,
            "mask_ops": self.mask_ops,
            "copy_cols": self.copy_cols,
            "tree_ops": self.tree_ops,
            "periph_passes": self.periph_passes,
            "partial_bits": self.partial_bits,
            "host_bits_per_record": self.host_bits_per_record,
        }


@dataclass
class QueryPlan:
    ir: QueryIR
    mode: EngineMode
    circuit: Circuit
    params: CostParams
    sample_fraction: float
    seed: int
    estimates: GroupEstimates | None = None
    model: CostModel | None = None
    pim_groups: list[tuple] = field(default_factory=list)
    host_groups: list[tuple] = field(default_factory=list)
    cost_hybrid: float | None = None
    cost_pure_pim: float | None = None
    cost_pure_host: float | None = None

    def explain(self) -> dict:
        out = {
            "mode": self.mode.value,
            "circuit": self.circuit.value,
            "grouped": bool(self.ir.group_by),
            "sample_fraction": self.sample_fraction,
            "seed": self.seed,
            "cost_params": self.params.to_dict(),
        }
        if self.estimates is not None:
            out["estimated_groups"] = [
                {"key": list(k), "estimate": v}
                for k, v in sorted(self.estimates.groups.items())
            ]
            out["unseen_mass_flag"] = self.estimates.unseen_mass_flag
        if self.model is not None:
            out["cost_model"] = self.model.as_dict()
        if self.cost_hybrid is not None:
            out["modeled_costs"] = {
                "hybrid": self.cost_hybrid,
                "pure_pim": self.cost_pure_pim,
                "pure_host": self.cost_pure_host,
            }
            out["pim_groups"] = [list(k) for k in self.pim_groups]
            out["host_groups"] = [list(k) for k in self.host_groups]
        return out


# ---------------------------------------------------------------------------
# Planning

def _resolve(ir: QueryIR, memory: PimMemory) -> None:
    layout = memory.layout
    for name in oracle.referenced_attrs(ir):
        layout.attr(name)  # raises on unknown names
    for agg in ir.aggregates:
        if agg.arg is None:
            continue
        if isinstance(agg.arg, AttrRef):
            continue
        isa.natural_width(agg.arg, layout)  # signedness/width errors early


def _partial_specs(ir: QueryIR, memory: PimMemory) -> list[tuple[AggKind, int]]:
    """(kind, masked width) of every per-array partial the query needs."""
    layout = memory.layout
    out: list[tuple[AggKind, int]] = [(AggKind.COUNT, 1)]  # selection count, always
    for agg in ir.aggregates:
        if agg.kind is AggKind.COUNT:
            continue
        if isinstance(agg.arg, AttrRef):
            w = layout.attr(agg.arg.name).width
        else:
            w = isa.natural_width(agg.arg, layout)
        kind = AggKind.SUM if agg.kind is AggKind.AVG else agg.kind
        out.append((kind, w))
    return out


def build_cost_model(ir: QueryIR, memory: PimMemory, circuit: Circuit) -> CostModel:
    """Measure compiled program shapes once; groups share them."""
    layout = memory.layout
    rows = layout.rows_per_array
    pages = max(1, memory.n_pages)

    base_ops = 0
    copy_cols = 0
    if ir.predicate != TAUTOLOGY:
        prog = isa.compile_predicate(memory, ir.predicate)
        base_ops = prog.op_count
        copy_cols += prog.copy_width
        prog.release(memory)

    mask_ops = 0
    dummy = memory.scratch_alloc(1)
    try:
        for agg in ir.aggregates:
            if agg.kind is AggKind.COUNT:
                continue
            kind = AggKind.SUM if agg.kind is AggKind.AVG else agg.kind
            prog, _, _, _, _ = isa.prepare_masked_source(memory, agg.arg, dummy.start, kind)
            mask_ops += prog.op_count
            copy_cols += prog.copy_width
            prog.release(memory)
    finally:
        memory.scratch_free(dummy)

    eq_ops = 0
    for g in ir.group_by:
        eq_ops += eq_op_count(layout.attr(g).width) + 1
    if ir.predicate != TAUTOLOGY and ir.group_by:
        eq_ops += 1  # fold group equalities into the base filter bit

    specs = _partial_specs(ir, memory)
    tree = sum(reduction_tree_ops(k, w, rows) for k, w in specs)
    pbits = sum(partial_width(k, w, rows) for k, w in specs)

    attrs = set(ir.group_by)
    for agg in ir.aggregates:
        if agg.arg is not None:
            attrs |= expr_attrs(agg.arg)
    host_bits = sum(layout.attr(a).width for a in attrs) + 1

    return CostModel(
        pages=pages,
        rows=rows,
        circuit=circuit,
        base_filter_ops=base_ops,
        group_eq_ops=eq_ops,
        mask_ops=mask_ops,
        copy_cols=copy_cols,
        tree_ops=tree,
        periph_passes=len(specs),
        partial_bits=pbits,
        host_bits_per_record=host_bits,
    )


def estimate_groups(memory: PimMemory, group_attrs: tuple[str, ...],
                    sample_fraction: float, seed: int) -> GroupEstimates:
    """Sampled group sizes, scaled by 1/fraction; the sample read is charged."""
    if not 0 < sample_fraction <= 1:
        raise PlanError(f"sample_fraction {sample_fraction} outside (0, 1]")
    n = memory.record_count
    if n == 0:
        return GroupEstimates(sample_fraction, {}, False)
    n_samples = min(n, max(1, round(sample_fraction * n)))
    rng = random.Random(seed)
    idx = np.array(sorted(rng.sample(range(n), n_samples)), dtype=np.int64)
    cols = [memory.read_attribute(g, idx) for g in group_attrs]
    counts: dict[tuple, int] = {}
    for j in range(n_samples):
        key = tuple(int(c[j]) for c in cols)
        counts[key] = counts.get(key, 0) + 1
    groups = {k: c / sample_fraction for k, c in counts.items()}
    return GroupEstimates(sample_fraction, groups, n_samples < n)


def cost_of(choice: tuple[list, list], estimates: GroupEstimates,
            params: CostParams, model: CostModel) -> float:
    """Modeled cost of a (pim_groups, host_groups) assignment.

    PIM cost is linear in the number of groups routed there; host cost is
    linear in the estimated records of the groups left to it.
    """
    pim_groups, host_groups = choice
    host_records = sum(estimates.groups[k] for k in host_groups)
    return (
        len(pim_groups) * model.pim_group_cost(params)
        + model.host_cost(host_records, params)
    )


def split_groups(estimates: GroupEstimates, params: CostParams,
                 model: CostModel) -> tuple[list[tuple], list[tuple]]:
    """Greedy assignment: biggest groups to PIM while that route is cheaper.

    Groups are visited in descending estimated size; the per-group host
    cost shrinks with size while the PIM cost is flat, so the first group
    where PIM stops winning ends the scan. Ties go to host (no cell
    writes there).
    """
    order = sorted(estimates.groups.items(), key=lambda kv: (-kv[1], kv[0]))
    p = model.pim_group_cost(params)
    pim: list[tuple] = []
    host: list[tuple] = []
    for i, (key, est) in enumerate(order):
        if p < model.host_cost(est, params):
            pim.append(key)
        else:
            host.extend(k for k, _ in order[i:])
            break
    return pim, host


def plan(ir: QueryIR, memory: PimMemory, params: CostParams | None = None,
         sample_fraction: float = 0.01, seed: int = 0,
         mode: EngineMode = EngineMode.HYBRID,
         circuit: Circuit = Circuit.PURE_PIM) -> QueryPlan:
    params = params if params is not None else CostParams()
    if not 0 < sample_fraction <= 1:
        raise PlanError(f"sample_fraction {sample_fraction} outside (0, 1]")
    _resolve(ir, memory)
    qp = QueryPlan(ir, mode, circuit, params, sample_fraction, seed)
    if mode is EngineMode.HYBRID and ir.group_by:
        qp.estimates = estimate_groups(memory, ir.group_by, sample_fraction, seed)
        qp.model = build_cost_model(ir, memory, circuit)
        qp.pim_groups, qp.host_groups = split_groups(qp.estimates, params, qp.model)
        all_groups = list(qp.estimates.groups)
        qp.cost_hybrid = cost_of((qp.pim_groups, qp.host_groups), qp.estimates, params, qp.model)
        qp.cost_pure_pim = cost_of((all_groups, []), qp.estimates, params, qp.model)
        qp.cost_pure_host = cost_of(([], all_groups), qp.estimates, params, qp.model)
    return qp


# ---------------------------------------------------------------------------
# Execution

def _run_filter(memory: PimMemory, pred) -> tuple[int, isa.PimProgram | None]:
    """Mask column of the predicate; the validity column doubles as the
    tautology mask at zero op cost."""
    if pred == TAUTOLOGY:
        return memory.layout.validity_col, None
    prog = isa.compile_predicate(memory, pred)
    isa.exec_program(memory, prog)
    return prog.result.start, prog


def _masked_scalar(memory: PimMemory, expr, mask_col: int, kind: AggKind,
                   circuit: Circuit):
    mask_kind = AggKind.SUM if kind is AggKind.AVG else kind
    prog, rng, slot, _, signed = isa.prepare_masked_source(memory, expr, mask_col, mask_kind)
    try:
        isa.exec_program(memory, prog)
        parts = isa.pim_aggregate(memory, rng, mask_kind, circuit, slot=slot, signed=signed)
    finally:
        prog.release(memory)
    return isa.host_fold(memory, parts)


def _pim_agg_row(ir: QueryIR, memory: PimMemory, mask_col: int,
                 circuit: Circuit) -> tuple[list, int]:
    """All aggregates of one selection, PIM route; returns (values, count)."""
    count_parts = isa.pim_aggregate(
        memory, ColRange(mask_col, mask_col + 1), AggKind.COUNT, circuit
    )
    n_sel = isa.host_fold(memory, count_parts)
    values = []
    for agg in ir.aggregates:
        if agg.kind is AggKind.COUNT:
            values.append(n_sel)
        elif n_sel == 0:
            values.append(None)
        elif agg.kind is AggKind.AVG:
            s = _masked_scalar(memory, agg.arg, mask_col, AggKind.AVG, circuit)
            values.append(AvgValue(s, n_sel))
        else:
            values.append(_masked_scalar(memory, agg.arg, mask_col, agg.kind, circuit))
    return values, n_sel


def _group_pred(base, group_by: tuple[str, ...], key: tuple):
    eqs = tuple(Cmp("eq", AttrRef(g), Const(int(v))) for g, v in zip(group_by, key))
    if base == TAUTOLOGY:
        return eqs[0] if len(eqs) == 1 else And(eqs)
    return And((base,) + eqs)


def _pim_group_rows(ir: QueryIR, memory: PimMemory, keys, circuit: Circuit) -> list[tuple]:
    """One filter→mask→aggregate pass per group key; empty groups dropped."""
    rows = []
    for key in sorted(keys):
        prog = isa.compile_predicate(memory, _group_pred(ir.predicate, ir.group_by, key))
        try:
            isa.exec_program(memory, prog)
            values, n_sel = _pim_agg_row(ir, memory, prog.result.start, circuit)
        finally:
            prog.release(memory)
        if n_sel > 0:
            rows.append(tuple(int(v) for v in key) + tuple(values))
    return rows


def _enumerable_domain(memory: PimMemory, group_by: tuple[str, ...]):
    specs = [memory.layout.attr(g) for g in group_by]
    if any(s.domain_size is None or s.signed for s in specs):
        return None
    total = math.prod(s.domain_size for s in specs)
    if total > GROUP_ENUM_CAP:
        return None
    return itertools.product(*[range(s.domain_size) for s in specs])


def _discover_keys(ir: QueryIR, memory: PimMemory, mask_col: int) -> list[tuple]:
    """Group keys actually present, read through the charged facade."""
    mask = memory.read_result_col(mask_col)
    sel = np.nonzero(mask)[0]
    cols = [memory.read_attribute(g, sel) for g in ir.group_by]
    return sorted({tuple(int(c[j]) for c in cols) for j in range(len(sel))})


def _host_pass(ir: QueryIR, memory: PimMemory, mask_col: int,
               skip_keys: set | None) -> dict[tuple, list]:
    """Read selected records and classify-and-fold on the host.

    Exactly the mask bit plus the group-by and aggregate-source attributes
    of selected records cross the boundary.
    """
    mask = memory.read_result_col(mask_col)
    sel = np.nonzero(mask)[0]
    needed = sorted(
        set(ir.group_by)
        | {a for agg in ir.aggregates if agg.arg is not None for a in expr_attrs(agg.arg)}
    )
    cols = {a: [int(v) for v in memory.read_attribute(a, sel)] for a in needed}
    buckets: dict[tuple, list] = {}
    for j in range(len(sel)):
        row = {a: cols[a][j] for a in needed}
        key = tuple(row[g] for g in ir.group_by)
        if skip_keys is not None and key in skip_keys:
            continue
        accs = buckets.get(key)
        if accs is None:
            accs = buckets[key] = [None] * len(ir.aggregates)
        for i, agg in enumerate(ir.aggregates):
            if agg.kind is AggKind.COUNT:
                accs[i] = (accs[i] or 0) + 1
                continue
            v = oracle.eval_expr(agg.arg, row)
            if agg.kind is AggKind.SUM:
                accs[i] = (accs[i] or 0) + v
            elif agg.kind is AggKind.MIN:
                accs[i] = v if accs[i] is None else min(accs[i], v)
            elif agg.kind is AggKind.MAX:
                accs[i] = v if accs[i] is None else max(accs[i], v)
            elif agg.kind is AggKind.AVG:
                s, c = accs[i] or (0, 0)
                accs[i] = (s + v, c + 1)
    return buckets


def _finish_host_row(ir: QueryIR, accs: list) -> tuple:
    out = []
    for agg, acc in zip(ir.aggregates, accs):
        if agg.kind is AggKind.COUNT:
            out.append(acc or 0)
        elif agg.kind is AggKind.AVG and acc is not None:
            out.append(AvgValue(acc[0], acc[1]))
        else:
            out.append(acc)
    return tuple(out)


def _result_columns(ir: QueryIR) -> tuple[str, ...]:
    return tuple(ir.group_by) + tuple(agg_label(a) for a in ir.aggregates)


def execute(ir: QueryIR, qp: QueryPlan, memory: PimMemory) -> tuple[ResultTable, TransferStats]:
    """Run the planned query; returns results and this query's stats delta."""
    snapshot = memory.stats.copy()
    layout = memory.layout
    columns = _result_columns(ir)
    n_group = len(ir.group_by)

    mask_col, fprog = _run_filter(memory, ir.predicate)
    try:
        if qp.mode is EngineMode.HOST:
            buckets = _host_pass(ir, memory, mask_col, None)
            if not ir.group_by:
                accs = buckets.get((), [None] * len(ir.aggregates))
                rows = [_finish_host_row(ir, accs)]
            else:
                rows = [k + _finish_host_row(ir, accs) for k, accs in buckets.items()]
        elif not ir.group_by:
            values, _ = _pim_agg_row(ir, memory, mask_col, qp.circuit)
            rows = [tuple(values)]
        elif qp.mode is EngineMode.PIM:
            keys = _enumerable_domain(memory, ir.group_by)
            if keys is None:
                keys = _discover_keys(ir, memory, mask_col)
            rows = _pim_group_rows(ir, memory, keys, qp.circuit)
        else:  # hybrid grouped
            rows = _pim_group_rows(ir, memory, qp.pim_groups, qp.circuit)
            claimed = {tuple(int(v) for v in k) for k in qp.pim_groups}
            if qp.host_groups or (qp.estimates and qp.estimates.unseen_mass_flag):
                buckets = _host_pass(ir, memory, mask_col, claimed)
                rows += [k + _finish_host_row(ir, accs) for k, accs in buckets.items()]
    finally:
        if fprog is not None:
            fprog.release(memory)

    memory.stats.host_baseline_bits += oracle.host_baseline_bits(
        ir, layout.schema, layout.record_count
    )
    table = ResultTable(columns, rows, n_group)
    return table, memory.stats.delta(snapshot)


def run_query(memory: PimMemory, ir: QueryIR, mode: EngineMode = EngineMode.HYBRID,
              circuit: Circuit = Circuit.PURE_PIM, params: CostParams | None = None,
              sample_fraction: float = 0.01, seed: int = 0):
    """plan + execute in one call; returns (plan, table, stats delta)."""
    qp = plan(ir, memory, params, sample_fraction, seed, mode, circuit)
    table, stats = execute(ir, qp, memory)
    return qp, table, stats
