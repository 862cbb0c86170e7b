"""Whole-program behavior: filters, masked aggregation, updates, accounting."""

import operator
import random

import numpy as np
import pytest

from pimolap.isa import (
    AggKind,
    And,
    AttrRef,
    Circuit,
    Cmp,
    Const,
    IsaError,
    Mul,
    Not,
    Or,
    compile_arith,
    compile_predicate,
    exec_program,
    host_fold,
    inter_array_copy,
    mux_update,
    partial_width,
    pim_aggregate,
    prepare_masked_source,
    read_filter_bits,
    reduction_tree_ops,
)
from pimolap.layout import AttributeSpec, ColRange, Split, plan_layout, store_records

OP = {
    "eq": operator.eq, "ne": operator.ne, "lt": operator.lt,
    "le": operator.le, "gt": operator.gt, "ge": operator.ge,
}

SPECS = (
    AttributeSpec("a", 8),
    AttributeSpec("b", 8, signed=True),
    AttributeSpec("c", 8),
    AttributeSpec("g", 3, domain_size=6),
    AttributeSpec("h", 4),
)


def make_rows(n, seed=11):
    rng = random.Random(seed)
    return [
        (rng.randrange(250), rng.randint(-128, 127), rng.randrange(256),
         rng.randrange(6), rng.randrange(16))
        for _ in range(n)
    ]


def build(rows, split=Split.ONE_XB, partition=None, array_rows=32):
    lay = plan_layout(SPECS, array_rows=array_rows, array_cols=128, scratch_bits=64,
                      split=split, two_xb_partition=partition)
    return store_records(lay, rows), lay


def eval_pred(node, env):
    if isinstance(node, Cmp):
        rhs = env[node.right.name] if isinstance(node.right, AttrRef) else node.right.value
        return OP[node.op](env[node.left.name], rhs)
    if isinstance(node, And):
        out = np.ones_like(next(iter(env.values())), dtype=bool)
        for a in node.args:
            out &= eval_pred(a, env)
        return out
    if isinstance(node, Or):
        out = np.zeros_like(next(iter(env.values())), dtype=bool)
        for a in node.args:
            out |= eval_pred(a, env)
        return out
    return ~eval_pred(node.arg, env)


def env_of(rows):
    cols = list(zip(*rows))
    return {s.name: np.array(cols[i], dtype=np.int64) for i, s in enumerate(SPECS)}


def run_filter(mem, pred):
    prog = compile_predicate(mem, pred)
    try:
        exec_program(mem, prog)
        return read_filter_bits(mem, prog).astype(bool)
    finally:
        prog.release(mem)


def test_predicate_trees_match_oracle():
    rows = make_rows(100)
    mem, lay = build(rows)
    env = env_of(rows)
    cases = [
        Cmp("lt", AttrRef("a"), Const(100)),
        And((Cmp("ge", AttrRef("g"), Const(2)), Cmp("le", AttrRef("h"), Const(9)))),
        Or((Cmp("eq", AttrRef("g"), Const(0)),
            Not(Cmp("lt", AttrRef("b"), Const(0))))),
        Cmp("le", AttrRef("a"), AttrRef("c")),
        And((Or((Cmp("gt", AttrRef("h"), Const(3)), Cmp("ne", AttrRef("g"), Const(5)))),
             Not(And((Cmp("ge", AttrRef("a"), Const(50)),
                      Cmp("lt", AttrRef("a"), Const(150))))))),
        Not(Not(Cmp("gt", AttrRef("b"), Const(-64)))),
    ]
    rng = random.Random(5)
    from conftest import random_predicate
    cases += [random_predicate(rng, SPECS) for _ in range(30)]
    for pred in cases:
        got = run_filter(mem, pred)
        np.testing.assert_array_equal(got, eval_pred(pred, env), err_msg=repr(pred))
    assert lay.scratch[0].free_total == 64 - 1


def test_empty_conjunction_selects_all_valid():
    rows = make_rows(40)
    mem, _ = build(rows)
    assert run_filter(mem, And(())).all()
    assert not run_filter(mem, Or(())).any()


def test_two_xb_predicate_stages_operands():
    rows = make_rows(64)
    mem, lay = build(rows, split=Split.TWO_XB, partition={"c", "h"})
    env = env_of(rows)
    pred = And((Cmp("le", AttrRef("a"), AttrRef("c")), Cmp("gt", AttrRef("h"), Const(4))))
    prog = compile_predicate(mem, pred)
    try:
        assert prog.copy_width == 8 + 4  # both slot-1 operands staged once
        before = mem.stats.copy()
        exec_program(mem, prog)
        delta = mem.stats.delta(before)
        moved = prog.copy_width * lay.rows_per_array * mem.n_pages
        assert delta.pim_to_host_bits == moved
        assert delta.host_to_pim_bits == moved
        got = read_filter_bits(mem, prog).astype(bool)
    finally:
        prog.release(mem)
    np.testing.assert_array_equal(got, eval_pred(pred, env))


def masked_agg(mem, expr, mask_col, kind, circuit=Circuit.PURE_PIM):
    prog, dest, slot, width, signed = prepare_masked_source(mem, expr, mask_col, kind)
    try:
        exec_program(mem, prog)
        partials = pim_aggregate(mem, dest, kind, circuit, slot=slot, signed=signed)
        return host_fold(mem, partials)
    finally:
        prog.release(mem)


def test_masked_aggregation_matches_oracle():
    rows = make_rows(100, seed=3)
    mem, _ = build(rows)
    env = env_of(rows)
    pred = Cmp("lt", AttrRef("g"), Const(3))
    sel = eval_pred(pred, env)
    assert 0 < sel.sum() < len(rows)
    fprog = compile_predicate(mem, pred)
    try:
        exec_program(mem, fprog)
        mask = fprog.result.start
        assert masked_agg(mem, AttrRef("a"), mask, AggKind.SUM) == env["a"][sel].sum()
        assert masked_agg(mem, AttrRef("a"), mask, AggKind.MIN) == env["a"][sel].min()
        assert masked_agg(mem, AttrRef("a"), mask, AggKind.MAX) == env["a"][sel].max()
        # signed source
        assert masked_agg(mem, AttrRef("b"), mask, AggKind.SUM) == env["b"][sel].sum()
        assert masked_agg(mem, AttrRef("b"), mask, AggKind.MIN) == env["b"][sel].min()
        assert masked_agg(mem, AttrRef("b"), mask, AggKind.MAX) == env["b"][sel].max()
        # expression source
        want = (env["a"][sel] * env["h"][sel]).sum()
        assert masked_agg(mem, Mul(AttrRef("a"), AttrRef("h")), mask, AggKind.SUM) == want
        # COUNT is a popcount of the mask column itself
        p = pim_aggregate(mem, ColRange(mask, mask + 1), AggKind.COUNT, Circuit.PURE_PIM)
        assert host_fold(mem, p) == int(sel.sum())
    finally:
        fprog.release(mem)


def test_empty_selection_yields_identity_sentinels():
    rows = make_rows(60, seed=9)
    mem, _ = build(rows)
    pred = Cmp("eq", AttrRef("a"), Const(255))  # rows only hold 0..249
    fprog = compile_predicate(mem, pred)
    try:
        exec_program(mem, fprog)
        mask = fprog.result.start
        assert masked_agg(mem, AttrRef("a"), mask, AggKind.SUM) == 0
        assert masked_agg(mem, AttrRef("a"), mask, AggKind.MIN) == 255
        assert masked_agg(mem, AttrRef("a"), mask, AggKind.MAX) == 0
        assert masked_agg(mem, AttrRef("b"), mask, AggKind.MIN) == 127
        assert masked_agg(mem, AttrRef("b"), mask, AggKind.MAX) == -128
        p = pim_aggregate(mem, ColRange(mask, mask + 1), AggKind.COUNT, Circuit.PURE_PIM)
        assert host_fold(mem, p) == 0
    finally:
        fprog.release(mem)


def test_zero_record_relation():
    mem, lay = build([])
    assert mem.n_pages == 0
    pred = Cmp("ge", AttrRef("a"), Const(0))
    fprog = compile_predicate(mem, pred)
    try:
        exec_program(mem, fprog)
        assert read_filter_bits(mem, fprog).tolist() == []
        mask = fprog.result.start
        # fold over zero arrays: additive kinds give 0, order kinds give nothing
        assert masked_agg(mem, AttrRef("a"), mask, AggKind.SUM) == 0
        assert masked_agg(mem, AttrRef("a"), mask, AggKind.MIN) is None
        assert masked_agg(mem, AttrRef("b"), mask, AggKind.MAX) is None
    finally:
        fprog.release(mem)


def test_replay_is_idempotent_but_still_charged():
    rows = make_rows(50, seed=21)
    mem, _ = build(rows)
    prog = compile_predicate(mem, Cmp("ge", AttrRef("c"), Const(90)))
    try:
        exec_program(mem, prog)
        first = read_filter_bits(mem, prog)
        ops_once = mem.stats.pim_col_ops
        exec_program(mem, prog)
        second = read_filter_bits(mem, prog)
        assert second.tolist() == first.tolist()
        assert mem.stats.pim_col_ops == 2 * ops_once
    finally:
        prog.release(mem)


def test_release_returns_scratch_and_is_reentrant():
    rows = make_rows(30)
    mem, lay = build(rows)
    free0 = lay.scratch[0].free_total
    prog = compile_predicate(mem, Cmp("lt", AttrRef("a"), AttrRef("c")))
    assert lay.scratch[0].free_total < free0
    prog.release(mem)
    assert lay.scratch[0].free_total == free0
    prog.release(mem)  # second release is a no-op, not a double free
    assert lay.scratch[0].free_total == free0


def test_dump_is_deterministic():
    rows = make_rows(40)
    mem, _ = build(rows)
    pred = Or((Cmp("eq", AttrRef("g"), Const(3)), Cmp("lt", AttrRef("h"), Const(5))))
    p1 = compile_predicate(mem, pred)
    d1 = p1.dump()
    p1.release(mem)
    p2 = compile_predicate(mem, pred)
    d2 = p2.dump()
    p2.release(mem)
    assert d1 == d2
    assert len(d1.splitlines()) == p2.op_count
    mem2, _ = build(rows, split=Split.TWO_XB, partition={"c"})
    p3 = compile_predicate(mem2, Cmp("le", AttrRef("a"), AttrRef("c")))
    assert any(line.startswith("COPY xb1:") for line in p3.dump().splitlines())
    p3.release(mem2)


def test_read_filter_bits_contract():
    rows = make_rows(70, seed=2)
    mem, _ = build(rows)
    prog = compile_predicate(mem, Cmp("ge", AttrRef("a"), Const(0)))
    try:
        exec_program(mem, prog)
        before = mem.stats.pim_to_host_bits
        bits = read_filter_bits(mem, prog)
        assert len(bits) == mem.record_count == 70
        assert mem.stats.pim_to_host_bits - before == 70
    finally:
        prog.release(mem)
    aprog = compile_arith(mem, AttrRef("h"))
    try:
        with pytest.raises(IsaError, match="single-column result"):
            read_filter_bits(mem, aprog)
    finally:
        aprog.release(mem)


@pytest.mark.parametrize("kind", [AggKind.SUM, AggKind.COUNT, AggKind.MIN, AggKind.MAX])
def test_circuit_charge_models(kind):
    rows = make_rows(96, seed=7)
    env = env_of(rows)
    results = {}
    for circuit in Circuit:
        mem, lay = build(rows)
        fprog = compile_predicate(mem, Cmp("lt", AttrRef("h"), Const(8)))
        exec_program(mem, fprog)
        mask = fprog.result.start
        src = ColRange(mask, mask + 1) if kind is AggKind.COUNT else None
        if src is None:
            prog, src, slot, w, sg = prepare_masked_source(mem, AttrRef("a"), mask, kind)
            exec_program(mem, prog)
        else:
            prog, slot, w, sg = None, 0, 1, False
        before = mem.stats.copy()
        partials = pim_aggregate(mem, src, kind, circuit, slot=slot, signed=sg)
        delta = mem.stats.delta(before)
        rpa, pages = lay.rows_per_array, mem.n_pages
        if circuit is Circuit.PURE_PIM:
            ops = reduction_tree_ops(kind, src.width, rpa)
            assert delta.pim_col_ops == ops * pages
            assert delta.cell_writes == ops * rpa * pages
        else:
            assert delta.pim_col_ops == 0
            assert delta.cell_writes == partial_width(kind, src.width, rpa) * pages
        before = mem.stats.copy()
        results[circuit] = host_fold(mem, partials)
        assert (mem.stats.delta(before).pim_to_host_bits
                == partial_width(kind, src.width, rpa) * pages)
        if prog is not None:
            prog.release(mem)
        fprog.release(mem)
    assert results[Circuit.PURE_PIM] == results[Circuit.PERIPHERAL]
    sel = env["h"] < 8
    want = int(sel.sum()) if kind is AggKind.COUNT else {
        AggKind.SUM: int(env["a"][sel].sum()),
        AggKind.MIN: int(env["a"][sel].min()),
        AggKind.MAX: int(env["a"][sel].max()),
    }[kind]
    assert results[Circuit.PURE_PIM] == want


def test_inter_array_copy_wrapper_charges():
    rows = make_rows(32)
    mem, lay = build(rows, split=Split.TWO_XB, partition={"c"})
    src = lay.columns_of("c")
    dst = mem.scratch_alloc(src.width, 0)
    before = mem.stats.copy()
    inter_array_copy(mem, 0, 1, src, 0, dst)
    delta = mem.stats.delta(before)
    assert delta.pim_to_host_bits == delta.host_to_pim_bits == 32 * 8
    mem.scratch_free(dst, 0)


def apply_update(mem, pred, attr, value):
    prog = compile_predicate(mem, pred)
    try:
        exec_program(mem, prog)
        mux_update(mem, attr, prog.result.start, value)
    finally:
        prog.release(mem)


def test_mux_update_matches_oracle():
    rows = make_rows(80, seed=13)
    mem, lay = build(rows)
    env = env_of(rows)
    pred = Cmp("ge", AttrRef("g"), Const(4))
    sel = eval_pred(pred, env)
    before = mem.stats.copy()
    apply_update(mem, pred, "a", 77)
    got = mem.read_attribute("a")
    np.testing.assert_array_equal(got, np.where(sel, 77, env["a"]))
    # the in-place update itself sends nothing host-ward; only the verifying
    # attribute read above crosses the boundary
    delta = mem.stats.delta(before)
    assert delta.pim_to_host_bits == 80 * lay.attr("a").width
    # untouched attributes and validity survive
    np.testing.assert_array_equal(mem.read_attribute("c"), env["c"])
    assert mem.read_result_col(lay.validity_col).all()


def test_mux_update_signed_and_no_match():
    rows = make_rows(40, seed=4)
    mem, _ = build(rows)
    env = env_of(rows)
    apply_update(mem, Cmp("lt", AttrRef("b"), Const(0)), "b", -3)
    want = np.where(env["b"] < 0, -3, env["b"])
    np.testing.assert_array_equal(mem.read_attribute("b"), want)
    apply_update(mem, Cmp("eq", AttrRef("a"), Const(251)), "h", 15)  # matches nothing
    np.testing.assert_array_equal(mem.read_attribute("h"), env["h"])


def test_mux_update_rejects_misfit_value():
    mem, _ = build(make_rows(10))
    with pytest.raises(IsaError, match="does not fit"):
        mux_update(mem, "h", mem.layout.validity_col, 16)
    with pytest.raises(IsaError, match="does not fit"):
        mux_update(mem, "b", mem.layout.validity_col, -129)


def test_composed_kinds_rejected_at_isa_level():
    mem, _ = build(make_rows(10))
    with pytest.raises(IsaError, match="composed"):
        prepare_masked_source(mem, AttrRef("a"), mem.layout.validity_col, AggKind.AVG)
    with pytest.raises(IsaError, match="composed"):
        prepare_masked_source(mem, AttrRef("a"), mem.layout.validity_col, AggKind.COUNT)
    with pytest.raises(IsaError, match="unsupported"):
        pim_aggregate(mem, ColRange(0, 4), AggKind.AVG, Circuit.PURE_PIM)
