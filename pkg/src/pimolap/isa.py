"""Bit-serial compilation of query primitives into column-op programs.

Predicates, fixed-width arithmetic, mask construction, aggregation, and
conditional update all reduce to sequences of single-column logic ops that
every page replays identically. Values are bit-sliced: bit k of an operand
lives in its own column, so an 8-bit compare becomes a handful of ops per
bit position, applied to all records at once.

The compiler works over *bits* that are either a column index or a
compile-time boolean. Immediate operands enter as booleans and fold away
wherever possible; only root results are materialized into scratch columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Union

import numpy as np

from .crossbar import ColOp, OpKind, encode_ops
from .layout import ColRange, PimMemory, Split

Bit = Union[int, bool]  # column index, or a compile-time constant


class IsaError(ValueError):
    pass


class AggKind(Enum):
    SUM = "sum"
    MIN = "min"
    MAX = "max"
    COUNT = "count"
    AVG = "avg"  # composed from SUM and COUNT by the engine


class Circuit(Enum):
    PURE_PIM = "pure"
    PERIPHERAL = "peripheral"


# ---------------------------------------------------------------------------
# Expression and predicate nodes (built by the parser, compiled here)

@dataclass(frozen=True)
class AttrRef:
    name: str


@dataclass(frozen=True)
class Const:
    value: int


@dataclass(frozen=True)
class Add:
    left: "ArithNode"
    right: "ArithNode"


@dataclass(frozen=True)
class Mul:
    left: "ArithNode"
    right: "ArithNode"


ArithNode = Union[AttrRef, Const, Add, Mul]

CMP_OPS = ("eq", "ne", "lt", "le", "gt", "ge")
CMP_SYMBOL = {"eq": "=", "ne": "<>", "lt": "<", "le": "<=", "gt": ">", "ge": ">="}


@dataclass(frozen=True)
class Cmp:
    op: str
    left: AttrRef
    right: Union[AttrRef, Const]

    def __post_init__(self):
        if self.op not in CMP_OPS:
            raise IsaError(f"unknown comparison {self.op!r}")


@dataclass(frozen=True)
class And:
    args: tuple


@dataclass(frozen=True)
class Or:
    args: tuple


@dataclass(frozen=True)
class Not:
    arg: object


PredNode = Union[Cmp, And, Or, Not]

TAUTOLOGY = And(())


def pred_attrs(pred: PredNode) -> set[str]:
    if isinstance(pred, Cmp):
        out = {pred.left.name}
        if isinstance(pred.right, AttrRef):
            out.add(pred.right.name)
        return out
    if isinstance(pred, (And, Or)):
        out: set[str] = set()
        for a in pred.args:
            out |= pred_attrs(a)
        return out
    if isinstance(pred, Not):
        return pred_attrs(pred.arg)
    raise IsaError(f"not a predicate node: {pred!r}")


def expr_attrs(expr: ArithNode) -> set[str]:
    if isinstance(expr, AttrRef):
        return {expr.name}
    if isinstance(expr, Const):
        return set()
    if isinstance(expr, (Add, Mul)):
        return expr_attrs(expr.left) | expr_attrs(expr.right)
    raise IsaError(f"not an arithmetic node: {expr!r}")


def natural_width(expr: ArithNode, layout) -> int:
    """Smallest width that cannot overflow, before any declared truncation."""
    if isinstance(expr, AttrRef):
        spec = layout.attr(expr.name)
        if spec.signed:
            raise IsaError(
                f"arithmetic over signed attribute {expr.name!r} is not supported"
            )
        return spec.width
    if isinstance(expr, Const):
        if expr.value < 0:
            raise IsaError("negative immediates are not supported in arithmetic")
        return max(1, expr.value.bit_length())
    if isinstance(expr, Add):
        return max(natural_width(expr.left, layout), natural_width(expr.right, layout)) + 1
    if isinstance(expr, Mul):
        return natural_width(expr.left, layout) + natural_width(expr.right, layout)
    raise IsaError(f"not an arithmetic node: {expr!r}")


# ---------------------------------------------------------------------------
# Programs

@dataclass(frozen=True)
class SlotOp:
    slot: int
    op: ColOp


@dataclass(frozen=True)
class CopyStep:
    """Host-mediated inter-array column copy, executed once per page."""

    src_slot: int
    src: ColRange
    dst_slot: int
    dst: ColRange


class PimProgram:
    """An immutable op sequence replayed on every page, plus its scratch."""

    def __init__(
        self,
        steps: list,
        result: ColRange | None,
        result_slot: int,
        owned: list[tuple[int, ColRange]],
    ):
        self.steps = steps
        self.result = result
        self.result_slot = result_slot
        self._owned = owned
        self._released = False
        self._segs: list | None = None

    @property
    def op_count(self) -> int:
        return sum(1 for s in self.steps if isinstance(s, SlotOp))

    @property
    def copy_width(self) -> int:
        """Columns moved between arrays per page (each costs 2*rows bits)."""
        return sum(s.src.width for s in self.steps if isinstance(s, CopyStep))

    def dump(self) -> str:
        lines = []
        for s in self.steps:
            if isinstance(s, SlotOp):
                lines.append(str(s.op) if s.slot == 0 else f"xb1: {s.op}")
            else:
                lines.append(f"COPY xb{s.src_slot}:{s.src} -> xb{s.dst_slot}:{s.dst}")
        return "\n".join(lines)

    def release(self, memory: PimMemory) -> None:
        """Return all scratch (including the result columns) to the layout."""
        if self._released:
            return
        self._released = True
        for slot, r in self._owned:
            memory.scratch_free(r, slot)

    def _segments(self, array_cols: int) -> list:
        """Steps batched into encoded op runs split at copy boundaries."""
        if self._segs is not None:
            return self._segs
        segs: list = []
        pending: dict[int, list[ColOp]] = {}

        def flush():
            for slot in sorted(pending):
                ops = pending[slot]
                if ops:
                    segs.append(("ops", slot, encode_ops(ops, array_cols), len(ops)))
            pending.clear()

        for s in self.steps:
            if isinstance(s, SlotOp):
                pending.setdefault(s.slot, []).append(s.op)
            else:
                flush()
                segs.append(("copy", s))
        flush()
        self._segs = segs
        return segs


def exec_program(memory: PimMemory, program: PimProgram, pages: Sequence[int] | None = None) -> None:
    """Replay the program template on the selected pages (default: all)."""
    segs = program._segments(memory.layout.array_cols)
    targets = range(memory.n_pages) if pages is None else pages
    for p in targets:
        for seg in segs:
            if seg[0] == "ops":
                _, slot, encoded, _ = seg
                memory.exec_encoded(encoded, slot, pages=[p])
            else:
                c = seg[1]
                memory.copy_columns(p, c.src_slot, c.src, c.dst_slot, c.dst)


def read_filter_bits(memory: PimMemory, program: PimProgram) -> np.ndarray:
    """One result bit per live record, in record order."""
    if program.result is None or program.result.width != 1:
        raise IsaError("program has no single-column result")
    return memory.read_result_col(program.result.start, program.result_slot)


def inter_array_copy(memory: PimMemory, page: int, src_slot: int, src: ColRange,
                     dst_slot: int, dst: ColRange) -> None:
    """Move columns between the two arrays of a page through the host."""
    memory.copy_columns(page, src_slot, src, dst_slot, dst)


# ---------------------------------------------------------------------------
# Builder: scratch-temp pooling and step emission

class ProgramBuilder:
    def __init__(self, memory: PimMemory):
        self.memory = memory
        self.steps: list = []
        self._owned: list[tuple[int, ColRange]] = []
        self._temps: dict[int, set[int]] = {}
        self._free: dict[int, list[int]] = {}

    def col(self, slot: int = 0) -> int:
        """A single scratch column, reusing released temps first."""
        free = self._free.setdefault(slot, [])
        if free:
            return free.pop()
        r = self.memory.scratch_alloc(1, slot)
        self._owned.append((slot, r))
        self._temps.setdefault(slot, set()).add(r.start)
        return r.start

    def drop(self, col: int, slot: int = 0) -> None:
        """Release a temp for reuse; attribute/mask columns pass through."""
        if col not in self._temps.get(slot, ()):
            return
        free = self._free[slot]
        if col in free:
            raise IsaError(f"internal: column c{col} dropped twice")
        free.append(col)

    def range(self, n_bits: int, slot: int = 0) -> ColRange:
        r = self.memory.scratch_alloc(n_bits, slot)
        self._owned.append((slot, r))
        return r

    def emit(self, kind: OpKind, srcs: Sequence[int], dest: int, slot: int = 0) -> None:
        self.steps.append(SlotOp(slot, ColOp(kind, tuple(srcs), dest)))

    def copy_between(self, src_slot: int, src: ColRange, dst_slot: int, dst: ColRange) -> None:
        self.steps.append(CopyStep(src_slot, src, dst_slot, dst))

    def stage_in(self, src_slot: int, src: ColRange, dst_slot: int) -> ColRange:
        """Copy columns into a scratch range of another slot."""
        dst = self.range(src.width, dst_slot)
        self.copy_between(src_slot, src, dst_slot, dst)
        return dst

    def finish(self, result: ColRange | None, result_slot: int = 0) -> PimProgram:
        return PimProgram(self.steps, result, result_slot, self._owned)


class BitOps:
    """Constant-folding logic helpers over one slot.

    Column results are always freshly allocated temps owned by the caller;
    inputs are never consumed. ``drop`` is pool-aware, so handing back an
    attribute column is a no-op.
    """

    def __init__(self, builder: ProgramBuilder, slot: int = 0):
        self.b = builder
        self.slot = slot

    def drop(self, x: Bit) -> None:
        if not isinstance(x, bool):
            self.b.drop(x, self.slot)

    def drop_all(self, xs: Sequence[Bit]) -> None:
        for x in xs:
            self.drop(x)

    def _fresh(self, kind: OpKind, srcs: Sequence[int]) -> int:
        d = self.b.col(self.slot)
        self.b.emit(kind, srcs, d, self.slot)
        return d

    def copy_(self, a: Bit) -> Bit:
        if isinstance(a, bool):
            return a
        return self._fresh(OpKind.COPY, [a])

    def const_col(self, v: bool) -> int:
        d = self.b.col(self.slot)
        self.b.emit(OpKind.SET1 if v else OpKind.SET0, [], d, self.slot)
        return d

    def materialize(self, a: Bit) -> int:
        return self.const_col(a) if isinstance(a, bool) else a

    def not_(self, a: Bit) -> Bit:
        if isinstance(a, bool):
            return not a
        return self._fresh(OpKind.NOT, [a])

    def and_(self, a: Bit, bb: Bit) -> Bit:
        if isinstance(a, bool):
            return self.copy_(bb) if a else False
        if isinstance(bb, bool):
            return self.copy_(a) if bb else False
        return self._fresh(OpKind.AND, [a, bb])

    def or_(self, a: Bit, bb: Bit) -> Bit:
        if isinstance(a, bool):
            return True if a else self.copy_(bb)
        if isinstance(bb, bool):
            return True if bb else self.copy_(a)
        return self._fresh(OpKind.OR, [a, bb])

    def xor_(self, a: Bit, bb: Bit) -> Bit:
        if isinstance(a, bool):
            return self.not_(bb) if a else self.copy_(bb)
        if isinstance(bb, bool):
            return self.not_(a) if bb else self.copy_(a)
        return self._fresh(OpKind.XOR, [a, bb])

    def write_into(self, a: Bit, dest: int) -> None:
        """Materialize a bit into a specific column."""
        if isinstance(a, bool):
            self.b.emit(OpKind.SET1 if a else OpKind.SET0, [], dest, self.slot)
        elif a != dest:
            self.b.emit(OpKind.COPY, [a], dest, self.slot)


def const_bits(value: int, width: int) -> list[Bit]:
    """Two's-complement bit list, LSB first."""
    masked = value & ((1 << width) - 1)
    return [bool(masked >> i & 1) for i in range(width)]


# ---------------------------------------------------------------------------
# Comparison circuits (bit-serial, MSB to LSB)

def _equality(bits: BitOps, a: list[Bit], b: list[Bit]) -> Bit:
    """eq = AND over per-bit NOT(a XOR b)."""
    eq: Bit = True
    for ai, bi in zip(a, b):
        ne = bits.xor_(ai, bi)
        ee = bits.not_(ne)
        bits.drop(ne)
        if ee is True:
            continue
        if eq is True:
            eq = ee
        else:
            new = bits.and_(eq, ee)
            bits.drop(eq)
            bits.drop(ee)
            eq = new
    return eq


def _compare(bits: BitOps, a: list[Bit], b: list[Bit]) -> tuple[Bit, Bit]:
    """(a < b, a == b) for unsigned bit lists of equal width.

    Walking from the MSB, ``lt`` latches at the first position where the
    operands differ with a clear, ``eq`` clears on any difference.
    """
    lt: Bit = False
    eq: Bit = True
    for i in range(len(a) - 1, -1, -1):
        ai, bi = a[i], b[i]
        na = bits.not_(ai)
        here = bits.and_(na, bi)  # a_i < b_i
        bits.drop(na)
        if eq is True:
            t3 = here
        else:
            t3 = bits.and_(eq, here)
            bits.drop(here)
        if t3 is not False:
            if lt is False:
                lt = t3
            else:
                new = bits.or_(lt, t3)
                bits.drop(lt)
                bits.drop(t3)
                lt = new
        ne = bits.xor_(ai, bi)
        ee = bits.not_(ne)
        bits.drop(ne)
        if ee is not True:
            if eq is True:
                eq = ee
            else:
                new = bits.and_(eq, ee)
                bits.drop(eq)
                bits.drop(ee)
                eq = new
    return lt, eq


def _bias_sign(bits: BitOps, operand: list[Bit]) -> list[Bit]:
    """Flip the sign bit so unsigned compare gives signed order."""
    out = list(operand)
    out[-1] = bits.not_(out[-1])
    return out


# ---------------------------------------------------------------------------
# Ripple-carry adder and shift-and-add multiplier over bit lists

def _bit_at(xs: list[Bit], i: int) -> Bit:
    return xs[i] if i < len(xs) else False


def _full_add(bits: BitOps, ai: Bit, bi: Bit, c: Bit) -> tuple[Bit, Bit]:
    """(sum, carry); consumes nothing."""
    t1 = bits.xor_(ai, bi)
    s = bits.xor_(t1, c)
    t2 = bits.and_(ai, bi)
    t3 = bits.and_(c, t1)
    nc = bits.or_(t2, t3)
    bits.drop(t1)
    bits.drop(t2)
    bits.drop(t3)
    return s, nc


def _ripple_add(bits: BitOps, a: list[Bit], b: list[Bit], width: int) -> list[Bit]:
    out: list[Bit] = []
    c: Bit = False
    for i in range(width):
        s, nc = _full_add(bits, _bit_at(a, i), _bit_at(b, i), c)
        bits.drop(c)
        out.append(s)
        c = nc
    bits.drop(c)
    return out


def _shift_add_mul(bits: BitOps, a: list[Bit], b: list[Bit], width: int) -> list[Bit]:
    """Low ``width`` bits of a*b; rows with a constant-zero multiplier fold away."""
    acc: list[Bit] = [False] * width
    owned_a = []  # copies made so acc never aliases an input column
    for i, ai in enumerate(a):
        if i >= width or ai is False:
            continue
        c: Bit = False
        for j in range(width - i):
            pp = bits.and_(ai, _bit_at(b, j))
            if pp is False and c is False:
                continue
            k = i + j
            if acc[k] is False and c is False:
                acc[k] = pp
                continue
            s, nc = _full_add(bits, acc[k], pp, c)
            bits.drop(acc[k])
            bits.drop(pp)
            bits.drop(c)
            acc[k] = s
            c = nc
        bits.drop(c)
    return acc


# ---------------------------------------------------------------------------
# Predicate compilation

def _attr_operand(builder: ProgramBuilder, memory: PimMemory, name: str,
                  staged: dict[str, ColRange]) -> tuple[list[Bit], object]:
    """Column bit list of an attribute, staging slot-1 attributes into slot 0."""
    layout = memory.layout
    spec = layout.attr(name)
    slot, cols = layout.attr_columns[name]
    if slot != 0:
        if name not in staged:
            staged[name] = builder.stage_in(slot, cols, 0)
        cols = staged[name]
    return [c for c in cols.cols], spec


def _imm_fits(spec, value: int) -> bool:
    return spec.min_value <= value <= spec.max_value


def _compile_cmp(bits: BitOps, builder: ProgramBuilder, memory: PimMemory,
                 node: Cmp, staged: dict[str, ColRange]) -> Bit:
    a_bits, a_spec = _attr_operand(builder, memory, node.left.name, staged)
    if isinstance(node.right, AttrRef):
        b_bits, b_spec = _attr_operand(builder, memory, node.right.name, staged)
        if a_spec.width != b_spec.width:
            raise IsaError(
                f"cannot compare {a_spec.name!r} ({a_spec.width} bits) with "
                f"{b_spec.name!r} ({b_spec.width} bits): widths must be equal"
            )
        if a_spec.signed != b_spec.signed:
            raise IsaError(
                f"cannot compare {a_spec.name!r} with {b_spec.name!r}: "
                "signedness differs"
            )
    else:
        if not _imm_fits(a_spec, node.right.value):
            raise IsaError(
                f"immediate {node.right.value} does not fit attribute "
                f"{a_spec.name!r} ({a_spec.width} bits, "
                f"{a_spec.min_value}..{a_spec.max_value})"
            )
        b_bits = const_bits(node.right.value, a_spec.width)

    if node.op == "eq":
        return _equality(bits, a_bits, b_bits)
    if node.op == "ne":
        eq = _equality(bits, a_bits, b_bits)
        out = bits.not_(eq)
        bits.drop(eq)
        return out

    if a_spec.signed:
        a_bits = _bias_sign(bits, a_bits)
        b_bits = _bias_sign(bits, b_bits)
    if node.op in ("lt", "le"):
        lt, eq = _compare(bits, a_bits, b_bits)
    else:  # gt, ge: swap operands
        lt, eq = _compare(bits, b_bits, a_bits)
    if a_spec.signed:
        bits.drop(a_bits[-1])
        bits.drop(b_bits[-1])
    if node.op in ("lt", "gt"):
        bits.drop(eq)
        return lt
    if node.op in ("le", "ge"):
        out = bits.or_(lt, eq)
        bits.drop(lt)
        bits.drop(eq)
        return out
    raise IsaError(f"unknown comparison {node.op!r}")


def _compile_pred(bits: BitOps, builder: ProgramBuilder, memory: PimMemory,
                  node: PredNode, staged: dict[str, ColRange]) -> Bit:
    if isinstance(node, Cmp):
        return _compile_cmp(bits, builder, memory, node, staged)
    if isinstance(node, Not):
        inner = _compile_pred(bits, builder, memory, node.arg, staged)
        out = bits.not_(inner)
        bits.drop(inner)
        return out
    if isinstance(node, (And, Or)):
        fold = bits.and_ if isinstance(node, And) else bits.or_
        acc: Bit = isinstance(node, And)
        for child in node.args:
            cb = _compile_pred(bits, builder, memory, child, staged)
            new = fold(acc, cb)
            bits.drop(acc)
            bits.drop(cb)
            acc = new
        return acc
    raise IsaError(f"not a predicate node: {node!r}")


def compile_predicate(memory: PimMemory, pred: PredNode) -> PimProgram:
    """Filter program whose 1-bit result is pred AND the validity column.

    Under the split layout all comparison operands are staged into the
    first array, so the program may begin with inter-array copies.
    """
    builder = ProgramBuilder(memory)
    bits = BitOps(builder, slot=0)
    staged: dict[str, ColRange] = {}
    p = _compile_pred(bits, builder, memory, pred, staged)
    res = bits.and_(p, memory.layout.validity_col)
    bits.drop(p)
    res_col = bits.materialize(res)
    return builder.finish(ColRange(res_col, res_col + 1), 0)


# ---------------------------------------------------------------------------
# Arithmetic compilation

def _compile_expr(bits: BitOps, builder: ProgramBuilder, memory: PimMemory,
                  node: ArithNode, limit: int, staged: dict[str, ColRange]) -> list[Bit]:
    """Bit list of the expression truncated to ``limit`` bits.

    Truncation distributes over + and × (arithmetic mod 2^limit), so
    sub-results never need more than ``limit`` columns.
    """
    if isinstance(node, AttrRef):
        cols, spec = _attr_operand(builder, memory, node.name, staged)
        if spec.signed:
            raise IsaError(
                f"arithmetic over signed attribute {node.name!r} is not supported"
            )
        return cols[:limit]
    if isinstance(node, Const):
        if node.value < 0:
            raise IsaError("negative immediates are not supported in arithmetic")
        w = max(1, node.value.bit_length())
        return const_bits(node.value, min(w, limit))
    if isinstance(node, Add):
        a = _compile_expr(bits, builder, memory, node.left, limit, staged)
        b = _compile_expr(bits, builder, memory, node.right, limit, staged)
        w = min(max(len(a), len(b)) + 1, limit)
        out = _ripple_add(bits, a, b, w)
        bits.drop_all(a)
        bits.drop_all(b)
        return out
    if isinstance(node, Mul):
        a = _compile_expr(bits, builder, memory, node.left, limit, staged)
        b = _compile_expr(bits, builder, memory, node.right, limit, staged)
        w = min(len(a) + len(b), limit)
        out = _shift_add_mul(bits, a, b, w)
        bits.drop_all(a)
        bits.drop_all(b)
        return out
    raise IsaError(f"not an arithmetic node: {node!r}")


def compile_arith(memory: PimMemory, expr: ArithNode, width: int | None = None) -> PimProgram:
    """Evaluate an unsigned +/× expression into a scratch column range.

    Without a declared width the result is wide enough never to overflow
    (error beyond 64 bits); with one, the value wraps modulo 2^width.
    """
    nat = natural_width(expr, memory.layout)
    if width is None:
        if nat > 64:
            raise IsaError(f"expression needs {nat} bits; width overflow beyond 64")
        width = nat
    elif not 1 <= width <= 64:
        raise IsaError(f"declared width {width} not in 1..64")
    builder = ProgramBuilder(memory)
    bits = BitOps(builder, slot=0)
    staged: dict[str, ColRange] = {}
    out = _compile_expr(bits, builder, memory, expr, width, staged)
    dest = builder.range(width, 0)
    for i, c in enumerate(dest.cols):
        bits.write_into(_bit_at(out, i), c)
    bits.drop_all(out)
    return builder.finish(dest, 0)


# ---------------------------------------------------------------------------
# Masking and aggregation

def _emit_masked(bits: BitOps, builder: ProgramBuilder, src: list[Bit], mask: int,
                 kind: AggKind, signed: bool, dest: ColRange, slot: int) -> None:
    """Write src with non-selected rows forced to the aggregation identity.

    SUM/COUNT/MAX zero them; MIN raises them to the maximum representable
    value. For signed sources the sign bit is treated oppositely so the
    sentinels become the signed extremes.
    """
    nm: Bit | None = None
    if kind is AggKind.MIN or (kind is AggKind.MAX and signed):
        nm = bits.not_(mask)
    msb = dest.width - 1
    for i, dcol in enumerate(dest.cols):
        sbit = _bit_at(src, i)
        if signed and i == msb:
            # sign bit works opposite: forcing it to 1 makes the value minimal
            raise_i = kind is AggKind.MAX
        else:
            raise_i = kind is AggKind.MIN
        if raise_i:
            # unselected -> 1
            if sbit is True:
                builder.emit(OpKind.SET1, [], dcol, slot)
            elif sbit is False:
                builder.emit(OpKind.COPY, [nm], dcol, slot)
            else:
                builder.emit(OpKind.OR, [sbit, nm], dcol, slot)
        else:
            # unselected -> 0
            if sbit is False:
                builder.emit(OpKind.SET0, [], dcol, slot)
            elif sbit is True:
                builder.emit(OpKind.COPY, [mask], dcol, slot)
            else:
                builder.emit(OpKind.AND, [sbit, mask], dcol, slot)
    if nm is not None:
        bits.drop(nm)


def mask_attribute(memory: PimMemory, source: ColRange, mask_col: int, kind: AggKind,
                   *, slot: int = 0, signed: bool = False) -> tuple[PimProgram, ColRange]:
    """Masked copy of source columns, leaving the original untouched."""
    if kind is AggKind.AVG:
        raise IsaError("AVG has no mask; compose it from SUM and COUNT")
    builder = ProgramBuilder(memory)
    bits = BitOps(builder, slot)
    dest = builder.range(source.width, slot)
    _emit_masked(bits, builder, list(source.cols), mask_col, kind, signed, dest, slot)
    return builder.finish(dest, slot), dest


def prepare_masked_source(memory: PimMemory, expr: ArithNode, mask_col: int,
                          kind: AggKind) -> tuple[PimProgram, ColRange, int, int, bool]:
    """One program: evaluate the aggregate source and mask it.

    Returns (program, masked columns, slot, width, signed). A plain
    attribute is masked in place in its own array (the mask bit is copied
    across under the split layout); expressions are evaluated in the first
    array, staging split-away source attributes as needed.
    """
    if kind in (AggKind.AVG, AggKind.COUNT):
        raise IsaError(f"{kind.value} is composed by the engine, not masked here")
    layout = memory.layout
    builder = ProgramBuilder(memory)
    if isinstance(expr, AttrRef):
        spec = layout.attr(expr.name)
        slot, cols = layout.attr_columns[expr.name]
        m = mask_col
        if slot != 0:
            staged_mask = builder.stage_in(0, ColRange(mask_col, mask_col + 1), slot)
            m = staged_mask.start
        bits = BitOps(builder, slot)
        dest = builder.range(spec.width, slot)
        _emit_masked(bits, builder, list(cols.cols), m, kind, spec.signed, dest, slot)
        return builder.finish(dest, slot), dest, slot, spec.width, spec.signed
    nat = natural_width(expr, layout)
    if nat > 64:
        raise IsaError(f"expression needs {nat} bits; width overflow beyond 64")
    bits = BitOps(builder, slot=0)
    staged: dict[str, ColRange] = {}
    out = _compile_expr(bits, builder, memory, expr, nat, staged)
    dest = builder.range(nat, 0)
    _emit_masked(bits, builder, out, mask_col, kind, False, dest, 0)
    bits.drop_all(out)
    return builder.finish(dest, 0), dest, 0, nat, False


# -- modeled in-array reduction costs ---------------------------------------

def adder_op_count(width: int) -> int:
    """Canonical ripple-carry length: 5 ops per bit, minus folded carries."""
    return max(2, 5 * width - 3)


def cmp_op_count(width: int) -> int:
    return 7 * width


def eq_op_count(width: int) -> int:
    return 3 * width


def mux_op_count(width: int) -> int:
    return 3 * width + 1


def tree_levels(rows: int) -> int:
    return max(0, math.ceil(math.log2(rows))) if rows > 1 else 0


def reduction_tree_ops(kind: AggKind, width: int, rows: int) -> int:
    """Column ops of a balanced in-array reduction over one array."""
    levels = tree_levels(rows)
    if kind is AggKind.SUM:
        return sum(adder_op_count(width + k) for k in range(levels))
    if kind is AggKind.COUNT:
        return sum(adder_op_count(1 + k) for k in range(levels))
    if kind in (AggKind.MIN, AggKind.MAX):
        return levels * (cmp_op_count(width) + mux_op_count(width))
    raise IsaError(f"no reduction tree for {kind}")


def partial_width(kind: AggKind, width: int, rows: int) -> int:
    """Bits of one per-array partial crossing to the host."""
    if kind is AggKind.SUM:
        return width + tree_levels(rows)
    if kind is AggKind.COUNT:
        return 1 + tree_levels(rows)
    if kind in (AggKind.MIN, AggKind.MAX):
        return width
    raise IsaError(f"no partial for {kind}")


@dataclass
class Partials:
    """Per-array partial aggregates, pre-fold."""

    kind: AggKind
    width: int
    values: list[int]


def _fold_array(raw: np.ndarray, kind: AggKind, width: int, signed: bool) -> int:
    """Exact scalar fold of one array's masked values."""
    if signed and width < 64:
        as64 = raw.astype(np.int64)
        vals = np.where(as64 >= np.int64(1 << (width - 1)),
                        as64 - np.int64(1 << width), as64)
    elif signed:
        vals = raw.view(np.int64)
    else:
        vals = raw
    if kind is AggKind.MIN:
        return int(vals.min())
    if kind is AggKind.MAX:
        return int(vals.max())
    # SUM / COUNT: int64 accumulation is exact while width + log2(rows) fits
    if width + max(1, len(raw)).bit_length() <= 62:
        return int(vals.astype(np.int64).sum())
    return sum(int(v) for v in vals)


def pim_aggregate(memory: PimMemory, cols: ColRange, kind: AggKind,
                  circuit: Circuit, *, slot: int = 0, signed: bool = False) -> Partials:
    """Reduce masked columns to one value per array.

    Values are computed functionally; the chosen circuit determines the
    charged work. PURE_PIM models a balanced reduction tree of compiled
    adders/comparators (column ops and full-column writes per level);
    PERIPHERAL models the per-array accumulator circuit, which reads rows
    internally and writes back only the final value.
    """
    if kind not in (AggKind.SUM, AggKind.MIN, AggKind.MAX, AggKind.COUNT):
        raise IsaError(f"unsupported aggregation kind {kind}")
    w = cols.width
    rows = memory.layout.rows_per_array
    col_list = list(cols.cols)
    values: list[int] = []
    for arrays in memory.pages:
        raw = arrays[slot].read_field(col_list)
        values.append(_fold_array(raw, kind, w, signed))
        if circuit is Circuit.PURE_PIM:
            ops = reduction_tree_ops(kind, w, rows)
            memory.charge_modeled(col_ops=ops, cell_writes=ops * rows)
        else:
            memory.charge_modeled(cell_writes=partial_width(kind, w, rows))
    return Partials(kind, partial_width(kind, w, rows), values)


def host_fold(memory: PimMemory, partials: Partials):
    """Fold per-array partials on the host, charging their transfer."""
    memory.stats.pim_to_host_bits += partials.width * len(partials.values)
    vals = partials.values
    if partials.kind in (AggKind.SUM, AggKind.COUNT):
        return sum(vals)
    if not vals:
        return None
    return min(vals) if partials.kind is AggKind.MIN else max(vals)


# ---------------------------------------------------------------------------
# Conditional update

def mux_update(memory: PimMemory, attr: str, mask_col: int, new_value: int) -> None:
    """attr := mask ? new_value : attr, for every record, in place.

    Pure column ops (the filter bit is the select line); nothing but the
    mask bit ever crosses back to the host.
    """
    layout = memory.layout
    spec = layout.attr(attr)
    if not spec.min_value <= new_value <= spec.max_value:
        raise IsaError(
            f"value {new_value} does not fit attribute {attr!r} "
            f"({spec.min_value}..{spec.max_value})"
        )
    slot, cols = layout.attr_columns[attr]
    builder = ProgramBuilder(memory)
    m = mask_col
    if slot != 0:
        staged = builder.stage_in(0, ColRange(mask_col, mask_col + 1), slot)
        m = staged.start
    bits = BitOps(builder, slot)
    vbits = const_bits(new_value, spec.width)
    nm: Bit | None = None
    if not all(vbits):
        nm = bits.not_(m)
    for i, c in enumerate(cols.cols):
        if vbits[i]:
            builder.emit(OpKind.OR, [c, m], c, slot)
        else:
            builder.emit(OpKind.AND, [c, nm], c, slot)
    if nm is not None:
        bits.drop(nm)
    program = builder.finish(None, slot)
    try:
        exec_program(memory, program)
    finally:
        program.release(memory)
