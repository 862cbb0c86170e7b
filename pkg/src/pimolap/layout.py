"""Mapping relations onto cell arrays.

One record per array row; each attribute occupies a contiguous column range
(least significant bit at the lowest column index). The columns left of the
array edge are scratch, reserved for intermediate and result bits. A relation
larger than one array spills onto more pages, one array (or an array pair,
for the vertically split layout) per page.

All data crossing the PIM/host boundary goes through :class:`PimMemory`,
which is the single place transfer statistics are charged.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .crossbar import CellArray
from .stats import TransferStats


class LayoutError(ValueError):
    pass


class ScratchExhausted(LayoutError):
    def __init__(self, requested: int, free_total: int, largest_hole: int):
        super().__init__(
            f"scratch exhausted: requested {requested} contiguous columns, "
            f"{free_total} free (largest hole {largest_hole})"
        )
        self.requested = requested
        self.free_total = free_total
        self.largest_hole = largest_hole


class Split(Enum):
    ONE_XB = "one_xb"
    TWO_XB = "two_xb"


@dataclass(frozen=True)
class AttributeSpec:
    """An attribute of a stored relation.

    ``domain_size`` (max encoded value + 1) is optional metadata the planner
    uses to enumerate candidate group keys without touching the data.
    """

    name: str
    width: int
    signed: bool = False
    domain_size: int | None = None

    def __post_init__(self):
        if not 1 <= self.width <= 64:
            raise LayoutError(f"attribute {self.name!r}: width {self.width} not in 1..64")

    @property
    def min_value(self) -> int:
        return -(1 << (self.width - 1)) if self.signed else 0

    @property
    def max_value(self) -> int:
        return (1 << (self.width - 1)) - 1 if self.signed else (1 << self.width) - 1


@dataclass(frozen=True)
class ColRange:
    """Half-open range of column indices."""

    start: int
    stop: int

    @property
    def width(self) -> int:
        return self.stop - self.start

    @property
    def cols(self) -> range:
        return range(self.start, self.stop)

    def __str__(self):
        return f"c{self.start}..c{self.stop - 1}" if self.width > 1 else f"c{self.start}"


class ScratchAllocator:
    """First-fit column allocator over one array's scratch range.

    Allocation is shared by every page so a single op program template is
    valid everywhere.
    """

    def __init__(self, region: ColRange):
        self.region = region
        self._holes: list[list[int]] = [[region.start, region.stop]]

    @property
    def free_total(self) -> int:
        return sum(b - a for a, b in self._holes)

    def alloc(self, n_bits: int) -> ColRange:
        if n_bits < 1:
            raise LayoutError(f"cannot allocate {n_bits} scratch columns")
        for hole in self._holes:
            if hole[1] - hole[0] >= n_bits:
                r = ColRange(hole[0], hole[0] + n_bits)
                hole[0] += n_bits
                if hole[0] == hole[1]:
                    self._holes.remove(hole)
                return r
        largest = max((b - a for a, b in self._holes), default=0)
        raise ScratchExhausted(n_bits, self.free_total, largest)

    def free(self, r: ColRange) -> None:
        if not (self.region.start <= r.start and r.stop <= self.region.stop):
            raise LayoutError(f"range {r} outside scratch region {self.region}")
        self._holes.append([r.start, r.stop])
        self._holes.sort()
        merged = [self._holes[0]]
        for a, b in self._holes[1:]:
            if a < merged[-1][1]:
                raise LayoutError(f"double free of scratch columns around c{a}")
            if a == merged[-1][1]:
                merged[-1][1] = b
            else:
                merged.append([a, b])
        self._holes = merged


@dataclass
class RelationLayout:
    """Column assignment of one relation, shared by all its pages."""

    schema: tuple[AttributeSpec, ...]
    split: Split
    partition: frozenset[str]
    rows_per_array: int
    array_cols: int
    scratch_bits: int
    attr_columns: dict[str, tuple[int, ColRange]]
    scratch: list[ScratchAllocator]
    validity_col: int
    record_count: int = 0
    n_pages: int = 0

    @property
    def n_slots(self) -> int:
        return 2 if self.split is Split.TWO_XB else 1

    def attr(self, name: str) -> AttributeSpec:
        for a in self.schema:
            if a.name == name:
                return a
        raise LayoutError(f"unknown attribute {name!r}")

    def has_attr(self, name: str) -> bool:
        return any(a.name == name for a in self.schema)

    def slot_of(self, name: str) -> int:
        return self.attr_columns[name][0]

    def columns_of(self, name: str) -> ColRange:
        return self.attr_columns[name][1]

    def descriptor(self) -> dict:
        """JSON-serializable layout description (debugging, golden tests)."""
        return {
            "split": self.split.value,
            "rows_per_array": self.rows_per_array,
            "array_cols": self.array_cols,
            "scratch_bits": self.scratch_bits,
            "validity_col": self.validity_col,
            "record_count": self.record_count,
            "pages": self.n_pages,
            "attributes": [
                {
                    "name": a.name,
                    "width": a.width,
                    "signed": a.signed,
                    "domain_size": a.domain_size,
                    "slot": self.attr_columns[a.name][0],
                    "col_start": self.attr_columns[a.name][1].start,
                    "col_stop": self.attr_columns[a.name][1].stop,
                }
                for a in self.schema
            ],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.descriptor(), **kwargs)


def plan_layout(
    schema: Sequence[AttributeSpec],
    array_rows: int = 1024,
    array_cols: int = 1024,
    scratch_bits: int = 160,
    split: Split = Split.ONE_XB,
    two_xb_partition: Iterable[str] | None = None,
) -> RelationLayout:
    """Assign attribute and scratch columns deterministically.

    Attributes pack left to right in schema order from column 0; scratch is
    the highest ``scratch_bits`` columns. Under the two-array split,
    ``two_xb_partition`` names the attributes placed in the second array;
    each array gets its own scratch region. One scratch column of slot 0 is
    permanently reserved as the validity column marking live rows.
    """
    schema = tuple(schema)
    names = [a.name for a in schema]
    if len(set(names)) != len(names):
        raise LayoutError("duplicate attribute names in schema")
    if scratch_bits < 1:
        raise LayoutError("scratch_bits must be >= 1")
    if array_rows < 1 or array_cols < 1:
        raise LayoutError("array dimensions must be positive")

    if split is Split.TWO_XB:
        if two_xb_partition is None:
            raise LayoutError("two_xb split requires a partition")
        partition = frozenset(two_xb_partition)
        unknown = partition - set(names)
        if unknown:
            raise LayoutError(f"partition references unknown attributes: {sorted(unknown)}")
    else:
        partition = frozenset()

    slot_of = {a.name: (1 if a.name in partition else 0) for a in schema}
    n_slots = 2 if split is Split.TWO_XB else 1
    limit = array_cols - scratch_bits
    cursors = [0] * n_slots
    attr_columns: dict[str, tuple[int, ColRange]] = {}
    for a in schema:
        s = slot_of[a.name]
        if cursors[s] + a.width > limit:
            raise LayoutError(
                f"attribute {a.name!r} ({a.width} bits) does not fit: "
                f"columns 0..{limit - 1} of slot {s} already hold {cursors[s]} bits"
            )
        attr_columns[a.name] = (s, ColRange(cursors[s], cursors[s] + a.width))
        cursors[s] += a.width

    scratch_region = ColRange(array_cols - scratch_bits, array_cols)
    allocators = [ScratchAllocator(scratch_region) for _ in range(n_slots)]
    validity_col = allocators[0].alloc(1).start

    return RelationLayout(
        schema=schema,
        split=split,
        partition=partition,
        rows_per_array=array_rows,
        array_cols=array_cols,
        scratch_bits=scratch_bits,
        attr_columns=attr_columns,
        scratch=allocators,
        validity_col=validity_col,
    )


def encode_column(spec: AttributeSpec, values: Sequence[int] | np.ndarray) -> np.ndarray:
    """Range-check and encode attribute values to raw uint64 bit patterns."""
    lo, hi = spec.min_value, spec.max_value
    if isinstance(values, np.ndarray) and values.dtype == np.uint64 and not spec.signed:
        bad = np.nonzero(values > np.uint64(hi))[0]
        if len(bad):
            i = int(bad[0])
            raise LayoutError(
                f"value {int(values[i])} out of range for attribute {spec.name!r} "
                f"(record {i}, allowed {lo}..{hi})"
            )
        return values.copy()
    vals = [int(v) for v in values]
    for i, v in enumerate(vals):
        if not lo <= v <= hi:
            raise LayoutError(
                f"value {v} out of range for attribute {spec.name!r} "
                f"(record {i}, allowed {lo}..{hi})"
            )
    if spec.width == 64 and not spec.signed:
        return np.array(vals, dtype=np.uint64)
    raw = np.asarray(vals, dtype=np.int64).astype(np.uint64)
    if spec.width < 64:
        raw &= np.uint64((1 << spec.width) - 1)
    return raw


def decode_column(spec: AttributeSpec, raw: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_column`; int64 unless 64-bit unsigned."""
    if spec.signed:
        if spec.width == 64:
            return raw.view(np.int64) if raw.dtype == np.uint64 else raw.astype(np.int64)
        as_int = raw.astype(np.int64)
        sign = np.int64(1) << np.int64(spec.width - 1)
        return np.where(as_int & sign, as_int - (np.int64(1) << np.int64(spec.width)), as_int)
    if spec.width == 64:
        return np.asarray(raw, dtype=np.uint64)
    return raw.astype(np.int64)


class PimMemory:
    """Cell arrays holding one relation, plus the transfer-accounted facade.

    Program execution and host reads/writes go through methods here;
    ``stats`` is charged accordingly. Direct array access bypasses
    accounting and is reserved for tests.
    """

    def __init__(self, layout: RelationLayout, backend: str = "auto"):
        self.layout = layout
        self.backend = backend
        self.pages: list[tuple[CellArray, ...]] = []
        self.stats = TransferStats()

    # -- geometry -----------------------------------------------------------

    @property
    def record_count(self) -> int:
        return self.layout.record_count

    @property
    def n_pages(self) -> int:
        return len(self.pages)

    @property
    def n_arrays(self) -> int:
        return sum(len(p) for p in self.pages)

    def page_rows(self, page: int) -> int:
        """Live records on a page (the last page may be partial)."""
        full = self.layout.rows_per_array
        return min(full, self.layout.record_count - page * full)

    def arrays(self, slot: int = 0) -> list[CellArray]:
        return [p[slot] for p in self.pages]

    def locate(self, record_idx: int, attr: str) -> tuple[int, int, int, ColRange]:
        """(page, slot, row, column range) of one record's attribute."""
        if not 0 <= record_idx < self.layout.record_count:
            raise LayoutError(
                f"record {record_idx} out of range ({self.layout.record_count} stored)"
            )
        self.layout.attr(attr)  # raises on unknown names
        slot, cols = self.layout.attr_columns[attr]
        page, row = divmod(record_idx, self.layout.rows_per_array)
        return page, slot, row, cols

    # -- scratch ------------------------------------------------------------

    def scratch_alloc(self, n_bits: int, slot: int = 0) -> ColRange:
        return self.layout.scratch[slot].alloc(n_bits)

    def scratch_free(self, r: ColRange, slot: int = 0) -> None:
        self.layout.scratch[slot].free(r)

    # -- host access path (charged) -----------------------------------------

    def read_result_col(self, col: int, slot: int = 0) -> np.ndarray:
        """Concatenated per-page column bits, truncated to the record count.

        Charged one PIM->host bit per live record.
        """
        n = self.layout.record_count
        out = np.zeros(n, dtype=np.uint8)
        for p, arrays in enumerate(self.pages):
            live = self.page_rows(p)
            base = p * self.layout.rows_per_array
            out[base : base + live] = arrays[slot].read_col(col)[:live]
        self.stats.pim_to_host_bits += n
        return out

    def read_values(
        self,
        slot: int,
        cols: ColRange,
        record_indices: np.ndarray | None = None,
    ) -> np.ndarray:
        """Raw field values for all records or a subset, charged per bit read."""
        full = self.layout.rows_per_array
        col_list = list(cols.cols)
        if record_indices is None:
            n = self.layout.record_count
            out = np.zeros(n, dtype=np.uint64)
            for p, arrays in enumerate(self.pages):
                live = self.page_rows(p)
                base = p * full
                out[base : base + live] = arrays[slot].read_field(col_list)[:live]
            self.stats.pim_to_host_bits += n * cols.width
            return out
        idx = np.asarray(record_indices, dtype=np.int64)
        out = np.zeros(len(idx), dtype=np.uint64)
        for p in range(self.n_pages):
            base = p * full
            sel = np.nonzero((idx >= base) & (idx < base + full))[0]
            if len(sel):
                vals = self.pages[p][slot].read_field(col_list)
                out[sel] = vals[idx[sel] - base]
        self.stats.pim_to_host_bits += len(idx) * cols.width
        return out

    def read_attribute(self, name: str, record_indices: np.ndarray | None = None) -> np.ndarray:
        """Decoded attribute values through the charged path."""
        slot, cols = self.layout.attr_columns[name]
        raw = self.read_values(slot, cols, record_indices)
        return decode_column(self.layout.attr(name), raw)

    def copy_columns(self, page: int, src_slot: int, src: ColRange, dst_slot: int, dst: ColRange) -> None:
        """Host-mediated column copy between the arrays of one page.

        Only meaningful (and only allowed) under the two-array split; charged
        as a full read-out plus write-back of the copied columns.
        """
        if self.layout.split is not Split.TWO_XB:
            raise LayoutError("inter-array copy requires the two_xb split")
        if src.width != dst.width:
            raise LayoutError(f"copy width mismatch: {src} vs {dst}")
        src_arr = self.pages[page][src_slot]
        dst_arr = self.pages[page][dst_slot]
        for cs, cd in zip(src.cols, dst.cols):
            dst_arr.set_col_words(cd, src_arr.copy_col_words(cs))
        moved = self.layout.rows_per_array * src.width
        self.stats.pim_to_host_bits += moved
        self.stats.host_to_pim_bits += moved
        self.stats.cell_writes += moved

    # -- program execution (charged) ----------------------------------------

    def exec_encoded(self, encoded: np.ndarray, slot: int, pages: Sequence[int] | None = None) -> None:
        """Replay an encoded op program on the chosen pages of one slot."""
        targets = range(self.n_pages) if pages is None else pages
        n = len(encoded)
        for p in targets:
            self.pages[p][slot].exec_encoded(encoded)
            self.stats.pim_col_ops += n
            self.stats.cell_writes += n * self.layout.rows_per_array

    def charge_modeled(self, col_ops: int = 0, cell_writes: int = 0) -> None:
        """Account work of modeled circuits (in-array reduction, peripherals)."""
        self.stats.pim_col_ops += col_ops
        self.stats.cell_writes += cell_writes


def store_records(
    layout: RelationLayout,
    records: Sequence[Sequence[int]] | np.ndarray,
    backend: str = "auto",
) -> PimMemory:
    """Fill pages with records in order and mark live rows valid.

    Host->PIM transfer is charged per stored bit (attribute widths plus the
    validity bit, per record).
    """
    schema = layout.schema
    if isinstance(records, np.ndarray):
        if records.ndim != 2 or records.shape[1] != len(schema):
            raise LayoutError(f"records shape {records.shape} does not match schema")
        n = records.shape[0]
        columns = [records[:, i] for i in range(len(schema))]
    else:
        records = list(records)
        n = len(records)
        for i, r in enumerate(records):
            if len(r) != len(schema):
                raise LayoutError(f"record {i} has {len(r)} values, schema has {len(schema)}")
        columns = [[r[i] for r in records] for i in range(len(schema))]

    encoded = {a.name: encode_column(a, col) for a, col in zip(schema, columns)}

    layout.record_count = n
    layout.n_pages = math.ceil(n / layout.rows_per_array)
    memory = PimMemory(layout, backend=backend)
    rpa = layout.rows_per_array
    for p in range(layout.n_pages):
        arrays = tuple(
            CellArray(rpa, layout.array_cols, backend=backend) for _ in range(layout.n_slots)
        )
        memory.pages.append(arrays)
        live = memory.page_rows(p)
        lo, hi = p * rpa, p * rpa + live
        for a in schema:
            slot, cols = layout.attr_columns[a.name]
            vals = np.zeros(rpa, dtype=np.uint64)
            vals[:live] = encoded[a.name][lo:hi]
            arrays[slot].write_field(list(cols.cols), vals)
        valid = np.zeros(rpa, dtype=np.uint64)
        valid[:live] = 1
        arrays[0].write_field([layout.validity_col], valid)
        stored_bits = live * (sum(a.width for a in schema) + 1)
        memory.stats.host_to_pim_bits += stored_bits
        memory.stats.cell_writes += stored_bits
    return memory
