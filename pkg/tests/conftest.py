"""Shared fixtures: the scale-1 star, plus random relation/query builders."""

import random

import pytest

from pimolap import oracle, schema
from pimolap.isa import (
    Add,
    AggKind,
    AttrRef,
    Cmp,
    Const,
    And,
    Mul,
    Not,
    Or,
    TAUTOLOGY,
)
from pimolap.layout import AttributeSpec, Split, plan_layout, store_records
from pimolap.queryparse import AggSpec, QueryIR


@pytest.fixture(scope="session")
def star():
    return schema.gen_ssb_lite(1, 42)


@pytest.fixture(scope="session")
def wide(star):
    return schema.prejoin(star)


@pytest.fixture(scope="session")
def ssb_host(wide):
    return schema.host_table(wide)


@pytest.fixture(scope="session")
def ssb_memories(wide):
    """Read-only memories, one per layout; stats accumulate, data never moves."""
    return {s: schema.build_memory(wide, split=s) for s in (Split.ONE_XB, Split.TWO_XB)}


def build_relation(specs, columns, split=Split.ONE_XB, array_rows=256,
                   array_cols=256, scratch_bits=140, partition=None):
    """(HostTable, PimMemory) over the same data."""
    host = oracle.HostTable(specs, columns)
    n = len(next(iter(columns.values())))
    records = [tuple(columns[s.name][i] for s in specs) for i in range(n)]
    layout = plan_layout(
        specs, array_rows=array_rows, array_cols=array_cols,
        scratch_bits=scratch_bits, split=split, two_xb_partition=partition,
    )
    return host, store_records(layout, records)


def random_relation(rng: random.Random, n_rows: int, n_attrs: int = 6,
                    allow_signed: bool = True):
    """Random specs + columns; a few attrs get small domains for grouping."""
    specs = []
    for i in range(n_attrs):
        name = f"a{i}"
        if i < 2:  # groupable
            domain = rng.choice([3, 4, 5, 6, 8, 12])
            specs.append(AttributeSpec(name, schema.pow2_width(domain - 1),
                                       domain_size=domain))
        else:
            width = rng.choice([2, 3, 4, 5, 6, 8, 10, 12, 16])
            signed = allow_signed and rng.random() < 0.25
            specs.append(AttributeSpec(name, width, signed=signed))
    columns = {}
    for s in specs:
        if s.domain_size is not None:
            columns[s.name] = [rng.randrange(s.domain_size) for _ in range(n_rows)]
        else:
            columns[s.name] = [
                rng.randint(s.min_value, s.max_value) for _ in range(n_rows)
            ]
    return tuple(specs), columns


def _random_cmp(rng, specs):
    left = rng.choice(specs)
    op = rng.choice(["eq", "ne", "lt", "le", "gt", "ge"])
    partners = [
        s for s in specs
        if s.name != left.name and s.width == left.width and s.signed == left.signed
    ]
    if partners and rng.random() < 0.25:
        return Cmp(op, AttrRef(left.name), AttrRef(rng.choice(partners).name))
    return Cmp(op, AttrRef(left.name), Const(rng.randint(left.min_value, left.max_value)))


def random_predicate(rng, specs, depth=2):
    if depth <= 0 or rng.random() < 0.45:
        return _random_cmp(rng, specs)
    roll = rng.random()
    if roll < 0.15:
        return Not(random_predicate(rng, specs, depth - 1))
    kids = tuple(random_predicate(rng, specs, depth - 1)
                 for _ in range(rng.randint(2, 3)))
    return And(kids) if roll < 0.6 else Or(kids)


def random_expr(rng, specs, depth=1):
    unsigned = [s for s in specs if not s.signed and s.width <= 16]
    if depth <= 0 or rng.random() < 0.5 or not unsigned:
        if unsigned and rng.random() < 0.85:
            return AttrRef(rng.choice(unsigned).name)
        return Const(rng.randrange(1, 50))
    a = random_expr(rng, specs, depth - 1)
    b = random_expr(rng, specs, depth - 1)
    return Mul(a, b) if rng.random() < 0.4 else Add(a, b)


def random_query(rng, specs, grouped_fraction=0.45):
    aggs = []
    for _ in range(rng.randint(1, 3)):
        kind = rng.choice(list(AggKind))
        if kind is AggKind.COUNT:
            aggs.append(AggSpec(kind, None))
            continue
        if rng.random() < 0.55:
            aggs.append(AggSpec(kind, AttrRef(rng.choice(specs).name)))
        else:
            aggs.append(AggSpec(kind, random_expr(rng, specs, depth=rng.randint(1, 2))))
    pred = TAUTOLOGY if rng.random() < 0.2 else random_predicate(rng, specs)
    group_by = ()
    if rng.random() < grouped_fraction:
        groupable = [s.name for s in specs if s.domain_size is not None]
        rng.shuffle(groupable)
        group_by = tuple(groupable[: rng.randint(1, min(2, len(groupable)))])
    return QueryIR(tuple(aggs), "r", pred, group_by)
