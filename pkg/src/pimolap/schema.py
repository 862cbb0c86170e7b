"""Star-schema ingestion: SSB-lite generation, CSV round trip, pre-join.

The star consists of one fact relation (``lineorder``) with a foreign key
per dimension (part, supplier, customer, date). For PIM execution the star
is flattened once: the fact equi-joined with every dimension, dimension
attributes prefixed ``<dim>.``. Queries then run on the wide relation
without join logic; the price is paid when a dimension value changes,
which `apply_dimension_update` settles in place with a filter plus a
masked overwrite.

String-valued attributes are dictionary-encoded with dense codes in
first-appearance order; the same pass serves generated and loaded data,
so a save/load round trip reproduces codes exactly.
"""

from __future__ import annotations

import csv
import datetime
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import isa
from .layout import AttributeSpec, PimMemory, Split, plan_layout, store_records
from .oracle import HostTable

DESCRIPTOR_NAME = "star.json"
_FORMAT = "pimolap-star-v1"


class SchemaError(ValueError):
    pass


def pow2_width(max_value: int) -> int:
    """Smallest power-of-two bit width that holds max_value."""
    need = max(1, int(max_value).bit_length())
    w = 1
    while w < need:
        w *= 2
    return w


@dataclass
class Relation:
    """One named relation, integer-encoded, with decode dictionaries."""

    name: str
    specs: tuple[AttributeSpec, ...]
    columns: dict[str, list[int]]
    dictionaries: dict[str, list[str]] = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0

    def spec(self, attr: str) -> AttributeSpec:
        for s in self.specs:
            if s.name == attr:
                return s
        raise SchemaError(f"relation {self.name!r} has no attribute {attr!r}")


@dataclass
class StarSchema:
    fact: Relation
    dimensions: dict[str, Relation]
    fact_keys: dict[str, str]  # fact FK attribute -> dimension name

    def validate(self) -> None:
        for dim in self.dimensions.values():
            keys = dim.columns["key"]
            if len(set(keys)) != len(keys):
                raise SchemaError(f"dimension {dim.name!r} has duplicate keys")
        for fk, dim_name in self.fact_keys.items():
            known = set(self.dimensions[dim_name].columns["key"])
            for row, v in enumerate(self.fact.columns[fk]):
                if v not in known:
                    raise SchemaError(
                        f"fact row {row}: foreign key {fk}={v} "
                        f"has no match in dimension {dim_name!r}"
                    )


@dataclass
class WideRelation:
    """The pre-joined star: fact attributes plus prefixed dimension copies."""

    schema: tuple[AttributeSpec, ...]
    columns: dict[str, list[int]]
    dictionaries: dict[str, list[str]] = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0


# ---------------------------------------------------------------------------
# Attribute declarations
#
# kind "dict" columns hold strings pre-encoding; "int" columns hold integers,
# optionally with a declared domain [0, domain) that fixes the stored width
# (otherwise the descriptor width is used). Widths are the smallest power of
# two covering the domain.

@dataclass(frozen=True)
class _AttrDef:
    name: str
    kind: str  # "int" | "dict"
    domain: int | None = None  # declared value domain for "int" attrs


def _encode_relation(name: str, defs: list[_AttrDef], raw: dict[str, list],
                     widths: dict[str, int] | None = None) -> Relation:
    """Dictionary-encode and width-assign one relation's raw columns.

    ``widths`` (from a descriptor) pins plain-int attribute widths; without
    it they are sized to the observed maximum.
    """
    n = len(next(iter(raw.values()))) if raw else 0
    specs: list[AttributeSpec] = []
    columns: dict[str, list[int]] = {}
    dicts: dict[str, list[str]] = {}
    for d in defs:
        col = raw[d.name]
        if len(col) != n:
            raise SchemaError(f"{name}.{d.name}: ragged column ({len(col)} of {n} rows)")
        if d.kind == "dict":
            codes: dict[str, int] = {}
            enc = []
            for v in col:
                code = codes.get(v)
                if code is None:
                    code = codes[v] = len(codes)
                enc.append(code)
            columns[d.name] = enc
            dicts[d.name] = list(codes)
            domain = max(1, len(codes))
            specs.append(AttributeSpec(d.name, pow2_width(domain - 1), domain_size=domain))
            continue
        enc = [int(v) for v in col]
        if d.domain is not None:
            bad = next((i for i, v in enumerate(enc) if not 0 <= v < d.domain), None)
            if bad is not None:
                raise SchemaError(
                    f"{name}.{d.name} row {bad}: value {enc[bad]} outside domain "
                    f"[0, {d.domain})"
                )
            width = pow2_width(d.domain - 1)
        elif widths and d.name in widths:
            width = widths[d.name]
        else:
            width = pow2_width(max(enc, default=0))
        columns[d.name] = enc
        specs.append(AttributeSpec(d.name, width, domain_size=d.domain))
    return Relation(name, tuple(specs), columns, dicts)


# ---------------------------------------------------------------------------
# SSB-lite generator

_REGIONS = ["AFRICA", "AMERICA", "ASIA", "EUROPE", "MIDDLE EAST"]
_NATIONS = [
    ("ALGERIA", "AFRICA"), ("KENYA", "AFRICA"),
    ("BRAZIL", "AMERICA"), ("CANADA", "AMERICA"), ("PERU", "AMERICA"),
    ("CHINA", "ASIA"), ("INDIA", "ASIA"), ("JAPAN", "ASIA"),
    ("FRANCE", "EUROPE"), ("GERMANY", "EUROPE"),
    ("EGYPT", "MIDDLE EAST"), ("IRAN", "MIDDLE EAST"),
]
# 30 cities covering every nation (city index varies slowest so the
# truncation never starves a nation or region)
_CITY_NATION = {
    f"{nation}{i}": (nation, region)
    for i in range(3)
    for nation, region in _NATIONS
}
_CITIES = list(_CITY_NATION)[:30]
_CITY_NATION = {c: _CITY_NATION[c] for c in _CITIES}
_COLORS = [
    "almond", "azure", "beige", "black", "blue", "brown", "coral", "cream",
    "cyan", "green", "ivory", "linen", "olive", "plum", "red", "white",
]

PART_DEFS = [
    _AttrDef("key", "int"), _AttrDef("mfgr", "dict"), _AttrDef("category", "dict"),
    _AttrDef("brand", "dict"), _AttrDef("color", "dict"),
]
SUPPLIER_DEFS = [
    _AttrDef("key", "int"), _AttrDef("region", "dict"), _AttrDef("nation", "dict"),
    _AttrDef("city", "dict"),
]
CUSTOMER_DEFS = SUPPLIER_DEFS
DATE_DEFS = [
    _AttrDef("key", "int"), _AttrDef("datekey", "int"), _AttrDef("year", "int"),
    _AttrDef("month", "int", domain=13), _AttrDef("day", "int", domain=32),
]
FACT_DEFS = [
    _AttrDef("partkey", "int"), _AttrDef("suppkey", "int"),
    _AttrDef("custkey", "int"), _AttrDef("datekey", "int"),
    _AttrDef("quantity", "int", domain=51), _AttrDef("price", "int"),
    _AttrDef("discount", "int", domain=11), _AttrDef("tax", "int", domain=9),
]
FACT_KEYS = {"partkey": "part", "suppkey": "supplier",
             "custkey": "customer", "datekey": "date"}
_REL_DEFS = {
    "lineorder": FACT_DEFS, "part": PART_DEFS, "supplier": SUPPLIER_DEFS,
    "customer": CUSTOMER_DEFS, "date": DATE_DEFS,
}

FACT_ROWS_PER_SCALE = 6000
PART_PER_SCALE = 200
SUPPLIER_PER_SCALE = 20
CUSTOMER_PER_SCALE = 300
DATE_ROWS = 365  # one calendar year


def _gen_geo(rng: random.Random, n: int) -> dict[str, list]:
    cities = [rng.choice(_CITIES) for _ in range(n)]
    return {
        "key": list(range(n)),
        "region": [_CITY_NATION[c][1] for c in cities],
        "nation": [_CITY_NATION[c][0] for c in cities],
        "city": cities,
    }


def gen_ssb_lite(scale: int, seed: int) -> StarSchema:
    """Deterministic reduced-cardinality star in SSB proportions."""
    if scale < 1:
        raise SchemaError(f"scale must be >= 1, got {scale}")
    rng = random.Random(seed)

    n_part = PART_PER_SCALE * scale
    mfgr = [rng.randrange(1, 6) for _ in range(n_part)]
    cat = [(m, rng.randrange(1, 6)) for m in mfgr]
    part_raw = {
        "key": list(range(n_part)),
        "mfgr": [f"MFGR#{m}" for m in mfgr],
        "category": [f"MFGR#{m}#{c}" for m, c in cat],
        "brand": [f"MFGR#{m}#{c}#{rng.randrange(1, 3)}" for m, c in cat],
        "color": [rng.choice(_COLORS) for _ in range(n_part)],
    }

    supplier_raw = _gen_geo(rng, SUPPLIER_PER_SCALE * scale)
    customer_raw = _gen_geo(rng, CUSTOMER_PER_SCALE * scale)

    base = datetime.date(1997, 1, 1)
    days = [base + datetime.timedelta(days=i) for i in range(DATE_ROWS)]
    date_raw = {
        "key": list(range(DATE_ROWS)),
        "datekey": [d.year * 10000 + d.month * 100 + d.day for d in days],
        "year": [d.year for d in days],
        "month": [d.month for d in days],
        "day": [d.day for d in days],
    }

    n_fact = FACT_ROWS_PER_SCALE * scale
    n_supp = SUPPLIER_PER_SCALE * scale
    n_cust = CUSTOMER_PER_SCALE * scale
    fact_raw = {
        "partkey": [rng.randrange(n_part) for _ in range(n_fact)],
        "suppkey": [rng.randrange(n_supp) for _ in range(n_fact)],
        "custkey": [rng.randrange(n_cust) for _ in range(n_fact)],
        "datekey": [rng.randrange(DATE_ROWS) for _ in range(n_fact)],
        "quantity": [1 + rng.randrange(50) for _ in range(n_fact)],
        "price": [1 + rng.randrange(2000) for _ in range(n_fact)],
        "discount": [rng.randrange(11) for _ in range(n_fact)],
        "tax": [rng.randrange(9) for _ in range(n_fact)],
    }

    dims = {
        "part": _encode_relation("part", PART_DEFS, part_raw),
        "supplier": _encode_relation("supplier", SUPPLIER_DEFS, supplier_raw),
        "customer": _encode_relation("customer", CUSTOMER_DEFS, customer_raw),
        "date": _encode_relation("date", DATE_DEFS, date_raw),
    }
    # FK columns carry their dimension's domain so group sweeps can enumerate
    fact_defs = [
        _AttrDef(d.name, "int", domain=dims[FACT_KEYS[d.name]].n_rows)
        if d.name in FACT_KEYS else d
        for d in FACT_DEFS
    ]
    fact = _encode_relation("lineorder", fact_defs, fact_raw)
    star = StarSchema(fact, dims, dict(FACT_KEYS))
    star.validate()
    return star


# ---------------------------------------------------------------------------
# CSV round trip

def _decoded_cell(rel: Relation, attr: str, code: int):
    d = rel.dictionaries.get(attr)
    return d[code] if d is not None else code


def save_star(star: StarSchema, out_dir: str | Path, force: bool = False) -> list[Path]:
    """Write one CSV per relation plus the descriptor; returns paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rels = {"lineorder": star.fact, **star.dimensions}
    paths = []
    descriptor = {"format": _FORMAT, "fact": "lineorder",
                  "fact_keys": star.fact_keys, "relations": {}}
    for name, rel in rels.items():
        descriptor["relations"][name] = {
            "file": f"{name}.csv",
            "attrs": [
                {"name": s.name, "kind": "dict" if s.name in rel.dictionaries else "int",
                 "width": s.width, "domain_size": s.domain_size}
                for s in rel.specs
            ],
        }
    for name, rel in rels.items():
        p = out / f"{name}.csv"
        if p.exists() and not force:
            raise FileExistsError(f"{p} exists (use force to overwrite)")
        with open(p, "w", newline="") as f:
            w = csv.writer(f)
            names = [s.name for s in rel.specs]
            w.writerow(names)
            for i in range(rel.n_rows):
                w.writerow([_decoded_cell(rel, a, rel.columns[a][i]) for a in names])
        paths.append(p)
    dp = out / DESCRIPTOR_NAME
    if dp.exists() and not force:
        raise FileExistsError(f"{dp} exists (use force to overwrite)")
    dp.write_text(json.dumps(descriptor, indent=2) + "\n")
    paths.append(dp)
    return paths


def load_csv(paths: dict[str, str | Path], descriptor: dict) -> StarSchema:
    """Load relations per descriptor, re-encoding and checking integrity."""
    if descriptor.get("format") != _FORMAT:
        raise SchemaError(f"unrecognized descriptor format {descriptor.get('format')!r}")
    relations: dict[str, Relation] = {}
    for name, meta in descriptor["relations"].items():
        path = paths.get(name)
        if path is None:
            raise SchemaError(f"no CSV path given for relation {name!r}")
        attrs = meta["attrs"]
        with open(path, newline="") as f:
            reader = csv.reader(f)
            try:
                header = next(reader)
            except StopIteration:
                raise SchemaError(f"{name}: empty file {path}") from None
            expected = [a["name"] for a in attrs]
            if header != expected:
                missing = set(expected) - set(header)
                if missing:
                    raise SchemaError(f"{name}: missing column(s) {sorted(missing)}")
                raise SchemaError(f"{name}: header {header} != declared {expected}")
            rows = list(reader)
        raw: dict[str, list] = {a["name"]: [] for a in attrs}
        widths: dict[str, int] = {}
        defs: list[_AttrDef] = []
        for a in attrs:
            if a["kind"] == "dict":
                defs.append(_AttrDef(a["name"], "dict"))
            else:
                defs.append(_AttrDef(a["name"], "int", domain=a.get("domain_size")))
                widths[a["name"]] = a["width"]
        for r, row in enumerate(rows):
            if len(row) != len(attrs):
                raise SchemaError(f"{name} row {r}: {len(row)} fields, expected {len(attrs)}")
            for c, (a, cell) in enumerate(zip(attrs, row)):
                if a["kind"] == "int":
                    try:
                        v = int(cell)
                    except ValueError:
                        raise SchemaError(
                            f"{name} row {r} column {c} ({a['name']}): "
                            f"unparsable integer {cell!r}"
                        ) from None
                    raw[a["name"]].append(v)
                else:
                    raw[a["name"]].append(cell)
        relations[name] = _encode_relation(name, defs, raw, widths)
    fact_name = descriptor["fact"]
    star = StarSchema(
        relations[fact_name],
        {n: r for n, r in relations.items() if n != fact_name},
        dict(descriptor["fact_keys"]),
    )
    star.validate()
    return star


def load_dir(data_dir: str | Path) -> StarSchema:
    """Load a directory written by save_star (descriptor + CSVs)."""
    d = Path(data_dir)
    dp = d / DESCRIPTOR_NAME
    if not dp.exists():
        raise SchemaError(f"no {DESCRIPTOR_NAME} in {d}")
    descriptor = json.loads(dp.read_text())
    paths = {name: d / meta["file"] for name, meta in descriptor["relations"].items()}
    return load_csv(paths, descriptor)


# ---------------------------------------------------------------------------
# Pre-join

def prejoin(star: StarSchema) -> WideRelation:
    """Fact equi-joined with every dimension; fact row order preserved."""
    star.validate()
    specs: list[AttributeSpec] = list(star.fact.specs)
    columns: dict[str, list[int]] = {s.name: star.fact.columns[s.name] for s in star.fact.specs}
    dicts: dict[str, list[str]] = dict(star.fact.dictionaries)
    for fk, dim_name in star.fact_keys.items():
        dim = star.dimensions[dim_name]
        index = {k: i for i, k in enumerate(dim.columns["key"])}
        gather = [index[v] for v in star.fact.columns[fk]]
        for s in dim.specs:
            if s.name == "key":
                continue
            wide_name = f"{dim_name}.{s.name}"
            specs.append(AttributeSpec(wide_name, s.width, s.signed, s.domain_size))
            col = dim.columns[s.name]
            columns[wide_name] = [col[i] for i in gather]
            if s.name in dim.dictionaries:
                dicts[wide_name] = dim.dictionaries[s.name]
    return WideRelation(tuple(specs), columns, dicts)


def host_table(wide: WideRelation) -> HostTable:
    return HostTable(wide.schema, wide.columns)


def build_memory(wide: WideRelation, split: Split = Split.ONE_XB,
                 array_rows: int = 1024, array_cols: int = 1024,
                 scratch_bits: int = 160, backend: str = "auto") -> PimMemory:
    """Lay the wide relation out and store it; dimension copies go to the
    second array under the split layout."""
    partition = None
    if split is Split.TWO_XB:
        partition = {s.name for s in wide.schema if "." in s.name}
    layout = plan_layout(
        wide.schema, array_rows=array_rows, array_cols=array_cols,
        scratch_bits=scratch_bits, split=split, two_xb_partition=partition,
    )
    records = np.column_stack(
        [np.asarray(wide.columns[s.name], dtype=np.int64) for s in wide.schema]
    )
    return store_records(layout, records, backend=backend)


def apply_dimension_update(memory: PimMemory, attr: str, predicate,
                           new_value: int) -> None:
    """Overwrite a duplicated dimension attribute wherever the key predicate
    selects, entirely in memory: filter, then masked write. No attribute
    values cross to the host."""
    prog = isa.compile_predicate(memory, predicate)
    try:
        isa.exec_program(memory, prog)
        isa.mux_update(memory, attr, prog.result.start, new_value)
    finally:
        prog.release(memory)
