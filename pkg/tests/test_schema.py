"""Star-schema generation, CSV round trips, pre-join, in-place updates."""

import copy
import random
from pathlib import Path

import numpy as np
import pytest

from pimolap.isa import AttrRef, Cmp, Const
from pimolap.layout import AttributeSpec, Split
from pimolap.schema import (
    CUSTOMER_PER_SCALE,
    DATE_ROWS,
    FACT_ROWS_PER_SCALE,
    PART_PER_SCALE,
    Relation,
    SUPPLIER_PER_SCALE,
    SchemaError,
    StarSchema,
    apply_dimension_update,
    build_memory,
    gen_ssb_lite,
    host_table,
    load_dir,
    pow2_width,
    prejoin,
    save_star,
)


def test_pow2_width():
    assert [pow2_width(v) for v in (0, 1, 2, 3, 15, 16, 255, 256, 1997)] == \
        [1, 1, 2, 2, 4, 8, 8, 16, 16]


def test_generation_is_deterministic():
    a = gen_ssb_lite(1, seed=42)
    b = gen_ssb_lite(1, seed=42)
    assert a.fact.columns == b.fact.columns
    assert {n: d.columns for n, d in a.dimensions.items()} == \
        {n: d.columns for n, d in b.dimensions.items()}
    c = gen_ssb_lite(1, seed=43)
    assert a.fact.columns != c.fact.columns


def test_cardinalities_follow_scale(star):
    assert star.fact.n_rows == FACT_ROWS_PER_SCALE
    dims = star.dimensions
    assert dims["part"].n_rows == PART_PER_SCALE
    assert dims["supplier"].n_rows == SUPPLIER_PER_SCALE
    assert dims["customer"].n_rows == CUSTOMER_PER_SCALE
    assert dims["date"].n_rows == DATE_ROWS
    s3 = gen_ssb_lite(3, seed=1)
    assert s3.fact.n_rows == 3 * FACT_ROWS_PER_SCALE
    assert s3.dimensions["part"].n_rows == 3 * PART_PER_SCALE
    assert s3.dimensions["date"].n_rows == DATE_ROWS  # the calendar does not scale


def test_dictionary_cardinalities(star):
    part = star.dimensions["part"]
    assert len(part.dictionaries["mfgr"]) == 5
    assert len(part.dictionaries["category"]) == 25
    assert len(part.dictionaries["brand"]) == 50
    # 300 customers comfortably sample the whole geography pool
    cust = star.dimensions["customer"]
    assert len(cust.dictionaries["region"]) == 5
    assert len(cust.dictionaries["nation"]) == 12
    assert len(cust.dictionaries["city"]) == 30
    # 20 suppliers need not hit every nation; the pool caps still hold
    supp = star.dimensions["supplier"]
    assert len(supp.dictionaries["region"]) <= 5
    assert len(supp.dictionaries["nation"]) <= 12
    assert len(supp.dictionaries["city"]) <= 20


def test_dictionaries_are_minimal(star):
    """First-appearance encoding: every code in 0..len-1 occurs in the column."""
    for rel in [star.fact, *star.dimensions.values()]:
        for attr, d in rel.dictionaries.items():
            assert len(set(d)) == len(d), (rel.name, attr)
            assert set(rel.columns[attr]) == set(range(len(d))), (rel.name, attr)


def test_date_dimension_is_one_calendar_year(star):
    date = star.dimensions["date"]
    assert set(date.columns["year"]) == {1997}
    assert set(date.columns["month"]) == set(range(1, 13))
    assert min(date.columns["day"]) == 1 and max(date.columns["day"]) == 31


def test_widths_are_powers_of_two(star):
    for rel in [star.fact, *star.dimensions.values()]:
        for s in rel.specs:
            assert s.width & (s.width - 1) == 0, (rel.name, s.name, s.width)
    # fact FK domains pin the dimension sizes
    for fk, dim in star.fact_keys.items():
        assert star.fact.spec(fk).domain_size == star.dimensions[dim].n_rows


def test_validate_rejects_dangling_fk(star):
    broken = copy.deepcopy(star)
    broken.fact.columns["partkey"][17] = 10 ** 6
    with pytest.raises(SchemaError, match="fact row 17"):
        broken.validate()
    dup = copy.deepcopy(star)
    dup.dimensions["supplier"].columns["key"][1] = dup.dimensions["supplier"].columns["key"][0]
    with pytest.raises(SchemaError, match="duplicate keys"):
        dup.validate()


def test_save_load_round_trip(tmp_path, star):
    paths = save_star(star, tmp_path / "d")
    assert (tmp_path / "d" / "star.json").exists()
    assert len(paths) == 6  # 5 relations + descriptor
    loaded = load_dir(tmp_path / "d")
    assert loaded.fact.columns == star.fact.columns
    assert loaded.fact.specs == star.fact.specs
    for name, dim in star.dimensions.items():
        assert loaded.dimensions[name].columns == dim.columns
        assert loaded.dimensions[name].dictionaries == dim.dictionaries
        assert loaded.dimensions[name].specs == dim.specs
    assert loaded.fact_keys == star.fact_keys


def test_save_is_byte_deterministic(tmp_path, star):
    save_star(star, tmp_path / "a")
    save_star(star, tmp_path / "b")
    for p in sorted((tmp_path / "a").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_save_refuses_overwrite_without_force(tmp_path, star):
    save_star(star, tmp_path / "d")
    with pytest.raises(FileExistsError, match="force"):
        save_star(star, tmp_path / "d")
    save_star(star, tmp_path / "d", force=True)  # succeeds


def test_load_reports_cell_position(tmp_path, star):
    save_star(star, tmp_path / "d")
    p = tmp_path / "d" / "date.csv"
    lines = p.read_text().splitlines()
    fields = lines[3].split(",")
    fields[3] = "July"
    lines[3] = ",".join(fields)
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError, match=r"date row 2 column 3 \(month\): unparsable"):
        load_dir(tmp_path / "d")


def test_load_reports_missing_column(tmp_path, star):
    save_star(star, tmp_path / "d")
    p = tmp_path / "d" / "supplier.csv"
    rows = [line.split(",") for line in p.read_text().splitlines()]
    p.write_text("\n".join(",".join(r[:-1]) for r in rows) + "\n")
    with pytest.raises(SchemaError, match=r"supplier: missing column\(s\) \['city'\]"):
        load_dir(tmp_path / "d")


def test_load_rejects_unknown_descriptor(tmp_path, star):
    save_star(star, tmp_path / "d")
    dp = tmp_path / "d" / "star.json"
    dp.write_text(dp.read_text().replace("pimolap-star-v1", "mystery-v9"))
    with pytest.raises(SchemaError, match="mystery-v9"):
        load_dir(tmp_path / "d")
    with pytest.raises(SchemaError, match="star.json"):
        load_dir(tmp_path)


def tiny_star():
    dim = Relation(
        "d",
        (AttributeSpec("key", 4), AttributeSpec("size", 4)),
        {"key": [7, 3, 5], "size": [9, 2, 11]},
    )
    fact = Relation(
        "f",
        (AttributeSpec("dkey", 4, domain_size=16), AttributeSpec("v", 4)),
        {"dkey": [5, 7, 7, 3], "v": [1, 2, 3, 4]},
    )
    return StarSchema(fact, {"d": dim}, {"dkey": "d"})


def test_prejoin_gathers_by_key_not_position():
    wide = prejoin(tiny_star())
    assert [s.name for s in wide.schema] == ["dkey", "v", "d.size"]
    assert wide.columns["d.size"] == [11, 9, 9, 2]
    assert wide.columns["v"] == [1, 2, 3, 4]  # fact order preserved


def test_prejoin_projection_identity(star, wide):
    assert wide.n_rows == star.fact.n_rows
    for s in star.fact.specs:
        assert wide.columns[s.name] == star.fact.columns[s.name]
    rng = random.Random(6)
    for _ in range(50):
        i = rng.randrange(wide.n_rows)
        fk = rng.choice(list(star.fact_keys))
        dim = star.dimensions[star.fact_keys[fk]]
        key_row = dim.columns["key"].index(star.fact.columns[fk][i])
        for s in dim.specs:
            if s.name != "key":
                wn = f"{dim.name}.{s.name}"
                assert wide.columns[wn][i] == dim.columns[s.name][key_row]


def test_host_table_mirrors_wide(wide, ssb_host):
    assert ssb_host.n_rows == wide.n_rows
    assert ssb_host.columns["part.brand"] == wide.columns["part.brand"]
    assert tuple(a.name for a in ssb_host.schema) == tuple(s.name for s in wide.schema)


def test_build_memory_splits(wide, ssb_memories):
    one = ssb_memories[Split.ONE_XB]
    two = ssb_memories[Split.TWO_XB]
    assert one.record_count == two.record_count == wide.n_rows
    assert one.layout.n_slots == 1
    assert two.layout.n_slots == 2
    for s in wide.schema:
        want = 1 if "." in s.name else 0
        assert two.layout.slot_of(s.name) == want
        assert one.layout.slot_of(s.name) == 0
    got = two.read_attribute("customer.region")
    assert got.tolist() == wide.columns["customer.region"]


def mutated_rejoin(star, dim_name, attr, pred_attr, pred_code, new_code):
    """Expected wide column after editing the dimension and re-joining."""
    twin = copy.deepcopy(star)
    dim = twin.dimensions[dim_name]
    dim.columns[attr] = [
        new_code if c == pred_code else v
        for v, c in zip(dim.columns[attr], dim.columns[pred_attr])
    ]
    return prejoin(twin)


@pytest.mark.parametrize("split", [Split.ONE_XB, Split.TWO_XB])
def test_update_matches_rejoin(star, wide, split):
    mem = build_memory(wide, split=split)
    pred = Cmp("eq", AttrRef("part.category"), Const(7))
    before = mem.stats.copy()
    apply_dimension_update(mem, "part.color", pred, 3)
    delta = mem.stats.delta(before)
    want = mutated_rejoin(star, "part", "color", "category", 7, 3)
    got = mem.read_attribute("part.color")
    assert got.tolist() == want.columns["part.color"]
    if split is Split.ONE_XB:
        # filter + masked write never ship attribute values to the host
        assert delta.pim_to_host_bits == 0
    else:
        assert delta.pim_to_host_bits > 0  # the mask bit crosses between arrays
    # neighbours are untouched
    assert mem.read_attribute("part.brand").tolist() == wide.columns["part.brand"]


def test_update_with_no_matches_is_identity(wide):
    mem = build_memory(wide)
    pred = Cmp("eq", AttrRef("partkey"), Const(201))  # beyond the 200 stored parts
    apply_dimension_update(mem, "part.color", pred, 0)
    assert mem.read_attribute("part.color").tolist() == wide.columns["part.color"]
