import json

import pytest

from tinyqat.hwcost import (AssignmentRow, CostTableError, MacCostTable,
                            aggregate, load_assignment)


@pytest.fixture(scope="module")
def table():
    return MacCostTable.load()


def test_reference_lookups(table):
    assert table.lookup(4, 4) == (608.404, 1.58901)
    assert table.lookup(8, 8) == (893.642, 2.67960)
    assert table.lookup(2, 2) == (539.960, 0.86949)
    assert table.lookup(3, 8) == (656.737, 1.99110)


def test_lookup_is_symmetric(table):
    for b1 in range(2, 9):
        for b2 in range(2, 9):
            assert table.lookup(b1, b2) == table.lookup(b2, b1)
    assert table.lookup(2, 3) == (551.074, 0.95939)


def test_lookup_rejects_out_of_range(table):
    for pair in [(1, 4), (4, 9), (0, 0), (9, 9)]:
        with pytest.raises(CostTableError):
            table.lookup(*pair)


def test_area_monotone_in_each_coordinate(table):
    for b1 in range(2, 9):
        for b2 in range(2, 8):
            assert table.lookup(b1, b2 + 1)[0] >= table.lookup(b1, b2)[0]


def test_uniform_4_4_aggregation(table):
    plan = [AssignmentRow("blk", 4, 4, 1000), AssignmentRow("head", 4, 4, 9000)]
    area, power = aggregate(plan, table)
    assert area == 608.404
    assert abs(power - 1.589) < 1e-3
    assert power == 1.58901


def test_any_8x8_module_dominates_area(table):
    plan = [AssignmentRow("a", 2, 2, 10_000_000), AssignmentRow("b", 8, 8, 1)]
    area, power = aggregate(plan, table)
    assert area == 893.642
    assert power < 0.87  # power stays mac-weighted toward the 2x2 bucket


def test_single_module_plan_equals_lookup(table):
    plan = [AssignmentRow("only", 5, 7, 123)]
    assert aggregate(plan, table) == table.lookup(5, 7)


def test_aggregate_power_is_convex_combination(table):
    plan = [AssignmentRow("a", 2, 2, 3), AssignmentRow("b", 8, 8, 1)]
    _, power = aggregate(plan, table)
    lo, hi = table.lookup(2, 2)[1], table.lookup(8, 8)[1]
    assert lo <= power <= hi
    expected = (3 * lo + 1 * hi) / 4
    assert abs(power - expected) < 1e-12


def test_aggregate_invariant_to_row_order_and_area_to_weights(table):
    rows = [AssignmentRow("a", 3, 4, 5), AssignmentRow("b", 6, 2, 50),
            AssignmentRow("c", 4, 4, 500)]
    assert aggregate(rows, table) == aggregate(list(reversed(rows)), table)
    reweighted = [AssignmentRow(r.module, r.weight_bits, r.act_bits,
                                r.mac_count * 7) for r in rows]
    assert aggregate(reweighted, table)[0] == aggregate(rows, table)[0]


def test_aggregate_rejects_degenerate_plans(table):
    with pytest.raises(CostTableError):
        aggregate([], table)
    with pytest.raises(CostTableError):
        aggregate([AssignmentRow("z", 4, 4, 0)], table)


def test_assignment_row_validation():
    with pytest.raises(CostTableError):
        AssignmentRow("bad", 1, 4, 10)
    with pytest.raises(CostTableError):
        AssignmentRow("bad", 4, 4, -1)


def test_load_assignment_file(tmp_path):
    path = tmp_path / "plan.json"
    path.write_text(json.dumps({"assignment": [
        {"module": "attn", "weight_bits": 4, "act_bits": 6, "mac_count": 10},
        {"module": "ffn", "weight_bits": 8, "act_bits": 8, "mac_count": 30},
    ]}))
    rows = load_assignment(path)
    assert rows[0] == AssignmentRow("attn", 4, 6, 10)
    assert len(rows) == 2


def test_load_rejects_tampered_table(tmp_path):
    import tinyqat.hwcost as hw
    doc = {"entries": [{"bits": list(pair), "area": a, "power": p}
                       for pair, (a, p) in hw._GOLDEN.items()]}
    doc["entries"][0]["area"] = 1.0
    path = tmp_path / "table.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(CostTableError):
        MacCostTable.load(path)
