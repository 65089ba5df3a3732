import json
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridwarm.grid import (Branch, Bus, BusKind, CaseError, NetworkCase, build_ybus, case_to_dict,
                           parse_json_case, parse_matpower_case, serialize_json_case, validate)

TWO_BUS_M = """function mpc = tiny
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	230	1	1.1	0.9;
	2	1	50	10	0	0	1	1	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	300	-300	1.0	100	1	250	0	0	0	0	0	0	0	0	0	0	0	0;
];
mpc.branch = [
	1	2	0	0.5	0	250	250	250	0	0	1	-360	360;
];
"""


def test_matpower_two_bus_branch_admittance():
    case = parse_matpower_case(TWO_BUS_M)
    br = case.branches[0]
    assert br.g == 0.0
    assert br.b == -2.0
    assert case.loads[0].p == 0.5 and case.loads[0].q == 0.1
    assert case.buses[0].kind is BusKind.SLACK
    assert case.generators[0].p_max == 2.5


def test_matpower_missing_gen_is_error():
    text = TWO_BUS_M.split("mpc.gen")[0] + "mpc.branch" + TWO_BUS_M.split("mpc.branch")[1]
    with pytest.raises(CaseError, match="mpc.gen"):
        parse_matpower_case(text)


def test_matpower_no_slack():
    with pytest.raises(CaseError, match="slack"):
        parse_matpower_case(TWO_BUS_M.replace("1	3	0	0", "1	2	0	0"))


def test_matpower_bad_row_names_line():
    bad = TWO_BUS_M.replace("2	1	50	10	0", "2	1	5x0	10	0")
    with pytest.raises(CaseError, match=r"line 6"):
        parse_matpower_case(bad)


def _count_rows(text, name):
    import re
    body = re.search(rf"mpc\.{name}\s*=\s*\[(.*?)\];", text, re.S).group(1)
    rows = [r.split("%")[0] for r in body.split(";")]
    return [r.split() for r in rows if r.split()]


def test_case118_counts_match_file(case118):
    text = resources.files("gridwarm.data").joinpath("case118.m").read_text()
    branch_rows = _count_rows(text, "branch")
    in_service = sum(float(r[10]) > 0 for r in branch_rows)
    assert case118.n_bus == len(_count_rows(text, "bus")) == 118
    assert len(case118.in_service) == in_service == 186


def test_json_round_trip(case3, case14):
    for case in (case3, case14):
        back = parse_json_case(serialize_json_case(case))
        assert back == case


def test_json_missing_mva_base(case3):
    d = case_to_dict(case3)
    del d["mva_base"]
    with pytest.raises(CaseError, match="missing field mva_base"):
        parse_json_case(json.dumps(d))


def test_json_nested_field_path(case3):
    d = case_to_dict(case3)
    del d["branches"][1]["b_sh"]
    with pytest.raises(CaseError, match=r"branches\[1\]\.b_sh"):
        parse_json_case(json.dumps(d))


def test_json_negative_conductance(case3):
    d = case_to_dict(case3)
    d["branches"][0]["g"] = -1.0
    with pytest.raises(CaseError, match="g must be >= 0"):
        parse_json_case(json.dumps(d))


def test_json_version_checked(case3):
    d = case_to_dict(case3)
    d["format_version"] = 2
    with pytest.raises(CaseError, match="format_version"):
        parse_json_case(json.dumps(d))


def _pair(g=1.0, b=-2.0, b_sh=0.0):
    return validate(NetworkCase(buses=(Bus(0, BusKind.SLACK), Bus(1, BusKind.PQ)),
                                branches=(Branch(0, 1, g=g, b=b, b_sh=b_sh),), generators=(), loads=()))


def test_ybus_single_branch():
    y = build_ybus(_pair()).toarray()
    np.testing.assert_array_equal(y, [[1 - 2j, -1 + 2j], [-1 + 2j, 1 - 2j]])


def test_ybus_line_charging_on_diagonal():
    y = build_ybus(_pair(b_sh=0.2)).toarray()
    assert y[0, 0] == pytest.approx(1 - 1.9j)
    assert y[1, 1] == pytest.approx(1 - 1.9j)
    assert y[0, 1] == -1 + 2j


def test_ybus_pattern_case14(case14):
    y = build_ybus(case14).toarray()
    expected = np.eye(case14.n_bus, dtype=bool)
    for br in case14.in_service:
        expected[br.from_bus, br.to_bus] = expected[br.to_bus, br.from_bus] = True
    assert np.array_equal(y != 0, expected)


def test_ybus_symmetric_with_taps(case118):
    assert any(br.tap != 1.0 for br in case118.branches)
    y = build_ybus(case118)
    assert (y != y.T).nnz == 0


def test_ybus_tap_transformation():
    case = validate(NetworkCase(buses=(Bus(0, BusKind.SLACK), Bus(1, BusKind.PQ)),
                                branches=(Branch(0, 1, g=0.0, b=-10.0, tap=1.1),), generators=(), loads=()))
    y = build_ybus(case).toarray()
    assert y[0, 0] == pytest.approx(-10j / 1.1**2)
    assert y[1, 1] == pytest.approx(-10j)
    assert y[0, 1] == pytest.approx(10j / 1.1)


def test_out_of_service_branch_contributes_nothing(case14):
    off = [br if k != 3 else Branch(br.from_bus, br.to_bus, br.g, br.b, br.b_sh, br.tap, False)
           for k, br in enumerate(case14.branches)]
    reduced = [br for k, br in enumerate(case14.branches) if k != 3]
    a = build_ybus(case14.replace(branches=tuple(off))).toarray()
    b = build_ybus(case14.replace(branches=tuple(reduced))).toarray()
    assert np.array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=2, max_value=9), st.integers(min_value=0, max_value=2**32 - 1))
def test_ybus_rows_sum_to_zero_without_shunts(n, seed):
    rng = np.random.default_rng(seed)
    branches = [Branch(i, i + 1, g=rng.uniform(0, 3), b=rng.uniform(-20, -1)) for i in range(n - 1)]
    for _ in range(n):
        s, t = rng.choice(n, 2, replace=False)
        branches.append(Branch(int(s), int(t), g=rng.uniform(0, 3), b=rng.uniform(-20, 5)))
    buses = (Bus(0, BusKind.SLACK),) + tuple(Bus(i, BusKind.PQ) for i in range(1, n))
    y = build_ybus(validate(NetworkCase(buses, tuple(branches), (), ()))).toarray()
    np.testing.assert_allclose(y.sum(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y, y.T, rtol=0, atol=1e-12)


def test_disconnected_case_rejected():
    with pytest.raises(CaseError, match="not connected"):
        validate(NetworkCase(buses=(Bus(0, BusKind.SLACK), Bus(1, BusKind.PQ), Bus(2, BusKind.PQ)),
                             branches=(Branch(0, 1, 1.0, -1.0),), generators=(), loads=()))


def test_participation_defaults_to_capacity(case14):
    gens = [g for g in case14.generators if g.bus != case14.slack]
    total = sum(g.p_max for g in gens)
    for g in gens:
        assert g.participation == pytest.approx(g.p_max / total)
    assert sum(g.participation for g in case14.generators) == pytest.approx(1.0)
