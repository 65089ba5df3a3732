import json
import math

import numpy as np
import pytest

from gridwarm.contingency import (Contingency, ContingencyKnobs, PreCaseKnobs, Sample, apply_contingency,
                                  contingency_effect, generate_dataset, load_buses, random_pre_case,
                                  read_dataset, sample_madiot, split_indices)
from gridwarm.grid import Load, is_connected, validate
from gridwarm.powerflow import PfOptions, power_mismatch, solve_powerflow
from conftest import ring


def test_degenerate_knobs_reproduce_base(case14):
    knobs = PreCaseKnobs(outage_counts=(0,), load_range=(1.0, 1.0))
    base_v = solve_powerflow(case14).voltages
    case, v = random_pre_case(case14, 7, knobs, base_solution=base_v)
    assert case == case14
    np.testing.assert_allclose(v, base_v, rtol=0, atol=1e-10)


def test_one_outage_on_ring_stays_connected():
    base = ring(4)
    knobs = PreCaseKnobs(outage_counts=(1,), load_range=(1.0, 1.0))
    for seed in range(5):
        case, _ = random_pre_case(base, seed, knobs)
        assert len(case.in_service) == 3
        assert is_connected(case.n_bus, case.edges)


def test_pre_case_convergence_rate_case14(case14):
    base_v = solve_powerflow(case14).voltages
    ok = 0
    for j in range(100):
        try:
            random_pre_case(case14, [11, j], base_solution=base_v)
            ok += 1
        except Exception:
            pass
    assert ok >= 95


def test_sample_madiot_counts(case14):
    buses = load_buses(case14)
    assert len(buses) == 11
    c = sample_madiot(case14, 0.5, 2.0, 0)
    assert len(c.locations) == math.ceil(0.5 * 11) == 6
    assert len(set(c.locations)) == 6 and set(c.locations) <= set(buses)
    assert c.parameter == 2.0 and c.kind == "MadIoT"
    assert sample_madiot(case14, 1.0, 1.2, 0).locations == tuple(buses)


def test_sample_madiot_ten_loads():
    case = ring(11)
    assert len(load_buses(case)) == 10
    assert len(sample_madiot(case, 0.5, 2.0, 1).locations) == 5


@pytest.mark.parametrize("frac", [0.0, -0.1, 1.5])
def test_sample_madiot_bad_fraction(case14, frac):
    with pytest.raises(ValueError):
        sample_madiot(case14, frac, 2.0, 0)


def test_contingency_validation():
    with pytest.raises(ValueError):
        Contingency("MadIoT", (), 1.5)
    with pytest.raises(ValueError):
        Contingency("MadIoT", (1,), 0.0)


def test_apply_unit_parameter_is_identity(case14):
    c = Contingency("MadIoT", (1, 2), 1.0)
    assert apply_contingency(case14, c) == case14


def test_apply_single_load_arithmetic(case3):
    case = validate(case3.replace(loads=(Load(1, 0.2, 0.05), Load(2, 0.4, 0.1))))
    eff = contingency_effect(case, Contingency("MadIoT", (2,), 1.5))
    assert eff.case.loads[1].p == pytest.approx(0.6)
    assert eff.case.loads[1].q == pytest.approx(0.15)
    assert eff.delta_p_load[2] == pytest.approx(0.2)
    assert eff.delta_q_load[2] == pytest.approx(0.05)
    assert eff.delta_p_gen.sum() == pytest.approx(0.2)
    gen_total = sum(g.p_set for g in eff.case.generators) - sum(g.p_set for g in case.generators)
    assert gen_total == pytest.approx(0.2)


def test_apply_doubles_selected_loads(case118):
    c = sample_madiot(case118, 0.5, 2.0, 5)
    post = apply_contingency(case118, c)
    before = {ld.bus: ld.p for ld in case118.loads}
    after = {ld.bus: ld.p for ld in post.loads}
    for bus in before:
        expected = 2 * before[bus] if bus in c.locations else before[bus]
        assert after[bus] == pytest.approx(expected)


def test_split_sizes():
    s = split_indices(1000, 4)
    assert (len(s["train"]), len(s["val"]), len(s["test"])) == (800, 100, 100)
    assert sorted(s["train"] + s["val"] + s["test"]) == list(range(1000))
    assert split_indices(1000, 4) == s


def test_dataset_deterministic_and_valid(tmp_path, case14):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    knobs = ContingencyKnobs(frac=0.5, scale=1.5)
    generate_dataset(case14, 10, knobs, seed=9, out=str(a))
    generate_dataset(case14, 10, knobs, seed=9, out=str(b))
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert len(lines) == 10
    rec = json.loads(lines[0])
    assert set(rec) == {"sample_id", "pre_case", "pre_voltages", "contingency", "post_voltages", "droop_deltas"}
    samples, manifest = read_dataset(str(a))
    assert [s.sample_id for s in samples] == list(range(10))
    assert {k: len(v) for k, v in manifest["split"].items()} == {"train": 8, "val": 1, "test": 1}
    for s in samples:
        assert is_connected(s.pre_case.n_bus, s.pre_case.edges)
        assert np.max(np.abs(power_mismatch(s.post_case(), s.post_voltages))) <= 1e-6
        assert np.max(np.abs(power_mismatch(s.pre_case, s.pre_voltages))) <= 1e-6


def test_sample_round_trip(samples14):
    s = samples14[0]
    back = Sample.from_dict(json.loads(json.dumps(s.to_dict())))
    assert back.pre_case == s.pre_case and back.contingency == s.contingency
    np.testing.assert_array_equal(back.post_voltages, s.post_voltages)
    np.testing.assert_array_equal(back.droop_deltas, s.droop_deltas)


def test_parallel_generation_matches_serial(case14):
    from gridwarm.contingency import generate_samples

    knobs = ContingencyKnobs(frac=0.5, scale=1.5)
    serial = generate_samples(case14, 6, knobs, seed=2)
    par = generate_samples(case14, 6, knobs, seed=2, jobs=2)
    assert [json.dumps(s.to_dict()) for s in serial] == [json.dumps(s.to_dict()) for s in par]
