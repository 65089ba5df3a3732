import re
import warnings
from importlib import resources

import numpy as np
import pytest

from gridwarm.grid import Generator, NetworkCase, validate
from gridwarm.powerflow import (CapacityWarning, PfOptions, apply_droop, droop_dispatch, flat_start,
                                power_mismatch, solve_powerflow, to_complex, vpre_start)
from conftest import ring, three_bus, two_bus


def two_bus_closed_form(p, b):
    # S2 = V2 conj(y (V2 - 1)) with y = j*b and V1 = 1; for a pure reactance
    # the imaginary part gives f = p / b and the real part e^2 - e + f^2 = 0.
    f = p / b
    e = 0.5 * (1 + np.sqrt(1 - 4 * f * f))
    return e, f


def test_two_bus_matches_closed_form(case2):
    res = solve_powerflow(case2, flat_start(case2))
    assert res.converged
    e, f = two_bus_closed_form(0.5, -10.0)
    assert res.voltages[1, 0] == pytest.approx(e, abs=1e-8)
    assert res.voltages[1, 1] == pytest.approx(f, abs=1e-8)


def _reference_profile(name):
    """Vm/Va columns of the distributed case file (solved state rounded to 3 decimals)."""
    text = resources.files("gridwarm.data").joinpath(f"{name}.m").read_text()
    body = re.search(r"mpc\.bus\s*=\s*\[(.*?)\];", text, re.S).group(1)
    rows = [r.split() for r in body.split(";") if r.split()]
    vm = np.array([float(r[7]) for r in rows])
    va = np.array([float(r[8]) for r in rows])
    slack = [i for i, r in enumerate(rows) if r[1] == "3"][0]
    return vm, va - va[slack]


def test_case14_flat_start_against_reference(case14):
    res = solve_powerflow(case14, flat_start(case14))
    assert res.converged and res.max_mismatch <= 1e-6
    v = to_complex(res.voltages)
    vm, va = _reference_profile("case14")
    np.testing.assert_allclose(np.abs(v), vm, atol=2e-3)
    np.testing.assert_allclose(np.degrees(np.angle(v)), va, atol=0.05)


def test_exact_solution_is_fixed_point(case14):
    res = solve_powerflow(case14, flat_start(case14))
    again = solve_powerflow(case14, res.voltages)
    assert again.converged and again.iterations <= 1


def test_iteration_count_zero_when_already_converged(case2):
    res = solve_powerflow(case2)
    assert solve_powerflow(case2, res.voltages, PfOptions(tol=1e-6)).iterations == 0


@pytest.mark.parametrize("make", [two_bus, three_bus, ring])
def test_convergence_certificate_and_setpoints(make):
    case = make()
    opts = PfOptions(tol=1e-8)
    res = solve_powerflow(case, flat_start(case), opts)
    assert res.converged and res.iterations <= opts.max_iter
    assert np.max(np.abs(power_mismatch(case, res.voltages))) <= opts.tol
    v = to_complex(res.voltages)
    vset = case.v_setpoints()
    assert v[case.slack] == vset[case.slack]
    np.testing.assert_allclose(np.abs(v[case.pv]), vset[case.pv], atol=opts.tol)


def test_nonconvergence_reported_not_raised(case2):
    heavy = case2.replace(loads=(case2.loads[0].__class__(1, 50.0, 0.0),))
    res = solve_powerflow(heavy, flat_start(heavy), PfOptions(max_iter=15))
    assert not res.converged
    assert res.iterations <= 15


def test_non_finite_start_is_nonconvergence(case2):
    init = np.array([[1.0, 0.0], [np.nan, 0.0]])
    res = solve_powerflow(case2, init, PfOptions(max_iter=5))
    assert not res.converged


def test_bad_options():
    with pytest.raises(ValueError):
        PfOptions(tol=0)
    with pytest.raises(ValueError):
        PfOptions(max_iter=0)


def test_flat_start_values(case3):
    prof = flat_start(ring(3))
    np.testing.assert_array_equal(prof, [[1, 0], [1, 0], [1, 0]])
    prof = flat_start(case3)
    assert tuple(prof[1]) == (1.01, 0.0)
    assert tuple(prof[0]) == (1.02, 0.0)
    v = np.arange(6.0).reshape(3, 2)
    out = vpre_start(v)
    assert np.array_equal(out, v) and out is not v


# --- droop ----------------------------------------------------------------


def _droop_case(p1=0.2, p2=0.2, pmax1=1.0, pmax2=1.0):
    base = three_bus()
    gens = (base.generators[0],
            Generator(1, p_set=p1, v_set=1.01, p_max=pmax1, participation=0.5),
            Generator(2, p_set=p2, p_max=pmax2, participation=0.5))
    return validate(base.replace(generators=gens))


def test_droop_proportional_split():
    out = apply_droop(_droop_case(), 0.2)
    assert out.generators[1].p_set == pytest.approx(0.3)
    assert out.generators[2].p_set == pytest.approx(0.3)
    assert out.generators[0].p_set == 0.3  # slack untouched


def test_droop_zero_is_identity():
    case = _droop_case()
    assert apply_droop(case, 0.0) == case


def test_droop_saturated_unit_redistributes():
    # unit 1 already at p_max: the fixpoint sends the whole change to unit 2
    res = droop_dispatch(_droop_case(p1=1.0), 0.2)
    assert res.case.generators[1].p_set == 1.0
    assert res.case.generators[2].p_set == pytest.approx(0.4)
    assert not res.capacity_shortfall
    assert res.bus_deltas[2] == pytest.approx(0.2)


def test_droop_partial_saturation():
    # 0.5/0.5 split of 0.4 would push unit 1 to 1.1 > 1.0; excess 0.1 moves to unit 2
    res = droop_dispatch(_droop_case(p1=0.9), 0.4)
    assert res.case.generators[1].p_set == pytest.approx(1.0)
    assert res.case.generators[2].p_set == pytest.approx(0.5)


def test_droop_capacity_shortfall_warns():
    case = _droop_case(p1=0.9, p2=0.9)
    with pytest.warns(CapacityWarning):
        out = apply_droop(case, 1.0)
    assert out.generators[1].p_set == 1.0 and out.generators[2].p_set == 1.0
    res = droop_dispatch(case, 1.0)
    assert res.capacity_shortfall
    assert res.slack_remainder == pytest.approx(0.8)
    assert res.bus_deltas[case.slack] == pytest.approx(0.8)


def test_droop_conserves_total(case14):
    res = droop_dispatch(case14, 0.37)
    assert res.bus_deltas.sum() == pytest.approx(0.37)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        apply_droop(case14, 0.37)
