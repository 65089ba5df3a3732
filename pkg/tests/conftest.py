import numpy as np
import pytest

from gridwarm.grid import Branch, Bus, BusKind, Generator, Load, NetworkCase, load_case, validate


def two_bus(p=0.5, q=0.0, b_sh=0.0):
    """Slack at bus 0, PQ load at bus 1, lossless line x=0.1."""
    return validate(NetworkCase(
        buses=(Bus(0, BusKind.SLACK), Bus(1, BusKind.PQ)),
        branches=(Branch(0, 1, g=0.0, b=-10.0, b_sh=b_sh),),
        generators=(Generator(0, p_set=0.0, v_set=1.0, p_max=5.0),),
        loads=(Load(1, p, q),),
    ))


def three_bus():
    """Slack, PV and PQ bus in a triangle with two droop units."""
    return validate(NetworkCase(
        buses=(Bus(0, BusKind.SLACK), Bus(1, BusKind.PV, shunt_b=0.05), Bus(2, BusKind.PQ)),
        branches=(Branch(0, 1, g=1.0, b=-10.0, b_sh=0.02), Branch(1, 2, g=2.0, b=-8.0, b_sh=0.01),
                  Branch(0, 2, g=1.5, b=-12.0)),
        generators=(Generator(0, p_set=0.3, v_set=1.02, p_max=2.0),
                    Generator(1, p_set=0.4, v_set=1.01, p_max=1.0, participation=0.5),
                    Generator(2, p_set=0.1, p_max=1.0, participation=0.5)),
        loads=(Load(1, 0.2, 0.05), Load(2, 0.6, 0.2)),
    ))


def ring(n=4):
    buses = (Bus(0, BusKind.SLACK),) + tuple(Bus(i, BusKind.PQ) for i in range(1, n))
    branches = tuple(Branch(i, (i + 1) % n, g=1.0, b=-10.0, b_sh=0.01) for i in range(n))
    return validate(NetworkCase(buses=buses, branches=branches,
                                generators=(Generator(0, p_set=0.0, v_set=1.0, p_max=5.0),),
                                loads=tuple(Load(i, 0.1 * i, 0.02 * i) for i in range(1, n))))


@pytest.fixture
def case2():
    return two_bus()


@pytest.fixture
def case3():
    return three_bus()


@pytest.fixture(scope="session")
def case14():
    return load_case("case14")


@pytest.fixture(scope="session")
def case118():
    return load_case("case118")


@pytest.fixture(scope="session")
def samples14(case14):
    from gridwarm.contingency import ContingencyKnobs, generate_samples

    return generate_samples(case14, 40, ContingencyKnobs(frac=0.5, scale=1.5), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
