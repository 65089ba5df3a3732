"""Newton-Raphson AC power flow in rectangular coordinates, plus droop dispatch."""
from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import BusKind, NetworkCase, build_ybus


class CapacityWarning(UserWarning):
    """Droop could not place the full imbalance on non-slack generators."""


@dataclass(frozen=True)
class PfOptions:
    tol: float = 1e-6
    max_iter: int = 100
    droop_enabled: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class PfResult:
    voltages: np.ndarray  # (n, 2) real/imag
    iterations: int
    converged: bool
    max_mismatch: float


def to_complex(profile) -> np.ndarray:
    v = np.asarray(profile, dtype=float)
    return v[:, 0] + 1j * v[:, 1]


def to_profile(v: np.ndarray) -> np.ndarray:
    return np.column_stack([v.real, v.imag])


def flat_start(case: NetworkCase) -> np.ndarray:
    prof = np.zeros((case.n_bus, 2))
    prof[:, 0] = case.v_setpoints()
    return prof


def vpre_start(solution) -> np.ndarray:
    return np.array(solution, dtype=float, copy=True)


class _Mismatch:
    """Mismatch function and analytic Jacobian for one case."""

    def __init__(self, case: NetworkCase):
        self.ybus = build_ybus(case).tocsr()
        self.sched = case.scheduled_injection()
        self.slack = case.slack
        self.pv = case.pv
        self.pq = case.pq
        self.vset = case.v_setpoints()
        self.nonslack = np.sort(np.concatenate([self.pv, self.pq]))

    def residual(self, v: np.ndarray) -> np.ndarray:
        s = v * np.conj(self.ybus @ v) - self.sched
        dv2 = np.abs(v[self.pv]) ** 2 - self.vset[self.pv] ** 2
        return np.concatenate([s.real[self.nonslack], s.imag[self.pq], dv2])

    def jacobian(self, v: np.ndarray) -> sp.csc_matrix:
        ybus = self.ybus
        i_conj = np.conj(ybus @ v)
        dv_ycon = sp.diags(v) @ ybus.conjugate()
        ds_de = sp.diags(i_conj) + dv_ycon
        ds_df = 1j * (sp.diags(i_conj) - dv_ycon)
        cols = self.nonslack
        ds_de = ds_de.tocsr()[:, cols]
        ds_df = ds_df.tocsr()[:, cols]
        rows_p, rows_q = self.nonslack, self.pq
        npv = len(self.pv)
        # |v|^2 rows at PV buses: 2e, 2f in the PV bus's own column
        pos = np.searchsorted(cols, self.pv)
        dvm_de = sp.csr_matrix((2 * v[self.pv].real, (np.arange(npv), pos)), shape=(npv, len(cols)))
        dvm_df = sp.csr_matrix((2 * v[self.pv].imag, (np.arange(npv), pos)), shape=(npv, len(cols)))
        jac = sp.bmat([
            [ds_de[rows_p].real, ds_df[rows_p].real],
            [ds_de[rows_q].imag, ds_df[rows_q].imag],
            [dvm_de, dvm_df],
        ])
        return jac.tocsc()

    def unpack(self, v: np.ndarray, dx: np.ndarray) -> np.ndarray:
        k = len(self.nonslack)
        out = v.copy()
        out[self.nonslack] += dx[:k] + 1j * dx[k:]
        return out


def power_mismatch(case: NetworkCase, voltages) -> np.ndarray:
    """Absolute mismatch vector of the power-flow equations at ``voltages``."""
    return _Mismatch(case).residual(to_complex(voltages))


def solve_powerflow(case: NetworkCase, init=None, opts: PfOptions | None = None) -> PfResult:
    opts = opts or PfOptions()
    eq = _Mismatch(case)
    if init is None:
        init = flat_start(case)
    init = np.asarray(init, dtype=float)
    if init.shape != (case.n_bus, 2):
        raise ValueError(f"init must have shape ({case.n_bus}, 2), got {init.shape}")
    v = to_complex(init)
    # generator buses start on their magnitude setpoint, keeping the given angle
    gen_buses = eq.pv[np.abs(v[eq.pv]) > 0]
    v[gen_buses] *= eq.vset[gen_buses] / np.abs(v[gen_buses])
    v[eq.slack] = eq.vset[eq.slack]

    f = eq.residual(v)
    err = float(np.max(np.abs(f), initial=0.0))
    it = 0
    converged = err <= opts.tol
    while not converged and it < opts.max_iter:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", spla.MatrixRankWarning)
                dx = spla.spsolve(eq.jacobian(v), -f)
        except (RuntimeError, spla.MatrixRankWarning):
            break
        it += 1
        if not np.all(np.isfinite(dx)):
            break
        v = eq.unpack(v, dx)
        f = eq.residual(v)
        err = float(np.max(np.abs(f), initial=0.0))
        if not np.isfinite(err):
            break
        converged = err <= opts.tol
    return PfResult(voltages=to_profile(v), iterations=it, converged=converged, max_mismatch=err)


# --------------------------------------------------------------------------
# droop


@dataclass(frozen=True)
class DroopResult:
    case: NetworkCase
    bus_deltas: np.ndarray  # per-bus generator active-power change, slack remainder included
    slack_remainder: float
    capacity_shortfall: bool


def droop_dispatch(case: NetworkCase, delta_p_total: float) -> DroopResult:
    """Share ``delta_p_total`` over non-slack units in proportion to participation.

    Units that hit 0 or p_max are frozen and the rest of the imbalance is
    re-shared over the others until nothing new saturates.  Whatever cannot
    be placed is left to the slack bus.
    """
    gens = case.generators
    slack = case.slack
    eligible = [k for k, g in enumerate(gens)
                if g.status and g.bus != slack and g.participation > 0]
    p = np.array([g.p_set for g in gens], dtype=float)
    pmax = np.array([g.p_max for g in gens], dtype=float)
    part = np.array([g.participation for g in gens], dtype=float)

    new_p = p.copy()
    free = list(eligible)
    remaining = float(delta_p_total)
    while free and abs(remaining) > 0.0:
        share = part[free] / part[free].sum()
        trial = new_p[free] + share * remaining
        clipped = np.clip(trial, 0.0, np.maximum(pmax[free], 0.0))
        hit = clipped != trial
        new_p[free] = clipped
        remaining = float(delta_p_total - (new_p - p).sum())
        if not hit.any():
            break
        free = [k for k, h in zip(free, hit) if not h]
    remaining = float(delta_p_total - (new_p - p).sum())
    if abs(remaining) < 1e-12:
        remaining = 0.0

    shortfall = remaining != 0.0
    new_gens = tuple(dataclasses.replace(g, p_set=float(new_p[k])) if new_p[k] != p[k] else g
                     for k, g in enumerate(gens))
    deltas = np.zeros(case.n_bus)
    for k, g in enumerate(gens):
        deltas[g.bus] += new_p[k] - p[k]
    deltas[slack] += remaining
    new_case = case if delta_p_total == 0.0 else case.replace(generators=new_gens)
    return DroopResult(case=new_case, bus_deltas=deltas, slack_remainder=remaining,
                       capacity_shortfall=shortfall)


def apply_droop(case: NetworkCase, delta_p_total: float) -> NetworkCase:
    res = droop_dispatch(case, delta_p_total)
    if res.capacity_shortfall:
        warnings.warn(f"droop capacity exhausted; {res.slack_remainder:.4g} pu left to slack",
                      CapacityWarning, stacklevel=2)
    return res.case
