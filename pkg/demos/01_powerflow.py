"""Solving IEEE 14 from flat start, then perturbing it and re-solving.

Run:  python demos/01_powerflow.py
"""
import numpy as np

from gridwarm.grid import build_ybus, load_case
from gridwarm.powerflow import flat_start, solve_powerflow, to_complex

case = load_case("case14")
print(f"IEEE 14: {case.n_bus} buses, {len(case.in_service)} branches, slack bus {case.slack}")

# Ybus has the grid's sparsity pattern: one nonzero per bus plus two per branch
# (fewer where parallel branches share a pair of buses).
ybus = build_ybus(case)
print(f"Ybus nonzeros: {ybus.nnz} of {case.n_bus ** 2}")

res = solve_powerflow(case, flat_start(case))
print(f"flat start: {res.iterations} Newton iterations, max mismatch {res.max_mismatch:.2e}")

v = to_complex(res.voltages)
for i in range(5):
    print(f"  bus {case.bus_numbers[i]:>2}: |V| = {abs(v[i]):.4f} pu, angle = {np.degrees(np.angle(v[i])):7.3f} deg")

# A converged profile is a fixed point.
again = solve_powerflow(case, res.voltages)
print(f"re-solve from the solution: {again.iterations} iterations")
