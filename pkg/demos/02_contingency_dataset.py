"""A MadIoT load-altering attack on IEEE 14, and a small labelled dataset.

Half of the load buses jump to 200% of their demand.  Droop control spreads
the extra demand over the generators, and the post-contingency power flow
is solved from the pre-contingency voltages to produce the label.

Run:  python demos/02_contingency_dataset.py [out.jsonl]
"""
import os
import sys
import tempfile

from gridwarm.contingency import (ContingencyKnobs, apply_contingency, contingency_effect, generate_dataset,
                                  read_dataset, sample_madiot)
from gridwarm.grid import load_case
from gridwarm.powerflow import solve_powerflow

case = load_case("case14")
attack = sample_madiot(case, frac=0.5, scale=2.0, rng_seed=1)
print(f"attacked load buses: {[case.bus_numbers[i] for i in attack.locations]}")

effect = contingency_effect(case, attack)
print(f"extra demand {effect.delta_p_load.sum():.3f} pu, generator response {effect.delta_p_gen.sum():.3f} pu")

post = apply_contingency(case, attack)
pre_v = solve_powerflow(case).voltages
flat = solve_powerflow(post)
warm = solve_powerflow(post, pre_v)
print(f"post-contingency solve: flat {flat.iterations} iterations, from pre-contingency voltages {warm.iterations}")

out = sys.argv[1] if len(sys.argv) > 1 else os.path.join(tempfile.gettempdir(), "gridwarm_demo14.jsonl")
generate_dataset(case, 50, ContingencyKnobs(frac=0.5, scale=2.0), seed=7, out=out)
samples, manifest = read_dataset(out)
sizes = {k: len(v) for k, v in manifest["split"].items()}
print(f"wrote {len(samples)} samples to {out}; split {sizes}")
