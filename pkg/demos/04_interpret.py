"""Comparing a model's precision matrix with the admittance matrix.

The assembled precision matrix has exactly the block pattern of Ybus, because
edge blocks exist only where branches do.  Whether the magnitudes follow the
admittances is an empirical question; the correlations are printed, not judged.

Run:  python demos/04_interpret.py
"""
import numpy as np

from gridwarm.cgrf import init_params
from gridwarm.cli import interpret
from gridwarm.contingency import ContingencyKnobs, generate_samples, split_indices
from gridwarm.grid import load_case
from gridwarm.training import TrainConfig, train

case = load_case("case14")
samples = generate_samples(case, 100, ContingencyKnobs(frac=0.5, scale=2.0), seed=4)
model, _ = train(samples, split_indices(100, 4), TrainConfig(epochs=20, batch_size=8))

for label, params in (("untrained", init_params("cgrf-ps", seed=0)), ("trained", model)):
    res = interpret(params, samples[0])
    print(f"{label:>9}: pattern equal {res['pattern_equal']}, "
          f"corr(|Lambda block|, |Ybus|) {res['corr_lambda_ybus']:.3f}, corr(|eta|, |J|) {res['corr_eta_j']:.3f}")

lam = res["lambda_dense"]
print("first 2x2 bus blocks of Lambda (trained):")
print(np.array2string(lam[:4, :4], precision=3, suppress_small=True))
