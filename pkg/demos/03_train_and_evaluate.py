"""Training a parameter-shared cGRF on IEEE 14 and using it as a warm start.

The model maps pre-contingency measurements and the contingency description
to a precision matrix and a potential vector.  Its prediction is the solution
of that sparse linear system, which then seeds Newton-Raphson on the
post-contingency case.  A few hundred samples and a short run are enough to
see the mechanics; larger cases need the full dataset and epoch budget.

Run:  python demos/03_train_and_evaluate.py [epochs]
"""
import sys

from gridwarm.cgrf import predict
from gridwarm.contingency import ContingencyKnobs, generate_samples, split_indices
from gridwarm.grid import load_case
from gridwarm.training import TrainConfig, evaluate, sample_features, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 40
case = load_case("case14")
samples = generate_samples(case, 300, ContingencyKnobs(frac=0.5, scale=2.0), seed=0)
split = split_indices(len(samples), seed=0)


def show(epoch, report):
    if epoch % 10 == 0:
        print(f"epoch {epoch:3d}  train {report.train_loss[-1]:.5f}  val {report.val_loss[-1]:.5f}")


model, report = train(samples, split, TrainConfig(epochs=epochs, batch_size=8), variant="cgrf-ps", progress=show)
print(f"best epoch {report.best_epoch}, test loss {report.test_loss:.5f}, {report.wall_time:.0f}s")

s = samples[split["test"][0]]
mu = predict(model, sample_features(s))
print("bus 4 label (re, im):", s.post_voltages[3].round(4), " prediction:", mu[3].round(4))

test = [samples[i] for i in split["test"]]
_, summary = evaluate(model, test)
for start in ("flat", "vpre", "warm"):
    print(f"{start:>5} start: converged {summary[f'{start}_conv_rate']:.0%}, "
          f"mean iterations {summary[f'{start}_mean_iters']:.2f}")
