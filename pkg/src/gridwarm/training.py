"""Surrogate-loss training, exact likelihood diagnostics and warm-start evaluation."""
from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cgrf import (AssembledSystem, Factorization, Features, InferenceError, ModelParams,
                   extract_features, fit_norm_stats, forward, infer, init_params, mlp_backward)
from .contingency import Sample
from .powerflow import PfOptions, flat_start, solve_powerflow

log = logging.getLogger(__name__)


class IndefiniteError(ValueError):
    """Precision matrix is not positive definite."""


class TrainingAborted(RuntimeError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


# --------------------------------------------------------------------------
# losses on an assembled system


def surrogate_loss(system: AssembledSystem, y, ridge: float = 0.0):
    """``0.5 * ||y - mu||^2`` with ``mu = lam^{-1} eta``; returns (loss, mu)."""
    y = np.asarray(y, dtype=float).ravel()
    mu = Factorization(system.lam, ridge).solve(system.eta)
    r = y - mu
    return 0.5 * float(r @ r), mu


@dataclass
class SystemGrad:
    loss: float
    mu: np.ndarray
    node_blocks: np.ndarray  # (n, 3) d loss / d (diag0, diag1, off)
    edge_blocks: np.ndarray  # (m, 2, 2)
    eta: np.ndarray          # (n, 2)


def surrogate_grad(system: AssembledSystem, y, ridge: float = 0.0) -> SystemGrad:
    """Adjoint gradient of the surrogate loss w.r.t. the assembled blocks.

    ``lam`` is symmetric so the adjoint system reuses the forward factors.
    """
    y = np.asarray(y, dtype=float).ravel()
    fac = Factorization(system.lam, ridge)
    mu = fac.solve(system.eta)
    adj = fac.solve(mu - y)
    loss = 0.5 * float((y - mu) @ (y - mu))
    n = system.n_bus
    lam2 = adj.reshape(n, 2)
    mu2 = mu.reshape(n, 2)
    d_eta = lam2.copy()
    if system.zi_mask is not None:
        d_eta[system.zi_mask] = 0.0
    # d loss / d lam = -adj mu^T on the structural pattern
    node = np.empty((n, 3))
    node[:, 0] = -lam2[:, 0] * mu2[:, 0]
    node[:, 1] = -lam2[:, 1] * mu2[:, 1]
    node[:, 2] = -(lam2[:, 0] * mu2[:, 1] + lam2[:, 1] * mu2[:, 0])
    s, t = system.edges[:, 0], system.edges[:, 1]
    edge = -(lam2[s][:, :, None] * mu2[t][:, None, :] + mu2[s][:, :, None] * lam2[t][:, None, :])
    return SystemGrad(loss=loss, mu=mu, node_blocks=node, edge_blocks=edge, eta=d_eta)


def _cholesky(lam) -> np.ndarray:
    dense = lam.toarray() if hasattr(lam, "toarray") else np.asarray(lam, dtype=float)
    try:
        return np.linalg.cholesky(dense)
    except np.linalg.LinAlgError:
        raise IndefiniteError("precision matrix is indefinite") from None


def log_partition(lam, eta) -> float:
    """``log`` of the integral of ``exp(eta^T y - y^T lam y / 2)`` over R^d."""
    chol = _cholesky(lam)
    eta = np.asarray(eta, dtype=float).ravel()
    d = len(eta)
    w = np.linalg.solve(chol, eta)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return 0.5 * d * np.log(2 * np.pi) - 0.5 * logdet + 0.5 * float(w @ w)


def nll_loss(system: AssembledSystem, y) -> float:
    """Exact negative log-likelihood of ``y`` under the Gaussian field."""
    y = np.asarray(y, dtype=float).ravel()
    quad = 0.5 * float(y @ (system.lam @ y))
    return quad - float(system.eta @ y) + log_partition(system.lam, system.eta)


# --------------------------------------------------------------------------
# parameter gradients


def loss_and_grad(params: ModelParams, features: Features, y, ridge: float = 0.0):
    """Surrogate loss of one sample and its gradient w.r.t. every weight array."""
    system, cache = forward(params, features, return_cache=True)
    g = surrogate_grad(system, y, ridge)
    d_node = np.concatenate([g.node_blocks, g.eta], axis=1)
    d_edge = g.edge_blocks.reshape(-1, 4)
    node_grads = mlp_backward(params.node_weights, cache.node_acts, d_node, cache.node_owners)
    edge_grads = mlp_backward(params.edge_weights, cache.edge_acts, d_edge, cache.edge_owners)
    return g.loss, node_grads, edge_grads


# --------------------------------------------------------------------------
# optimiser


@dataclass
class TrainConfig:
    lr: float = 1e-3
    step_epochs: int = 100
    gamma: float = 0.5
    epochs: int = 300
    batch_size: int = 32
    seed: int = 0
    ridge: float = 0.0
    patience: int = 50
    max_skip_frac: float = 0.1

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``."""
        return self.lr * self.gamma ** (epoch // self.step_epochs)


class Adam:
    def __init__(self, params: list, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list, grads: list, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    test_loss: float | None = None
    best_epoch: int = -1
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def sample_features(sample: Sample, droop: bool = True) -> Features:
    return extract_features(sample.pre_case, sample.pre_voltages, sample.contingency, droop)


def mean_loss(params: ModelParams, data, ridge: float = 0.0) -> tuple[float, int]:
    losses, skipped = [], 0
    for feats, y in data:
        try:
            losses.append(surrogate_loss(forward(params, feats), y, ridge)[0])
        except InferenceError:
            skipped += 1
    return (float(np.mean(losses)) if losses else float("nan")), skipped


def train(samples: list[Sample], split: dict, config: TrainConfig | None = None,
          variant: str = "cgrf-ps", hidden: int = 64, layers: int = 3,
          init: ModelParams | None = None, progress=None):
    """Mini-batch Adam on the mean surrogate loss; returns the best-on-validation weights."""
    config = config or TrainConfig()
    t0 = time.perf_counter()
    feats = {i: sample_features(samples[i]) for i in sorted(set().union(*split.values()))}
    data = {name: [(feats[i], samples[i].post_voltages.ravel()) for i in idx] for name, idx in split.items()}
    train_data = data["train"]
    if not train_data:
        raise ValueError("empty training split")

    if init is None:
        params = init_params(variant, seed=config.seed, hidden=hidden, layers=layers,
                             norm_stats=fit_norm_stats([f for f, _ in train_data]),
                             family=samples[split["train"][0]].pre_case)
        # lam starts at I, so an eta bias at the mean label makes mu start there too
        y_mean = np.mean([y.reshape(-1, 2) for _, y in train_data], axis=(0, 1))
        params.node_weights[-1][..., 3:5] = y_mean
    else:
        params = init.copy()
    flat = params.node_weights + params.edge_weights
    opt = Adam(flat)
    report = TrainReport()
    best = params.copy()
    best_val = np.inf
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7EA1]))
    has_val = bool(data.get("val"))

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(train_data))
        losses, skipped = [], 0
        for start in range(0, len(order), config.batch_size):
            grads = [np.zeros_like(p) for p in flat]
            count = 0
            for j in order[start:start + config.batch_size]:
                f, y = train_data[j]
                try:
                    loss, gn, ge = loss_and_grad(params, f, y, config.ridge)
                except InferenceError:
                    skipped += 1
                    continue
                losses.append(loss)
                for acc, g in zip(grads, gn + ge):
                    acc += g
                count += 1
            if count and lr > 0:
                for g in grads:
                    g /= count
                opt.step(flat, grads, lr)
        report.train_loss.append(float(np.mean(losses)) if losses else float("nan"))
        report.skipped.append(skipped)
        report.lr.append(lr)
        if skipped > config.max_skip_frac * len(train_data):
            report.wall_time = time.perf_counter() - t0
            raise TrainingAborted(f"epoch {epoch}: {skipped} samples skipped", report)

        if has_val:
            val, _ = mean_loss(params, data["val"], config.ridge)
        else:
            val = report.train_loss[-1]
        report.val_loss.append(val)
        if val < best_val:
            best_val, best, report.best_epoch = val, params.copy(), epoch
        if progress is not None:
            progress(epoch, report)
        log.debug("epoch %d lr %.2e train %.4e val %.4e", epoch, lr, report.train_loss[-1], val)
        if has_val and epoch - report.best_epoch >= config.patience:
            log.info("early stop at epoch %d (best %d)", epoch, report.best_epoch)
            break

    if data.get("test"):
        report.test_loss = mean_loss(best, data["test"], config.ridge)[0]
    report.wall_time = time.perf_counter() - t0
    return best, report


# --------------------------------------------------------------------------
# evaluation


EVAL_FIELDS = ["sample_id", "mse", "flat_iters", "flat_converged", "vpre_iters", "vpre_converged",
               "warm_iters", "warm_converged", "warm_fallback"]


def _evaluate_one(args):
    params, sample, opts, prediction = args
    post = sample.post_case()
    fallback = False
    if prediction is None:
        try:
            prediction = infer(forward(params, sample_features(sample)))
        except InferenceError:
            prediction, fallback = sample.pre_voltages, True
    flat = solve_powerflow(post, flat_start(post), opts)
    vpre = solve_powerflow(post, sample.pre_voltages, opts)
    warm = solve_powerflow(post, prediction, opts)
    return {
        "sample_id": sample.sample_id,
        "mse": float(np.mean((prediction - sample.post_voltages) ** 2)),
        "flat_iters": flat.iterations, "flat_converged": flat.converged,
        "vpre_iters": vpre.iterations, "vpre_converged": vpre.converged,
        "warm_iters": warm.iterations, "warm_converged": warm.converged,
        "warm_fallback": fallback,
    }


def summarize(rows: list[dict]) -> dict:
    out = {"n": len(rows), "mse": float(np.mean([r["mse"] for r in rows]))}
    for start in ("flat", "vpre", "warm"):
        conv = np.array([r[f"{start}_converged"] for r in rows], dtype=bool)
        its = np.array([r[f"{start}_iters"] for r in rows], dtype=float)
        out[f"{start}_conv_rate"] = float(conv.mean())
        out[f"{start}_mean_iters"] = float(its[conv].mean()) if conv.any() else float("nan")
        out[f"{start}_median_iters"] = float(np.median(its[conv])) if conv.any() else float("nan")
    both = np.array([r["flat_converged"] and r["warm_converged"] for r in rows], dtype=bool)
    if both.any():
        f = np.mean([r["flat_iters"] for r, b in zip(rows, both) if b])
        w = np.mean([r["warm_iters"] for r, b in zip(rows, both) if b])
        out["flat_mean_iters_mutual"] = float(f)
        out["warm_mean_iters_mutual"] = float(w)
        out["warm_vs_flat_ratio"] = float(w / f) if f else float("nan")
    out["fallbacks"] = int(sum(r["warm_fallback"] for r in rows))
    return out


def evaluate(params: ModelParams | None, samples: list[Sample], opts: PfOptions | None = None,
             predictions=None, jobs: int = 1):
    """Newton iterations from flat, pre-contingency and model starts.

    Returns ``(rows, summary)``; ``predictions`` overrides the model output.
    """
    opts = opts or PfOptions()
    preds = predictions if predictions is not None else [None] * len(samples)
    args = [(params, s, opts, p) for s, p in zip(samples, preds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_evaluate_one, args, chunksize=4))
    else:
        rows = [_evaluate_one(a) for a in args]
    return rows, summarize(rows)


def metrics_csv(rows: list[dict], summary: dict) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=EVAL_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    writer.writerow({
        "sample_id": "summary", "mse": summary["mse"],
        "flat_iters": summary["flat_mean_iters"], "flat_converged": summary["flat_conv_rate"],
        "vpre_iters": summary["vpre_mean_iters"], "vpre_converged": summary["vpre_conv_rate"],
        "warm_iters": summary["warm_mean_iters"], "warm_converged": summary["warm_conv_rate"],
        "warm_fallback": summary["fallbacks"],
    })
    return buf.getvalue()
