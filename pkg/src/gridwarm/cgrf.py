"""Conditional Gaussian random field warm starter.

A node network maps bus features to a symmetric 2x2 precision block and a
2-vector of the canonical mean parameter; an edge network maps branch
features to the 2x2 coupling block between the two end buses.  The blocks
assemble into a sparse ``(2n, 2n)`` matrix ``lam`` and vector ``eta`` whose
solution ``lam @ y = eta`` is the voltage prediction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .contingency import Contingency, contingency_effect
from .grid import NetworkCase, build_ybus
from .powerflow import power_mismatch, to_complex

FORMAT_VERSION = 1
NODE_FEATURES = ("v_real", "v_imag", "p", "q", "i_real", "i_imag", "q_shunt",
                 "dp_gen", "dp_load", "dq_load")
EDGE_FEATURES = ("g", "b", "b_sh")
NODE_OUT = 5
EDGE_OUT = 4
STD_FLOOR = 1e-8

VARIANTS = {
    "cgrf": {"parameter_sharing": False, "zi_enforcement": False},
    "cgrf-ps": {"parameter_sharing": True, "zi_enforcement": False},
    "cgrf-ps-zi": {"parameter_sharing": True, "zi_enforcement": True},
}


class ModelError(ValueError):
    pass


class InferenceError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# features


@dataclass
class Features:
    node: np.ndarray       # (n, 10)
    edge: np.ndarray       # (m, 3)
    edges: np.ndarray      # (m, 2) from/to bus of each in-service branch
    edge_ids: np.ndarray   # (m,) position of the branch in case.branches
    zi: np.ndarray         # (n,) zero-injection mask
    n_bus: int
    n_branch: int          # total branches in the case, in service or not

    def permuted(self, perm: np.ndarray) -> "Features":
        """Relabel buses so that old bus ``i`` becomes ``perm[i]``."""
        inv = np.argsort(perm)
        return Features(node=self.node[inv], edge=self.edge.copy(), edges=perm[self.edges],
                        edge_ids=self.edge_ids.copy(), zi=self.zi[inv], n_bus=self.n_bus,
                        n_branch=self.n_branch)


def extract_features(pre_case: NetworkCase, pre_voltages, contingency: Contingency | None,
                     droop: bool = True, check_tol: float | None = 1e-6) -> Features:
    v_prof = np.asarray(pre_voltages, dtype=float)
    if check_tol is not None:
        mism = np.max(np.abs(power_mismatch(pre_case, v_prof)), initial=0.0)
        if not mism <= check_tol:
            raise ValueError(f"pre-contingency voltages are not a converged solution (mismatch {mism:.3g})")
    n = pre_case.n_bus
    v = to_complex(v_prof)
    current = build_ybus(pre_case) @ v
    s_inj = v * np.conj(current)
    shunt_b = np.array([b.shunt_b for b in pre_case.buses])

    node = np.zeros((n, len(NODE_FEATURES)))
    node[:, 0] = v.real
    node[:, 1] = v.imag
    node[:, 2] = s_inj.real
    node[:, 3] = s_inj.imag
    node[:, 4] = current.real
    node[:, 5] = current.imag
    node[:, 6] = np.abs(v) ** 2 * shunt_b
    if contingency is not None:
        eff = contingency_effect(pre_case, contingency, droop)
        node[:, 7] = eff.delta_p_gen
        node[:, 8] = eff.delta_p_load
        node[:, 9] = eff.delta_q_load

    ids = np.array([k for k, br in enumerate(pre_case.branches) if br.status], dtype=int)
    edge = np.array([[br.g, br.b, br.b_sh] for br in pre_case.in_service], dtype=float).reshape(-1, 3)
    return Features(node=node, edge=edge, edges=pre_case.edges.copy(), edge_ids=ids,
                    zi=pre_case.zero_injection_buses(), n_bus=n, n_branch=len(pre_case.branches))


# --------------------------------------------------------------------------
# small tanh MLP, optionally one weight set per owner


def mlp_init(sizes, rng, owners: int | None = None, out_bias=None):
    params = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        if k == len(sizes) - 2:
            bound *= 0.1  # start close to the output bias
        shape = (fan_in, fan_out) if owners is None else (owners, fan_in, fan_out)
        w = rng.uniform(-bound, bound, size=shape)
        b = np.zeros(fan_out if owners is None else (owners, fan_out))
        if k == len(sizes) - 2 and out_bias is not None:
            b[...] = out_bias
        params += [w, b]
    return params


def mlp_forward(params, x, owners=None):
    """Returns (output, activations).  ``owners`` selects per-row weight sets."""
    acts = [x]
    h = x
    n_layers = len(params) // 2
    for k in range(n_layers):
        w, b = params[2 * k], params[2 * k + 1]
        if owners is None:
            z = h @ w + b
        else:
            z = np.einsum("ki,kio->ko", h, w[owners]) + b[owners]
        h = np.tanh(z) if k < n_layers - 1 else z
        acts.append(h)
    return h, acts


def mlp_backward(params, acts, dout, owners=None, grads=None):
    """Accumulate parameter gradients into ``grads`` (allocated if None)."""
    if grads is None:
        grads = [np.zeros_like(p) for p in params]
    n_layers = len(params) // 2
    delta = dout
    for k in reversed(range(n_layers)):
        h_in = acts[k]
        w = params[2 * k]
        if owners is None:
            grads[2 * k] += h_in.T @ delta
            grads[2 * k + 1] += delta.sum(axis=0)
        else:
            # owners are unique within one sample
            grads[2 * k][owners] += h_in[:, :, None] * delta[:, None, :]
            grads[2 * k + 1][owners] += delta
        if k > 0:
            if owners is None:
                dh = delta @ w.T
            else:
                dh = np.einsum("ko,kio->ki", delta, w[owners])
            delta = dh * (1.0 - acts[k] ** 2)
    return grads


# --------------------------------------------------------------------------
# model parameters


def _arrays_equal(a, b) -> bool:
    return len(a) == len(b) and all(
        x.shape == y.shape and x.dtype == y.dtype and np.array_equal(x, y) for x, y in zip(a, b))


@dataclass(eq=False)
class ModelParams:
    node_weights: list
    edge_weights: list
    norm_stats: dict
    config: dict
    arch: dict = field(default_factory=lambda: {"layers": 3, "hidden": 64, "activation": "tanh"})
    family: dict | None = None  # bus count and branch endpoints for the non-shared variant

    @property
    def sharing(self) -> bool:
        return bool(self.config["parameter_sharing"])

    @property
    def zi(self) -> bool:
        return bool(self.config["zi_enforcement"])

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (self.config == other.config and self.arch == other.arch and self.family == other.family
                and _arrays_equal(self.node_weights, other.node_weights)
                and _arrays_equal(self.edge_weights, other.edge_weights)
                and self.norm_stats.keys() == other.norm_stats.keys()
                and all(np.array_equal(self.norm_stats[k], other.norm_stats[k]) for k in self.norm_stats))

    def copy(self) -> "ModelParams":
        return ModelParams(node_weights=[w.copy() for w in self.node_weights],
                           edge_weights=[w.copy() for w in self.edge_weights],
                           norm_stats={k: v.copy() for k, v in self.norm_stats.items()},
                           config=dict(self.config), arch=dict(self.arch),
                           family=None if self.family is None else dict(self.family))

    def n_parameters(self) -> int:
        return sum(w.size for w in self.node_weights + self.edge_weights)


def identity_norm_stats() -> dict:
    return {"node_mean": np.zeros(len(NODE_FEATURES)), "node_std": np.ones(len(NODE_FEATURES)),
            "edge_mean": np.zeros(len(EDGE_FEATURES)), "edge_std": np.ones(len(EDGE_FEATURES))}


def fit_norm_stats(features: list[Features]) -> dict:
    node = np.concatenate([f.node for f in features])
    edge = np.concatenate([f.edge for f in features])
    return {"node_mean": node.mean(axis=0), "node_std": node.std(axis=0),
            "edge_mean": edge.mean(axis=0), "edge_std": edge.std(axis=0)}


def init_params(variant: str = "cgrf-ps", seed: int = 0, hidden: int = 64, layers: int = 3,
                norm_stats: dict | None = None, family: NetworkCase | None = None) -> ModelParams:
    """Random initial weights.  The node network's output bias starts ``lam`` at the identity."""
    if variant not in VARIANTS:
        raise ModelError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    config = dict(VARIANTS[variant])
    rng = np.random.default_rng(seed)
    node_sizes = [len(NODE_FEATURES)] + [hidden] * (layers - 1) + [NODE_OUT]
    edge_sizes = [len(EDGE_FEATURES)] + [hidden] * (layers - 1) + [EDGE_OUT]
    fam = None
    n_nodes = n_edges = None
    if not config["parameter_sharing"]:
        if family is None:
            raise ModelError("the non-shared variant needs a case family to size its weights")
        fam = {"n_bus": family.n_bus,
               "branches": [[br.from_bus, br.to_bus] for br in family.branches]}
        n_nodes, n_edges = family.n_bus, len(family.branches)
    node_w = mlp_init(node_sizes, rng, n_nodes, out_bias=np.array([1.0, 1.0, 0.0, 0.0, 0.0]))
    edge_w = mlp_init(edge_sizes, rng, n_edges)
    return ModelParams(node_weights=node_w, edge_weights=edge_w,
                       norm_stats=norm_stats or identity_norm_stats(), config=config,
                       arch={"layers": layers, "hidden": hidden, "activation": "tanh"}, family=fam)


def check_family(params: ModelParams, features: Features, case: NetworkCase | None = None) -> None:
    if params.sharing:
        return
    fam = params.family
    if features.n_bus != fam["n_bus"] or features.n_branch != len(fam["branches"]):
        raise ModelError("non-shared model cannot run on a case outside its training family")
    known = np.asarray(fam["branches"], dtype=int).reshape(-1, 2)
    if len(features.edges) and not np.array_equal(known[features.edge_ids], features.edges):
        raise ModelError("branch endpoints differ from the training family")


# --------------------------------------------------------------------------
# assembly


@dataclass
class AssembledSystem:
    lam: sp.csc_matrix
    eta: np.ndarray
    node_blocks: np.ndarray   # (n, 3): diag0, diag1, off-diagonal
    edge_blocks: np.ndarray   # (m, 2, 2) block placed at (from, to)
    edges: np.ndarray         # (m, 2)
    zi_mask: np.ndarray | None = None

    @property
    def n_bus(self) -> int:
        return len(self.node_blocks)

    def dense(self) -> np.ndarray:
        return self.lam.toarray()


def assemble(node_blocks, eta_blocks, edge_blocks, edges, zi_mask=None) -> AssembledSystem:
    node_blocks = np.asarray(node_blocks, dtype=float)
    edge_blocks = np.asarray(edge_blocks, dtype=float).reshape(-1, 2, 2)
    edges = np.asarray(edges, dtype=int).reshape(-1, 2)
    n = len(node_blocks)
    eta = np.array(eta_blocks, dtype=float).reshape(n, 2)
    if zi_mask is not None:
        eta[zi_mask] = 0.0
    ii = np.arange(n)
    r0, r1 = 2 * ii, 2 * ii + 1
    rows = [r0, r1, r0, r1]
    cols = [r0, r1, r1, r0]
    vals = [node_blocks[:, 0], node_blocks[:, 1], node_blocks[:, 2], node_blocks[:, 2]]
    s, t = edges[:, 0], edges[:, 1]
    for a in range(2):
        for b in range(2):
            rows += [2 * s + a, 2 * t + b]
            cols += [2 * t + b, 2 * s + a]
            vals += [edge_blocks[:, a, b], edge_blocks[:, a, b]]
    lam = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(2 * n, 2 * n))
    lam.sum_duplicates()
    return AssembledSystem(lam=lam, eta=eta.ravel(), node_blocks=node_blocks, edge_blocks=edge_blocks,
                           edges=edges, zi_mask=zi_mask)


@dataclass
class ForwardCache:
    node_acts: list
    edge_acts: list
    node_owners: np.ndarray | None
    edge_owners: np.ndarray | None


def _normalize(x, mean, std):
    return (x - mean) / np.maximum(std, STD_FLOOR)


def forward(params: ModelParams, features: Features, return_cache: bool = False):
    if features.node.shape[1] != len(NODE_FEATURES) or features.edge.shape[1] != len(EDGE_FEATURES):
        raise ModelError("feature dimensions do not match the model architecture")
    if params.node_weights[0].shape[-2] != features.node.shape[1]:
        raise ModelError("node network input size does not match the features")
    check_family(params, features)
    ns = params.norm_stats
    xn = _normalize(features.node, ns["node_mean"], ns["node_std"])
    xe = _normalize(features.edge, ns["edge_mean"], ns["edge_std"])
    node_owners = None if params.sharing else np.arange(features.n_bus)
    edge_owners = None if params.sharing else features.edge_ids
    out_n, acts_n = mlp_forward(params.node_weights, xn, node_owners)
    out_e, acts_e = mlp_forward(params.edge_weights, xe, edge_owners)
    zi = features.zi if params.zi else None
    system = assemble(out_n[:, :3], out_n[:, 3:], out_e.reshape(-1, 2, 2), features.edges, zi)
    if return_cache:
        return system, ForwardCache(acts_n, acts_e, node_owners, edge_owners)
    return system


# --------------------------------------------------------------------------
# inference


class Factorization:
    """Sparse LU of ``lam + ridge*I`` with a one-shot ridge retry."""

    def __init__(self, lam: sp.spmatrix, ridge: float = 0.0, retry_ridge: float = 1e-6):
        self.ridge = ridge
        last = None
        for r in (ridge, retry_ridge) if retry_ridge is not None else (ridge,):
            mat = lam + r * sp.identity(lam.shape[0], format="csc") if r else lam
            try:
                lu = spla.splu(sp.csc_matrix(mat))
            except RuntimeError as exc:
                last = exc
                continue
            if not np.all(np.isfinite(lu.U.diagonal())):
                last = RuntimeError("non-finite pivot")
                continue
            self.lu, self.ridge = lu, r
            return
        raise InferenceError(f"factorization failed even with ridge {retry_ridge}: {last}")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        x = self.lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise InferenceError("solve produced non-finite values")
        return x


def infer(system: AssembledSystem, ridge: float = 0.0) -> np.ndarray:
    """Solve ``(lam + ridge I) y = eta``; returns per-bus (real, imag) pairs."""
    y = Factorization(system.lam, ridge).solve(system.eta)
    return y.reshape(-1, 2)


def predict(params: ModelParams, features: Features, ridge: float = 0.0) -> np.ndarray:
    return infer(forward(params, features), ridge)


# --------------------------------------------------------------------------
# persistence


def _to_list(arrs):
    return [{"shape": list(a.shape), "data": a.ravel().tolist()} for a in arrs]


def _from_list(items):
    return [np.array(it["data"], dtype=float).reshape(it["shape"]) for it in items]


def model_to_dict(params: ModelParams) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "arch": params.arch,
        "config": params.config,
        "family": params.family,
        "norm_stats": {k: v.tolist() for k, v in params.norm_stats.items()},
        "weights": {"node": _to_list(params.node_weights), "edge": _to_list(params.edge_weights)},
    }


def model_from_dict(d: dict) -> ModelParams:
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelError(f"model format_version {version!r} not supported (expected {FORMAT_VERSION})")
    try:
        return ModelParams(
            node_weights=_from_list(d["weights"]["node"]),
            edge_weights=_from_list(d["weights"]["edge"]),
            norm_stats={k: np.array(v, dtype=float) for k, v in d["norm_stats"].items()},
            config={k: bool(v) for k, v in d["config"].items()},
            arch=dict(d["arch"]),
            family=d.get("family"),
        )
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed model file: missing {exc}") from None


def save_model(params: ModelParams, path: str) -> None:
    from .contingency import atomic_write

    atomic_write(path, json.dumps(model_to_dict(params)))


def load_model(path: str) -> ModelParams:
    with open(path) as fh:
        text = fh.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"cannot parse model file {path}: {exc}") from None
    return model_from_dict(d)
