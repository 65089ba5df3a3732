"""Random pre-contingency cases, MadIoT load attacks and labelled datasets."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .grid import NetworkCase, case_from_dict, case_to_dict, is_connected
from .powerflow import PfOptions, droop_dispatch, solve_powerflow

log = logging.getLogger(__name__)

MADIOT = "MadIoT"


class GenerationError(RuntimeError):
    """A sample (or a whole dataset) could not be produced."""


@dataclass(frozen=True)
class Contingency:
    kind: str
    locations: tuple[int, ...]
    parameter: float

    def __post_init__(self):
        object.__setattr__(self, "locations", tuple(int(i) for i in self.locations))
        if self.kind != MADIOT:
            raise ValueError(f"unsupported contingency kind {self.kind!r}")
        if not self.locations:
            raise ValueError("contingency needs at least one location")
        if not self.parameter > 0:
            raise ValueError("contingency parameter must be > 0")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "locations": list(self.locations), "parameter": self.parameter}

    @classmethod
    def from_dict(cls, d: dict) -> "Contingency":
        return cls(kind=d["kind"], locations=tuple(d["locations"]), parameter=float(d["parameter"]))


@dataclass(frozen=True)
class PreCaseKnobs:
    """Randomisation of step 1: topology, load level and generation."""
    outage_counts: tuple[int, ...] = (0, 1, 2)
    load_range: tuple[float, float] = (0.9, 1.1)
    max_retries: int = 20


@dataclass(frozen=True)
class ContingencyKnobs:
    frac: float = 0.5
    scale: float = 2.0
    droop: bool = True
    label_max_iter: int = 200
    tol: float = 1e-6


@dataclass
class Sample:
    pre_case: NetworkCase
    pre_voltages: np.ndarray
    contingency: Contingency
    post_voltages: np.ndarray
    droop_deltas: np.ndarray
    sample_id: int = 0

    def post_case(self, droop: bool = True) -> NetworkCase:
        return apply_contingency(self.pre_case, self.contingency, droop=droop)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "pre_case": case_to_dict(self.pre_case),
            "pre_voltages": self.pre_voltages.tolist(),
            "contingency": self.contingency.to_dict(),
            "post_voltages": self.post_voltages.tolist(),
            "droop_deltas": self.droop_deltas.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Sample":
        return cls(
            pre_case=case_from_dict(d["pre_case"]),
            pre_voltages=np.array(d["pre_voltages"], dtype=float),
            contingency=Contingency.from_dict(d["contingency"]),
            post_voltages=np.array(d["post_voltages"], dtype=float),
            droop_deltas=np.array(d["droop_deltas"], dtype=float),
            sample_id=int(d["sample_id"]),
        )


# --------------------------------------------------------------------------
# step 1: random feasible pre-contingency case


def _remove_branches(case: NetworkCase, k: int, rng: np.random.Generator) -> NetworkCase:
    branches = list(case.branches)
    for _ in range(k):
        live = [i for i, br in enumerate(branches) if br.status]
        for idx in rng.permutation(live):
            edges = [(br.from_bus, br.to_bus) for j, br in enumerate(branches)
                     if br.status and j != idx]
            if is_connected(case.n_bus, edges):
                branches[idx] = dataclasses.replace(branches[idx], status=False)
                break
        else:
            break  # every remaining branch is a bridge
    return case.replace(branches=tuple(branches))


def _losses(case: NetworkCase, voltages) -> tuple[float, float]:
    """(total generation, total losses) implied by a solved case."""
    from .powerflow import to_complex
    from .grid import build_ybus

    v = to_complex(voltages)
    s_inj = v * np.conj(build_ybus(case) @ v)
    load = case.load_injection().real.sum()
    gen = s_inj.real.sum() + load
    return float(gen), float(gen - load)


def random_pre_case(base: NetworkCase, rng_seed, knobs: PreCaseKnobs | None = None,
                    base_solution=None, opts: PfOptions | None = None):
    """Draw a feasible variant of ``base`` and its converged solution.

    Returns ``(case, voltages)``; raises GenerationError after
    ``knobs.max_retries`` non-convergent draws.
    """
    knobs = knobs or PreCaseKnobs()
    opts = opts or PfOptions()
    rng = np.random.default_rng(rng_seed)
    if base_solution is None:
        res = solve_powerflow(base, None, opts)
        if not res.converged:
            raise GenerationError("base case does not solve")
        base_solution = res.voltages
    base_gen, losses = _losses(base, base_solution)
    base_load = base_gen - losses
    slack = base.slack

    for _attempt in range(knobs.max_retries):
        k = int(rng.choice(knobs.outage_counts))
        case = _remove_branches(base, k, rng)
        lo, hi = knobs.load_range
        factors = rng.uniform(lo, hi, size=len(case.loads)) if hi > lo else np.full(len(case.loads), lo)
        if np.all(factors == 1.0):
            loads = case.loads
        else:
            loads = tuple(dataclasses.replace(ld, p=ld.p * f, q=ld.q * f)
                          for ld, f in zip(case.loads, factors))
        new_load = sum(ld.p for ld in loads)
        alpha = (new_load + losses) / (base_load + losses)
        gens = tuple(
            dataclasses.replace(g, p_set=float(min(max(g.p_set * alpha, 0.0), max(g.p_max, g.p_set))))
            if g.status and g.bus != slack and alpha != 1.0 else g
            for g in case.generators
        )
        case = case.replace(loads=loads, generators=gens)
        res = solve_powerflow(case, base_solution, opts)
        if res.converged:
            return case, res.voltages
    raise GenerationError(f"no convergent pre-contingency case after {knobs.max_retries} draws")


# --------------------------------------------------------------------------
# step 2: MadIoT contingency


def load_buses(case: NetworkCase) -> list[int]:
    return sorted({ld.bus for ld in case.loads if ld.p != 0.0 or ld.q != 0.0})


def sample_madiot(case: NetworkCase, frac: float, scale: float, rng_seed) -> Contingency:
    if not 0.0 < frac <= 1.0:
        raise ValueError(f"frac must be in (0, 1], got {frac}")
    buses = load_buses(case)
    if not buses:
        raise ValueError("case has no loads")
    rng = np.random.default_rng(rng_seed)
    n_pick = math.ceil(frac * len(buses))
    picked = rng.choice(len(buses), size=n_pick, replace=False)
    return Contingency(kind=MADIOT, locations=tuple(sorted(buses[i] for i in picked)),
                       parameter=float(scale))


@dataclass(frozen=True)
class ContingencyEffect:
    case: NetworkCase
    delta_p_load: np.ndarray
    delta_q_load: np.ndarray
    delta_p_gen: np.ndarray
    capacity_shortfall: bool


def contingency_effect(case: NetworkCase, contingency: Contingency, droop: bool = True) -> ContingencyEffect:
    """Scale the attacked loads and re-dispatch generation by droop."""
    where = set(contingency.locations)
    dp = np.zeros(case.n_bus)
    dq = np.zeros(case.n_bus)
    loads = []
    for ld in case.loads:
        if ld.bus in where and contingency.parameter != 1.0:
            new = dataclasses.replace(ld, p=ld.p * contingency.parameter, q=ld.q * contingency.parameter)
            dp[ld.bus] += new.p - ld.p
            dq[ld.bus] += new.q - ld.q
            loads.append(new)
        else:
            loads.append(ld)
    post = case.replace(loads=tuple(loads)) if dp.any() or dq.any() else case
    dgen = np.zeros(case.n_bus)
    shortfall = False
    if droop:
        res = droop_dispatch(post, float(dp.sum()))
        post, dgen, shortfall = res.case, res.bus_deltas, res.capacity_shortfall
    return ContingencyEffect(case=post, delta_p_load=dp, delta_q_load=dq, delta_p_gen=dgen,
                             capacity_shortfall=shortfall)


def apply_contingency(case: NetworkCase, contingency: Contingency, droop: bool = True) -> NetworkCase:
    return contingency_effect(case, contingency, droop).case


# --------------------------------------------------------------------------
# step 3: labelled samples and datasets


def make_sample(base: NetworkCase, index: int, seed: int, pre_knobs: PreCaseKnobs,
                knobs: ContingencyKnobs, base_solution=None) -> Sample:
    """Build sample ``index``; retries on fresh sub-streams if the label solve fails."""
    opts = PfOptions(tol=knobs.tol)
    label_opts = PfOptions(tol=knobs.tol, max_iter=knobs.label_max_iter)
    for attempt in range(pre_knobs.max_retries):
        ss = np.random.SeedSequence([seed, index, attempt])
        pre_seed, cont_seed = ss.spawn(2)
        pre_case, pre_v = random_pre_case(base, pre_seed, pre_knobs, base_solution, opts)
        cont = sample_madiot(pre_case, knobs.frac, knobs.scale, cont_seed)
        eff = contingency_effect(pre_case, cont, knobs.droop)
        res = solve_powerflow(eff.case, pre_v, label_opts)
        if res.converged:
            return Sample(pre_case=pre_case, pre_voltages=pre_v, contingency=cont,
                          post_voltages=res.voltages, droop_deltas=eff.delta_p_gen, sample_id=index)
        log.info("sample %d attempt %d: post-contingency solve failed, resampling", index, attempt)
    raise GenerationError(f"sample {index}: no solvable contingency after {pre_knobs.max_retries} attempts")


def _make_sample_safe(args):
    try:
        return make_sample(*args)
    except GenerationError as exc:
        return exc


def generate_samples(base: NetworkCase, n_samples: int, knobs: ContingencyKnobs | None = None,
                     seed: int = 0, pre_knobs: PreCaseKnobs | None = None, jobs: int = 1) -> list[Sample]:
    knobs = knobs or ContingencyKnobs()
    pre_knobs = pre_knobs or PreCaseKnobs()
    base_res = solve_powerflow(base, None, PfOptions(tol=knobs.tol))
    if not base_res.converged:
        raise GenerationError("base case does not solve from flat start")
    base_v = base_res.voltages

    samples: list[Sample] = []
    failures = 0
    next_index = 0
    # failed indices are skipped and replaced by fresh ones; ids stay contiguous
    while len(samples) < n_samples:
        need = n_samples - len(samples)
        idx = list(range(next_index, next_index + need))
        next_index += need
        args = [(base, i, seed, pre_knobs, knobs, base_v) for i in idx]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_make_sample_safe, args, chunksize=4))
        else:
            results = [_make_sample_safe(a) for a in args]
        for i, res in zip(idx, results):
            if isinstance(res, Exception):
                failures += 1
                log.warning("sample stream %d failed: %s", i, res)
            else:
                samples.append(res)
        if failures > 0.5 * next_index:
            raise GenerationError(f"failure rate too high: {failures} of {next_index} sample streams failed")
    for new_id, s in enumerate(samples):
        s.sample_id = new_id
    return samples


def split_indices(n: int, seed: int) -> dict[str, list[int]]:
    """Seeded shuffle followed by contiguous 8:1:1 train/val/test blocks."""
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5711])).permutation(n)
    n_val = n // 10
    n_test = n // 10
    n_train = n - n_val - n_test
    return {
        "train": sorted(int(i) for i in perm[:n_train]),
        "val": sorted(int(i) for i in perm[n_train:n_train + n_val]),
        "test": sorted(int(i) for i in perm[n_train + n_val:]),
    }


def atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def manifest_path(dataset_path: str) -> str:
    return dataset_path + ".manifest.json"


def write_dataset(samples: list[Sample], path: str, seed: int, meta: dict | None = None) -> dict:
    lines = [json.dumps(s.to_dict()) for s in samples]
    atomic_write(path, "\n".join(lines) + "\n")
    manifest = {"n_samples": len(samples), "seed": seed, "split": split_indices(len(samples), seed)}
    if meta:
        manifest["meta"] = meta
    atomic_write(manifest_path(path), json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def generate_dataset(base: NetworkCase, n_samples: int, knobs: ContingencyKnobs | None = None,
                     seed: int = 0, out: str = "dataset.jsonl",
                     pre_knobs: PreCaseKnobs | None = None, jobs: int = 1) -> str:
    knobs = knobs or ContingencyKnobs()
    pre_knobs = pre_knobs or PreCaseKnobs()
    samples = generate_samples(base, n_samples, knobs, seed, pre_knobs, jobs)
    meta = {"contingency_knobs": dataclasses.asdict(knobs), "pre_case_knobs": dataclasses.asdict(pre_knobs)}
    write_dataset(samples, out, seed, meta)
    return out


def read_dataset(path: str) -> tuple[list[Sample], dict | None]:
    with open(path) as fh:
        samples = [Sample.from_dict(json.loads(line)) for line in fh if line.strip()]
    manifest = None
    if os.path.exists(manifest_path(path)):
        with open(manifest_path(path)) as fh:
            manifest = json.load(fh)
    return samples, manifest
