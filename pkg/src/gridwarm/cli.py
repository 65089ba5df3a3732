"""``gridwarm`` command line: generate, train, evaluate, powerflow, interpret."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import secrets
import sys

import numpy as np

from . import cgrf, contingency, grid, powerflow, training
from .contingency import atomic_write

log = logging.getLogger("gridwarm")

SECTIONS = {
    "powerflow": powerflow.PfOptions,
    "generate": contingency.ContingencyKnobs,
    "pre_case": contingency.PreCaseKnobs,
    "train": training.TrainConfig,
}


class ConfigError(ValueError):
    pass


def resolve_config(file_cfg: dict | None, overrides: dict[str, dict]) -> dict[str, dict]:
    """Merge config-file sections with flag overrides (flags win); unknown keys are errors."""
    file_cfg = dict(file_cfg or {})
    unknown = set(file_cfg) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    out = {}
    for name, cls in SECTIONS.items():
        fields = {f.name for f in dataclasses.fields(cls)}
        section = dict(file_cfg.get(name, {}))
        bad = set(section) - fields
        if bad:
            raise ConfigError(f"unknown key(s) in section {name}: {', '.join(sorted(bad))}")
        section.update({k: v for k, v in overrides.get(name, {}).items() if v is not None})
        defaults = dataclasses.asdict(cls())
        defaults.update(section)
        out[name] = defaults
    return out


def build(section: str, resolved: dict):
    values = dict(resolved[section])
    cls = SECTIONS[section]
    for f in dataclasses.fields(cls):
        if isinstance(values.get(f.name), list):
            values[f.name] = tuple(values[f.name])
    return cls(**values)


def _load_config(path: str | None) -> dict | None:
    if not path:
        return None
    with open(path) as fh:
        return json.load(fh)


def _seed(args) -> int:
    if args.seed is None:
        args.seed = secrets.randbelow(2**31)
        log.info("no --seed given, using %d", args.seed)
    return args.seed


def _log_config(resolved: dict, extra: dict | None = None) -> None:
    payload = dict(resolved)
    if extra:
        payload["run"] = extra
    log.info("resolved config: %s", json.dumps(payload, sort_keys=True, default=str))


def _write_json(path: str, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=1, sort_keys=True, default=float))


# --------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    seed = _seed(args)
    resolved = resolve_config(_load_config(args.config), {
        "generate": {"frac": args.frac, "scale": args.scale},
        "pre_case": {"max_retries": args.max_retries},
    })
    _log_config(resolved, {"seed": seed, "n": args.n, "case": args.case})
    base = grid.load_case(args.case)
    knobs, pre = build("generate", resolved), build("pre_case", resolved)
    contingency.generate_dataset(base, args.n, knobs, seed=seed, out=args.out, pre_knobs=pre, jobs=args.jobs)
    print(f"wrote {args.n} samples to {args.out} (seed {seed})")
    return 0


def cmd_train(args) -> int:
    resolved = resolve_config(_load_config(args.config), {
        "train": {"epochs": args.epochs, "batch_size": args.batch_size, "seed": args.seed, "lr": args.lr},
    })
    _log_config(resolved, {"variant": args.variant, "data": args.data})
    samples, manifest = contingency.read_dataset(args.data)
    if manifest is None:
        raise FileNotFoundError(f"no split manifest next to {args.data}")
    cfg = build("train", resolved)
    model, report = training.train(samples, manifest["split"], cfg, variant=args.variant)
    cgrf.save_model(model, args.out)
    if args.report:
        _write_json(args.report, report.to_dict())
    print(f"best epoch {report.best_epoch}, val loss {min(report.val_loss):.6g}, "
          f"test loss {report.test_loss if report.test_loss is not None else float('nan'):.6g}")
    return 0


def cmd_evaluate(args) -> int:
    resolved = resolve_config(_load_config(args.config), {"powerflow": {"tol": args.tol, "max_iter": args.max_iter}})
    _log_config(resolved, {"data": args.data, "model": args.model, "split": args.split})
    samples, manifest = contingency.read_dataset(args.data)
    if args.split != "all":
        if manifest is None:
            raise FileNotFoundError(f"no split manifest next to {args.data}")
        samples = [samples[i] for i in manifest["split"][args.split]]
    model = cgrf.load_model(args.model)
    rows, summary = training.evaluate(model, samples, build("powerflow", resolved), jobs=args.jobs)
    atomic_write(args.report, training.metrics_csv(rows, summary))
    _write_json(os.path.splitext(args.report)[0] + ".summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _read_profile(path: str, n: int) -> np.ndarray:
    with open(path) as fh:
        d = json.load(fh)
    prof = np.array(d["voltages"] if isinstance(d, dict) else d, dtype=float)
    if prof.shape != (n, 2):
        raise ValueError(f"{path}: expected {n} (real, imag) pairs")
    return prof


def cmd_powerflow(args) -> int:
    resolved = resolve_config(_load_config(args.config), {"powerflow": {"tol": args.tol, "max_iter": args.max_iter}})
    _log_config(resolved, {"case": args.case, "init": args.init})
    case = grid.load_case(args.case)
    opts = build("powerflow", resolved)
    if args.init == "flat":
        init = powerflow.flat_start(case)
    elif args.init == "vpre":
        if not args.pre_case:
            raise ValueError("--init vpre needs --pre-case")
        pre = grid.load_case(args.pre_case)
        res = powerflow.solve_powerflow(pre, None, opts)
        if not res.converged:
            raise RuntimeError("pre-contingency case did not converge")
        init = powerflow.vpre_start(res.voltages)
    elif args.init.startswith("file:"):
        init = _read_profile(args.init[5:], case.n_bus)
    else:
        raise ValueError(f"unknown --init {args.init!r}")
    res = powerflow.solve_powerflow(case, init, opts)
    print(f"iterations {res.iterations} converged {str(res.converged).lower()} "
          f"max_mismatch {res.max_mismatch:.3e}")
    if args.out:
        _write_json(args.out, {"voltages": res.voltages.tolist(), "iterations": res.iterations,
                               "converged": res.converged, "max_mismatch": res.max_mismatch})
    return 0 if res.converged else 1


def interpret(model: cgrf.ModelParams, sample: contingency.Sample) -> dict:
    """Compare the learned (lam, eta) with Ybus and the injection currents of the solved post case."""
    feats = training.sample_features(sample)
    system = cgrf.forward(model, feats)
    post = sample.post_case()
    ybus = grid.build_ybus(post).tocoo()
    n = post.n_bus
    v = powerflow.to_complex(sample.post_voltages)
    j_inj = grid.build_ybus(post) @ v

    lam = system.lam.tocsr()
    # structural pattern, so explicit zeros from the networks still count
    lam_pattern = {(i, i) for i in range(n)} | {(s, t) for s, t in system.edges} | {(t, s) for s, t in system.edges}
    y_pattern = {(int(i), int(j)) for i, j in zip(ybus.row, ybus.col)} | {(i, i) for i in range(n)}
    dense = lam.toarray()
    pairs = []
    ydict = {}
    for i, j, val in zip(ybus.row, ybus.col, ybus.data):
        ydict[(int(i), int(j))] = ydict.get((int(i), int(j)), 0) + val
    for (i, j), val in sorted(ydict.items()):
        blk = dense[2 * i:2 * i + 2, 2 * j:2 * j + 2]
        pairs.append((i, j, float(np.linalg.norm(blk)), float(abs(val))))
    eta = system.eta.reshape(n, 2)
    eta_rows = [(i, float(np.linalg.norm(eta[i])), float(abs(j_inj[i]))) for i in range(n)]

    def corr(a, b):
        a, b = np.asarray(a), np.asarray(b)
        if a.std() == 0 or b.std() == 0:
            return float("nan")
        return float(np.corrcoef(a, b)[0, 1])

    return {
        "pattern_equal": lam_pattern == y_pattern,
        "corr_lambda_ybus": corr([p[2] for p in pairs], [p[3] for p in pairs]),
        "corr_eta_j": corr([r[1] for r in eta_rows], [r[2] for r in eta_rows]),
        "lambda_pairs": pairs,
        "eta_pairs": eta_rows,
        "lambda_dense": dense,
        "ybus_abs": np.abs(grid.build_ybus(post).toarray()),
    }


def cmd_interpret(args) -> int:
    samples, _ = contingency.read_dataset(args.data)
    by_id = {s.sample_id: s for s in samples}
    if args.sample_id not in by_id:
        raise KeyError(f"sample {args.sample_id} not in {args.data}")
    model = cgrf.load_model(args.model)
    res = interpret(model, by_id[args.sample_id])
    os.makedirs(args.out_dir, exist_ok=True)
    lines = ["from_bus,to_bus,lambda_block_norm,ybus_abs"] + [f"{i},{j},{a!r},{b!r}" for i, j, a, b in res["lambda_pairs"]]
    atomic_write(os.path.join(args.out_dir, "lambda_vs_ybus.csv"), "\n".join(lines) + "\n")
    lines = ["bus,eta_norm,j_abs"] + [f"{i},{a!r},{b!r}" for i, a, b in res["eta_pairs"]]
    atomic_write(os.path.join(args.out_dir, "eta_vs_j.csv"), "\n".join(lines) + "\n")
    summary = {k: res[k] for k in ("pattern_equal", "corr_lambda_ybus", "corr_eta_j")}
    summary["sample_id"] = args.sample_id
    _write_json(os.path.join(args.out_dir, "interpret.json"), summary)
    if args.dump_matrices:
        for name in ("lambda_dense", "ybus_abs"):
            buf = "\n".join(",".join(repr(float(x)) for x in row) for row in res[name])
            atomic_write(os.path.join(args.out_dir, f"{name}.csv"), buf + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


# --------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridwarm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesise a MadIoT contingency dataset")
    g.add_argument("--case", required=True, help="MATPOWER .m, JSON case, or bundled name (case14, case118)")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--frac", type=float)
    g.add_argument("--scale", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--max-retries", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--config")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit a warm-start model")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--variant", choices=sorted(cgrf.VARIANTS), default="cgrf-ps")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--report", help="optional JSON training report")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="compare Newton iterations from flat, pre-contingency and model starts")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    e.add_argument("--tol", type=float)
    e.add_argument("--max-iter", type=int)
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--config")
    e.set_defaults(func=cmd_evaluate)

    f = sub.add_parser("powerflow", help="solve one case")
    f.add_argument("--case", required=True)
    f.add_argument("--init", default="flat", help="flat | vpre | file:<path>")
    f.add_argument("--pre-case", help="case whose solution seeds --init vpre")
    f.add_argument("--tol", type=float)
    f.add_argument("--max-iter", type=int)
    f.add_argument("--out")
    f.add_argument("--config")
    f.set_defaults(func=cmd_powerflow)

    i = sub.add_parser("interpret", help="dump lam/eta against Ybus and injection currents")
    i.add_argument("--model", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--sample-id", type=int, default=0)
    i.add_argument("--out-dir", required=True)
    i.add_argument("--dump-matrices", action="store_true")
    i.set_defaults(func=cmd_interpret)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("GRIDWARM_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        # bad flags or paths count as usage errors
        _report(exc)
        return 2
    except (KeyError, ValueError, RuntimeError, OSError) as exc:
        _report(exc)
        return 1


def _report(exc: BaseException) -> None:
    msg = str(exc).splitlines()[0] if str(exc) else ""
    print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
