"""Command-line experiment runner.

Subcommands::

    qlsd gen-data  --preset toy-gaussian --out data.qlsd
    qlsd run       --preset smoke --out-dir runs/smoke
    qlsd bounds    --preset toy-gaussian --algorithm qlsd-star
    qlsd compare   runs/a runs/b --out table.csv

An experiment is a JSON object with ``model``, ``sampler`` and
``diagnostics`` sections.  A preset supplies the starting point, a
``--config`` file is merged over it, and explicit flags win last.

Exit codes: 0 success, 2 configuration error, 3 domain error (invalid
constants or step size), 4 divergence, 5 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import ConfigError, ContractError, DivergenceError, DomainError, OptimizationError, QLSDError, RandomStream
from .diagnostics import bound_for, bound_inputs_for, hpd_eta, norm_mean_gaussian
from .models import GaussianModel, dataset_hash, load_dataset, make_gaussian_dataset, make_synthetic_logistic, save_dataset
from .sampler import SamplerConfig, canonical_algorithm, config_hash, run_chain, write_trace_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DOMAIN = 3
EXIT_DIVERGENCE = 4
EXIT_IO = 5

_TOY_MODEL = {"kind": "gaussian", "b": 20, "d": 50, "N_min": 10, "N_max": 200, "tau": 1.0, "seed": 0}
_SYN_MODEL = {
    "kind": "logistic", "alpha": 1.0, "beta": 1.0, "b": 50, "d": 2, "size": 100,
    "prior_variance": 1.0, "seed": 0,
}

PRESETS = {
    "toy-gaussian": {
        "model": _TOY_MODEL,
        "sampler": {"algorithm": "qlsd-star", "gamma": 4.9e-4, "K": 500_000, "burn_in": 450_000,
                    "compressor": "2^16", "batch_sizes": None},
        "diagnostics": {"mse": True},
    },
    "synthetic-logistic": {
        "model": _SYN_MODEL,
        "sampler": {"algorithm": "qlsd-pp", "gamma": 1e-5, "K": 100_000, "burn_in": 0, "l": 100,
                    "alpha": None, "compressor": 2, "batch_sizes": None},
        "diagnostics": {"hpd_alpha": 0.01},
    },
    "smoke": {
        "model": _TOY_MODEL,
        "sampler": {"algorithm": "qlsd-star", "gamma": 4.9e-4, "K": 1000, "burn_in": 500,
                    "compressor": "2^8", "batch_sizes": None},
        "diagnostics": {"mse": True},
    },
}

_SAMPLER_FIELDS = {f.name for f in dataclasses.fields(SamplerConfig)}
_MODEL_KEYS = {
    "gaussian": {"kind", "b", "d", "N_min", "N_max", "tau", "seed"},
    "logistic": {"kind", "alpha", "beta", "b", "d", "size", "sizes", "prior_variance", "seed"},
}


# ----------------------------------------------------------------------------
# config assembly


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def _read_json(path) -> dict:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _list_or_scalar(text, cast):
    if text is None:
        return None
    parts = [t for t in str(text).split(",") if t.strip()]
    try:
        vals = [cast(t.strip()) for t in parts]
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r}") from exc
    return vals[0] if len(vals) == 1 else vals


def _batch_arg(text):
    if text is None:
        return None
    t = str(text).strip().lower()
    if t in ("full", "tenth"):
        return t
    return _list_or_scalar(t, int)


def _experiment(args, need_sampler: bool = True) -> dict:
    name = getattr(args, "preset", None) or "toy-gaussian"
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    exp = copy.deepcopy(PRESETS[name])
    exp["preset"] = name
    if getattr(args, "config", None):
        exp = _merge(exp, _read_json(args.config))

    model = exp.setdefault("model", {})
    if getattr(args, "dataset", None):
        model.clear()
        model["dataset"] = str(args.dataset)
    for flag, key in (("b", "b"), ("d", "d"), ("n_min", "N_min"), ("n_max", "N_max"), ("tau", "tau"),
                      ("data_seed", "seed"), ("syn_alpha", "alpha"), ("syn_beta", "beta"),
                      ("size", "size"), ("prior_variance", "prior_variance")):
        val = getattr(args, flag, None)
        if val is not None:
            if "dataset" in model:
                raise ConfigError(f"--{flag.replace('_', '-')} cannot modify a stored dataset")
            model[key] = val

    if need_sampler:
        samp = exp.setdefault("sampler", {})
        simple = {
            "algorithm": getattr(args, "algorithm", None),
            "gamma": getattr(args, "gamma", None),
            "K": getattr(args, "K", None),
            "burn_in": getattr(args, "burn_in", None),
            "thinning": getattr(args, "thinning", None),
            "alpha": getattr(args, "alpha", None),
            "l": getattr(args, "l", None),
            "seed": getattr(args, "seed", None),
            "aggregation": getattr(args, "aggregation", None),
            "anchor": getattr(args, "anchor", None),
            "oracle": getattr(args, "oracle", None),
        }
        for key, val in simple.items():
            if val is not None:
                samp[key] = val
        if getattr(args, "p", None) is not None:
            samp["p"] = _list_or_scalar(args.p, float)
        if getattr(args, "compressor", None) is not None:
            samp["compressor"] = _list_or_scalar(args.compressor, str)
        bs = _batch_arg(getattr(args, "batch_size", None))
        if bs is not None:
            samp["batch_sizes"] = None if bs == "tenth" else bs
        unknown = set(samp) - _SAMPLER_FIELDS
        if unknown:
            raise ConfigError(f"unknown sampler fields: {', '.join(sorted(unknown))}")
        for key in ("algorithm", "gamma", "K"):
            if key not in samp:
                raise ConfigError(f"sampler.{key} is required")
        samp["algorithm"] = canonical_algorithm(samp["algorithm"])
    diag = exp.setdefault("diagnostics", {})
    if getattr(args, "hpd_alpha", None) is not None:
        diag["hpd_alpha"] = args.hpd_alpha
    return exp


def build_model(spec: dict):
    """Model plus its dataset header (stored file) or generator spec."""
    if "dataset" in spec:
        model, header = load_dataset(spec["dataset"])
        return model, header
    kind = spec.get("kind")
    if kind not in _MODEL_KEYS:
        raise ConfigError(f"model.kind must be 'gaussian' or 'logistic', got {kind!r}")
    extra = set(spec) - _MODEL_KEYS[kind]
    if extra:
        raise ConfigError(f"unknown {kind} model fields: {', '.join(sorted(extra))}")
    stream = RandomStream(int(spec.get("seed", 0)))
    if kind == "gaussian":
        model = make_gaussian_dataset(int(spec["b"]), int(spec["d"]), int(spec["N_min"]), int(spec["N_max"]),
                                      float(spec.get("tau", 1.0)), stream)
    else:
        sizes = spec.get("sizes", spec.get("size", 100))
        model = make_synthetic_logistic(float(spec["alpha"]), float(spec["beta"]), int(spec["b"]), int(spec["d"]),
                                        sizes, stream, float(spec.get("prior_variance", 1.0)))
    return model, dict(spec)


def sampler_config(samp: dict, **overrides) -> SamplerConfig:
    fields = dict(samp)
    fields.update(overrides)
    for key in ("p", "compressor", "batch_sizes", "theta0", "snapshots"):
        if isinstance(fields.get(key), list):
            fields[key] = tuple(fields[key])
    try:
        return SamplerConfig(**fields)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _hash_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2, default=str) + "\n")


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    exp = _experiment(args, need_sampler=False)
    spec = exp["model"]
    if "dataset" in spec:
        raise ConfigError("gen-data needs generator parameters, not a dataset path")
    model, _ = build_model(spec)
    out = Path(args.out)
    digest = save_dataset(model, out, seed=int(spec.get("seed", 0)), meta={"generator": spec})
    manifest = {
        "command": "gen-data",
        "artifact_version": __version__,
        "preset": exp.get("preset"),
        "model": spec,
        "seed": int(spec.get("seed", 0)),
        "dataset_hash": digest,
        "config_hash": _hash_obj(spec),
        "b": model.b,
        "d": model.d,
        "sizes": model.sizes.tolist(),
    }
    _write_json(str(out) + ".manifest.json", manifest)
    print(digest)
    return EXIT_OK


def cmd_run(args) -> int:
    exp = _experiment(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, header = build_model(exp["model"])
    if "dataset" in exp["model"]:
        data_path = Path(exp["model"]["dataset"])
    else:
        data_path = out_dir / "dataset.qlsd"
        save_dataset(model, data_path, seed=int(exp["model"].get("seed", 0)), meta={"generator": exp["model"]})
    digest = dataset_hash(data_path)

    diag = exp.get("diagnostics", {})
    hpd_alpha = diag.get("hpd_alpha")
    keep = bool(args.components) or hpd_alpha is not None
    cfg = sampler_config(exp["sampler"], keep_samples=keep, replicas=1)
    trace = run_chain(cfg, model)

    write_trace_csv(trace, out_dir / "trace.csv", components=bool(args.components))
    bits = trace.bits[:, 0]
    with open(out_dir / "bits.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "bits_uplink", "cumulative_bits"])
        for k, (bk, ck) in enumerate(zip(bits.tolist(), np.cumsum(bits).tolist()), start=1):
            w.writerow([k, bk, ck])

    norms = trace.sample_norms[:, 0]
    summary = {
        "n_samples": int(trace.n_samples),
        "bits_total": int(bits.sum()),
        "mean_norm": float(norms.mean()),
        "final_theta_norm": float(np.linalg.norm(trace.final_state.theta[0])),
    }
    if isinstance(model, GaussianModel) and diag.get("mse", True):
        ref = norm_mean_gaussian(model.posterior_mean, model.posterior_variance)
        summary["norm_reference"] = ref
        summary["mse"] = float((norms.mean() - ref) ** 2)
    if hpd_alpha is not None:
        res = hpd_eta(trace.replica(0), model, float(hpd_alpha))
        summary["hpd"] = dataclasses.asdict(res)

    manifest = {
        "command": "run",
        "artifact_version": __version__,
        "experiment": exp,
        "sampler_config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "experiment_hash": _hash_obj(exp),
        "dataset_path": str(data_path),
        "dataset_hash": digest,
        "seed": int(cfg.seed),
        "summary": summary,
        "files": {"trace": "trace.csv", "bits": "bits.csv"},
    }
    _write_json(out_dir / "manifest.json", manifest)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_bounds(args) -> int:
    exp = _experiment(args)
    model, _ = build_model(exp["model"])
    samp = exp["sampler"]
    alg = samp["algorithm"]
    l_val = int(samp.get("l", 100)) if alg in ("qlsd-pp", "lsd-pp") else 1
    inputs = bound_inputs_for(model, alg, p=samp.get("p", 1.0), compressor=samp.get("compressor"),
                              batch_sizes=samp.get("batch_sizes"), l=l_val, alpha=samp.get("alpha"))
    report = bound_for(alg, inputs)
    if args.gamma is not None and args.gamma > report.gamma_max:
        raise DomainError(f"step size {args.gamma} exceeds the admissible threshold gamma_max = {report.gamma_max:.6g}")
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def _load_run(path: Path):
    man = _read_json(path / "manifest.json")
    if man.get("command") != "run":
        raise ConfigError(f"{path}: not a run directory")
    norms = {}
    with open(path / "trace.csv", newline="") as fh:
        rows = csv.DictReader(fh)
        if "theta_norm" not in (rows.fieldnames or []):
            raise ConfigError(f"{path}: trace lacks a theta_norm column (rerun without --components)")
        for row in rows:
            if row["theta_norm"]:
                norms[int(row["k"])] = float(row["theta_norm"])
    bits = np.loadtxt(path / "bits.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    return man, norms, bits[:, 2]


def cmd_compare(args) -> int:
    if len(args.runs) < 2:
        raise ConfigError("compare needs at least two run directories")
    runs = [_load_run(Path(r)) for r in args.runs]
    hashes = {man["dataset_hash"] for man, _, _ in runs}
    if len(hashes) != 1:
        raise ConfigError("runs were made on different datasets")
    if args.reference is not None:
        ref = float(args.reference)
    else:
        man = runs[0][0]
        model, _ = load_dataset(man["dataset_path"])
        if not isinstance(model, GaussianModel):
            raise ConfigError("pass --reference for non-Gaussian models")
        ref = norm_mean_gaussian(model.posterior_mean, model.posterior_variance)
    K = max(len(cum) for _, _, cum in runs)
    n_points = max(1, min(int(args.checkpoints), K))
    checkpoints = np.unique(np.linspace(K / n_points, K, n_points).round().astype(np.int64))

    labels = []
    for idx, (man, _, _) in enumerate(runs):
        base = f"{man['sampler_config']['algorithm']}[{man['sampler_config']['compressor']}]"
        labels.append(base if base not in labels else f"{base}#{idx}")
    head = ["k"]
    for lab in labels:
        head += [f"cum_bits:{lab}", f"mse:{lab}"]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(head)
        for k in checkpoints.tolist():
            row = [k]
            for man, norms, cum in runs:
                if k > len(cum):
                    row += ["", ""]
                    continue
                vals = [v for kk, v in norms.items() if kk <= k]
                mse = "" if not vals else repr((math.fsum(vals) / len(vals) - ref) ** 2)
                row += [int(cum[k - 1]), mse]
            w.writerow(row)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--config", help="JSON experiment file merged over the preset")
    p.add_argument("--dataset", help="stored dataset file instead of a generator")
    p.add_argument("--b", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--n-min", dest="n_min", type=int)
    p.add_argument("--n-max", dest="n_max", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--data-seed", dest="data_seed", type=int)
    p.add_argument("--syn-alpha", dest="syn_alpha", type=float)
    p.add_argument("--syn-beta", dest="syn_beta", type=float)
    p.add_argument("--size", type=int)
    p.add_argument("--prior-variance", dest="prior_variance", type=float)


def _sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--algorithm")
    p.add_argument("--compressor", help="identity, s, 2^p, or a comma list per client")
    p.add_argument("--gamma", type=float)
    p.add_argument("--K", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--thinning", type=int)
    p.add_argument("--p", help="participation probability (or comma list)")
    p.add_argument("--alpha", type=float, help="memory step size")
    p.add_argument("--l", type=int, help="control-variate refresh period")
    p.add_argument("--seed", type=int)
    p.add_argument("--aggregation", choices=("analytic", "algorithmic"))
    p.add_argument("--anchor", choices=("refresh", "theta_star"))
    p.add_argument("--oracle", choices=("full", "minibatch", "star", "svrg"))
    p.add_argument("--batch-size", dest="batch_size", help="'tenth', 'full', n or a comma list")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qlsd", description="Federated quantised Langevin sampler")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate and store a dataset")
    _model_flags(g)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="run a chain and write trace, bit ledger and manifest")
    _model_flags(r)
    _sampler_flags(r)
    r.add_argument("--components", action="store_true", help="write theta components instead of the norm")
    r.add_argument("--hpd-alpha", dest="hpd_alpha", type=float)
    r.add_argument("--out-dir", dest="out_dir", required=True)
    r.set_defaults(func=cmd_run)

    bd = sub.add_parser("bounds", help="evaluate the convergence-bound constants")
    _model_flags(bd)
    _sampler_flags(bd)
    bd.add_argument("--out")
    bd.set_defaults(func=cmd_bounds)

    c = sub.add_parser("compare", help="tabulate cumulative bits against MSE for several runs")
    c.add_argument("runs", nargs="+")
    c.add_argument("--reference", type=float, help="reference value of E|theta| (Gaussian: computed)")
    c.add_argument("--checkpoints", type=int, default=100)
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: divergence at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DomainError, OptimizationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except QLSDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
