"""Command-line front end.

Every subcommand reads one JSON document (``--config``) merged over built-in
defaults; unknown keys are rejected, ``--set a.b=value`` overrides dotted
paths, and ``--seed`` / ``--out`` override ``seed`` / ``out_dir``. Exit codes:
0 success, 2 input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .boltzmann import STATUS_CONSTANT, solve_beta
from .ensemble import build_ensemble, finite_k_convergence
from .envs import BRIDGE_LAYOUT, gridworld
from .exceptions import ConfigError, ConvergenceError, DomainError, NumericalFailure
from .kl_dual import DualConfig, ValueSamples, solve_eta
from .mdp import TabularMdp
from .rapo import (
    SoftmaxPolicy,
    TrainConfig,
    collect_rollout,
    make_rng,
    rapo_train,
    robustness_sweep,
    value_heatmap,
)
from .robust_mdp import extract_worst_case_kernel, robust_value_iteration, value_drop_check

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
SCALES = [round(x, 10) for x in np.linspace(0.5, 1.5, 11).tolist()]


def data_path(name: str):
    return resources.files("rapo") / "data" / name


def _train_defaults() -> dict:
    train = TrainConfig().to_dict()
    train.pop("seed")
    return {
        "seed": 0,
        "out_dir": "runs/train",
        "env": {"layout": list(BRIDGE_LAYOUT), "slip": 0.1},
        "scales": SCALES,
        "train": train,
        "ablate": [],
        "sweep_scales": SCALES,
        "snapshot_every": 50,
    }


DEFAULTS = {
    "dual-solve": {"values": None, "probs": None, "epsilon": 0.0, "eta_min": 1e-8,
                   "eta_max": 1e3, "tol": 1e-10},
    "reweight": {"scores": None, "prior": None, "kappa": 0.0, "beta_max": 1e3, "tol": 1e-10},
    "solve-mdp": {"mdp": None, "epsilon": 0.0, "out_dir": "runs/solve-mdp", "tol": 1e-10},
    "train": _train_defaults(),
    "sweep": {"checkpoint": None, "scales": SCALES, "out_dir": "runs/sweep"},
    "heatmap": {"checkpoint": None, "scales": SCALES, "probe_size": 256, "seed": 0,
                "out_dir": "runs/heatmap"},
    "converge-k": {"seed": 0, "kappa": 0.5, "k_grid": [16, 64, 256, 1024], "trials": 200,
                   "k_ref": 1_000_000, "distribution": "uniform", "out_dir": "runs/converge-k"},
}
STOCHASTIC = {"train", "heatmap", "converge-k"}


# --------------------------------------------------------------------------
# config documents


def _check_keys(doc: dict, template: dict, path: tuple = ()):
    for key, value in doc.items():
        where = ".".join(path + (key,))
        if key not in template:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(template[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where} must be an object")
            _check_keys(value, template[key], path + (key,))


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key.path=value")
    path, raw = assignment.split("=", 1)
    keys = path.split(".")
    node = doc
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            raise ConfigError(f"unknown config key: {path}")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key: {path}")
    node[keys[-1]] = _parse_scalar(raw)


def load_config(command: str, config_path=None, overrides=(), seed=None, out=None) -> dict:
    template = DEFAULTS[command]
    doc = copy.deepcopy(template)
    if config_path is not None:
        try:
            user = json.loads(Path(config_path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: not valid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise ConfigError("config document must be a JSON object")
        _check_keys(user, template)
        doc = _merge(doc, user)
    for item in overrides:
        apply_override(doc, item)
    if seed is not None:
        if "seed" not in doc:
            raise ConfigError(f"{command} takes no seed")
        doc["seed"] = seed
    if out is not None:
        if "out_dir" not in doc:
            raise ConfigError(f"{command} writes no files")
        doc["out_dir"] = out
    if command in STOCHASTIC:
        s = doc.get("seed")
        if not isinstance(s, int) or isinstance(s, bool) or s < 0:
            raise ConfigError("seed must be an unsigned integer")
    return doc


# --------------------------------------------------------------------------
# output helpers


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.9g}"
    return str(x)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(csv_text(header, rows))


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return header, rows


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


def _floats(text, what: str):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        items = list(text)
    else:
        items = [t for t in str(text).split(",") if t.strip() != ""]
    try:
        arr = np.array([float(t) for t in items], dtype=float)
    except (TypeError, ValueError) as exc:
        raise DomainError(f"{what}: expected comma-separated numbers, got {text!r}") from exc
    if arr.size == 0:
        raise DomainError(f"{what}: no values given")
    return arr


def _out_dir(doc) -> Path:
    out = Path(doc["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# subcommands


def cmd_dual_solve(doc: dict) -> int:
    values = doc["values"]
    if isinstance(values, str) and values.startswith("@"):
        try:
            values = Path(values[1:]).read_text().replace("\n", ",")
        except FileNotFoundError as exc:
            raise DomainError(f"values file not found: {values[1:]}") from exc
    v = _floats(values, "values")
    if v is None:
        raise DomainError("values are required")
    probs = _floats(doc["probs"], "probs")
    samples = ValueSamples(v, probs)
    cfg = DualConfig(epsilon=float(doc["epsilon"]), eta_min=float(doc["eta_min"]),
                     eta_max=float(doc["eta_max"]), tol_kl=float(doc["tol"]), newton=True)
    _emit(solve_eta(samples, cfg).to_dict())
    return EXIT_OK


def cmd_reweight(doc: dict) -> int:
    scores = _floats(doc["scores"], "scores")
    if scores is None:
        raise DomainError("scores are required")
    prior = _floats(doc["prior"], "prior")
    if prior is None:
        prior = np.full(scores.size, 1.0 / scores.size)
    w = solve_beta(prior, scores, float(doc["kappa"]), tol=float(doc["tol"]),
                   beta_max=float(doc["beta_max"]))
    out = w.to_dict()
    if w.status == STATUS_CONSTANT:
        out["note"] = "scores are constant; prior returned"
    _emit(out)
    return EXIT_OK


def _load_mdp(path) -> TabularMdp:
    if path is None:
        with resources.as_file(data_path("gridworld.json")) as p:
            return TabularMdp.load(p)
    p = Path(path)
    if not p.exists():
        raise DomainError(f"MDP file not found: {path}")
    return TabularMdp.load(p)


def cmd_solve_mdp(doc: dict) -> int:
    mdp = _load_mdp(doc["mdp"])
    eps = float(doc["epsilon"])
    v, pi, iters = robust_value_iteration(mdp, eps, tol_v=float(doc["tol"]))
    out = _out_dir(doc)
    actions = np.argmax(pi, axis=1)
    write_csv(out / "values.csv", ["state", "value", "action"],
              [(s, v[s], actions[s]) for s in range(mdp.n_states)])
    wc = extract_worst_case_kernel(mdp, pi, v, eps)
    (out / "worst_case_kernel.json").write_text(json.dumps(
        {"kernel": wc.kernel.tolist(), "eta": wc.eta_map.tolist(), "kl": wc.kl_map.tolist()}))
    gap, bound = value_drop_check(mdp, pi, eps)
    report = {
        "epsilon": eps,
        "iterations": iters,
        "value_drop": {"max_gap": float(gap.max()), "min_gap": float(gap.min()),
                       "bound": bound,
                       "within_bound": bool(np.all(gap >= -1e-9) and np.all(gap <= bound + 1e-9))},
    }
    (out / "report.json").write_text(json.dumps(report, indent=2))
    _emit({**report, "values": v.tolist(), "policy": actions.tolist()})
    return EXIT_OK


def _env_from(doc: dict, gamma: float) -> TabularMdp:
    env = doc["env"]
    return gridworld(list(env["layout"]), slip=float(env["slip"]), gamma=gamma)


def cmd_train(doc: dict, ablate=()) -> int:
    flags = set(doc.get("ablate") or []) | set(ablate or [])
    unknown = flags - {"no-advnet", "no-reweight"}
    if unknown:
        raise ConfigError(f"unknown ablation flags: {sorted(unknown)}")
    train = dict(doc["train"])
    train["seed"] = doc["seed"]
    if "no-advnet" in flags:
        train["use_advnet"] = False
    if "no-reweight" in flags:
        train["use_reweighting"] = False
    cfg = TrainConfig.from_dict(train)
    mdp = _env_from(doc, cfg.gamma)
    ens = build_ensemble(mdp, doc["scales"])
    out = _out_dir(doc)
    try:
        res = rapo_train(mdp, ens, cfg, snapshot_every=int(doc["snapshot_every"]),
                         log_path=out / "metrics.jsonl")
    except NumericalFailure as exc:
        (out / "failure.json").write_text(json.dumps({"error": str(exc), "dump": exc.dump},
                                                     default=str))
        raise
    checkpoint = {
        "config": {**doc, "ablate": sorted(flags)},
        "policy": {"logits": res.policy.logits.tolist(), "critic": res.policy.critic.tolist()},
        "advnet": res.advnet.to_dict() if res.advnet is not None else None,
        "mixture": [w.to_dict() for w in res.mixture_history],
        "snapshots": [{"update": u, "logits": p.logits.tolist(), "critic": p.critic.tolist()}
                      for u, p in res.snapshots],
    }
    (out / "checkpoint.json").write_text(json.dumps(checkpoint))
    table = robustness_sweep(res.policy.probs(), mdp, doc["sweep_scales"])
    write_csv(out / "sweep.csv", ["scale", "mean", "ci_low", "ci_high"], table.rows())
    _emit({"out_dir": str(out), "updates": cfg.updates,
           "final": res.metrics[-1] if res.metrics else {},
           "worst_case_return": float(table.mean.min()) if table.mean.size else None})
    return EXIT_OK


def _load_checkpoint(path):
    if path is None:
        raise DomainError("a checkpoint written by `train` is required")
    p = Path(path)
    if not p.exists():
        raise DomainError(f"checkpoint not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DomainError(f"{path}: not valid JSON ({exc})") from exc


def _policy(d) -> SoftmaxPolicy:
    return SoftmaxPolicy(np.asarray(d["logits"], float), np.asarray(d["critic"], float))


def cmd_sweep(doc: dict) -> int:
    ck = _load_checkpoint(doc["checkpoint"])
    mdp = _env_from(ck["config"], ck["config"]["train"]["gamma"])
    table = robustness_sweep(_policy(ck["policy"]).probs(), mdp, doc["scales"])
    out = _out_dir(doc)
    write_csv(out / "sweep.csv", ["scale", "mean", "ci_low", "ci_high"], table.rows())
    _emit({"rows": table.rows()})
    return EXIT_OK


def cmd_heatmap(doc: dict) -> int:
    ck = _load_checkpoint(doc["checkpoint"])
    snaps = ck.get("snapshots") or []
    if not snaps:
        raise DomainError("checkpoint holds no snapshots (train with snapshot_every > 0)")
    mdp = _env_from(ck["config"], ck["config"]["train"]["gamma"])
    probe = collect_rollout(mdp, SoftmaxPolicy.zeros(mdp.n_states, mdp.n_actions),
                            int(doc["probe_size"]), make_rng(doc["seed"]))
    pols = [_policy(s) for s in snaps]
    hm = value_heatmap([p.critic for p in pols], [p.probs() for p in pols], mdp, doc["scales"],
                       probe.states, probe.actions, [s["update"] for s in snaps])
    out = _out_dir(doc)
    write_csv(out / "heatmap.csv", ["update", "scale", "value", "is_argmax"], hm.rows())
    _emit({"updates": hm.updates.tolist(), "floor": hm.floor.tolist(),
           "argmax_scale": hm.scales[hm.argmax].tolist()})
    return EXIT_OK


SCORE_SAMPLERS = {
    "uniform": lambda rng, n: rng.random(n),
    "normal": lambda rng, n: rng.standard_normal(n),
    "exponential": lambda rng, n: rng.exponential(size=n),
}


def cmd_converge_k(doc: dict) -> int:
    name = doc["distribution"]
    if name not in SCORE_SAMPLERS:
        raise ConfigError(f"distribution must be one of {sorted(SCORE_SAMPLERS)}")
    table = finite_k_convergence(SCORE_SAMPLERS[name], doc["k_grid"], float(doc["kappa"]),
                                 int(doc["trials"]), make_rng(doc["seed"]),
                                 k_ref=int(doc["k_ref"]))
    out = _out_dir(doc)
    write_csv(out / "converge_k.csv", ["k", "beta_dev", "value_gap"], table.rows())
    slopes = table.slopes()
    _emit({"beta_ref": table.beta_ref, "rows": table.rows(),
           "slopes": None if slopes is None else {"beta_dev": slopes[0], "value_gap": slopes[1]}})
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config document")
    common.add_argument("--seed", type=int, help="unsigned integer seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE",
                        help="override a config entry (JSON value); repeatable")

    parser = argparse.ArgumentParser(prog="rapo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dual-solve", parents=[common], help="KL-ball dual for one sample set")
    p.add_argument("--values", help="comma-separated values, or @file")
    p.add_argument("--probs", help="comma-separated base probabilities (default uniform)")
    p.add_argument("--epsilon", type=float)

    p = sub.add_parser("reweight", parents=[common], help="Boltzmann mixture weights")
    p.add_argument("--scores")
    p.add_argument("--prior")
    p.add_argument("--kappa", type=float)

    p = sub.add_parser("solve-mdp", parents=[common], help="robust value iteration")
    p.add_argument("--mdp", help="MDP JSON file (default: bundled gridworld)")
    p.add_argument("--epsilon", type=float)

    p = sub.add_parser("train", parents=[common], help="robust actor-critic training")
    p.add_argument("--ablate", nargs="*", default=[], choices=["no-advnet", "no-reweight"])

    p = sub.add_parser("sweep", parents=[common], help="robustness curve of a checkpoint")
    p.add_argument("--checkpoint")

    p = sub.add_parser("heatmap", parents=[common], help="value heatmap over snapshots")
    p.add_argument("--checkpoint")

    p = sub.add_parser("converge-k", parents=[common], help="finite-K temperature rates")
    p.add_argument("--kappa", type=float)
    p.add_argument("--trials", type=int)
    return parser


FLAG_KEYS = ("values", "probs", "epsilon", "scores", "prior", "kappa", "mdp", "checkpoint",
             "trials")
HANDLERS = {
    "dual-solve": cmd_dual_solve,
    "reweight": cmd_reweight,
    "solve-mdp": cmd_solve_mdp,
    "sweep": cmd_sweep,
    "heatmap": cmd_heatmap,
    "converge-k": cmd_converge_k,
}


def run(args) -> int:
    config_path = args.config
    if config_path is None and args.command == "train":
        with resources.as_file(data_path("train_config.json")) as p:
            doc = load_config("train", p, args.set, args.seed, args.out)
    else:
        doc = load_config(args.command, config_path, args.set, args.seed, args.out)
    for key in FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None and key in doc:
            doc[key] = value
    if args.command == "train":
        return cmd_train(doc, args.ablate)
    return HANDLERS[args.command](doc)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if exc.dump:
            print(json.dumps(exc.dump, default=str), file=sys.stderr)
        return EXIT_NUMERIC
    except (ConvergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError, OSError) as exc:
        # DomainError and ConfigError are ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # the exit-code contract allows only 0, 2 and 3
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
