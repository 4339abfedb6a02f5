"""Command-line entry point: ``distded <command> [options]``.

Commands: collect, train, assess, early-warning, roc, ablate, sweep. Settings
resolve as command-line flags, then ``--config`` JSON, then built-in defaults.
The seed falls back to the ``DEADEND_SEED`` environment variable, then 0.
Relative paths are taken under ``--out-dir``. Every command writes a
``<name>.manifest.json`` next to its main output.

Exit codes: 0 success, 2 usage error, 3 integrity error, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import dataset, dead_end, harness, learners, lifegate
from .dataset import D, R
from .dead_end import DED, DED_CQL, DISTDED, DISTDED_NO_CQL, METHODS
from .learners import TrainConfig

EXIT_USAGE, EXIT_INTEGRITY, EXIT_IO = 2, 3, 4

DEFAULTS = {
    "n": 1_000_000,
    "n_rollouts": 5_000,  # per policy; 10,000 rollouts over the two suboptimal policies
    "n_eval": 1000,
    "n_thresholds": harness.N_THRESHOLDS,
    "n_alphas": harness.N_ALPHAS,
    "alpha": 0.1,
    "stochasticity": 0.1,
    "method": DISTDED,
}


class UsageError(Exception):
    pass


class IntegrityError(Exception):
    pass


def _train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--beta", type=float)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--n-online-taus", type=int)
    g.add_argument("--n-target-taus", type=int)
    g.add_argument("--k-eval", type=int)
    g.add_argument("--target-update", choices=["hard", "ema"])
    g.add_argument("--target-update-every", type=int)
    g.add_argument("--ema-rate", type=float)
    g.add_argument("--neg-terminal-frac", type=float)
    g.add_argument("--huber-kappa", type=float)
    g.add_argument("--cql-per-tau", action="store_true", default=None)


def _eval_flags(p, thresholds=True, k_eval=True):
    p.add_argument("--alpha", type=float)
    if k_eval:
        p.add_argument("--k-eval", type=int, help="particles per state evaluation")
    if thresholds:
        p.add_argument("--delta-d", type=float)
        p.add_argument("--delta-r", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distded", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults (flag names with underscores)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--env", help="LifeGate layout JSON; the built-in layout when omitted")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", parents=[common], help="collect random-policy transitions")
    p.add_argument("--n", type=int, help="number of transitions")
    p.add_argument("--out", default="data.jsonl")

    p = sub.add_parser("train", parents=[common], help="train the D- and R-heads of a method")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--out", default="heads", help="checkpoint prefix; writes <out>_D and <out>_R")
    _train_flags(p)

    p = sub.add_parser("assess", parents=[common], help="per-state assessments of stored trajectories")
    p.add_argument("--heads", required=True)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--data", required=True, help="dataset file whose trajectories are assessed")
    p.add_argument("--out", default="assessments.csv")
    _eval_flags(p)

    p = sub.add_parser("early-warning", parents=[common], help="alarm lead times on the suboptimal policies")
    p.add_argument("--ded-heads", required=True)
    p.add_argument("--distded-heads", required=True)
    p.add_argument("--n-rollouts", type=int, help="rollouts per policy")
    p.add_argument("--stochasticity", type=float)
    p.add_argument("--ded-delta-d", type=float)
    p.add_argument("--out", default="early_warning.csv")
    _eval_flags(p)

    p = sub.add_parser("roc", parents=[common], help="coupled threshold sweep and AUC")
    p.add_argument("--heads", required=True)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--data", help="held-out dataset; generated from --seed when omitted")
    p.add_argument("--n-eval", type=int, help="held-out trajectories to generate")
    p.add_argument("--n-thresholds", type=int)
    p.add_argument("--n-alphas", type=int)
    p.add_argument("--k-eval", type=int, help="particles per state evaluation")
    p.add_argument("--out", default="roc.csv")

    p = sub.add_parser("ablate", parents=[common], help="train and score the 2x2 ablation matrix")
    p.add_argument("--data", required=True)
    p.add_argument("--n-eval", type=int)
    p.add_argument("--n-thresholds", type=int)
    p.add_argument("--n-alphas", type=int)
    p.add_argument("--out", default="ablation.csv")
    _train_flags(p)

    p = sub.add_parser("sweep", parents=[common], help="beta, data-fraction or threshold-histogram sweeps")
    p.add_argument("kind", choices=["beta", "fraction", "histogram"])
    p.add_argument("--data", required=True)
    p.add_argument("--heads", help="head prefix (histogram sweep)")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--betas", type=float, nargs="+")
    p.add_argument("--tuned-beta", type=float)
    p.add_argument("--fractions", type=float, nargs="+")
    p.add_argument("--time-bins", type=float, nargs="+")
    p.add_argument("--n-eval", type=int)
    p.add_argument("--n-thresholds", type=int)
    p.add_argument("--n-alphas", type=int)
    p.add_argument("--out", default="sweep.csv")
    _eval_flags(p, k_eval=False)
    _train_flags(p)
    return parser


def resolve(args) -> dict:
    """Merge flags over config-file values over defaults; seed falls back to DEADEND_SEED."""
    cfg = dict(DEFAULTS)
    if args.config:
        path = Path(args.config)
        try:
            cfg.update(json.loads(path.read_text()))
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc}") from exc
    for k, v in vars(args).items():
        if v is not None and k != "config":
            cfg[k] = v
    if cfg.get("seed") is None:
        env = os.environ.get("DEADEND_SEED")
        cfg["seed"] = int(env) if env not in (None, "") else 0
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    kw = {k: cfg[k] for k in names if k in cfg and cfg[k] is not None}
    tc = TrainConfig(**kw)
    try:
        tc.validate()
    except learners.ConfigError as exc:
        raise UsageError(str(exc)) from exc
    return tc


def _path(cfg, name) -> Path:
    p = Path(name)
    return p if p.is_absolute() else Path(cfg["out_dir"]) / p


def _input(cfg, name) -> Path:
    p = _path(cfg, name)
    if not p.exists():
        raise FileNotFoundError(f"missing input {p}")
    return p


def _env(cfg) -> lifegate.GridSpec:
    return lifegate.load_spec(_input(cfg, cfg["env"])) if cfg.get("env") else lifegate.default_spec()


def _manifest(cfg, out: Path, inputs=(), outputs=()):
    harness.write_manifest(out.parent / (out.name + ".manifest.json"), cfg["command"], cfg,
                           inputs, list(outputs) or [out])


def _load_heads(cfg, prefix, spec):
    base = _path(cfg, prefix)
    heads = []
    for mode in (D, R):
        p = Path(f"{base}_{mode}")
        if not p.with_suffix(".json").exists():
            raise FileNotFoundError(f"missing checkpoint {p}.json")
        h = learners.load_head(p)
        if h.mode != mode:
            raise IntegrityError(f"{p}: expected a {mode}-head, found {h.mode}")
        env_hash = h.meta.get("env_hash")
        if env_hash is not None and env_hash != spec.hash():
            raise IntegrityError(f"{p}: trained on a different LifeGate layout")
        heads.append(h)
    return tuple(heads), [Path(f"{base}_{m}{s}") for m in (D, R) for s in (".json", ".bin")]


def _method_for(heads, cfg):
    method = cfg.get("method") or DISTDED
    want = heads[0].kind
    if (want == learners.IQN) != (method in dead_end.DISTRIBUTIONAL):
        raise UsageError(f"method {method} does not match {want} checkpoints")
    return method


def _assessor_kw(cfg, method):
    kw = {"k_eval": int(cfg.get("k_eval", 1000)), "seed": cfg["seed"]}
    if method in dead_end.DISTRIBUTIONAL:
        kw["alpha"] = cfg["alpha"]
    for k in ("delta_d", "delta_r"):
        if cfg.get(k) is not None:
            kw[k] = cfg[k]
    return kw


def _heldout(cfg, spec):
    if cfg.get("data_eval"):
        return dataset.load(_input(cfg, cfg["data_eval"])).trajectories
    rng = np.random.default_rng([cfg["seed"], 50])
    return harness.heldout_trajectories(spec, int(cfg["n_eval"]), rng)


# --- commands -------------------------------------------------------------------

def cmd_collect(cfg):
    if int(cfg["n"]) < 1:
        raise UsageError("--n must be >= 1")
    spec = _env(cfg)
    out = _path(cfg, cfg["out"])
    ds = dataset.collect_random(spec, int(cfg["n"]), np.random.default_rng(cfg["seed"]), cfg["seed"])
    dataset.save(ds, out)
    _manifest(cfg, out)
    print(f"wrote {out}: {len(ds)} transitions, outcomes {ds.outcome_counts()}")


def cmd_train(cfg):
    method = cfg.get("method") or DISTDED
    kind, use_cql = harness.METHOD_SPEC[method]
    if not use_cql and cfg.get("beta") not in (None, 0, 0.0):
        raise UsageError(f"method {method} trains without the CQL penalty; --beta is not accepted")
    if not use_cql:
        cfg["beta"] = 0.0
    tc = train_config(cfg)
    data = _input(cfg, cfg["data"])
    ds = dataset.load(data)
    spec = _env(cfg)
    if ds.metadata.get("env_hash") not in (None, spec.hash()):
        raise IntegrityError(f"{data} was collected on a different LifeGate layout")
    prefix = _path(cfg, cfg["out"])
    outputs = []
    for mode in (D, R):
        head, log = learners.train(ds, mode, tc, kind=kind, use_cql=use_cql)
        head.meta["dataset_sha256"] = dataset.content_hash(data)
        ckpt = Path(f"{prefix}_{mode}")
        learners.save_head(head, ckpt)
        log.write_csv(f"{ckpt}_loss.csv")
        outputs += [ckpt.with_suffix(".json"), ckpt.with_suffix(".bin"), Path(f"{ckpt}_loss.csv")]
    cfg["train_config"] = asdict(tc)
    _manifest(cfg, Path(f"{prefix}"), [data], outputs)
    print(f"wrote {prefix}_D and {prefix}_R ({kind}, cql={use_cql})")


def cmd_assess(cfg):
    spec = _env(cfg)
    heads, ckpts = _load_heads(cfg, cfg["heads"], spec)
    method = _method_for(heads, cfg)
    data = _input(cfg, cfg["data"])
    trajs = dataset.load(data).trajectories
    assessor = dead_end.RiskAssessor(heads[0], heads[1], method, **_assessor_kw(cfg, method))
    out = _path(cfg, cfg["out"])
    dead_end.export_assessments(assessor, trajs, out)
    _manifest(cfg, out, ckpts + [data])
    print(f"wrote {out}")


def cmd_early_warning(cfg):
    spec = _env(cfg)
    ded_heads, c1 = _load_heads(cfg, cfg["ded_heads"], spec)
    dist_heads, c2 = _load_heads(cfg, cfg["distded_heads"], spec)
    k_eval = int(cfg.get("k_eval", 1000))
    ded_kw = {"seed": cfg["seed"], "k_eval": k_eval}
    if cfg.get("ded_delta_d") is not None:
        ded_kw["delta_d"] = cfg["ded_delta_d"]
    assessors = {
        DED: dead_end.RiskAssessor(ded_heads[0], ded_heads[1], DED, **ded_kw),
        DISTDED: dead_end.RiskAssessor(dist_heads[0], dist_heads[1], DISTDED, **_assessor_kw(cfg, DISTDED)),
    }
    n = int(cfg["n_rollouts"])
    if n < 1:
        raise UsageError("--n-rollouts must be >= 1")
    res = harness.early_warning_study(assessors, lifegate.suboptimal_policies(spec, cfg["stochasticity"]), n,
                                      np.random.default_rng([cfg["seed"], 60]), spec)
    out = _path(cfg, cfg["out"])
    res.write_csv(out)
    summary = out.with_name(out.stem + "_summary.csv")
    rows = [dict(method=k, **v) for k, v in res.stats().items()]
    diff = res.paired_differences(DISTDED, DED)
    rows.append({"method": "paired_distded_minus_ded", "n": int(diff.size),
                 "mean": float(diff.mean()) if diff.size else float("nan")})
    harness.write_rows(summary, rows, ["method", "n", "mean", "median", "q25", "q75", "missed_fraction"])
    _manifest(cfg, out, c1 + c2, [out, summary])
    print(f"wrote {out}; mean paired gap difference {rows[-1]['mean']:.3f}")


def cmd_roc(cfg):
    spec = _env(cfg)
    heads, ckpts = _load_heads(cfg, cfg["heads"], spec)
    method = _method_for(heads, cfg)
    inputs = list(ckpts)
    if cfg.get("data"):
        cfg["data_eval"] = cfg["data"]
        inputs.append(_input(cfg, cfg["data"]))
    trajs = _heldout(cfg, spec)
    fam = harness.evaluate_family(heads, method, trajs, harness.alpha_grid(int(cfg["n_alphas"])),
                                  int(cfg["n_thresholds"]), seed=cfg["seed"], k_eval=int(cfg.get("k_eval", 1000)))
    out = _path(cfg, cfg["out"])
    harness.write_roc_csv(out, fam.reports)
    auc_path = out.with_name(out.stem + "_auc.csv")
    harness.write_rows(auc_path, [r.row() for r in fam.reports])
    _manifest(cfg, out, inputs, [out, auc_path])
    print(f"wrote {out}; max AUC {fam.max_auc:.4f}")


def cmd_ablate(cfg):
    spec = _env(cfg)
    tc = train_config(cfg)
    data = _input(cfg, cfg["data"])
    ds = dataset.load(data)
    trajs = _heldout(cfg, spec)
    res = harness.ablation_matrix(ds, tc, trajs, harness.alpha_grid(int(cfg["n_alphas"])),
                                  n_thresholds=int(cfg["n_thresholds"]))
    out = _path(cfg, cfg["out"])
    harness.write_rows(out, res.table())
    roc = out.with_name(out.stem + "_roc.csv")
    harness.write_roc_csv(roc, [r for fam in res.families.values() for r in fam.reports])
    cfg["train_config"] = asdict(tc)
    _manifest(cfg, out, [data], [out, roc])
    for row in res.table():
        print(f"{row['method']:12s} max AUC {row['max_auc']:.4f}")


def cmd_sweep(cfg):
    spec = _env(cfg)
    data = _input(cfg, cfg["data"])
    out = _path(cfg, cfg["out"])
    inputs = [data]
    if cfg["kind"] == "histogram":
        if not cfg.get("heads"):
            raise UsageError("the histogram sweep needs --heads")
        heads, ckpts = _load_heads(cfg, cfg["heads"], spec)
        method = _method_for(heads, cfg)
        trajs = dataset.load(data).trajectories
        assessor = dead_end.RiskAssessor(heads[0], heads[1], method, **_assessor_kw(cfg, method))
        bins = cfg.get("time_bins") or [1, 2, 4, 8, 16, 32, 64]
        harness.write_rows(out, harness.threshold_histograms(assessor, trajs, bins),
                           ["time_bin", "outcome", "head", "value_lo", "value_hi", "count"])
        _manifest(cfg, out, inputs + ckpts)
        print(f"wrote {out}")
        return
    tc = train_config(cfg)
    ds = dataset.load(data)
    trajs = _heldout(cfg, spec)
    alphas = harness.alpha_grid(int(cfg["n_alphas"]))
    n_thr = int(cfg["n_thresholds"])
    if cfg["kind"] == "beta":
        res = harness.beta_sweep(ds, tc, trajs, cfg.get("betas"), cfg.get("tuned_beta"), alphas, n_thr)
        fams = [fam for fam, _ in res.values()]
    else:
        res = harness.data_fraction_sweep(ds, tc, trajs, cfg.get("fractions") or harness.FRACTION_GRID,
                                          alphas, n_thresholds=n_thr)
        fams = list(res.values())
    rows = []
    for fam in fams:
        best = fam.best
        for rep in fam.reports:
            row = rep.row()
            row["best"] = int(rep is best)
            rows.append(row)
    harness.write_rows(out, rows)
    cfg["train_config"] = asdict(tc)
    _manifest(cfg, out, inputs)
    print(f"wrote {out}: {len(fams)} cells")


COMMANDS = {"collect": cmd_collect, "train": cmd_train, "assess": cmd_assess, "early-warning": cmd_early_warning,
            "roc": cmd_roc, "ablate": cmd_ablate, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        Path(cfg["out_dir"]).mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg)
    except (UsageError, learners.ConfigError, lifegate.ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IntegrityError, dataset.FormatError) as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
