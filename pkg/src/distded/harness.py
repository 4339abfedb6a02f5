"""Evaluation on LifeGate: early-warning gaps, ROC/AUC sweeps, ablations and data/beta sweeps.

Two notions of a flagged trajectory are kept apart. ROC sweeps flag a
trajectory when any of its decision states passes the median dead-end rule;
early-warning gaps use the first step whose alarm score reaches ``delta_d``.

Every state is assessed once per assessor (see `dead_end.StateCache`), so
sweeps over thresholds and alpha cost a few array operations per grid point.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import dataset, dead_end, learners, lifegate, risk
from .dataset import D, R, OfflineDataset
from .dead_end import DED, DED_CQL, DISTDED, DISTDED_NO_CQL, RiskAssessor, StateCache
from .learners import DDQN, IQN, TrainConfig
from .records import Outcome, TrajectoryRecord

N_THRESHOLDS = 100
N_ALPHAS = 50
BETA_GRID = (0.1, 0.2, 0.3, 0.4)
FRACTION_GRID = (0.10, 0.25, 0.50, 0.75, 1.0)

# method -> (head kind, CQL penalty on)
METHOD_SPEC = {DED: (DDQN, False), DED_CQL: (DDQN, True), DISTDED: (IQN, True), DISTDED_NO_CQL: (IQN, False)}


class EvaluationError(ValueError):
    pass


def alpha_grid(n=N_ALPHAS) -> np.ndarray:
    """``n`` evenly spaced levels in (0, 1], ending at 1."""
    return np.linspace(1.0 / n, 1.0, n)


def threshold_grid(n=N_THRESHOLDS) -> np.ndarray:
    return np.linspace(-1.0, 0.0, n)


# --- training --------------------------------------------------------------

def train_pair(ds: OfflineDataset, method, cfg: TrainConfig, progress=None):
    """Train the D- and R-head of ``method``; penalty-free methods force ``beta = 0``."""
    kind, use_cql = METHOD_SPEC[method]
    if not use_cql:
        cfg = replace(cfg, beta=0.0)
    d_head, d_log = learners.train(ds, D, cfg, kind=kind, use_cql=use_cql, progress=progress)
    r_head, r_log = learners.train(ds, R, cfg, kind=kind, use_cql=use_cql, progress=progress)
    return (d_head, r_head), (d_log, r_log)


class HeadCache:
    """Memoises trained head pairs by (dataset content, method, config)."""

    def __init__(self):
        self._store = {}

    def get(self, ds: OfflineDataset, method, cfg: TrainConfig):
        kind, use_cql = METHOD_SPEC[method]
        eff = cfg if use_cql else replace(cfg, beta=0.0)
        key = (dataset_fingerprint(ds), method, eff.hash())
        if key not in self._store:
            self._store[key] = train_pair(ds, method, eff)[0]
        return self._store[key]


def dataset_fingerprint(ds: OfflineDataset) -> str:
    h = hashlib.sha256()
    for arr in (ds.states, ds.next_states, ds.actions, ds.outcome_code):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def make_assessor(heads, method, **kw) -> RiskAssessor:
    return RiskAssessor(heads[0], heads[1], method, **kw)


# --- early warning -----------------------------------------------------------

@dataclass
class GapSample:
    trajectory_id: int
    alarm_index: Optional[int]
    zone_entry: Optional[int]

    @property
    def gap(self) -> Optional[int]:
        if self.alarm_index is None or self.zone_entry is None:
            return None
        return self.zone_entry - self.alarm_index


def gap_stats(samples: Sequence[GapSample]) -> dict:
    """Summary of defined gaps plus the fraction of zone-entering rollouts never alarmed."""
    gaps = np.array([s.gap for s in samples if s.gap is not None], dtype=np.float64)
    entered = [s for s in samples if s.zone_entry is not None]
    missed = sum(s.alarm_index is None for s in entered)
    out = {"n": int(gaps.size), "missed_fraction": (missed / len(entered)) if entered else 0.0}
    if gaps.size:
        q25, med, q75 = np.percentile(gaps, [25, 50, 75])
        out.update(mean=float(gaps.mean()), median=float(med), q25=float(q25), q75=float(q75))
    else:
        out.update(mean=math.nan, median=math.nan, q25=math.nan, q75=math.nan)
    return out


@dataclass
class EarlyWarningResult:
    rollouts: list
    policy_names: list
    samples: dict  # assessor name -> list[GapSample]

    def stats(self) -> dict:
        return {name: gap_stats(s) for name, s in self.samples.items()}

    def paired_differences(self, a, b) -> np.ndarray:
        """Per-rollout ``gap_a - gap_b`` over rollouts where both gaps exist."""
        out = [sa.gap - sb.gap for sa, sb in zip(self.samples[a], self.samples[b])
               if sa.gap is not None and sb.gap is not None]
        return np.array(out, dtype=np.float64)

    def write_csv(self, path) -> None:
        names = list(self.samples)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trajectory_id", "policy", "zone_entry"] + [f"{n}_{c}" for n in names for c in ("alarm", "gap")])
            for i, tr in enumerate(self.rollouts):
                row = [i, self.policy_names[i], _blank(tr.zone_entry_index)]
                for n in names:
                    s = self.samples[n][i]
                    row += [_blank(s.alarm_index), _blank(s.gap)]
                w.writerow(row)


def _blank(v):
    return "" if v is None else v


def alarm_indices(assessor: RiskAssessor, trajectories) -> list:
    """First-alarm index for each trajectory, assessing each distinct state once."""
    if not trajectories:
        return []
    cache = StateCache(np.concatenate([tr.decision_states for tr in trajectories]))
    scores = dead_end.assess_states(assessor, cache.unique).alarm_score
    out, pos = [], 0
    for tr in trajectories:
        rows = cache.inverse[pos:pos + len(tr)]
        pos += len(tr)
        out.append(dead_end.first_alarm(scores[rows], assessor.delta_d))
    return out


def early_warning_study(assessors: dict, policies, n_rollouts, rng: np.random.Generator,
                        spec: Optional[lifegate.GridSpec] = None) -> EarlyWarningResult:
    """Roll out ``n_rollouts`` episodes per policy once, then score them under every assessor."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    spec = spec or lifegate.default_spec()
    rollouts, names = [], []
    for _ in range(n_rollouts):
        for pol in policies:
            rollouts.append(lifegate.rollout(spec, pol, rng))
            names.append(pol.name)
    samples = {}
    for name, assessor in assessors.items():
        alarms = alarm_indices(assessor, rollouts)
        samples[name] = [GapSample(i, a, tr.zone_entry_index) for i, (a, tr) in enumerate(zip(alarms, rollouts))]
    return EarlyWarningResult(rollouts, names, samples)


# --- ROC / AUC -----------------------------------------------------------------

@dataclass(frozen=True)
class RocPoint:
    delta_d: float
    delta_r: float
    tpr: float
    fpr: float


def auc(points) -> float:
    """Trapezoidal area under ROC points sorted by (fpr, tpr), anchored at (0,0) and (1,1)."""
    pts = [(float(p.fpr), float(p.tpr)) if isinstance(p, RocPoint) else (float(p[0]), float(p[1])) for p in points]
    if len(pts) < 2:
        raise EvaluationError("need at least two ROC points")
    pts = sorted(set(pts) | {(0.0, 0.0), (1.0, 1.0)})
    f = np.array([p[0] for p in pts])
    t = np.array([p[1] for p in pts])
    return float(np.sum(np.diff(f) * (t[1:] + t[:-1]) / 2.0))


def heldout_trajectories(spec: lifegate.GridSpec, n, rng: np.random.Generator) -> list:
    """Random-policy episodes from random free cells, keeping positive and negative outcomes only."""
    out = []
    while len(out) < n:
        tr = lifegate.random_episode(spec, rng, anywhere=True)
        if tr.outcome != Outcome.TIMEOUT:
            out.append(tr)
    return out


class TrajectorySet:
    """Decision states of a trajectory list, deduplicated, plus outcome labels."""

    def __init__(self, trajectories):
        trajectories = list(trajectories)
        if not trajectories:
            raise EvaluationError("no trajectories")
        self.trajectories = trajectories
        self.negative = np.array([tr.outcome == Outcome.NEGATIVE for tr in trajectories])
        self.positive = np.array([tr.outcome == Outcome.POSITIVE for tr in trajectories])
        lengths = [len(tr) for tr in trajectories]
        self.cache = StateCache(np.concatenate([tr.decision_states for tr in trajectories]))
        traj_of_row = np.repeat(np.arange(len(trajectories)), lengths)
        member = np.zeros((len(trajectories), len(self.cache.unique)), dtype=bool)
        member[traj_of_row, self.cache.inverse] = True
        self.member = member.astype(np.float64)

    @property
    def states(self) -> np.ndarray:
        return self.cache.unique

    def flagged(self, state_flags) -> np.ndarray:
        """``state_flags (..., U)`` over unique states -> ``(..., n_traj)`` any-state flags."""
        return (np.asarray(state_flags, dtype=np.float64) @ self.member.T) > 0.0


def roc_from_medians(tset: TrajectorySet, median_d, median_r, deltas) -> list:
    """ROC points for unique-state medians under the coupled sweep ``delta_r = 1 + delta_d``."""
    if not tset.negative.any() or not tset.positive.any():
        raise EvaluationError("ROC needs both negative- and positive-outcome trajectories")
    deltas = np.asarray(deltas, dtype=np.float64)
    dr = 1.0 + deltas
    state_flags = (median_d[None, :] <= deltas[:, None]) & (median_r[None, :] <= dr[:, None])
    flags = tset.flagged(state_flags)
    tpr = flags[:, tset.negative].mean(axis=1)
    fpr = flags[:, tset.positive].mean(axis=1)
    return [RocPoint(float(d), float(r), float(t), float(f)) for d, r, t, f in zip(deltas, dr, tpr, fpr)]


def roc_sweep(assessor: RiskAssessor, trajectories, n_thresholds=N_THRESHOLDS) -> list:
    """Coupled threshold sweep at the assessor's alpha; each trajectory is flagged if any state is a dead-end."""
    tset = trajectories if isinstance(trajectories, TrajectorySet) else TrajectorySet(trajectories)
    a = dead_end.assess_states(assessor, tset.states)
    return roc_from_medians(tset, a.median_d, a.median_r, threshold_grid(n_thresholds))


@dataclass
class SweepReport:
    method: str
    alpha: Optional[float]
    beta: float
    data_fraction: float
    roc: list
    auc: float
    missed_fraction: float
    seed: int = 0
    cfg_hash: str = ""
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {"method": self.method, "alpha": _blank(self.alpha), "beta": self.beta,
               "data_fraction": self.data_fraction, "auc": self.auc,
               "missed_fraction": self.missed_fraction, "seed": self.seed, "cfg_hash": self.cfg_hash}
        out.update(self.extra)
        return out


@dataclass
class FamilyResult:
    """ROC sweeps of one head pair over an alpha grid (a single point for expectation methods)."""

    method: str
    alphas: np.ndarray
    reports: list
    min_security_gap: float
    mean_var_auc: Optional[float] = None

    @property
    def aucs(self) -> np.ndarray:
        return np.array([r.auc for r in self.reports])

    @property
    def best(self) -> SweepReport:
        return self.reports[int(np.argmax(self.aucs))]

    @property
    def max_auc(self) -> float:
        return float(self.aucs.max())


def _missed(tset: TrajectorySet, median_d, median_r, delta_d, delta_r) -> float:
    flags = tset.flagged(((median_d <= delta_d) & (median_r <= delta_r))[None])[0]
    neg = tset.negative
    return float(1.0 - flags[neg].mean()) if neg.any() else 0.0


def evaluate_family(heads, method, trajectories, alphas=None, n_thresholds=N_THRESHOLDS,
                    beta=0.0, data_fraction=1.0, seed=0, cfg_hash="", k_eval=1000) -> FamilyResult:
    """AUC per alpha for a head pair.

    For distributional methods the CVaR spectrum over ``alphas`` comes from one
    particle draw per state; the smallest ``mean - CVaR`` over every
    state-action-alpha is kept as ``min_security_gap``. The VaR-based AUC
    averaged over the alpha grid is reported alongside.
    """
    tset = trajectories if isinstance(trajectories, TrajectorySet) else TrajectorySet(trajectories)
    base = make_assessor(heads, method, seed=seed, k_eval=k_eval)
    deltas = threshold_grid(n_thresholds)
    dd, dr = base.delta_d, base.delta_r
    reports = []
    if base.distributional:
        alphas = alpha_grid() if alphas is None else np.asarray(alphas, dtype=np.float64)
        pd, pr = dead_end.particles(base, tset.states)
        cd = risk.cvar_spectrum(pd, alphas)
        cr = risk.cvar_spectrum(pr, alphas)
        gap = min(float((pd.mean(-1)[..., None] - cd).min()), float((pr.mean(-1)[..., None] - cr).min()))
        md = dead_end.median_over_actions(np.moveaxis(cd, -1, 0))
        mr = dead_end.median_over_actions(np.moveaxis(cr, -1, 0))
        var_aucs = []
        for j, a in enumerate(alphas):
            pts = roc_from_medians(tset, md[j], mr[j], deltas)
            reports.append(SweepReport(method, float(a), beta, data_fraction, pts, auc(pts),
                                       _missed(tset, md[j], mr[j], dd, dr), seed, cfg_hash))
            vd = dead_end.median_over_actions(risk.var_alpha(pd, float(a)))
            vr = dead_end.median_over_actions(risk.var_alpha(pr, float(a)))
            var_aucs.append(auc(roc_from_medians(tset, vd, vr, deltas)))
        return FamilyResult(method, alphas, reports, gap, float(np.mean(var_aucs)))
    a = dead_end.assess_states(base, tset.states)
    pts = roc_from_medians(tset, a.median_d, a.median_r, deltas)
    reports.append(SweepReport(method, None, beta, data_fraction, pts, auc(pts),
                               _missed(tset, a.median_d, a.median_r, dd, dr), seed, cfg_hash))
    return FamilyResult(method, np.array([np.nan]), reports, math.inf, None)


# --- sweeps -------------------------------------------------------------------

ABLATION_CELLS = ((DDQN, False, DED), (DDQN, True, DED_CQL), (IQN, False, DISTDED_NO_CQL), (IQN, True, DISTDED))


@dataclass
class AblationResult:
    families: dict  # method -> FamilyResult
    heads: dict

    def table(self) -> list:
        rows = []
        for kind, use_cql, method in ABLATION_CELLS:
            fam = self.families[method]
            rows.append({"kind": kind, "cql": use_cql, "method": method, "max_auc": fam.max_auc,
                         "best_alpha": _blank(fam.best.alpha), "mean_var_auc": _blank(fam.mean_var_auc),
                         "min_security_gap": fam.min_security_gap})
        return rows


def ablation_matrix(ds: OfflineDataset, cfg: TrainConfig, trajectories, alphas=None,
                    cache: Optional[HeadCache] = None, n_thresholds=N_THRESHOLDS) -> AblationResult:
    """{DDQN, IQN} x {no penalty, CQL} trained on the same data and seeds; max-over-alpha AUC per cell."""
    cache = cache or HeadCache()
    tset = trajectories if isinstance(trajectories, TrajectorySet) else TrajectorySet(trajectories)
    fams, heads = {}, {}
    for kind, use_cql, method in ABLATION_CELLS:
        heads[method] = cache.get(ds, method, cfg)
        beta = cfg.beta if use_cql else 0.0
        fams[method] = evaluate_family(heads[method], method, tset, alphas, n_thresholds, beta=beta,
                                       seed=cfg.seed, cfg_hash=cfg.hash(), k_eval=cfg.k_eval)
    return AblationResult(fams, heads)


def beta_sweep(ds: OfflineDataset, cfg: TrainConfig, trajectories, betas=None, tuned=None,
               alphas=None, n_thresholds=N_THRESHOLDS) -> dict:
    """One CQL-enabled DistDeD pair per beta; returns ``beta -> (FamilyResult, heads)``.

    The grid is ``{0, tuned} | betas`` (tuned defaults to ``cfg.beta``). The
    beta=0 cell runs the penalty path with zero weight.
    """
    grid = sorted({0.0, float(cfg.beta if tuned is None else tuned)} | set(map(float, betas or BETA_GRID)))
    if not grid:
        raise ValueError("empty beta grid")
    tset = trajectories if isinstance(trajectories, TrajectorySet) else TrajectorySet(trajectories)
    out = {}
    for b in grid:
        c = replace(cfg, beta=b)
        heads = (learners.train(ds, D, c, IQN, use_cql=True)[0], learners.train(ds, R, c, IQN, use_cql=True)[0])
        fam = evaluate_family(heads, DISTDED, tset, alphas, n_thresholds, beta=b, seed=c.seed,
                              cfg_hash=c.hash(), k_eval=c.k_eval)
        out[b] = (fam, heads)
    return out


def data_fraction_sweep(ds: OfflineDataset, cfg: TrainConfig, trajectories, fractions=FRACTION_GRID,
                        alphas=None, cache: Optional[HeadCache] = None, n_thresholds=N_THRESHOLDS) -> dict:
    """DeD and DistDeD retrained on outcome-stratified subsets; ``(method, fraction) -> FamilyResult``."""
    cache = cache or HeadCache()
    tset = trajectories if isinstance(trajectories, TrajectorySet) else TrajectorySet(trajectories)
    out = {}
    for i, f in enumerate(fractions):
        sub = dataset.subsample(ds, f, np.random.default_rng([cfg.seed, 100 + i]))
        for method in (DED, DISTDED):
            heads = cache.get(sub, method, cfg)
            beta = cfg.beta if METHOD_SPEC[method][1] else 0.0
            out[(method, f)] = evaluate_family(heads, method, tset, alphas, n_thresholds, beta=beta,
                                               data_fraction=f, seed=cfg.seed, cfg_hash=cfg.hash(),
                                               k_eval=cfg.k_eval)
    return out


def threshold_histograms(assessor: RiskAssessor, trajectories, time_bins, value_bins=20) -> list:
    """Histograms of median D and R values per time-to-termination bin and outcome.

    ``time_bins`` are increasing left edges; a state with ``k`` steps left
    falls into the last edge ``<= k`` (states below the first edge join the
    first bin). Returns CSV-ready dict rows.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("no trajectories")
    edges = np.asarray(time_bins, dtype=np.float64)
    if edges.ndim != 1 or edges.size == 0 or np.any(np.diff(edges) <= 0):
        raise ValueError("time_bins must be increasing left edges")
    tset = TrajectorySet(trajectories)
    a = dead_end.assess_states(assessor, tset.states)
    rows = []
    counts = {}
    pos = 0
    for tr in trajectories:
        idx = tset.cache.inverse[pos:pos + len(tr)]
        pos += len(tr)
        remaining = len(tr) - np.arange(len(tr))
        tb = np.clip(np.searchsorted(edges, remaining, side="right") - 1, 0, len(edges) - 1)
        for head, vals, lo in (("D", a.median_d[idx], -1.0), ("R", a.median_r[idx], 0.0)):
            vb = np.clip(np.floor((vals - lo) * value_bins).astype(int), 0, value_bins - 1)
            for t, v in zip(tb, vb):
                key = (int(t), tr.outcome.value, head, int(v))
                counts[key] = counts.get(key, 0) + 1
    for (t, outcome, head, v), n in sorted(counts.items()):
        lo = -1.0 if head == "D" else 0.0
        rows.append({"time_bin": float(edges[t]), "outcome": outcome, "head": head,
                     "value_lo": lo + v / value_bins, "value_hi": lo + (v + 1) / value_bins, "count": n})
    return rows


# --- output ---------------------------------------------------------------------

def write_rows(path, rows: list, columns=None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_roc_csv(path, reports: list) -> None:
    rows = []
    for rep in reports:
        for p in rep.roc:
            rows.append({"method": rep.method, "alpha": _blank(rep.alpha), "beta": rep.beta,
                         "data_fraction": rep.data_fraction, "delta_d": p.delta_d, "delta_r": p.delta_r,
                         "tpr": p.tpr, "fpr": p.fpr})
    write_rows(path, rows, ["method", "alpha", "beta", "data_fraction", "delta_d", "delta_r", "tpr", "fpr"])


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, command: str, config: dict, inputs=(), outputs=()) -> None:
    """JSON manifest with the resolved config and content hashes of input and output files."""
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): file_hash(p) for p in inputs},
        "outputs": {str(p): file_hash(p) for p in outputs},
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o)}")
