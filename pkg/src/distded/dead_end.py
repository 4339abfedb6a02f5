"""Dead-end decision layer: action flags, the median rule, alarms and the CVaR security gap.

Four methods are supported. ``ded`` and ``ded+cql`` read point estimates from
DDQN heads; ``distded`` and ``distded-cql`` read ``k_eval`` quantile particles
from IQN heads and summarise each action by its CVaR at level ``alpha``.

An assessor draws one tau set at construction and reuses it for every state,
both heads and all actions. Assessment is then a pure function of the state,
which lets sweeps evaluate each distinct state once and makes the mean >= CVaR
check exact on a shared particle set.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import learners, risk
from .dataset import D, R
from .learners import DDQN, IQN, ValueHead

DED, DED_CQL, DISTDED, DISTDED_NO_CQL = "ded", "ded+cql", "distded", "distded-cql"
METHODS = (DED, DED_CQL, DISTDED, DISTDED_NO_CQL)
DISTRIBUTIONAL = (DISTDED, DISTDED_NO_CQL)

DEFAULT_THRESHOLDS = {DED: (-0.15, 0.85), DED_CQL: (-0.15, 0.85),
                      DISTDED: (-0.5, 0.5), DISTDED_NO_CQL: (-0.5, 0.5)}


class MethodError(TypeError):
    pass


class InputError(ValueError):
    pass


def median_over_actions(values) -> np.ndarray:
    """Median over the last axis; the mean of the two middle values for even counts."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape[-1] == 0:
        raise ValueError("need at least one action")
    return np.median(v, axis=-1)


def flag_action(value_d, value_r, delta_d, delta_r):
    """An action is to be avoided when both values sit at or under their thresholds."""
    return np.logical_and(np.asarray(value_d) <= delta_d, np.asarray(value_r) <= delta_r)


def is_dead_end(per_action_d, per_action_r, delta_d, delta_r) -> bool:
    d = np.asarray(per_action_d, dtype=np.float64)
    r = np.asarray(per_action_r, dtype=np.float64)
    if d.size == 0 or r.size == 0:
        raise ValueError("empty action list")
    if d.shape != r.shape:
        raise ValueError("D and R value lists differ in length")
    return bool(median_over_actions(d) <= delta_d and median_over_actions(r) <= delta_r)


def alarm_score(median_d, median_r):
    """Average of the D median and the shifted R median; lies in [-1, 0]."""
    return (np.asarray(median_d) + (np.asarray(median_r) - 1.0)) / 2.0


@dataclass
class RiskAssessor:
    d_head: ValueHead
    r_head: ValueHead
    method: str = DISTDED
    alpha: float = 0.1
    delta_d: Optional[float] = None
    delta_r: Optional[float] = None
    k_eval: int = 1000
    seed: int = 0
    taus: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise MethodError(f"unknown method {self.method!r}")
        want = IQN if self.method in DISTRIBUTIONAL else DDQN
        if self.d_head.kind != want or self.r_head.kind != want:
            raise MethodError(f"method {self.method} needs {want} heads")
        if self.d_head.mode != D or self.r_head.mode != R:
            raise MethodError("d_head must be a D-head and r_head an R-head")
        if self.d_head.state_dim != self.r_head.state_dim:
            raise InputError("D and R heads disagree on the state dimension")
        dd, dr = DEFAULT_THRESHOLDS[self.method]
        self.delta_d = dd if self.delta_d is None else float(self.delta_d)
        self.delta_r = dr if self.delta_r is None else float(self.delta_r)
        if not (-1.0 <= self.delta_d <= 0.0 and 0.0 <= self.delta_r <= 1.0):
            raise ValueError("thresholds must lie in the value supports")
        if self.distributional:
            risk.tail_count(self.alpha, self.k_eval)
            self.taus = np.random.default_rng([self.seed, 3]).random(self.k_eval)
        else:
            self.taus = np.zeros(0)

    @property
    def distributional(self) -> bool:
        return self.method in DISTRIBUTIONAL

    def with_params(self, **kw) -> "RiskAssessor":
        """Same heads, different alpha / thresholds. Keeps the tau set when ``seed`` and ``k_eval`` match."""
        args = dict(d_head=self.d_head, r_head=self.r_head, method=self.method, alpha=self.alpha,
                    delta_d=self.delta_d, delta_r=self.delta_r, k_eval=self.k_eval, seed=self.seed)
        args.update(kw)
        return RiskAssessor(**args)


def _states(assessor: RiskAssessor, states) -> np.ndarray:
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if s.ndim != 2 or s.shape[1] != assessor.d_head.state_dim:
        raise InputError(f"state shape {np.shape(states)} does not match head input dim {assessor.d_head.state_dim}")
    return s


def particles(assessor: RiskAssessor, states, chunk=64) -> tuple[np.ndarray, np.ndarray]:
    """Clamped particles ``(S, A, K)`` for both heads on the assessor's shared taus."""
    if not assessor.distributional:
        raise MethodError("particles need a distributional method")
    s = _states(assessor, states)
    out_d, out_r = [], []
    for i in range(0, len(s), chunk):
        part = s[i:i + chunk]
        out_d.append(np.swapaxes(learners.iqn_values(assessor.d_head, part, assessor.taus), 1, 2))
        out_r.append(np.swapaxes(learners.iqn_values(assessor.r_head, part, assessor.taus), 1, 2))
    return np.concatenate(out_d), np.concatenate(out_r)


def action_values(assessor: RiskAssessor, states, alphas=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-action D and R values ``(S, A)``; with ``alphas`` a trailing alpha axis is added.

    Distributional methods give CVaR over the shared particles; expectation
    methods give the clamped point estimate (repeated along the alpha axis).
    """
    if assessor.distributional:
        pd, pr = particles(assessor, states)
        if alphas is None:
            return risk.cvar_alpha(pd, assessor.alpha), risk.cvar_alpha(pr, assessor.alpha)
        return risk.cvar_spectrum(pd, alphas), risk.cvar_spectrum(pr, alphas)
    s = _states(assessor, states)
    qd = learners.q_values(assessor.d_head, s)
    qr = learners.q_values(assessor.r_head, s)
    if alphas is None:
        return qd, qr
    n = len(list(alphas))
    return np.repeat(qd[..., None], n, axis=-1), np.repeat(qr[..., None], n, axis=-1)


@dataclass
class StateAssessment:
    value_d: np.ndarray
    value_r: np.ndarray
    flags: np.ndarray
    median_d: float
    median_r: float
    is_dead_end: bool
    alarm_score: float


@dataclass
class BatchAssessment:
    """Assessment of many states at once; every field has a leading state axis."""

    value_d: np.ndarray
    value_r: np.ndarray
    flags: np.ndarray
    median_d: np.ndarray
    median_r: np.ndarray
    is_dead_end: np.ndarray
    alarm_score: np.ndarray

    def __getitem__(self, i) -> StateAssessment:
        return StateAssessment(self.value_d[i], self.value_r[i], self.flags[i], float(self.median_d[i]),
                               float(self.median_r[i]), bool(self.is_dead_end[i]), float(self.alarm_score[i]))

    def __len__(self):
        return len(self.median_d)


def assess_from_values(value_d, value_r, delta_d, delta_r) -> BatchAssessment:
    value_d = np.asarray(value_d, dtype=np.float64)
    value_r = np.asarray(value_r, dtype=np.float64)
    md = median_over_actions(value_d)
    mr = median_over_actions(value_r)
    return BatchAssessment(value_d, value_r, flag_action(value_d, value_r, delta_d, delta_r), md, mr,
                           (md <= delta_d) & (mr <= delta_r), alarm_score(md, mr))


def assess_states(assessor: RiskAssessor, states) -> BatchAssessment:
    vd, vr = action_values(assessor, states)
    return assess_from_values(vd, vr, assessor.delta_d, assessor.delta_r)


def assess_state(assessor: RiskAssessor, state) -> StateAssessment:
    state = np.asarray(state, dtype=np.float64)
    if state.ndim != 1:
        raise InputError("assess_state takes one state vector; use assess_states for batches")
    return assess_states(assessor, state[None])[0]


class StateCache:
    """Evaluates each distinct state once; maps arbitrary state rows back to unique rows."""

    def __init__(self, states):
        states = np.asarray(states, dtype=np.float64)
        self.unique, self.inverse = np.unique(states, axis=0, return_inverse=True)
        self.inverse = self.inverse.ravel()


def first_alarm(scores, delta_d) -> Optional[int]:
    hits = np.flatnonzero(np.asarray(scores) <= delta_d)
    return int(hits[0]) if hits.size else None


def trajectory_alarm(assessor: RiskAssessor, trajectory) -> Optional[int]:
    """First step whose alarm score is at or under ``delta_d``; ``None`` if never.

    ``trajectory`` is a `TrajectoryRecord` (its decision states are scored) or
    a raw ``(T, d)`` state array.
    """
    states = getattr(trajectory, "decision_states", trajectory)
    states = _states(assessor, states)
    if len(states) == 0:
        raise ValueError("empty trajectory")
    return first_alarm(assess_states(assessor, states).alarm_score, assessor.delta_d)


def security_gap(assessor: RiskAssessor, states) -> tuple[np.ndarray, np.ndarray]:
    """``mean - CVaR_alpha`` per action for both heads on the shared particle set.

    One state gives ``(A,)`` arrays; a batch gives ``(S, A)``.
    """
    if not assessor.distributional:
        raise MethodError("security_gap needs a distributional method")
    single = np.asarray(states).ndim == 1
    pd, pr = particles(assessor, states)
    gd = pd.mean(axis=-1) - risk.cvar_alpha(pd, assessor.alpha)
    gr = pr.mean(axis=-1) - risk.cvar_alpha(pr, assessor.alpha)
    return (gd[0], gr[0]) if single else (gd, gr)


ASSESSMENT_COLUMNS = ["trajectory_id", "step", "median_d", "median_r", "alarm_score", "is_dead_end", "alarm"]


def export_assessments(assessor: RiskAssessor, trajectories, path) -> None:
    """One CSV row per decision state; ``alarm`` marks the trajectory's first alarm step."""
    all_states = np.concatenate([tr.decision_states for tr in trajectories])
    cache = StateCache(all_states)
    ua = assess_states(assessor, cache.unique)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ASSESSMENT_COLUMNS)
        pos = 0
        for tid, tr in enumerate(trajectories):
            rows = cache.inverse[pos:pos + len(tr)]
            pos += len(tr)
            first = first_alarm(ua.alarm_score[rows], assessor.delta_d)
            for t, u in enumerate(rows):
                w.writerow([tid, t, repr(float(ua.median_d[u])), repr(float(ua.median_r[u])),
                            repr(float(ua.alarm_score[u])), int(ua.is_dead_end[u]), int(first == t)])
