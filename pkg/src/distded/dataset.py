"""Offline transition store: collection, reward relabelling, sampling, and file I/O.

File format (JSON lines, UTF-8):

* line 1 -- header ``{"format": "distded-dataset", "version": 1, "env_hash": ...,
  "seed": ..., "size": ..., "n_trajectories": ..., "body_sha256": ...}``
* one line per trajectory ``{"states": [[...], ...], "actions": [...],
  "outcome": "negative", "zone_entry": 3}``

``body_sha256`` covers every byte after the header line and is checked on load.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import lifegate
from .records import Outcome, TrajectoryRecord, Transition

FORMAT_NAME = "distded-dataset"
FORMAT_VERSION = 1

D, R = "D", "R"


class FormatError(ValueError):
    pass


class SamplingError(ValueError):
    pass


@dataclass
class OfflineDataset:
    """Trajectories plus flat per-transition arrays used for minibatching."""

    trajectories: list[TrajectoryRecord]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("dataset needs at least one trajectory")
        states, nexts, acts, term, outc, traj_id = [], [], [], [], [], []
        for i, tr in enumerate(self.trajectories):
            n = len(tr)
            states.append(tr.states[:-1])
            nexts.append(tr.states[1:])
            acts.append(tr.actions)
            t = np.zeros(n, dtype=bool)
            t[-1] = True
            term.append(t)
            o = np.zeros(n, dtype=np.int8)
            o[-1] = _OUTCOME_CODE[tr.outcome]
            outc.append(o)
            traj_id.append(np.full(n, i, dtype=np.int64))
        self.states = np.concatenate(states)
        self.next_states = np.concatenate(nexts)
        self.actions = np.concatenate(acts)
        self.terminal = np.concatenate(term)
        self.outcome_code = np.concatenate(outc)
        self.trajectory_id = np.concatenate(traj_id)
        self.negative_index = np.flatnonzero(self.outcome_code == _OUTCOME_CODE[Outcome.NEGATIVE])
        self.positive_index = np.flatnonzero(self.outcome_code == _OUTCOME_CODE[Outcome.POSITIVE])
        self.metadata = dict(self.metadata)
        self.metadata["size"] = int(len(self.actions))
        self.metadata["n_trajectories"] = len(self.trajectories)

    def __len__(self):
        return len(self.actions)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    def transition(self, i) -> Transition:
        o = self.outcome_code[i]
        return Transition(tuple(self.states[i]), int(self.actions[i]), tuple(self.next_states[i]),
                          bool(self.terminal[i]), _CODE_OUTCOME[o] if o else None)

    def rewards(self, mode) -> np.ndarray:
        """Vectorised `relabel` over every stored transition."""
        if mode == D:
            return -(self.outcome_code == _OUTCOME_CODE[Outcome.NEGATIVE]).astype(np.float64)
        if mode == R:
            return (self.outcome_code == _OUTCOME_CODE[Outcome.POSITIVE]).astype(np.float64)
        raise ValueError(f"mode must be 'D' or 'R', got {mode!r}")

    @property
    def bootstrap_mask(self) -> np.ndarray:
        """1.0 where the target bootstraps from the next state; timeouts keep bootstrapping."""
        cut = (self.outcome_code == _OUTCOME_CODE[Outcome.NEGATIVE]) | (
            self.outcome_code == _OUTCOME_CODE[Outcome.POSITIVE])
        return (~cut).astype(np.float64)

    def outcome_counts(self) -> dict:
        counts = {o.value: 0 for o in Outcome}
        for tr in self.trajectories:
            counts[tr.outcome.value] += 1
        return counts


_OUTCOME_CODE = {Outcome.POSITIVE: 1, Outcome.NEGATIVE: 2, Outcome.TIMEOUT: 3}
_CODE_OUTCOME = {v: k for k, v in _OUTCOME_CODE.items()}


def relabel(t: Transition, mode) -> float:
    """Reward of a transition in the negative-outcome (D) or positive-outcome (R) MDP."""
    if mode == D:
        return -1.0 if (t.terminal and t.outcome == Outcome.NEGATIVE) else 0.0
    if mode == R:
        return 1.0 if (t.terminal and t.outcome == Outcome.POSITIVE) else 0.0
    raise ValueError(f"mode must be 'D' or 'R', got {mode!r}")


def collect_random(spec: lifegate.GridSpec, n_transitions: int, rng: np.random.Generator,
                   seed: Optional[int] = None) -> OfflineDataset:
    """Uniform-random episodes from uniformly random free cells until ``n`` transitions."""
    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    trajs = []
    total = 0
    while total < n_transitions:
        tr = lifegate.random_episode(spec, rng, anywhere=True)
        trajs.append(tr)
        total += len(tr)
    return OfflineDataset(trajs, {"env_hash": spec.hash(), "seed": seed})


def stratified_indices(ds: OfflineDataset, batch_size: int, neg_terminal_frac: float,
                       rng: np.random.Generator) -> np.ndarray:
    if batch_size < 1:
        raise SamplingError("batch_size must be >= 1")
    if not 0.0 <= neg_terminal_frac < 1.0:
        raise SamplingError("neg_terminal_frac must lie in [0, 1)")
    n_neg = math.ceil(neg_terminal_frac * batch_size) if neg_terminal_frac > 0 else 0
    if n_neg and len(ds.negative_index) == 0:
        raise SamplingError("no negative-terminal transitions to stratify on")
    n_neg = min(n_neg, batch_size)
    neg = ds.negative_index[rng.integers(len(ds.negative_index), size=n_neg)] if n_neg else np.zeros(0, np.int64)
    bulk = rng.integers(len(ds), size=batch_size - n_neg)
    idx = np.concatenate([neg, bulk])
    rng.shuffle(idx)
    return idx


def stratified_minibatch(ds: OfflineDataset, batch_size: int, neg_terminal_frac: float,
                         rng: np.random.Generator) -> list[Transition]:
    """``ceil(frac*batch)`` negative terminals plus a uniform remainder, shuffled."""
    return [ds.transition(i) for i in stratified_indices(ds, batch_size, neg_terminal_frac, rng)]


def subsample(ds: OfflineDataset, fraction: float, rng: np.random.Generator) -> OfflineDataset:
    """Keep ``round(fraction * count)`` trajectories of every outcome class.

    Kept trajectories retain their original order.
    """
    if not 0.0 < fraction <= 1.0:
        raise SamplingError("fraction must lie in (0, 1]")
    if fraction == 1.0:
        return OfflineDataset(list(ds.trajectories), dict(ds.metadata))
    keep = []
    for outcome in Outcome:
        members = [i for i, tr in enumerate(ds.trajectories) if tr.outcome == outcome]
        if not members:
            continue
        n = int(round(fraction * len(members)))
        if n == 0 and outcome != Outcome.TIMEOUT:
            raise SamplingError(f"fraction {fraction} leaves no {outcome.value} trajectories")
        keep += list(rng.choice(members, size=n, replace=False))
    keep.sort()
    meta = dict(ds.metadata)
    meta["subsample_fraction"] = fraction
    return OfflineDataset([ds.trajectories[i] for i in keep], meta)


def _traj_line(tr: TrajectoryRecord) -> str:
    return json.dumps({
        "states": tr.states.tolist(),
        "actions": tr.actions.tolist(),
        "outcome": tr.outcome.value,
        "zone_entry": tr.zone_entry_index,
    }, separators=(",", ":"))


def save(ds: OfflineDataset, path) -> None:
    body = "".join(_traj_line(tr) + "\n" for tr in ds.trajectories)
    header = {k: v for k, v in ds.metadata.items()}
    header.update({
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "body_sha256": hashlib.sha256(body.encode()).hexdigest(),
    })
    Path(path).write_text(json.dumps(header, sort_keys=True) + "\n" + body)


def load(path) -> OfflineDataset:
    text = Path(path).read_text()
    head, sep, body = text.partition("\n")
    try:
        header = json.loads(head)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: unreadable header") from exc
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: not a {FORMAT_NAME} v{FORMAT_VERSION} file")
    if hashlib.sha256(body.encode()).hexdigest() != header.get("body_sha256"):
        raise FormatError(f"{path}: body hash mismatch (truncated or edited file)")
    trajs = []
    for line in body.splitlines():
        rec = json.loads(line)
        trajs.append(TrajectoryRecord(np.array(rec["states"], dtype=np.float64), np.array(rec["actions"]),
                                      Outcome(rec["outcome"]), rec["zone_entry"]))
    meta = {k: v for k, v in header.items() if k not in ("format", "version", "body_sha256")}
    ds = OfflineDataset(trajs, meta)
    if ds.metadata["size"] != header.get("size") or ds.metadata["n_trajectories"] != header.get("n_trajectories"):
        raise FormatError(f"{path}: header counts disagree with body")
    return ds


def content_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def synthetic_chain(n_trajectories: int, length: int, outcome: Outcome, rng: np.random.Generator,
                    action_count: int = lifegate.N_ACTIONS) -> OfflineDataset:
    """Trajectories that walk a fixed chain of ``length + 1`` states and always end in ``outcome``.

    Actions are uniform and have no effect, so every action is observed at
    every chain state. With gamma = 1 the relabelled value of every state-action
    is the terminal reward (-1 in the D-MDP for negative chains, +1 in the
    R-MDP for positive ones). States are ``(k / length, 0.5)``.
    """
    if length < 1 or n_trajectories < 1:
        raise ValueError("need at least one trajectory of length >= 1")
    states = np.column_stack([np.arange(length + 1) / length, np.full(length + 1, 0.5)])
    trajs = [TrajectoryRecord(states, rng.integers(action_count, size=length), Outcome(outcome))
             for _ in range(n_trajectories)]
    return OfflineDataset(trajs, {"synthetic": Outcome(outcome).value})
