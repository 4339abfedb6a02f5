"""D- and R-value heads: DDQN point estimates and IQN return distributions.

Both kinds train offline on a relabelled dataset with double-estimator
bootstrapping, support clamping of targets, an optional CQL(H) penalty, Adam,
and hard or EMA target-network updates.

Array conventions: ``B`` batch, ``N`` online taus, ``M`` target taus,
``A`` actions. IQN outputs are ``(B, N, A)``; DDQN outputs are ``(B, A)``.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nets
from .dataset import D, R, OfflineDataset, stratified_indices

DDQN, IQN = "ddqn", "iqn"
SUPPORTS = {D: (-1.0, 0.0), R: (0.0, 1.0)}


class KindError(TypeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    n_online_taus: int = 8
    n_target_taus: int = 8
    k_eval: int = 1000
    beta: float = 0.1
    gamma: float = 1.0
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    target_update: str = "hard"
    target_update_every: int = 1000
    ema_rate: float = 0.005
    huber_kappa: float = 1.0
    neg_terminal_frac: float = 0.25
    seed: int = 0
    hidden: int = 32
    embed_dim: int = 64
    cql_per_tau: bool = False

    def validate(self):
        if self.gamma != 1.0:
            raise ConfigError("both relabelled MDPs fix gamma = 1")
        if min(self.n_online_taus, self.n_target_taus, self.k_eval, self.batch_size) < 1:
            raise ConfigError("tau counts and batch size must be positive")
        if self.beta < 0 or self.lr <= 0 or self.huber_kappa <= 0 or self.epochs < 0:
            raise ConfigError("beta >= 0, lr > 0, kappa > 0, epochs >= 0 required")
        if self.target_update not in ("hard", "ema"):
            raise ConfigError("target_update must be 'hard' or 'ema'")
        if self.target_update_every < 1 or not 0.0 < self.ema_rate <= 1.0:
            raise ConfigError("bad target update schedule")

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass
class ValueHead:
    kind: str
    mode: str
    online: dict
    target: dict
    action_count: int
    meta: dict = field(default_factory=dict)

    @property
    def support(self) -> tuple[float, float]:
        return SUPPORTS[self.mode]

    @property
    def params(self) -> list[np.ndarray]:
        return _params(self.online)

    @property
    def state_dim(self) -> int:
        first = self.online["body"] if self.kind == DDQN else self.online["torso"]
        return first.layer_dims[0]


def _params(comps: dict) -> list[np.ndarray]:
    out = []
    for c in comps.values():
        out += c.params
    return out


def _copy(comps: dict) -> dict:
    return {k: c.copy() for k, c in comps.items()}


def make_head(kind, mode, state_dim, action_count, cfg: TrainConfig, rng: np.random.Generator) -> ValueHead:
    """Fresh head with a zeroed output layer, so every initial value is 0."""
    if mode not in SUPPORTS:
        raise ValueError(f"mode must be 'D' or 'R', got {mode!r}")
    h = cfg.hidden
    if kind == DDQN:
        online = {"body": nets.init_dense([state_dim, h, h, action_count], rng, zero_output=True)}
    elif kind == IQN:
        online = {
            "torso": nets.init_dense([state_dim, h], rng, relu_output=True),
            "embed": nets.init_embedding(cfg.embed_dim, h, rng),
            "head": nets.init_dense([h, h, action_count], rng, zero_output=True),
        }
    else:
        raise KindError(f"unknown head kind {kind!r}")
    return ValueHead(kind, mode, online, _copy(online), action_count)


# --- forward / backward ------------------------------------------------------

def _iqn_forward(comps: dict, states, taus, keep_cache=False, features=None):
    """``states (B, d)`` with ``taus (B, N)`` or a shared ``(N,)`` -> ``(B, N, A)``."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    phi, tcache = nets.forward(comps["torso"], states, return_cache=True)
    psi, ecache = nets.quantile_embed(taus, comps["embed"], return_cache=True, features=features)
    if psi.ndim == 2:
        psi = psi[None]
    h = phi[:, None, :] * psi
    b, n, width = h.shape
    out, hcache = nets.forward(comps["head"], h.reshape(b * n, width), return_cache=True)
    out = out.reshape(b, n, -1)
    if keep_cache:
        return out, (tcache, ecache, hcache, phi, psi)
    return out


def _iqn_backward(comps: dict, cache, dout) -> list[np.ndarray]:
    tcache, ecache, hcache, phi, psi = cache
    b, n, a = dout.shape
    g_head = nets.backward(comps["head"], None, dout.reshape(b * n, a), cache=hcache)
    dh = g_head.inputs.reshape(b, n, -1)
    dphi = (dh * psi).sum(axis=1)
    dpsi = dh * phi[:, None, :]
    if ecache[0].ndim == 2:
        dpsi = dpsi.sum(axis=0)
    g_embed = nets.embedding_backward(comps["embed"], ecache, dpsi)
    g_torso = nets.backward(comps["torso"], None, dphi, cache=tcache)
    return g_torso.params + g_embed + g_head.params


def _ddqn_forward(comps: dict, states, keep_cache=False):
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    return nets.forward(comps["body"], states, return_cache=keep_cache)


def iqn_values(head: ValueHead, states, taus, clamp=True) -> np.ndarray:
    """Quantile values at ``taus`` for every action.

    A single state gives ``(len(taus), A)``; a batch ``(B, d)`` gives
    ``(B, len(taus), A)``. The same taus are used for every state. No
    non-crossing constraint is imposed, so values need not be monotone in tau.
    """
    if head.kind != IQN:
        raise KindError("iqn_values needs an IQN head")
    states = np.asarray(states, dtype=np.float64)
    single = states.ndim == 1
    out = _iqn_forward(head.online, states, np.asarray(taus, dtype=np.float64).ravel())
    if clamp:
        out = np.clip(out, *head.support)
    return out[0] if single else out


def q_values(head: ValueHead, states, clamp=True) -> np.ndarray:
    if head.kind != DDQN:
        raise KindError("q_values needs a DDQN head")
    states = np.asarray(states, dtype=np.float64)
    out = _ddqn_forward(head.online, states)
    if clamp:
        out = np.clip(out, *head.support)
    return out[0] if states.ndim == 1 else out


# --- losses ----------------------------------------------------------------

def quantile_huber_loss(pred, taus, targets, kappa=1.0):
    """Asymmetric Huber quantile loss averaged over every (pred, target) pair.

    ``pred`` and ``taus`` are ``(B, N)`` (or ``(N,)``), ``targets`` ``(B, M)``.
    Returns ``(loss, d loss / d pred)``.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    pred = np.asarray(pred, dtype=np.float64)
    single = pred.ndim == 1
    pred = np.atleast_2d(pred)
    taus = np.atleast_2d(np.asarray(taus, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    u = targets[:, None, :] - pred[:, :, None]
    absu = np.abs(u)
    small = absu <= kappa
    huber = np.where(small, 0.5 * u * u, kappa * (absu - 0.5 * kappa))
    weight = np.abs(taus[:, :, None] - (u < 0.0))
    count = u.size
    loss = float(np.sum(weight * huber) / (kappa * count))
    dhuber = np.where(small, u, kappa * np.sign(u))
    grad = -np.sum(weight * dhuber, axis=2) / (kappa * count)
    return loss, (grad[0] if single else grad)


def cql_penalty(q, data_action):
    """CQL(H): ``logsumexp(q) - q[data_action]``, averaged over a batch.

    ``q`` is ``(A,)`` or ``(B, A)`` with ``data_action`` an int or ``(B,)``.
    Returns ``(penalty, d penalty / d q)``.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    a = np.atleast_1d(np.asarray(data_action))
    if a.shape[0] != q.shape[0] or np.any(a < 0) or np.any(a >= q.shape[1]):
        raise ValueError("data_action out of range")
    qmax = q.max(axis=1, keepdims=True)
    ex = np.exp(q - qmax)
    z = ex.sum(axis=1, keepdims=True)
    lse = (qmax + np.log(z))[:, 0]
    rows = np.arange(q.shape[0])
    b = q.shape[0]
    value = float(np.mean(lse - q[rows, a]))
    grad = ex / z
    grad[rows, a] -= 1.0
    grad /= b
    return value, (grad[0] if single else grad)


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    bootstrap: np.ndarray


def batch_from(ds: OfflineDataset, idx, mode) -> Batch:
    return Batch(ds.states[idx], ds.actions[idx], ds.rewards(mode)[idx], ds.next_states[idx],
                 ds.bootstrap_mask[idx])


class _Relabelled:
    """Cached reward / mask arrays so the training loop does not recompute them."""

    def __init__(self, ds: OfflineDataset, mode):
        self.ds = ds
        self.rewards = ds.rewards(mode)
        self.mask = ds.bootstrap_mask

    def batch(self, idx) -> Batch:
        ds = self.ds
        return Batch(ds.states[idx], ds.actions[idx], self.rewards[idx], ds.next_states[idx], self.mask[idx])


def distributional_target(head: ValueHead, batch: Batch, next_taus, gamma=1.0) -> np.ndarray:
    """Target particles ``r + gamma * Z_target(s', a*)`` clamped to the support.

    ``a*`` maximises the online net's mean over the same ``next_taus`` at
    ``s'``. Terminal transitions (bootstrap mask 0) reduce to the reward.
    """
    if head.kind != IQN:
        raise KindError("distributional_target needs an IQN head")
    next_taus = np.atleast_2d(np.asarray(next_taus, dtype=np.float64))
    s2 = np.atleast_2d(batch.next_states)
    feats = nets.cosine_features(next_taus, head.online["embed"].embed_dim)
    online_next = _iqn_forward(head.online, s2, next_taus, features=feats)
    a_star = online_next.mean(axis=1).argmax(axis=1)
    target_next = _iqn_forward(head.target, s2, next_taus, features=feats)
    z = target_next[np.arange(len(a_star)), :, a_star]
    y = np.asarray(batch.rewards)[:, None] + gamma * np.asarray(batch.bootstrap)[:, None] * z
    return np.clip(y, *head.support)


def ddqn_target(head: ValueHead, batch: Batch, gamma=1.0) -> np.ndarray:
    s2 = np.atleast_2d(batch.next_states)
    a_star = _ddqn_forward(head.online, s2).argmax(axis=1)
    q_next = _ddqn_forward(head.target, s2)[np.arange(len(a_star)), a_star]
    return np.clip(batch.rewards + gamma * batch.bootstrap * q_next, *head.support)


@dataclass
class LossReport:
    rl_loss: float
    cql_loss: float
    total: float


def ddqn_td_loss(head: ValueHead, batch: Batch, beta=0.0, use_cql=False, gamma=1.0):
    """Mean squared TD error (plus ``beta`` * CQL). Returns ``(LossReport, grads)``."""
    if head.kind != DDQN:
        raise KindError("ddqn_td_loss needs a DDQN head")
    y = ddqn_target(head, batch, gamma)
    q, cache = _ddqn_forward(head.online, batch.states, keep_cache=True)
    rows = np.arange(len(y))
    a = np.asarray(batch.actions)
    diff = q[rows, a] - y
    rl = float(np.mean(diff * diff))
    dq = np.zeros_like(q)
    dq[rows, a] = 2.0 * diff / len(y)
    cql, dcql = cql_penalty(q, a)
    if use_cql:
        dq += beta * dcql
    grads = nets.backward(head.online["body"], None, dq, cache=cache).params
    w = beta if use_cql else 0.0
    return LossReport(rl, cql, rl + w * cql), grads


def iqn_loss(head: ValueHead, batch: Batch, taus, next_taus, kappa=1.0, beta=0.0, use_cql=False,
             gamma=1.0, cql_per_tau=False):
    """Quantile Huber loss at ``taus`` against target particles (plus ``beta`` * CQL)."""
    if head.kind != IQN:
        raise KindError("iqn_loss needs an IQN head")
    y = distributional_target(head, batch, next_taus, gamma)
    taus = np.atleast_2d(taus)
    z, cache = _iqn_forward(head.online, batch.states, taus, keep_cache=True)
    b, n, _ = z.shape
    rows = np.arange(b)
    a = np.asarray(batch.actions)
    pred = z[rows, :, a]
    rl, dpred = quantile_huber_loss(pred, taus, y, kappa)
    dz = np.zeros_like(z)
    dz[rows, :, a] = dpred
    if cql_per_tau:
        cql, dflat = cql_penalty(z.reshape(b * n, -1), np.repeat(a, n))
        dcql = dflat.reshape(z.shape)
    else:
        cql, dq = cql_penalty(z.mean(axis=1), a)
        dcql = np.repeat(dq[:, None, :] / n, n, axis=1)
    if use_cql:
        dz += beta * dcql
    grads = _iqn_backward(head.online, cache, dz)
    w = beta if use_cql else 0.0
    return LossReport(rl, cql, rl + w * cql), grads


# --- training ----------------------------------------------------------------

def update_target(head: ValueHead, rule="hard", rate=0.005) -> None:
    for t, o in zip(_params(head.target), _params(head.online)):
        if rule == "hard":
            t[...] = o
        else:
            t += rate * (o - t)


@dataclass
class TrainLog:
    rl_loss: np.ndarray
    cql_loss: np.ndarray
    total: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "rl_loss", "cql_loss", "total"])
            for i in range(len(self.total)):
                w.writerow([i + 1, repr(float(self.rl_loss[i])), repr(float(self.cql_loss[i])),
                            repr(float(self.total[i]))])


def train(ds: OfflineDataset, mode, cfg: TrainConfig, kind=IQN, use_cql=True,
          action_count=5, progress=None) -> tuple[ValueHead, TrainLog]:
    """Fit a D- or R-head on ``ds``.

    Minibatch indices and tau draws come from separate streams seeded by
    ``cfg.seed``, so DDQN and IQN heads trained with the same seed see the same
    minibatch sequence.
    """
    cfg.validate()
    if cfg.beta > 0 and not use_cql:
        raise ConfigError("beta > 0 given but the CQL penalty is disabled")
    if len(ds) == 0:
        raise ValueError("empty dataset")
    init_rng = np.random.default_rng([cfg.seed, 0])
    batch_rng = np.random.default_rng([cfg.seed, 1])
    tau_rng = np.random.default_rng([cfg.seed, 2])
    head = make_head(kind, mode, ds.state_dim, action_count, cfg, init_rng)
    head.meta = {"cfg": asdict(cfg), "cfg_hash": cfg.hash(), "use_cql": use_cql,
                 "dataset_size": len(ds), "env_hash": ds.metadata.get("env_hash")}
    params = head.params
    opt = nets.adam_init(params, lr=cfg.lr)
    data = _Relabelled(ds, mode)
    steps_per_epoch = -(-len(ds) // cfg.batch_size)
    n_steps = cfg.epochs * steps_per_epoch
    rl_log = np.zeros(n_steps)
    cql_log = np.zeros(n_steps)
    tot_log = np.zeros(n_steps)
    for step in range(n_steps):
        idx = stratified_indices(ds, cfg.batch_size, cfg.neg_terminal_frac, batch_rng)
        batch = data.batch(idx)
        if kind == IQN:
            b = len(idx)
            taus = tau_rng.random((b, cfg.n_online_taus))
            next_taus = tau_rng.random((b, cfg.n_target_taus))
            report, grads = iqn_loss(head, batch, taus, next_taus, cfg.huber_kappa, cfg.beta, use_cql,
                                     cfg.gamma, cfg.cql_per_tau)
        else:
            report, grads = ddqn_td_loss(head, batch, cfg.beta, use_cql, cfg.gamma)
        nets.adam_step(params, grads, opt)
        rl_log[step], cql_log[step], tot_log[step] = report.rl_loss, report.cql_loss, report.total
        if (step + 1) % cfg.target_update_every == 0:
            update_target(head, cfg.target_update, cfg.ema_rate)
        if progress is not None and (step + 1) % steps_per_epoch == 0:
            progress((step + 1) // steps_per_epoch, report)
    return head, TrainLog(rl_log, cql_log, tot_log)


# --- checkpoints -----------------------------------------------------------

def save_head(head: ValueHead, path) -> None:
    meta = dict(head.meta)
    meta.update({"kind": head.kind, "mode": head.mode, "support": list(head.support),
                 "action_count": head.action_count})
    nets.save_params(path, head.online, meta)


def load_head(path) -> ValueHead:
    comps, manifest = nets.load_params(path)
    meta = {k: v for k, v in manifest.items()
            if k not in ("components", "n_params", "kind", "mode", "support", "action_count")}
    return ValueHead(manifest["kind"], manifest["mode"], comps, _copy(comps), manifest["action_count"], meta)
