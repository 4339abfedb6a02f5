import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from distded import dataset, learners, lifegate
from distded.dataset import D, R
from distded.learners import DDQN, IQN, Batch, TrainConfig
from distded.records import Outcome, TrajectoryRecord
from conftest import central_diff, rel_err


def _head(kind, mode, seed=0, zero=True):
    h = learners.make_head(kind, mode, 2, 5, TrainConfig(hidden=8, embed_dim=8), np.random.default_rng(seed))
    if not zero:
        rng = np.random.default_rng(seed + 100)
        for p in h.params:
            p[...] = rng.normal(scale=0.5, size=p.shape)
        learners.update_target(h)
        for p in learners._params(h.target):
            p += rng.normal(scale=0.1, size=p.shape)
    return h


def _batch(rng, b=6, terminal=None):
    term = rng.random(b) < 0.3 if terminal is None else np.full(b, terminal)
    return Batch(rng.random((b, 2)), rng.integers(0, 5, b), np.where(term, -1.0, 0.0), rng.random((b, 2)),
                 (~term).astype(float))


def test_fresh_heads_output_zero():
    for mode in (D, R):
        h = _head(IQN, mode)
        v = learners.iqn_values(h, np.array([0.2, 0.7]), [0.1, 0.5, 0.9])
        assert v.shape == (3, 5) and np.all(v == 0.0)
        q = learners.q_values(_head(DDQN, mode), np.array([[0.2, 0.7]]))
        assert q.shape == (1, 5) and np.all(q == 0.0)


def test_kind_errors():
    with pytest.raises(learners.KindError):
        learners.iqn_values(_head(DDQN, D), np.zeros(2), [0.5])
    with pytest.raises(learners.KindError):
        learners.q_values(_head(IQN, D), np.zeros(2))
    with pytest.raises(learners.KindError):
        learners.ddqn_td_loss(_head(IQN, D), _batch(np.random.default_rng(0)))
    with pytest.raises(learners.KindError):
        learners.make_head("c51", D, 2, 5, TrainConfig(), np.random.default_rng(0))


def test_supports_and_clamping():
    for mode, (lo, hi) in ((D, (-1, 0)), (R, (0, 1))):
        h = _head(IQN, mode, zero=False)
        v = learners.iqn_values(h, np.random.default_rng(1).random((20, 2)), np.linspace(0, 1, 11))
        assert v.min() >= lo and v.max() <= hi
        raw = learners.iqn_values(h, np.random.default_rng(1).random((20, 2)), np.linspace(0, 1, 11), clamp=False)
        assert raw.min() < lo or raw.max() > hi


def test_quantile_huber_examples():
    loss, g = learners.quantile_huber_loss(np.array([0.3, -0.2]), np.array([0.1, 0.9]), np.array([0.3, -0.2, 0.3]))
    assert loss > 0
    loss, _ = learners.quantile_huber_loss(np.array([0.4]), np.array([0.5]), np.array([0.4]))
    assert loss == 0.0
    loss, _ = learners.quantile_huber_loss(np.array([0.0]), np.array([0.5]), np.array([1.0]), kappa=1.0)
    assert loss == pytest.approx(0.25)
    with pytest.raises(ValueError):
        learners.quantile_huber_loss(np.zeros(1), np.zeros(1), np.zeros(1), kappa=0.0)


def _hand_quantile_loss(pred, taus, targets, kappa):
    total, count = 0.0, 0
    for i in range(len(pred)):
        for j in range(len(targets)):
            u = targets[j] - pred[i]
            h = 0.5 * u * u if abs(u) <= kappa else kappa * (abs(u) - 0.5 * kappa)
            total += abs(taus[i] - (1.0 if u < 0 else 0.0)) * h / kappa
            count += 1
    return total / count


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(0.2, 2.0), st.integers(0, 10_000))
def test_quantile_huber_matches_hand_loop_and_fd(n, m, kappa, seed):
    rng = np.random.default_rng(seed)
    pred, taus, targets = rng.uniform(-1, 1, n), rng.random(n), rng.uniform(-1, 1, m)
    loss, grad = learners.quantile_huber_loss(pred, taus, targets, kappa)
    assert loss == pytest.approx(_hand_quantile_loss(pred, taus, targets, kappa), abs=1e-12)
    u = targets[None, :] - pred[:, None]
    if np.min(np.abs(np.abs(u) - kappa)) > 1e-3 and np.min(np.abs(u)) > 1e-3:
        num = central_diff(lambda: learners.quantile_huber_loss(pred, taus, targets, kappa)[0], pred)
        assert rel_err(grad, num) < 1e-4


def test_cql_examples():
    v, _ = learners.cql_penalty(np.zeros(5), 3)
    assert v == pytest.approx(math.log(5))
    v, _ = learners.cql_penalty(np.array([1.0, 0.0]), 0)
    assert v == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert v == pytest.approx(0.31326, abs=1e-5)
    with pytest.raises(ValueError):
        learners.cql_penalty(np.zeros(5), 5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8), st.data())
def test_cql_nonnegative(q, data):
    a = data.draw(st.integers(0, len(q) - 1))
    assert learners.cql_penalty(np.array(q), a)[0] >= 0.0


def test_cql_gradient_fd(rng):
    q = rng.normal(size=(4, 5))
    a = rng.integers(0, 5, 4)
    _, g = learners.cql_penalty(q, a)
    assert rel_err(g, central_diff(lambda: learners.cql_penalty(q, a)[0], q)) < 1e-6


def test_distributional_target_terminal_cases(rng):
    h = _head(IQN, D, zero=False)
    b = _batch(rng, 4, terminal=True)
    y = learners.distributional_target(h, b, rng.random((4, 8)))
    assert np.all(y == -1.0)
    b.rewards[:] = 0.0  # terminal positive in mode D
    assert np.all(learners.distributional_target(h, b, rng.random((4, 8))) == 0.0)


def test_distributional_target_constant_net(rng):
    for c, mode, want in ((-0.3, D, -0.3), (0.4, D, 0.0), (0.7, R, 0.7), (1.6, R, 1.0)):
        h = _head(IQN, mode)
        h.target["head"].biases[-1][:] = c
        b = _batch(rng, 5, terminal=False)
        b.rewards[:] = 0.0
        y = learners.distributional_target(h, b, rng.random((5, 8)))
        assert np.allclose(y, want)


def test_bootstrap_action_is_online_argmax(rng):
    h = _head(IQN, R)
    h.online["head"].biases[-1][:] = [0.1, 0.2, 0.9, 0.3, 0.0]
    h.target["head"].biases[-1][:] = [0.5, 0.5, 0.25, 0.5, 0.5]
    b = _batch(rng, 3, terminal=False)
    b.rewards[:] = 0.0
    assert np.allclose(learners.distributional_target(h, b, rng.random((3, 8))), 0.25)


def test_ddqn_terminal_negative_loss_is_one(rng):
    h = _head(DDQN, D)
    b = _batch(rng, 7, terminal=True)
    report, _ = learners.ddqn_td_loss(h, b)
    assert report.rl_loss == 1.0


def test_ddqn_perfect_prediction_zero_loss(rng):
    h = _head(DDQN, D)
    b = _batch(rng, 7, terminal=True)
    b.rewards[:] = 0.0
    assert learners.ddqn_td_loss(h, b)[0].rl_loss == 0.0


def _fd_check(head, loss_fn, tol=1e-4):
    _, grads = loss_fn()
    worst = 0.0
    for p, g in zip(head.params, grads):
        num = central_diff(lambda: loss_fn()[0].total, p)
        worst = max(worst, rel_err(g, num, floor=1e-6))
    assert worst < tol


def test_ddqn_gradient_fd(rng):
    h = _head(DDQN, D, zero=False)
    b = _batch(rng)
    _fd_check(h, lambda: learners.ddqn_td_loss(h, b, beta=0.3, use_cql=True))


def test_iqn_gradient_fd(rng):
    h = _head(IQN, R, zero=False)
    b = _batch(rng)
    b.rewards = np.where(b.bootstrap == 0, 1.0, 0.0)
    taus, nt = rng.random((6, 4)), rng.random((6, 4))
    _fd_check(h, lambda: learners.iqn_loss(h, b, taus, nt, beta=0.2, use_cql=True), tol=1e-3)
    _fd_check(h, lambda: learners.iqn_loss(h, b, taus, nt, beta=0.2, use_cql=True, cql_per_tau=True), tol=1e-3)


def test_loss_report_total_is_exact(rng):
    h = _head(IQN, D, zero=False)
    b = _batch(rng)
    r, _ = learners.iqn_loss(h, b, rng.random((6, 8)), rng.random((6, 8)), beta=0.37, use_cql=True)
    assert r.total == r.rl_loss + 0.37 * r.cql_loss


@pytest.fixture(scope="module")
def tiny():
    return dataset.collect_random(lifegate.default_spec(), 600, np.random.default_rng(0), 0)


def test_zero_epochs_returns_init(tiny):
    cfg = TrainConfig(epochs=0, hidden=8, embed_dim=8)
    h, log = learners.train(tiny, D, cfg, IQN, use_cql=True)
    fresh = learners.make_head(IQN, D, 2, 5, cfg, np.random.default_rng([cfg.seed, 0]))
    assert all(np.array_equal(a, b) for a, b in zip(h.params, fresh.params))
    assert len(log.total) == 0


def test_beta_without_cql_is_config_error(tiny):
    with pytest.raises(learners.ConfigError):
        learners.train(tiny, D, TrainConfig(epochs=1, beta=0.1), DDQN, use_cql=False)
    with pytest.raises(learners.ConfigError):
        TrainConfig(gamma=0.99).validate()


def test_beta_zero_matches_no_penalty_bitwise(tiny):
    for kind in (DDQN, IQN):
        cfg = TrainConfig(epochs=2, beta=0.0, hidden=8, embed_dim=8, batch_size=32)
        a, la = learners.train(tiny, R, cfg, kind, use_cql=True)
        b, lb = learners.train(tiny, R, cfg, kind, use_cql=False)
        assert all(np.array_equal(x, y) for x, y in zip(a.params, b.params))
        assert np.array_equal(la.rl_loss, lb.rl_loss)


def test_four_variants_train_and_are_deterministic(tiny):
    for kind in (DDQN, IQN):
        for cql in (False, True):
            cfg = TrainConfig(epochs=1, beta=0.1 if cql else 0.0, hidden=8, embed_dim=8, batch_size=32)
            a, la = learners.train(tiny, D, cfg, kind, use_cql=cql)
            b, lb = learners.train(tiny, D, cfg, kind, use_cql=cql)
            assert np.all(np.isfinite(la.total)) and len(la.total) == -(-len(tiny) // 32)
            assert all(np.array_equal(x, y) for x, y in zip(a.params, b.params))
            assert np.array_equal(la.total, la.rl_loss + cfg.beta * la.cql_loss)


def test_hard_update_copies():
    h = _head(IQN, D, zero=False)
    learners.update_target(h, "hard")
    assert all(np.array_equal(a, b) for a, b in zip(learners._params(h.online), learners._params(h.target)))


def test_ema_update_moves_toward_online():
    h = _head(DDQN, R, zero=False)
    dist = lambda: math.sqrt(sum(np.sum((a - b) ** 2) for a, b in zip(learners._params(h.online), learners._params(h.target))))
    before = dist()
    learners.update_target(h, "ema", 0.005)
    assert dist() < before
    assert dist() == pytest.approx(0.995 * before)


def test_fixed_point_small():
    cfg = TrainConfig(epochs=20, batch_size=32, beta=0.0, target_update_every=50)
    neg = dataset.synthetic_chain(60, 4, Outcome.NEGATIVE, np.random.default_rng(0))
    h, _ = learners.train(neg, D, cfg, DDQN, use_cql=False)
    last = neg.states[neg.negative_index]
    assert learners.q_values(h, last).mean() <= -0.8


def test_checkpoint_roundtrip(tmp_path, tiny):
    cfg = TrainConfig(epochs=1, hidden=8, embed_dim=8, batch_size=64)
    h, log = learners.train(tiny, R, cfg, IQN, use_cql=True)
    learners.save_head(h, tmp_path / "r")
    back = learners.load_head(tmp_path / "r")
    assert back.kind == IQN and back.mode == R and back.support == (0.0, 1.0)
    assert back.meta["cfg_hash"] == cfg.hash()
    for a, b in zip(h.params, back.params):
        assert np.array_equal(a.astype(np.float32).astype(np.float64), b)
    log.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,rl_loss,cql_loss,total" and len(lines) == len(log.total) + 1
