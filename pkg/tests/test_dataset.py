import numpy as np
import pytest

from distded import dataset, lifegate
from distded.dataset import D, R
from distded.records import Outcome, TrajectoryRecord, Transition


@pytest.fixture(scope="module")
def spec():
    return lifegate.default_spec()


@pytest.fixture(scope="module")
def small(spec):
    return dataset.collect_random(spec, 5000, np.random.default_rng(0), 0)


def _traj(outcome, n=3):
    states = np.column_stack([np.arange(n + 1) / 9.0, np.zeros(n + 1)])
    return TrajectoryRecord(states, np.full(n, 3), outcome)


def test_transition_invariant():
    with pytest.raises(ValueError):
        Transition((0.0, 0.0), 1, (0.1, 0.0), True, None)
    with pytest.raises(ValueError):
        Transition((0.0, 0.0), 1, (0.1, 0.0), False, Outcome.NEGATIVE)


def test_relabel_rules():
    neg = Transition((0, 0), 0, (1, 0), True, Outcome.NEGATIVE)
    pos = Transition((0, 0), 0, (1, 0), True, Outcome.POSITIVE)
    out = Transition((0, 0), 0, (1, 0), True, Outcome.TIMEOUT)
    mid = Transition((0, 0), 0, (1, 0), False)
    assert dataset.relabel(neg, D) == -1.0 and dataset.relabel(neg, R) == 0.0
    assert dataset.relabel(pos, D) == 0.0 and dataset.relabel(pos, R) == 1.0
    for t in (mid, out):
        assert dataset.relabel(t, D) == 0.0 and dataset.relabel(t, R) == 0.0


def test_vector_rewards_match_relabel(small):
    rd, rr = small.rewards(D), small.rewards(R)
    assert set(np.unique(rd)) <= {-1.0, 0.0} and set(np.unique(rr)) <= {0.0, 1.0}
    for i in range(0, len(small), 97):
        t = small.transition(i)
        assert rd[i] == dataset.relabel(t, D) and rr[i] == dataset.relabel(t, R)


def test_timeouts_keep_bootstrapping(small):
    timeout = small.outcome_code == 3
    assert timeout.any()
    assert np.all(small.bootstrap_mask[timeout] == 1.0)
    cut = (small.outcome_code == 1) | (small.outcome_code == 2)
    assert np.all(small.bootstrap_mask[cut] == 0.0)


def test_indices_partition_terminals(small):
    term = np.flatnonzero(small.terminal & (small.outcome_code != 3))
    both = np.sort(np.concatenate([small.negative_index, small.positive_index]))
    assert np.array_equal(term, both)
    assert not set(small.negative_index) & set(small.positive_index)


def test_collect_n1(spec):
    ds = dataset.collect_random(spec, 1, np.random.default_rng(0))
    assert len(ds) >= 1 and ds.metadata["size"] == len(ds)
    with pytest.raises(ValueError):
        dataset.collect_random(spec, 0, np.random.default_rng(0))


def test_action_histogram_uniform(spec):
    ds = dataset.collect_random(spec, 100_000, np.random.default_rng(1))
    freq = np.bincount(ds.actions, minlength=5) / len(ds)
    assert np.all((freq >= 0.19) & (freq <= 0.21))
    counts = ds.outcome_counts()
    assert counts["negative"] > 0 and counts["positive"] > 0


def test_only_last_transition_terminal(small):
    for tr in small.trajectories[:50]:
        flags = [t.terminal for t in tr.transitions]
        assert flags[-1] and not any(flags[:-1])
        assert tr.transitions[-1].outcome == tr.outcome


def test_stratified_counts(small):
    rng = np.random.default_rng(2)
    idx = dataset.stratified_indices(small, 32, 0.25, rng)
    assert len(idx) == 32
    batch = dataset.stratified_minibatch(small, 32, 0.25, rng)
    n_neg = sum(t.terminal and t.outcome == Outcome.NEGATIVE for t in batch)
    assert n_neg >= 8
    plain = dataset.stratified_indices(small, 40, 0.0, rng)
    assert len(plain) == 40


def test_stratified_draws_exact_quota():
    # a dataset whose only negative terminals are few lets us count the forced quota exactly
    trajs = [_traj(Outcome.POSITIVE, 5) for _ in range(20)] + [_traj(Outcome.NEGATIVE, 1)]
    ds = dataset.OfflineDataset(trajs)
    rng = np.random.default_rng(3)
    for _ in range(20):
        idx = dataset.stratified_indices(ds, 32, 0.25, rng)
        assert np.sum(idx == ds.negative_index[0]) >= 8


def test_stratified_long_run_frequency(small):
    rng = np.random.default_rng(4)
    target = small.negative_index[0]
    draws = 0
    hits = 0
    for _ in range(1000):
        idx = dataset.stratified_indices(small, 1000, 0.25, rng)
        hits += np.sum(idx == target)
        draws += 1000
    expected = 0.25 / len(small.negative_index) + 0.75 / len(small)
    assert abs(hits / draws - expected) <= 0.1 * expected


def test_stratified_errors():
    ds = dataset.OfflineDataset([_traj(Outcome.POSITIVE)])
    rng = np.random.default_rng(0)
    with pytest.raises(dataset.SamplingError):
        dataset.stratified_indices(ds, 8, 0.25, rng)
    with pytest.raises(dataset.SamplingError):
        dataset.stratified_indices(ds, 0, 0.0, rng)
    with pytest.raises(dataset.SamplingError):
        dataset.stratified_indices(ds, 8, 1.0, rng)


def test_subsample_ratio():
    trajs = [_traj(Outcome.POSITIVE) for _ in range(100)] + [_traj(Outcome.NEGATIVE) for _ in range(20)]
    ds = dataset.OfflineDataset(trajs)
    half = dataset.subsample(ds, 0.5, np.random.default_rng(0))
    assert half.outcome_counts() == {"positive": 50, "negative": 10, "timeout": 0}
    for f in (0.10, 0.25, 0.50, 0.75):
        sub = dataset.subsample(ds, f, np.random.default_rng(1))
        c = sub.outcome_counts()
        assert abs(c["positive"] - 100 * f) <= 1 and abs(c["negative"] - 20 * f) <= 1
    same = dataset.subsample(ds, 1.0, np.random.default_rng(0))
    assert len(same.trajectories) == len(trajs)


def test_subsample_empty_class_rejected():
    ds = dataset.OfflineDataset([_traj(Outcome.POSITIVE) for _ in range(30)] + [_traj(Outcome.NEGATIVE)])
    with pytest.raises(dataset.SamplingError):
        dataset.subsample(ds, 0.1, np.random.default_rng(0))
    with pytest.raises(dataset.SamplingError):
        dataset.subsample(ds, 0.0, np.random.default_rng(0))


def test_save_load_roundtrip(small, tmp_path):
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    dataset.save(small, p1)
    back = dataset.load(p1)
    assert back.metadata["size"] == len(small) == len(back)
    assert np.array_equal(back.states, small.states) and np.array_equal(back.actions, small.actions)
    dataset.save(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_load_detects_corruption(small, tmp_path):
    p = tmp_path / "a.jsonl"
    dataset.save(small, p)
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(dataset.FormatError):
        dataset.load(p)
    p.write_text("not json\n")
    with pytest.raises(dataset.FormatError):
        dataset.load(p)


def test_collect_deterministic(spec, tmp_path):
    for name in ("a", "b"):
        dataset.save(dataset.collect_random(spec, 3000, np.random.default_rng(5), 5), tmp_path / name)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
