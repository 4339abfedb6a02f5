import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from distded import dataset, dead_end, harness, learners, lifegate, nets
from distded.dataset import D, R
from distded.dead_end import DED, DISTDED, RiskAssessor
from distded.harness import GapSample, RocPoint
from distded.learners import DDQN, TrainConfig
from distded.records import Outcome, TrajectoryRecord


@pytest.fixture(scope="module")
def spec():
    return lifegate.default_spec()


def zone_oracle_heads():
    """DDQN heads whose values step from safe to doomed exactly at the zone column x = 6."""
    def head(mode, scale, offset):
        w1 = np.array([[9.0, 9.0], [0.0, 0.0]])
        b1 = np.array([-5.0, -6.0])
        w2 = np.tile(np.array([[scale], [-scale]]), (1, 5))
        body = nets.DenseNet([2, 2, 5], [w1, w2], [b1, np.full(5, offset)])
        return learners.ValueHead(DDQN, mode, {"body": body}, {"body": body.copy()}, 5)
    return head(D, -1.0, 0.0), head(R, -1.0, 1.0)


def never_heads():
    cfg = TrainConfig(hidden=4)
    d = learners.make_head(DDQN, D, 2, 5, cfg, np.random.default_rng(0))
    r = learners.make_head(DDQN, R, 2, 5, cfg, np.random.default_rng(1))
    r.online["body"].biases[-1][:] = 1.0
    return d, r


def test_oracle_alarm_at_zone_entry(spec):
    d, r = zone_oracle_heads()
    a = RiskAssessor(d, r, DED)
    res = harness.early_warning_study({"oracle": a}, lifegate.suboptimal_policies(spec, 0.1), 50,
                                      np.random.default_rng(0), spec)
    stats = res.stats()["oracle"]
    gaps = [s.gap for s in res.samples["oracle"] if s.gap is not None]
    assert gaps and all(g == 0 for g in gaps)
    assert stats["mean"] == 0.0 and stats["missed_fraction"] == 0.0


def test_never_alarming_assessor(spec, tmp_path):
    a = RiskAssessor(*never_heads(), DED)
    res = harness.early_warning_study({"never": a}, lifegate.suboptimal_policies(spec), 10,
                                      np.random.default_rng(0), spec)
    stats = res.stats()["never"]
    assert stats["n"] == 0 and stats["missed_fraction"] == 1.0
    res.write_csv(tmp_path / "g.csv")
    assert len((tmp_path / "g.csv").read_text().splitlines()) == 21


def test_paired_differences_alignment():
    res = harness.EarlyWarningResult([None] * 3, ["p"] * 3, {
        "a": [GapSample(0, 1, 5), GapSample(1, None, 5), GapSample(2, 2, 4)],
        "b": [GapSample(0, 4, 5), GapSample(1, 3, 5), GapSample(2, 3, 4)],
    })
    assert res.paired_differences("a", "b").tolist() == [3.0, 1.0]
    with pytest.raises(ValueError):
        harness.early_warning_study({}, [], 0, np.random.default_rng(0))


def test_auc_examples():
    diag = [RocPoint(0, 1, t, t) for t in np.linspace(0, 1, 7)]
    assert harness.auc(diag) == pytest.approx(0.5)
    assert harness.auc([(0.0, 1.0), (1.0, 1.0)]) == pytest.approx(1.0)
    with pytest.raises(harness.EvaluationError):
        harness.auc([(0.2, 0.3)])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=2, max_size=20), st.randoms())
def test_auc_invariant_to_order_and_duplicates(pts, rnd):
    base = harness.auc(pts)
    shuffled = list(pts) + list(pts[:3])
    rnd.shuffle(shuffled)
    assert harness.auc(shuffled) == pytest.approx(base, abs=1e-12)
    assert 0.0 <= base <= 1.0


def _mixed_trajs(spec, n=60, seed=0):
    return harness.heldout_trajectories(spec, n, np.random.default_rng(seed))


def test_roc_extremes_and_monotone(spec):
    d, r = zone_oracle_heads()
    trajs = _mixed_trajs(spec)
    pts = harness.roc_sweep(RiskAssessor(d, r, DED), trajs)
    assert len(pts) == 100
    assert (pts[-1].tpr, pts[-1].fpr) == (1.0, 1.0)
    assert pts[0].delta_d == -1.0 and pts[0].delta_r == 0.0
    assert all(p.delta_r - p.delta_d == pytest.approx(1.0) for p in pts)
    assert np.all(np.diff([p.tpr for p in pts]) >= 0) and np.all(np.diff([p.fpr for p in pts]) >= 0)
    # the oracle separates perfectly: negatives all cross the zone, positives never do
    assert harness.auc(pts) == pytest.approx(1.0)


def test_roc_generic_low_end_is_origin(spec):
    h = learners.make_head(learners.IQN, D, 2, 5, TrainConfig(hidden=8, embed_dim=8), np.random.default_rng(0))
    g = learners.make_head(learners.IQN, R, 2, 5, TrainConfig(hidden=8, embed_dim=8), np.random.default_rng(1))
    rng = np.random.default_rng(2)
    for p in h.params + g.params:
        p[...] = rng.normal(scale=0.3, size=p.shape)
    pts = harness.roc_sweep(RiskAssessor(h, g, DISTDED, k_eval=100), _mixed_trajs(spec))
    assert (pts[0].tpr, pts[0].fpr) == (0.0, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_roc_monotone_on_random_assessments(seed):
    rng = np.random.default_rng(seed)
    trajs = [TrajectoryRecord(rng.random((4, 2)), rng.integers(0, 5, 3), o)
             for o in [Outcome.NEGATIVE, Outcome.POSITIVE] * 8]
    tset = harness.TrajectorySet(trajs)
    u = len(tset.states)
    pts = harness.roc_from_medians(tset, -rng.random(u), rng.random(u), harness.threshold_grid())
    assert np.all(np.diff([p.tpr for p in pts]) >= 0) and np.all(np.diff([p.fpr for p in pts]) >= 0)
    assert all(0 <= p.tpr <= 1 and 0 <= p.fpr <= 1 for p in pts)


def test_roc_single_class_is_error(spec):
    trajs = [t for t in _mixed_trajs(spec) if t.outcome == Outcome.NEGATIVE]
    with pytest.raises(harness.EvaluationError):
        harness.roc_sweep(RiskAssessor(*zone_oracle_heads(), DED), trajs)


def test_alpha_grid():
    g = harness.alpha_grid()
    assert len(g) == 50 and g[0] > 0 and g[-1] == 1.0
    assert np.allclose(np.diff(g), 0.02)


@pytest.fixture(scope="module")
def tiny_ds(spec):
    return dataset.collect_random(spec, 1500, np.random.default_rng(3), 3)


def test_untrained_ablation_is_chance(spec, tiny_ds):
    cfg = TrainConfig(epochs=0, hidden=8, embed_dim=8, k_eval=50)
    res = harness.ablation_matrix(tiny_ds, cfg, _mixed_trajs(spec), alphas=harness.alpha_grid(5))
    rows = res.table()
    assert len(rows) == 4
    for row in rows:
        assert abs(row["max_auc"] - 0.5) <= 0.1
    assert rows[3]["mean_var_auc"] != ""


def test_sweeps_at_toy_scale(spec, tiny_ds):
    cfg = TrainConfig(epochs=1, hidden=8, embed_dim=8, k_eval=50, batch_size=64)
    trajs = harness.TrajectorySet(_mixed_trajs(spec))
    alphas = harness.alpha_grid(4)
    cache = harness.HeadCache()
    abl = harness.ablation_matrix(tiny_ds, cfg, trajs, alphas, cache=cache)
    frac = harness.data_fraction_sweep(tiny_ds, cfg, trajs, (0.5, 1.0), alphas, cache=cache)
    for method in (DED, DISTDED):
        assert frac[(method, 1.0)].max_auc == abl.families[method].max_auc
    betas = harness.beta_sweep(tiny_ds, cfg, trajs, alphas=alphas)
    assert sorted(betas) == [0.0, 0.1, 0.2, 0.3, 0.4]
    no_pen = abl.heads[dead_end.DISTDED_NO_CQL]
    for got, want in zip(betas[0.0][1], no_pen):
        assert all(np.array_equal(a, b) for a, b in zip(got.params, want.params))
    assert betas[0.1][0].max_auc == abl.families[DISTDED].max_auc


def test_threshold_histograms(spec):
    d, r = zone_oracle_heads()
    a = RiskAssessor(d, r, DED)
    one = TrajectoryRecord(np.array([[0.0, 0.0], [0.0, 1 / 9]]), [0], Outcome.POSITIVE)
    rows = harness.threshold_histograms(a, [one], [1, 2, 4])
    assert {row["time_bin"] for row in rows} == {1.0}
    assert sum(row["count"] for row in rows) == 2  # one D and one R entry
    trajs = _mixed_trajs(spec, 40)
    rows = harness.threshold_histograms(a, trajs, [1, 2, 4, 8, 16])
    for outcome in ("positive", "negative"):
        n_states = sum(len(t) for t in trajs if t.outcome.value == outcome)
        for head in ("D", "R"):
            assert sum(r_["count"] for r_ in rows if r_["outcome"] == outcome and r_["head"] == head) == n_states


def test_reports_write(tmp_path, spec):
    fam = harness.evaluate_family(zone_oracle_heads(), DED, _mixed_trajs(spec))
    harness.write_roc_csv(tmp_path / "roc.csv", fam.reports)
    harness.write_rows(tmp_path / "auc.csv", [r.row() for r in fam.reports])
    harness.write_manifest(tmp_path / "m.json", "roc", {"seed": 0, "a": np.float64(0.5)},
                           outputs=[tmp_path / "roc.csv"])
    assert len((tmp_path / "roc.csv").read_text().splitlines()) == 101
    import json
    m = json.loads((tmp_path / "m.json").read_text())
    assert m["outputs"][str(tmp_path / "roc.csv")] == harness.file_hash(tmp_path / "roc.csv")
    assert m["config"]["a"] == 0.5
