import math

import numpy as np
import pytest
import torch
from hypothesis import example, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from checks import expert_on_trajectory_score, metric_oracle_report
from conftest import TINY
from cwm.environment import EnvConfig
from cwm.evaluation import (EvalSummary, MetricUndefined, append_result, evaluate_condition, max_cross_correlation,
                            read_results, rsa_for_team, rsa_score, score_trials, teacher_forced_messages)
from cwm.training import Team, TrainingConfig


@pytest.fixture(scope="module")
def report():
    return metric_oracle_report()


def test_metrics_match_brute_force(report):
    assert report["max_cross_correlation"] < 1e-12
    assert report["rsa"] < 1e-12


def test_rsa_invariance(report):
    assert report["rsa_invariance"] < 1e-9


def test_expert_on_trajectory_scores_one():
    assert abs(expert_on_trajectory_score() - 1.0) < 1e-6


def test_cross_correlation_properties():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(12, 2))
    assert math.isclose(max_cross_correlation(f, f), 1.0, abs_tol=1e-12)
    assert math.isclose(max_cross_correlation(np.roll(f, 5, axis=0), f), 1.0, abs_tol=1e-12)
    assert math.isclose(max_cross_correlation(3 * f + 1, f), 1.0, abs_tol=1e-12)
    with pytest.raises(MetricUndefined):
        max_cross_correlation(np.ones((5, 2)), f[:5])
    with pytest.raises(ValueError):
        max_cross_correlation(f, f[:4])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 8), st.just(2)), elements=st.floats(-10, 10)),
       st.integers(0, 2 ** 31))
@example(np.array([[-1.0, 1.77258291e-158], [0.0, 0.0]]), 1039)  # subnormal variance
@example(np.full((8, 2), 1.8), 0)  # constant axes: mean subtraction leaves rounding noise
def test_cross_correlation_bounded(g, seed):
    f = np.random.default_rng(seed).normal(size=g.shape)
    try:
        v = max_cross_correlation(g, f)
    except MetricUndefined:
        return
    assert -1 - 1e-9 <= v <= 1 + 1e-9
    assert abs(v - oracles.max_cross_correlation(g, f)) < 1e-9


def test_rsa_ties_use_average_ranks():
    # a square: four equal sides, two equal diagonals
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    line = np.array([[0, 0], [1, 0], [2, 0], [3, 0]], dtype=float)
    assert abs(rsa_score(sq, line).spearman_rho - oracles.rsa(sq, line)) < 1e-12
    assert rsa_score(sq, line).n_pairs == 6


def test_rsa_undefined_and_validation():
    pts = np.array([[0, 0], [1, 0], [0.5, math.sqrt(3) / 2]])  # equilateral: constant distances
    with pytest.raises(MetricUndefined):
        rsa_score(pts, np.random.default_rng(0).normal(size=(3, 2)))
    with pytest.raises(ValueError):
        rsa_score(np.zeros((2, 2)), np.zeros((2, 2)))


def test_teacher_forced_messages_shapes(micro_data):
    for cond, keys in (("ec", {"A", "B"}), ("bc", {"shared"}), ("baseline", {"agent"})):
        team = Team.create(TrainingConfig(condition=cond), TINY)
        msgs = teacher_forced_messages(team, micro_data)
        assert set(msgs) == keys
        for v in msgs.values():
            assert v.shape == (4, 8, TINY.message_dim)
        rsa = rsa_for_team(team, micro_data)
        assert all(len(v) == 4 and all(-1 <= x <= 1 for x in v) for v in rsa.values())


def test_teacher_forced_messages_are_deterministic(micro_data):
    team = Team.create(TrainingConfig(condition="nc"), TINY)
    a = teacher_forced_messages(team, micro_data, seed=3)
    b = teacher_forced_messages(team, micro_data, seed=3)
    assert np.array_equal(a["A"], b["A"])


def test_score_trials_excludes_degenerate():
    cfg = EnvConfig(episode_length=120)
    good = np.random.default_rng(0).normal(size=(120, 2))
    scores, excluded = score_trials(np.stack([good, np.zeros((120, 2))]), cfg)
    assert len(scores) == 1 and excluded == 1


def test_evaluate_and_results_table(micro_data, tmp_path):
    cfg = EnvConfig(bins_per_agent=1, episode_length=120)
    team = Team.create(TrainingConfig(condition="ec"), TINY)
    summary, rec = evaluate_condition(team, cfg, 3, communication=True, seed=1, window=3, test_data=micro_data)
    assert summary.n_trials == 3 and rec.trajectory.shape == (3, 120, 2)
    assert set(summary.rsa) == {"A", "B"} and -1 <= summary.rsa_mean <= 1
    path = tmp_path / "results.csv"
    append_result(path, summary)
    append_result(path, EvalSummary("nc", "1", 0, False, 3, 0.5, 0.1, 0, {}))
    rows = read_results(path)
    assert [r["condition"] for r in rows] == ["ec", "nc"]
    assert rows[0]["communication"] == "on" and rows[1]["communication"] == "off"
    assert float(rows[0]["mean"]) == pytest.approx(summary.mean)
    assert rows[1]["rsa_mean"] == "nan"


def test_expert_controller_without_team():
    cfg = EnvConfig(episode_length=200)
    summary, _ = evaluate_condition(None, cfg, 2, controller="expert", start="trajectory")
    assert summary.condition == "expert" and abs(summary.mean - 1.0) < 1e-6
