import math

import numpy as np
import pytest

from cwm import environment as env
from cwm.environment import INFINITE, Dataset, EnvConfig, EnvState, generate_dataset


def test_parse_bins():
    assert env.parse_bins("inf") is INFINITE
    assert env.parse_bins(float("inf")) is INFINITE
    assert env.parse_bins("6") == 6
    for bad in (0, -1, "x", 1.5):
        with pytest.raises(ValueError):
            env.parse_bins(bad)


def test_config_round_trip():
    cfg = EnvConfig(bins_per_agent=2, noise_std=0.0)
    assert EnvConfig.from_dict(cfg.to_dict()) == cfg
    assert EnvConfig.from_dict(EnvConfig().to_dict()).bins_per_agent is INFINITE


@pytest.mark.parametrize("kwargs", [dict(noise_std=-1), dict(episode_length=0), dict(action_limit=0),
                                    dict(trajectory_scale=1.2)])
def test_config_rejects(kwargs):
    with pytest.raises(ValueError):
        EnvConfig(**kwargs)


def test_curve_closes_and_fits():
    cfg = EnvConfig()
    assert np.allclose(env.hypotrochoid_point(0.0, cfg), env.hypotrochoid_point(env.THETA_MAX, cfg))
    pts = env.hypotrochoid_point(np.linspace(0, env.THETA_MAX, 5000), cfg)
    assert np.abs(pts).max() <= cfg.trajectory_scale + 1e-12
    assert np.isclose(np.linalg.norm(pts, axis=1).max(), cfg.trajectory_scale)


def test_quantize_centres():
    v = np.array([-1.0, -0.51, -0.49, 0.0, 0.99, 1.0, 3.0])
    assert np.allclose(env.quantize(v, 2, 1.0), [-0.5, -0.5, -0.5, 0.5, 0.5, 0.5, 0.5])
    assert np.allclose(env.quantize(v, 1, 1.0), 0.0)
    assert np.allclose(env.quantize(v, INFINITE, 1.0), np.clip(v, -1, 1))


def test_sense_binning_per_agent():
    cfg = EnvConfig(bins_per_agent=1)
    p = np.array([0.3, -0.7])
    assert np.allclose(env.sense(p, "A", cfg), [0.3, 0.0])
    assert np.allclose(env.sense(p, "B", cfg), [0.0, -0.7])
    with pytest.raises(ValueError):
        env.sense(p, "C", cfg)


def test_action_axes():
    cfg = EnvConfig()
    s = EnvState(np.zeros(2))
    s1 = env.step(s, 0.05, 0.0, cfg)
    assert np.allclose(s1.position, 0.05 * np.array([1, -1]) / math.sqrt(2))
    s2 = env.step(s, 0.0, 0.05, cfg)
    assert np.allclose(s2.position, 0.05 * np.array([1, 1]) / math.sqrt(2))
    assert s1.step == 1 and np.isclose(s1.phase, cfg.phase_step)


def test_expert_tracks_curve_exactly():
    cfg = EnvConfig(noise_std=0.0)
    state = EnvState(env.hypotrochoid_point(0.3, cfg), 0.3)
    for _ in range(cfg.episode_length):
        a, b = env.expert_actions(state, cfg)
        state = env.step(state, a, b, cfg)
        assert np.allclose(state.position, env.hypotrochoid_point(state.phase, cfg), atol=1e-12)


def test_dataset_shapes_and_consistency():
    cfg = EnvConfig(bins_per_agent=2, episode_length=200, seed=5)
    d = generate_dataset(cfg, 3)
    assert d.obs_A.shape == (3, 201, 2) and d.act_A.shape == (3, 200, 1) and d.truth.shape == (3, 201, 2)
    # truth follows from actions
    recon = d.truth[:, :1] + np.cumsum(d.act_A * env.E_U + d.act_B * env.E_V, axis=1)
    assert np.allclose(recon, d.truth[:, 1:])
    assert np.abs(d.act_A).max() < cfg.action_limit
    # sensor noise has the configured scale
    resid = d.obs_A - env.sense(d.truth, "A", cfg)
    assert 0.005 < resid.std() < 0.02
    assert len(d) == 3 and d[1].act_A.shape == (200,)


def test_dataset_deterministic_and_prefix_stable():
    cfg = EnvConfig(episode_length=150, seed=11)
    a, b = generate_dataset(cfg, 2), generate_dataset(cfg, 4)
    assert np.array_equal(a.obs_A, b.obs_A[:2])  # per-episode streams


def test_dataset_save_load(tmp_path):
    d = generate_dataset(EnvConfig(bins_per_agent=6, episode_length=120, seed=2), 2)
    d.save(tmp_path / "d")
    e = Dataset.load(tmp_path / "d")
    assert e.cfg == d.cfg and e.seed == 2
    assert np.allclose(e.obs_B, d.obs_B, atol=1e-6)
    before = (tmp_path / "d" / "manifest.json").read_bytes()
    d.save(tmp_path / "d")
    assert (tmp_path / "d" / "manifest.json").read_bytes() == before


def test_short_episodes_clip_expert_actions(caplog):
    cfg = EnvConfig(episode_length=8)
    with pytest.raises(RuntimeError, match="clipped"):
        generate_dataset(cfg, 1)
    with caplog.at_level("WARNING"):
        d = generate_dataset(cfg, 4, allow_clipping=True)
    assert "clipped" in caplog.text
    assert d.act_A.shape == (4, 8, 1) and d.obs_A.shape == (4, 9, 2)
    assert np.abs(d.act_A).max() <= cfg.action_limit and np.abs(d.act_B).max() <= cfg.action_limit
