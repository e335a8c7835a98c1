import pytest
import torch

from checks import gradient_report, straight_through_report
from cwm.agent_model import (LatentState, ModelConfig, WorldModel, categorical_kl, gumbel_noise,
                             straight_through_sample, unimix_probs)
from conftest import TINY


@pytest.fixture(scope="module")
def grad_report():
    return gradient_report(TINY)


@pytest.mark.parametrize("op", ["recurrent_update", "posterior", "prior", "decoder", "message_head", "policy",
                                "joint_message", "step_vfe", "categorical_kl", "infonce"])
def test_finite_difference_gradients(grad_report, op):
    assert grad_report[op] < 1e-4


def test_straight_through():
    rep = straight_through_report(TINY)
    assert rep["onehot"] < 1e-12
    assert rep["gradient"] < 1e-15


def test_unimix_floor():
    logits = torch.tensor([[50.0, -50.0, 0.0, 0.0]])
    p = unimix_probs(logits, 0.01)
    assert torch.allclose(p.sum(-1), torch.ones(1))
    assert p.min() >= 0.01 / 4 - 1e-9
    assert torch.allclose(unimix_probs(logits, 1.0), torch.full((1, 4), 0.25))


def test_kl_zero_on_equal_and_positive():
    p = unimix_probs(torch.randn(5, 4, 4), 0.01)
    q = unimix_probs(torch.randn(5, 4, 4), 0.01)
    assert torch.allclose(categorical_kl(p, p), torch.zeros(5), atol=1e-6)
    assert (categorical_kl(p, q) > 0).all()


def test_gumbel_max_matches_categorical_frequencies():
    probs = torch.tensor([[0.1, 0.2, 0.7]]).expand(20000, 1, 3)
    gen = torch.Generator().manual_seed(1)
    s = straight_through_sample(probs, gumbel_noise(probs.shape, gen)).detach()
    assert torch.allclose(s.mean(0)[0], torch.tensor([0.1, 0.2, 0.7]), atol=0.015)


def test_filter_step_shapes_and_zero_start():
    cfg = ModelConfig()
    m = WorldModel(cfg)
    s0 = m.initial_state(7)
    assert s0.features.shape == (7, cfg.feature_dim) and not s0.features.any()
    s, prior = m.filter_step(s0, torch.zeros(7, 2), torch.zeros(7, 1), m.obs_embed(torch.randn(7, 2)))
    assert s.h.shape == (7, 32) and s.z_sample.shape == (7, 4, 4) and prior.shape == (7, 4, 4)
    rec, kl = m.step_vfe(s, prior, torch.zeros(7, 2))
    assert rec.shape == kl.shape == (7,)
    d = m.infer_message(s)
    assert d.mean.shape == (7, 2) and (d.log_std >= -5).all() and (d.log_std <= 2).all()


def test_state_index_selects_rows():
    a = LatentState(torch.zeros(3, 2), torch.zeros(3, 1, 2), torch.zeros(3, 1, 2))
    b = LatentState(torch.ones(3, 2), torch.ones(3, 1, 2), torch.ones(3, 1, 2))
    c = a.index(torch.tensor([False, True, False]), b)
    assert c.h[:, 0].tolist() == [0, 1, 0] and c.z_probs[:, 0, 0].tolist() == [0, 1, 0]


def test_non_finite_logits_raise():
    m = WorldModel(TINY)
    with pytest.raises(FloatingPointError):
        m.prior_latent(torch.full((1, 3), float("nan")))


@pytest.mark.parametrize("kwargs", [dict(unimix_fraction=1.5), dict(gru_dim=0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**kwargs)
