"""Shared checks used by both the unit tests and the acceptance suite."""
from __future__ import annotations

import numpy as np
import torch

from cwm.agent_model import JointMessageNet, LatentState, ModelConfig, WorldModel, categorical_kl, unimix_probs
from cwm.training import infonce_loss

FD_EPS = 1e-6
REL_FLOOR = 1e-6  # gradients smaller than this are compared absolutely


def _rel_err(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.tensor(REL_FLOOR, dtype=analytic.dtype))
    return float(((analytic - numeric).abs() / denom).max())


def fd_check(fn, tensors: list[torch.Tensor]) -> float:
    """Max elementwise relative error between autograd and central differences
    of the scalar ``fn()`` with respect to every element of ``tensors``."""
    for t in tensors:
        t.grad = None
    out = fn()
    grads = torch.autograd.grad(out, tensors)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            num = torch.zeros_like(t)
            flat, nflat = t.view(-1), num.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + FD_EPS
                up = float(fn())
                flat[i] = orig - FD_EPS
                down = float(fn())
                flat[i] = orig
                nflat[i] = (up - down) / (2 * FD_EPS)
            worst = max(worst, _rel_err(g, num))
    return worst


def _fixed_state(cfg: ModelConfig, batch: int, gen: torch.Generator) -> LatentState:
    h = torch.randn(batch, cfg.gru_dim, generator=gen, dtype=torch.float64)
    logits = torch.randn(batch, cfg.latent_dims, cfg.latent_classes, generator=gen, dtype=torch.float64)
    probs = unimix_probs(logits, cfg.unimix_fraction)
    onehot = torch.nn.functional.one_hot(probs.argmax(-1), cfg.latent_classes).to(torch.float64)
    return LatentState(h, probs, onehot)


def gradient_report(cfg: ModelConfig, batch: int = 3, seed: int = 0) -> dict[str, float]:
    """Finite-difference check of every parameterised operation, float64."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    m = WorldModel(cfg).double()
    joint = JointMessageNet(cfg).double()
    s = _fixed_state(cfg, batch, gen)
    s2 = _fixed_state(cfg, batch, gen)
    r = lambda *shape: torch.randn(*shape, generator=gen, dtype=torch.float64)  # noqa: E731
    msg, act, obs = r(batch, cfg.message_dim), r(batch, cfg.action_dim), r(batch, cfg.obs_dim)
    w_h, w_z, w_o = r(batch, cfg.gru_dim), r(batch, cfg.latent_dims, cfg.latent_classes), r(batch, cfg.obs_dim)
    w_m, w_a = r(batch, cfg.message_dim), r(batch, cfg.action_dim)
    params = lambda mod: list(mod.parameters())  # noqa: E731
    report = {}

    msg_in = msg.clone().requires_grad_(True)
    report["recurrent_update"] = fd_check(lambda: (m.recurrent_update(s, msg_in, act) * w_h).sum(),
                                          params(m.transition_input) + params(m.gru) + [msg_in])

    def posterior():
        logits = m.posterior_head(torch.cat([s.h, m.obs_embed(obs)], -1))
        return (unimix_probs(logits.unflatten(-1, (cfg.latent_dims, cfg.latent_classes)), cfg.unimix_fraction)
                * w_z).sum()
    report["posterior"] = fd_check(posterior, params(m.obs_embed) + params(m.posterior_head))

    def prior():
        probs = unimix_probs(m.prior_head(s.h).unflatten(-1, (cfg.latent_dims, cfg.latent_classes)),
                             cfg.unimix_fraction)
        return (probs * w_z).sum()
    report["prior"] = fd_check(prior, params(m.prior_head))

    report["decoder"] = fd_check(lambda: (m.decode_obs(s) * w_o).sum(), params(m.decoder))

    def message():
        d = m.infer_message(s)
        return (d.mean * w_m).sum() + (d.log_std * w_m).sum() + (d.rsample(w_m) * w_m).sum()
    report["message_head"] = fd_check(message, params(m.message_head))

    msg_prev = msg.clone().requires_grad_(True)
    report["policy"] = fd_check(lambda: (m.policy(s, msg_prev) * w_a).sum(), params(m.policy_head) + [msg_prev])

    def joint_msg():
        d = joint(s, s2)
        return (d.mean * w_m).sum() + (d.rsample(w_m) * w_m).sum()
    report["joint_message"] = fd_check(joint_msg, params(joint))

    def step_vfe():
        probs = unimix_probs(m.posterior_head(torch.cat([s.h, m.obs_embed(obs)], -1))
                             .unflatten(-1, (cfg.latent_dims, cfg.latent_classes)), cfg.unimix_fraction)
        prior = unimix_probs(m.prior_head(s.h).unflatten(-1, (cfg.latent_dims, cfg.latent_classes)),
                             cfg.unimix_fraction)
        rec, kl = m.step_vfe(LatentState(s.h, probs, s.z_sample), prior, obs)
        return (rec + kl).sum()
    report["step_vfe"] = fd_check(step_vfe, params(m.decoder) + params(m.posterior_head) + params(m.prior_head)
                                  + params(m.obs_embed))

    p = torch.rand(batch, cfg.latent_dims, cfg.latent_classes, generator=gen, dtype=torch.float64) + 0.1
    q = torch.rand(batch, cfg.latent_dims, cfg.latent_classes, generator=gen, dtype=torch.float64) + 0.1
    p = (p / p.sum(-1, keepdim=True)).requires_grad_(True)
    q = (q / q.sum(-1, keepdim=True)).requires_grad_(True)
    report["categorical_kl"] = fd_check(lambda: categorical_kl(p, q).sum(), [p, q])

    anchors = r(2, 6, cfg.message_dim).requires_grad_(True)
    positives = r(2, 6, cfg.message_dim)
    report["infonce"] = fd_check(lambda: infonce_loss(anchors, positives, 2.0).sum(), [anchors])
    return report


def straight_through_report(cfg: ModelConfig, seed: int = 0) -> dict[str, float]:
    """Forward value of the latent sample is one-hot; its gradient is the
    gradient of the underlying probabilities."""
    from cwm.agent_model import straight_through_sample, gumbel_noise
    gen = torch.Generator().manual_seed(seed)
    logits = torch.randn(4, cfg.latent_dims, cfg.latent_classes, generator=gen, dtype=torch.float64,
                         requires_grad=True)
    w = torch.randn(4, cfg.latent_dims, cfg.latent_classes, generator=gen, dtype=torch.float64)
    probs = unimix_probs(logits, cfg.unimix_fraction)
    sample = straight_through_sample(probs, gumbel_noise(probs.shape, gen, torch.float64))
    (g_sample,) = torch.autograd.grad((sample * w).sum(), logits, retain_graph=True)
    (g_probs,) = torch.autograd.grad((probs * w).sum(), logits)
    onehot_err = float((sample.detach() - sample.detach().round()).abs().max())
    rows = sample.detach().sum(-1)
    return {"onehot": max(onehot_err, float((rows - 1).abs().max())),
            "gradient": float((g_sample - g_probs).abs().max())}


def decentralization_probe(team, batch, seed: int = 0) -> dict[str, float]:
    """Largest |dF^X / d theta^Y| over every parameter element, X != Y."""
    from cwm.training import decentralized_losses
    totals, _, _ = decentralized_losses(team, batch, torch.Generator().manual_seed(seed), exchange=True)
    out = {}
    for own, peer in (("A", "B"), ("B", "A")):
        params = list(team[peer].parameters())
        grads = torch.autograd.grad(totals[f"total_{own}"], params, allow_unused=True, retain_graph=True)
        worst = 0.0
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            worst = max(worst, float(g.abs().max()))
        # and the own gradient is genuinely nonzero
        own_grads = torch.autograd.grad(totals[f"total_{own}"], list(team[own].parameters()), retain_graph=True)
        out[f"F{own}/theta{peer}"] = worst
        out[f"F{own}/theta{own}_norm"] = float(sum(g.abs().sum() for g in own_grads))
    return out


def expert_on_trajectory_score(episode_length: int = 200) -> float:
    from cwm.comms import CommConfig, rollout
    from cwm.environment import EnvConfig, ideal_trajectory
    from cwm.evaluation import max_cross_correlation
    cfg = EnvConfig(episode_length=episode_length)
    rec = rollout(None, cfg, CommConfig(), cfg.episode_length, n_trials=2, seed=0, controller="expert",
                  start="trajectory")
    return min(max_cross_correlation(t, ideal_trajectory(cfg)) for t in rec.trajectory)


def metric_oracle_report(n_instances: int = 200, seed: int = 0) -> dict[str, float]:
    """Max abs deviation from the brute-force metrics plus RSA invariance."""
    import oracles
    from cwm.evaluation import max_cross_correlation, rsa_score
    rng = np.random.default_rng(seed)
    worst_mcc = worst_rsa = worst_inv = 0.0
    for _ in range(n_instances):
        T = int(rng.integers(2, 9))
        g, f = rng.normal(size=(T, 2)), rng.normal(size=(T, 2))
        worst_mcc = max(worst_mcc, abs(max_cross_correlation(g, f) - oracles.max_cross_correlation(g, f)))
        n = int(rng.integers(3, 9))
        msgs, pos = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
        rho = rsa_score(msgs, pos).spearman_rho
        worst_rsa = max(worst_rsa, abs(rho - oracles.rsa(msgs, pos)))
        # rigid motion + positive scaling of either side leaves RSA unchanged
        a = rng.uniform(0, 2 * np.pi)
        rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        if rng.random() < 0.5:
            rot = rot @ np.diag([1.0, -1.0])
        moved = rng.uniform(0.1, 10.0) * msgs @ rot.T + rng.normal(size=2) * 5
        worst_inv = max(worst_inv, abs(rsa_score(moved, pos).spearman_rho - rho))
    return {"max_cross_correlation": worst_mcc, "rsa": worst_rsa, "rsa_invariance": worst_inv}
