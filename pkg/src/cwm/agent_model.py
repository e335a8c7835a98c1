"""Per-agent recurrent state-space world model with a message channel.

    recurrent update:   h_t  = GRU(h_{t-1}, f([z_{t-1}, m_{t-1}, a_{t-1}]))
    representation:     z_t ~ q(z | h_t, o_t)       (unimix categorical)
    transition prior:   z_t ~ p(z | h_t)
    observation:        o_t ~ N(dec(h_t, z_t), 1)
    message inference:  m_t ~ N(mu(s_t), diag sigma(s_t)^2)
    policy:             a_t = pi(s_t, m_{t-1})
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

LOG_STD_MIN, LOG_STD_MAX = -10.0, 2.0


@dataclass(frozen=True)
class ModelConfig:
    gru_dim: int = 32
    latent_dims: int = 4
    latent_classes: int = 4
    message_dim: int = 2
    unimix_fraction: float = 0.01
    obs_dim: int = 2
    action_dim: int = 1
    hidden_width: int = 64
    embed_dim: int = 32
    decoder_variance: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.unimix_fraction <= 1.0:
            raise ValueError("unimix_fraction must lie in [0, 1]")
        for name in ("gru_dim", "latent_dims", "latent_classes", "message_dim", "obs_dim",
                     "action_dim", "hidden_width", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def latent_flat(self) -> int:
        return self.latent_dims * self.latent_classes

    @property
    def feature_dim(self) -> int:
        return self.gru_dim + self.latent_flat

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatentState:
    h: torch.Tensor  # (..., gru_dim)
    z_probs: torch.Tensor  # (..., latent_dims, latent_classes)
    z_sample: torch.Tensor  # same shape, one-hot forward / probs backward

    @property
    def features(self) -> torch.Tensor:
        return torch.cat([self.h, self.z_sample.flatten(-2)], dim=-1)

    def detach(self) -> "LatentState":
        return LatentState(self.h.detach(), self.z_probs.detach(), self.z_sample.detach())

    def index(self, mask: torch.Tensor, other: "LatentState") -> "LatentState":
        """Per-row choice: ``self`` where mask is False, ``other`` where True."""
        m = mask.reshape(-1, *([1] * (self.h.dim() - 1)))
        mz = mask.reshape(-1, *([1] * (self.z_probs.dim() - 1)))
        return LatentState(torch.where(m, other.h, self.h),
                           torch.where(mz, other.z_probs, self.z_probs),
                           torch.where(mz, other.z_sample, self.z_sample))


@dataclass
class MessageDist:
    mean: torch.Tensor
    log_std: torch.Tensor

    def rsample(self, noise: torch.Tensor) -> torch.Tensor:
        return self.mean + self.log_std.exp() * noise


def mlp(n_in: int, n_out: int, width: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(n_in, width), nn.ELU(), nn.Linear(width, n_out))


def gumbel_noise(shape, generator: torch.Generator | None = None, dtype=torch.float32) -> torch.Tensor:
    u = torch.empty(shape, dtype=dtype).exponential_(generator=generator)
    return -u.log()


def unimix_probs(logits: torch.Tensor, fraction: float) -> torch.Tensor:
    return (1.0 - fraction) * logits.softmax(-1) + fraction / logits.shape[-1]


def straight_through_sample(probs: torch.Tensor, gumbel: torch.Tensor) -> torch.Tensor:
    """One-hot draw (Gumbel-max) whose gradient is that of ``probs``."""
    idx = (probs.log() + gumbel).argmax(-1)
    onehot = F.one_hot(idx, probs.shape[-1]).to(probs.dtype)
    return onehot + probs - probs.detach()


def categorical_kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """KL(p || q) summed over latent dims and classes; shape (...)."""
    return (p * (p.log() - q.log())).sum((-1, -2))


class WorldModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c, w = cfg, cfg.hidden_width
        self.transition_input = mlp(c.latent_flat + c.message_dim + c.action_dim, w, w)
        self.gru = nn.GRUCell(w, c.gru_dim)
        self.obs_embed = mlp(c.obs_dim, c.embed_dim, w)
        self.posterior_head = mlp(c.gru_dim + c.embed_dim, c.latent_flat, w)
        self.prior_head = mlp(c.gru_dim, c.latent_flat, w)
        self.decoder = mlp(c.feature_dim, c.obs_dim, w)
        self.message_head = mlp(c.feature_dim, 2 * c.message_dim, w)
        self.policy_head = mlp(c.feature_dim + c.message_dim, c.action_dim, w)

    @property
    def dtype(self) -> torch.dtype:
        return self.gru.weight_hh.dtype

    def initial_state(self, batch: int) -> LatentState:
        c = self.cfg
        h = torch.zeros(batch, c.gru_dim, dtype=self.dtype)
        z = torch.zeros(batch, c.latent_dims, c.latent_classes, dtype=self.dtype)
        return LatentState(h, z, z)

    def _latent(self, logits: torch.Tensor, gumbel: torch.Tensor | None,
                generator: torch.Generator | None):
        c = self.cfg
        logits = logits.unflatten(-1, (c.latent_dims, c.latent_classes))
        if not torch.isfinite(logits).all():
            raise FloatingPointError("non-finite latent logits")
        probs = unimix_probs(logits, c.unimix_fraction)
        if gumbel is None:
            gumbel = gumbel_noise(probs.shape, generator, probs.dtype)
        return probs, straight_through_sample(probs, gumbel)

    def recurrent_update(self, prev: LatentState, msg_prev: torch.Tensor,
                         action_prev: torch.Tensor) -> torch.Tensor:
        x = torch.cat([prev.z_sample.flatten(-2), msg_prev, action_prev], dim=-1)
        return self.gru(self.transition_input(x), prev.h)

    def posterior_latent(self, h: torch.Tensor, obs: torch.Tensor, gumbel=None, generator=None):
        return self.posterior_from_embedding(h, self.obs_embed(obs), gumbel, generator)

    def posterior_from_embedding(self, h, embedding, gumbel=None, generator=None):
        logits = self.posterior_head(torch.cat([h, embedding], dim=-1))
        return self._latent(logits, gumbel, generator)

    def prior_latent(self, h: torch.Tensor, gumbel=None, generator=None):
        return self._latent(self.prior_head(h), gumbel, generator)

    def decode_obs(self, s: LatentState) -> torch.Tensor:
        return self.decoder(s.features)

    def infer_message(self, s: LatentState) -> MessageDist:
        mean, log_std = self.message_head(s.features).chunk(2, dim=-1)
        return MessageDist(mean, log_std.clamp(LOG_STD_MIN, LOG_STD_MAX))

    def policy(self, s: LatentState, msg_prev: torch.Tensor) -> torch.Tensor:
        return self.policy_head(torch.cat([s.features, msg_prev], dim=-1))

    def filter_step(self, prev: LatentState, msg_prev: torch.Tensor, action_prev: torch.Tensor,
                    embedding: torch.Tensor, gumbel: torch.Tensor | None = None, generator=None):
        """One teacher-forced step from an already embedded observation.

        Returns ``(state, prior_probs)``.
        """
        h = self.recurrent_update(prev, msg_prev, action_prev)
        probs, sample = self.posterior_from_embedding(h, embedding, gumbel, generator)
        prior_logits = self.prior_head(h).unflatten(-1, (self.cfg.latent_dims, self.cfg.latent_classes))
        prior = unimix_probs(prior_logits, self.cfg.unimix_fraction)
        return LatentState(h, probs, sample), prior

    def step_vfe(self, state: LatentState, prior: torch.Tensor, obs: torch.Tensor):
        """Per-row reconstruction error and latent KL for one step."""
        reconst = ((self.decode_obs(state) - obs) ** 2).sum(-1) / self.cfg.decoder_variance
        return reconst, categorical_kl(state.z_probs, prior)


class JointMessageNet(nn.Module):
    """Centralized message inference q(m | s^A, s^B) for the connected condition."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.net = mlp(2 * cfg.feature_dim, 2 * cfg.message_dim, cfg.hidden_width)

    def forward(self, s_A: LatentState, s_B: LatentState) -> MessageDist:
        mean, log_std = self.net(torch.cat([s_A.features, s_B.features], dim=-1)).chunk(2, dim=-1)
        return MessageDist(mean, log_std.clamp(LOG_STD_MIN, LOG_STD_MAX))
