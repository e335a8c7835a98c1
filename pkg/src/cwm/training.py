"""Losses, the four training conditions, and the optimisation loop.

Conditions
    ec        decentralized world models; each agent's message head is pulled
              towards the peer's received samples by InfoNCE.
    bc        "brain connected": one message network reads both agents'
              latent states and feeds a shared message to both.
    nc        independent world models, no message alignment.
    baseline  one agent observing (x, y) exactly and controlling both axes.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import storage
from .agent_model import (JointMessageNet, LatentState, MessageDist, ModelConfig, WorldModel, gumbel_noise,
                          unimix_probs)
from .environment import Dataset, EnvConfig

log = logging.getLogger(__name__)

CONDITIONS = ("ec", "bc", "nc", "baseline")
DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class TrainingConfig:
    w_kld: float = 0.01
    w_nce: float = 0.005
    tau: float = 2.0
    batch_size: int = 500
    epochs: int = 1000
    learning_rate: float = 3e-4
    grad_clip: float = 100.0
    condition: str = "ec"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "condition", self.condition.lower())
        if self.condition not in CONDITIONS:
            raise ValueError(f"condition must be one of {CONDITIONS}, got {self.condition!r}")
        if min(self.w_kld, self.w_nce, self.tau, self.grad_clip) <= 0 or self.batch_size < 1:
            raise ValueError("weights, tau, grad_clip and batch_size must be positive")
        if self.epochs < 0 or self.learning_rate < 0:
            raise ValueError("epochs and learning_rate must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    reconst_A: float
    kld_A: float
    nce_A: float
    policy_A: float
    total_A: float
    reconst_B: float | None = None
    kld_B: float | None = None
    nce_B: float | None = None
    policy_B: float | None = None
    total_B: float | None = None

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def mean(cls, reports: list["LossReport"]) -> "LossReport":
        out = {}
        for name in cls.field_names():
            vals = [getattr(r, name) for r in reports]
            out[name] = None if vals[0] is None else float(np.mean(vals))
        return cls(**out)


# ---------------------------------------------------------------- loss terms

def similarity(m: torch.Tensor, m_prime: torch.Tensor, tau: float) -> torch.Tensor:
    return -((m - m_prime) ** 2).sum(-1) / tau


class _InfoNCE(torch.autograd.Function):
    """Fused batch InfoNCE with a hand-written gradient.

    The (..., N, N) similarity matrix is the memory hot spot; keeping only the
    softmax weights for backward avoids autograd's intermediate copies.
    """

    @staticmethod
    def forward(ctx, anchors, positives, tau):
        n = anchors.shape[-2]
        a2 = (anchors * anchors).sum(-1, keepdim=True)
        p2 = (positives * positives).sum(-1).unsqueeze(-2)
        sim = (2.0 * anchors @ positives.transpose(-1, -2) - a2 - p2) / tau
        lse = torch.logsumexp(sim, dim=-1)
        weights = (sim - lse.unsqueeze(-1)).exp()
        pos = similarity(anchors, positives, tau)
        ctx.save_for_backward(positives, weights)
        ctx.tau = tau
        return (lse - math.log(n) - pos).mean(-1)

    @staticmethod
    def backward(ctx, grad):
        positives, weights = ctx.saved_tensors
        n = positives.shape[-2]
        # d/da_i = 2/tau * (sum_j w_ij p_j - p_i)
        g = (2.0 / ctx.tau) * (weights @ positives - positives)
        return g * (grad[..., None, None] / n), None, None


def infonce_loss(anchors: torch.Tensor, positives: torch.Tensor, tau: float) -> torch.Tensor:
    """Batch InfoNCE with the other rows' positives as negatives.

    ``anchors`` and ``positives`` have shape (..., N, d).  Returns the mean
    over N, keeping leading dims.  The denominator is the *mean* over the
    batch, so the loss is 0 when all rows coincide and may go negative.
    Positives never receive gradient.
    """
    if anchors.shape[-2] < 2:
        raise ValueError("InfoNCE needs a batch of at least 2 for negatives")
    if anchors.shape != positives.shape:
        raise ValueError(f"shape mismatch {tuple(anchors.shape)} vs {tuple(positives.shape)}")
    return _InfoNCE.apply(anchors, positives.detach(), tau)


def bc_loss(predicted: torch.Tensor, expert: torch.Tensor) -> torch.Tensor:
    """Per-row squared error summed over action dims."""
    return ((predicted - expert) ** 2).sum(-1)


# ---------------------------------------------------------------- unrolls

@dataclass
class UnrollNoise:
    """Pre-drawn randomness for one unroll (common random numbers)."""

    gumbel: torch.Tensor  # (T+1, B, L, C)
    message: torch.Tensor  # (T, B, message_dim)

    @classmethod
    def draw(cls, cfg: ModelConfig, steps: int, batch: int, generator: torch.Generator,
             dtype=torch.float32) -> "UnrollNoise":
        g = gumbel_noise((steps + 1, batch, cfg.latent_dims, cfg.latent_classes), generator, dtype)
        m = torch.randn((steps, batch, cfg.message_dim), generator=generator, dtype=dtype)
        return cls(g, m)


@dataclass
class Unroll:
    reconst: torch.Tensor  # (B,) summed over time
    kld: torch.Tensor  # (B,)
    policy: torch.Tensor  # (B,)
    states: list[LatentState]  # s_0 .. s_T
    messages: list[MessageDist]  # q(m_t | s_t), t = 0 .. T-1
    samples: torch.Tensor  # (T, B, d) own reparameterized samples
    conditioning: torch.Tensor  # (T, B, d) messages actually fed to the transition


def _stack_states(states: list[LatentState]) -> LatentState:
    return LatentState(torch.stack([s.h for s in states]), torch.stack([s.z_probs for s in states]),
                       torch.stack([s.z_sample for s in states]))


def _sequence_terms(model: WorldModel, seq: LatentState, obs: torch.Tensor):
    """Reconstruction and KL summed over time for stacked states (T+1, B, ...)."""
    c = model.cfg
    prior = unimix_probs(model.prior_head(seq.h).unflatten(-1, (c.latent_dims, c.latent_classes)),
                         c.unimix_fraction)
    r, k = model.step_vfe(seq, prior, obs.transpose(0, 1))
    return r.sum(0), k.sum(0)


def _policy_term(model: WorldModel, seq: LatentState, cond: torch.Tensor, actions: torch.Tensor):
    """BC loss of pi(s_t, m_{t-1}) against a_t for t = 0 .. T-1, m_{-1} = 0."""
    T = actions.shape[1]
    if T == 0:
        return actions.new_zeros(actions.shape[0])
    prev = torch.cat([cond.new_zeros(1, *cond.shape[1:]), cond[:-1]]) if cond.shape[0] else cond
    s = LatentState(seq.h[:T], seq.z_probs[:T], seq.z_sample[:T])
    return bc_loss(model.policy(s, prev), actions.transpose(0, 1)).sum(0)


def individual_vfe(model: WorldModel, obs: torch.Tensor, actions: torch.Tensor, noise: UnrollNoise,
                   messages_in: torch.Tensor | None = None) -> Unroll:
    """Teacher-forced unroll of one agent over a batch of episodes.

    ``obs`` (B, T+1, o), ``actions`` (B, T, a).  The transition into s_t is
    conditioned on ``messages_in[t-1]`` (shape (T, B, d)) when given, else on
    the agent's own sample of m_{t-1}.  Step 0 starts from the all-zero state
    with zero message and action.
    """
    B, T1, _ = obs.shape
    T = T1 - 1
    c = model.cfg
    emb = model.obs_embed(obs)
    state = model.initial_state(B)
    msg = obs.new_zeros(B, c.message_dim)
    act = obs.new_zeros(B, c.action_dim)
    states, dists, samples, cond = [], [], [], []
    for t in range(T + 1):
        h = model.recurrent_update(state, msg, act)
        state = LatentState(h, *model.posterior_from_embedding(h, emb[:, t], noise.gumbel[t]))
        states.append(state)
        if t == T:
            break
        dist = model.infer_message(state)
        own = dist.rsample(noise.message[t])
        dists.append(dist)
        samples.append(own)
        msg = own if messages_in is None else messages_in[t]
        cond.append(msg)
        act = actions[:, t]
    seq = _stack_states(states)
    reconst, kld = _sequence_terms(model, seq, obs)
    stack = (lambda xs: torch.stack(xs)) if T > 0 else (lambda xs: obs.new_zeros(0, B, c.message_dim))
    samples, cond = stack(samples), stack(cond)
    policy = _policy_term(model, seq, cond, actions)
    return Unroll(reconst, kld, policy, states, dists, samples, cond)


def connected_unroll(model_A: WorldModel, model_B: WorldModel, joint: JointMessageNet,
                     obs_A, obs_B, act_A, act_B, noise_A: UnrollNoise, noise_B: UnrollNoise):
    """Lock-step unroll of both agents sharing one centrally inferred message.

    The shared message noise is taken from ``noise_A.message``.  Returns
    ``(per-row loss parts, message dists, message samples)``.
    """
    B, T1, _ = obs_A.shape
    T = T1 - 1
    c = model_A.cfg
    emb_A, emb_B = model_A.obs_embed(obs_A), model_B.obs_embed(obs_B)
    s_A, s_B = model_A.initial_state(B), model_B.initial_state(B)
    msg = obs_A.new_zeros(B, c.message_dim)
    a_A = obs_A.new_zeros(B, model_A.cfg.action_dim)
    a_B = obs_B.new_zeros(B, model_B.cfg.action_dim)
    states_A, states_B, dists, samples = [], [], [], []
    for t in range(T + 1):
        h = model_A.recurrent_update(s_A, msg, a_A)
        s_A = LatentState(h, *model_A.posterior_from_embedding(h, emb_A[:, t], noise_A.gumbel[t]))
        h = model_B.recurrent_update(s_B, msg, a_B)
        s_B = LatentState(h, *model_B.posterior_from_embedding(h, emb_B[:, t], noise_B.gumbel[t]))
        states_A.append(s_A)
        states_B.append(s_B)
        if t == T:
            break
        dist = joint(s_A, s_B)
        msg = dist.rsample(noise_A.message[t])
        dists.append(dist)
        samples.append(msg)
        a_A, a_B = act_A[:, t], act_B[:, t]
    samples = torch.stack(samples) if samples else obs_A.new_zeros(0, B, c.message_dim)
    out = {}
    for sfx, m, st, o, a in (("_A", model_A, states_A, obs_A, act_A), ("_B", model_B, states_B, obs_B, act_B)):
        seq = _stack_states(st)
        out["reconst" + sfx], out["kld" + sfx] = _sequence_terms(m, seq, o)
        out["policy" + sfx] = _policy_term(m, seq, samples, a)
    return out, dists, samples


# ---------------------------------------------------------------- teams

def agent_names(condition: str) -> tuple[str, ...]:
    return ("agent",) if condition == "baseline" else ("A", "B")


def model_config_for(condition: str, base: ModelConfig | None = None) -> ModelConfig:
    base = base or ModelConfig()
    d = base.to_dict()
    d["action_dim"] = 2 if condition == "baseline" else 1
    return ModelConfig(**d)


def build_models(condition: str, seed: int, model_cfg: ModelConfig | None = None,
                 dtype=torch.float32) -> nn.ModuleDict:
    """Fresh, independently initialised modules for ``condition``."""
    cfg = model_config_for(condition, model_cfg)
    mods = {}
    with torch.random.fork_rng():
        for k, name in enumerate(agent_names(condition)):
            torch.manual_seed(seed * 1009 + k)
            mods[name] = WorldModel(cfg)
        if condition == "bc":
            torch.manual_seed(seed * 1009 + 7)
            mods["joint"] = JointMessageNet(cfg)
    return nn.ModuleDict(mods).to(dtype)


class Team:
    """Models of one condition plus their optimisers.

    EC and NC keep one optimiser per agent (no shared parameters or
    gradients); BC and BASELINE use a single optimiser.
    """

    def __init__(self, condition: str, models: nn.ModuleDict, cfg: TrainingConfig):
        self.condition = condition
        self.models = models
        self.cfg = cfg
        if condition in ("ec", "nc"):
            groups = {"A": models["A"].parameters(), "B": models["B"].parameters()}
        else:
            groups = {"joint": models.parameters()}
        self.optimizers = {k: torch.optim.Adam(list(p), lr=cfg.learning_rate) for k, p in groups.items()}

    @classmethod
    def create(cls, cfg: TrainingConfig, model_cfg: ModelConfig | None = None, dtype=torch.float32) -> "Team":
        return cls(cfg.condition, build_models(cfg.condition, cfg.seed, model_cfg, dtype), cfg)

    @property
    def dtype(self):
        return next(self.models.parameters()).dtype

    def __getitem__(self, name: str) -> nn.Module:
        return self.models[name]


def batch_tensors(data: Dataset, idx=None, dtype=torch.float32) -> dict[str, torch.Tensor]:
    sel = slice(None) if idx is None else idx
    return {k: torch.as_tensor(np.asarray(getattr(data, k)[sel]), dtype=dtype)
            for k in ("obs_A", "obs_B", "act_A", "act_B", "truth")}


# ---------------------------------------------------------------- per-condition losses

def _agent_totals(parts: dict, suffix: str, cfg: TrainingConfig) -> torch.Tensor:
    return (parts["reconst" + suffix] + cfg.w_kld * parts["kld" + suffix]
            + cfg.w_nce * parts["nce" + suffix] + parts["policy" + suffix])


def _report(parts: dict, totals: dict) -> LossReport:
    vals = {k: float(v.detach()) for k, v in parts.items()}
    vals.update({k: float(v.detach()) for k, v in totals.items()})
    return LossReport(**vals)


def decentralized_losses(team: Team, batch: dict, generator: torch.Generator, exchange: bool):
    """EC (``exchange=True``) and NC losses.  Returns ``(totals, parts, unrolls)``."""
    cfg = team.cfg
    mA, mB = team["A"], team["B"]
    B, T1, _ = batch["obs_A"].shape
    noise_A = UnrollNoise.draw(mA.cfg, T1 - 1, B, generator, team.dtype)
    noise_B = UnrollNoise.draw(mB.cfg, T1 - 1, B, generator, team.dtype)
    uA = individual_vfe(mA, batch["obs_A"], batch["act_A"], noise_A)
    uB = individual_vfe(mB, batch["obs_B"], batch["act_B"], noise_B)
    parts = {}
    for s, u, peer in (("_A", uA, uB), ("_B", uB, uA)):
        parts["reconst" + s] = u.reconst.mean()
        parts["kld" + s] = u.kld.mean()
        parts["policy" + s] = u.policy.mean()
        if exchange and u.samples.shape[0] > 0:
            # own samples are anchors; received ones arrive as plain data
            parts["nce" + s] = infonce_loss(u.samples, peer.samples.detach(), cfg.tau).sum()
        else:
            parts["nce" + s] = batch["obs_A"].new_zeros(())
    totals = {"total_A": _agent_totals(parts, "_A", cfg), "total_B": _agent_totals(parts, "_B", cfg)}
    return totals, parts, (uA, uB)


def connected_losses(team: Team, batch: dict, generator: torch.Generator):
    mA, mB = team["A"], team["B"]
    B, T1, _ = batch["obs_A"].shape
    noise_A = UnrollNoise.draw(mA.cfg, T1 - 1, B, generator, team.dtype)
    noise_B = UnrollNoise.draw(mB.cfg, T1 - 1, B, generator, team.dtype)
    out, _, _ = connected_unroll(mA, mB, team["joint"], batch["obs_A"], batch["obs_B"],
                                 batch["act_A"], batch["act_B"], noise_A, noise_B)
    parts = {k: v.mean() for k, v in out.items()}
    parts["nce_A"] = parts["nce_B"] = batch["obs_A"].new_zeros(())
    totals = {"total_A": _agent_totals(parts, "_A", team.cfg), "total_B": _agent_totals(parts, "_B", team.cfg)}
    return totals, parts


def baseline_losses(team: Team, batch: dict, generator: torch.Generator):
    m = team["agent"]
    obs = batch["truth"]
    actions = torch.cat([batch["act_A"], batch["act_B"]], dim=-1)
    noise = UnrollNoise.draw(m.cfg, obs.shape[1] - 1, obs.shape[0], generator, team.dtype)
    u = individual_vfe(m, obs, actions, noise)
    parts = {"reconst_A": u.reconst.mean(), "kld_A": u.kld.mean(),
             "nce_A": obs.new_zeros(()), "policy_A": u.policy.mean()}
    return {"total_A": _agent_totals(parts, "_A", team.cfg)}, parts


def condition_losses(team: Team, batch: dict, generator: torch.Generator):
    """``(totals, parts)`` for the team's condition; totals keyed total_A/total_B."""
    if team.condition == "ec":
        totals, parts, _ = decentralized_losses(team, batch, generator, exchange=True)
    elif team.condition == "nc":
        totals, parts, _ = decentralized_losses(team, batch, generator, exchange=False)
    elif team.condition == "bc":
        totals, parts = connected_losses(team, batch, generator)
    else:
        totals, parts = baseline_losses(team, batch, generator)
    return totals, parts


# ---------------------------------------------------------------- optimisation

def _check_finite(totals: dict, parts: dict) -> None:
    for k, v in totals.items():
        v = float(v.detach())
        if not math.isfinite(v) or abs(v) > DIVERGENCE_LIMIT:
            detail = ", ".join(f"{n}={float(p.detach()):.4g}" for n, p in parts.items())
            raise FloatingPointError(f"training diverged: {k}={v:.4g} ({detail})")


def train_step(team: Team, batch: dict, generator: torch.Generator) -> LossReport:
    totals, parts = condition_losses(team, batch, generator)
    _check_finite(totals, parts)
    for opt in team.optimizers.values():
        opt.zero_grad(set_to_none=True)
    if team.condition in ("ec", "nc"):
        # the two graphs are disjoint: F^A touches only theta^A, F^B only theta^B
        (totals["total_A"] + totals["total_B"]).backward()
        for name, opt in team.optimizers.items():
            nn.utils.clip_grad_norm_(team[name].parameters(), team.cfg.grad_clip)
            opt.step()
    else:
        sum(totals.values()).backward()
        nn.utils.clip_grad_norm_(team.models.parameters(), team.cfg.grad_clip)
        team.optimizers["joint"].step()
    return _report(parts, totals)


def train_step_EC(team: Team, batch: dict, generator: torch.Generator) -> LossReport:
    assert team.condition == "ec"
    return train_step(team, batch, generator)


def train_step_BC(team: Team, batch: dict, generator: torch.Generator) -> LossReport:
    assert team.condition == "bc"
    return train_step(team, batch, generator)


def train_step_NC(team: Team, batch: dict, generator: torch.Generator) -> LossReport:
    assert team.condition == "nc"
    return train_step(team, batch, generator)


def train_step_BASELINE(team: Team, batch: dict, generator: torch.Generator) -> LossReport:
    assert team.condition == "baseline"
    return train_step(team, batch, generator)


def append_loss_log(path: Path, epoch: int, condition: str, report: LossReport) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["epoch", "condition", *LossReport.field_names()])
        row = [epoch, condition]
        for name in LossReport.field_names():
            v = getattr(report, name)
            row.append("" if v is None else repr(v))
        writer.writerow(row)


def read_loss_log(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))


def fit(dataset: Dataset, cfg: TrainingConfig, out_dir: str | Path | None = None,
        model_cfg: ModelConfig | None = None, bins=None) -> tuple[Team, list[LossReport]]:
    """Train one condition on full-episode batches.

    When ``out_dir`` is given the per-epoch loss log (``losses.csv``) and the
    final checkpoint (``checkpoint/``) are written there.
    """
    if bins is not None and str(bins) != str(dataset.cfg.bins_per_agent):
        raise ValueError(f"dataset bins {dataset.cfg.bins_per_agent} != requested {bins}")
    team = Team.create(cfg, model_cfg)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "losses.csv"
        if log_path.exists():
            log_path.unlink()
    n = len(dataset)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        reports = []
        for start in range(0, n, cfg.batch_size):
            batch = batch_tensors(dataset, np.sort(order[start:start + cfg.batch_size]), team.dtype)
            reports.append(train_step(team, batch, gen))
        rep = LossReport.mean(reports)
        history.append(rep)
        if log_path is not None:
            append_loss_log(log_path, epoch, cfg.condition, rep)
        log.info("epoch %d %s total_A=%.4f", epoch, cfg.condition, rep.total_A)
    if out_dir is not None:
        save_checkpoint(team, out_dir / "checkpoint", env_cfg=dataset.cfg, epochs_completed=cfg.epochs)
    return team, history


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(team: Team, directory: str | Path, env_cfg: EnvConfig | None = None,
                    epochs_completed: int = 0) -> Path:
    arrays = {name: p.detach().cpu().numpy() for name, p in team.models.state_dict().items()}
    any_model = team[agent_names(team.condition)[0]]
    meta = {
        "condition": team.condition,
        "model": any_model.cfg.to_dict(),
        "training": team.cfg.to_dict(),
        "env": None if env_cfg is None else env_cfg.to_dict(),
        "seed": team.cfg.seed,
        "epochs_completed": epochs_completed,
    }
    return storage.write_arrays(directory, arrays, meta, kind="checkpoint")


def load_checkpoint(directory: str | Path, dtype=torch.float32) -> tuple[Team, EnvConfig | None]:
    arrays, meta = storage.read_arrays(directory)
    cfg = TrainingConfig(**meta["training"])
    model_cfg = ModelConfig(**meta["model"])
    models = build_models(cfg.condition, cfg.seed, model_cfg, dtype)
    state = {k: torch.as_tensor(v, dtype=dtype) for k, v in arrays.items()}
    models.load_state_dict(state)
    env = None if meta.get("env") is None else EnvConfig.from_dict(meta["env"])
    return Team(cfg.condition, models, cfg), env
