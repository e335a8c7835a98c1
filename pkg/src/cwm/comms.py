"""Windowed message inference, exchange and VFE-based selection at run time.

Each agent keeps the last W+1 observations, the last W actions and a cached
latent state at the oldest queued step.  Every control step it

1. re-infers states and its own message samples across the window,
2. swaps message sequences with the peer,
3. re-scores the window under both sequences by reconstruction + KL, and
4. acts from the state/message of whichever sequence explains the window
   better (ties go to its own messages).

All runtimes are batched: one row per independent trial.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import environment as env
from . import storage
from .agent_model import LatentState, WorldModel, unimix_probs
from .environment import EnvConfig, EnvState
from .training import Team, UnrollNoise, agent_names


@dataclass(frozen=True)
class CommConfig:
    window: int = 10
    communication_enabled: bool = True
    w_reconst: float = 1.0
    w_kld: float = 0.01

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")


def _as_tensor(x, dtype) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=dtype)


class AgentRuntime:
    """Queues, boundary cache and model of one agent."""

    def __init__(self, model: WorldModel, cfg: CommConfig, batch: int = 1,
                 action_limit: float = float("inf"), seed: int = 0):
        self.model = model
        self.cfg = cfg
        self.batch = batch
        self.action_limit = action_limit
        self.generator = torch.Generator().manual_seed(seed)
        self.obs_queue: deque[torch.Tensor] = deque()
        self.action_queue: deque[torch.Tensor] = deque()
        self.boundary: LatentState | None = None
        self.selected_history: list[torch.Tensor] = []
        self.last_selected: torch.Tensor | None = None  # (n, B, d) sequence the last action was based on
        self.last_noise: UnrollNoise | None = None
        self.steps = 0  # observations received so far
        self._pending = None

    @property
    def dtype(self):
        return self.model.dtype

    def push_observation(self, obs) -> None:
        obs = _as_tensor(obs, self.dtype).reshape(self.batch, -1)
        self.obs_queue.append(obs)
        self.steps += 1
        if len(self.obs_queue) > self.cfg.window + 1:
            raise RuntimeError("observation queue overflow; act() must run between observations")

    @property
    def window_transitions(self) -> int:
        return len(self.obs_queue) - 1

    def draw_noise(self) -> UnrollNoise:
        return UnrollNoise.draw(self.model.cfg, self.window_transitions, self.batch, self.generator, self.dtype)

    def _start_state(self, noise: UnrollNoise) -> LatentState:
        if self.boundary is not None:
            return self.boundary
        m = self.model
        zero_m = torch.zeros(self.batch, m.cfg.message_dim, dtype=self.dtype)
        zero_a = torch.zeros(self.batch, m.cfg.action_dim, dtype=self.dtype)
        h = m.recurrent_update(m.initial_state(self.batch), zero_m, zero_a)
        return LatentState(h, *m.posterior_latent(h, self.obs_queue[0], noise.gumbel[0]))

    def _unroll(self, start: LatentState, noise: UnrollNoise, messages: torch.Tensor | None):
        """Posterior unroll across the window.  With ``messages`` None the
        agent's own fresh samples condition each transition."""
        m = self.model
        states, own = [start], []
        vfe = torch.zeros(self.batch, dtype=self.dtype)
        acts = list(self.action_queue)
        for k in range(self.window_transitions):
            s = states[-1]
            if messages is None:
                msg = m.infer_message(s).rsample(noise.message[k])
                own.append(msg)
            else:
                msg = messages[k]
            h = m.recurrent_update(s, msg, acts[k])
            nxt = LatentState(h, *m.posterior_latent(h, self.obs_queue[k + 1], noise.gumbel[k + 1]))
            prior = unimix_probs(m.prior_head(h).unflatten(-1, (m.cfg.latent_dims, m.cfg.latent_classes)),
                                 m.cfg.unimix_fraction)
            r, kl = m.step_vfe(nxt, prior, self.obs_queue[k + 1])
            vfe = vfe + self.cfg.w_reconst * r + self.cfg.w_kld * kl
            states.append(nxt)
        msgs = torch.stack(own) if own else torch.zeros(0, self.batch, m.cfg.message_dim, dtype=self.dtype)
        return states, (msgs if messages is None else messages), vfe

    @torch.no_grad()
    def infer_window(self, noise: UnrollNoise | None = None):
        """States s_{t-n..t} and own message samples m_{t-n..t-1}, n = min(t, W)."""
        if not self.obs_queue:
            raise RuntimeError("infer_window needs at least one queued observation")
        noise = noise or self.draw_noise()
        states, msgs, vfe = self._unroll(self._start_state(noise), noise, None)
        self._pending = (noise, states, msgs, vfe)
        return states, msgs

    @torch.no_grad()
    def windowed_vfe(self, message_seq: torch.Tensor, noise: UnrollNoise | None = None):
        """Reconstruction + weighted KL over the window under ``message_seq``.

        Returns ``(vfe per row, states)``; zero for an empty window.
        """
        if message_seq.shape[0] != self.window_transitions:
            raise ValueError(f"expected {self.window_transitions} messages, got {message_seq.shape[0]}")
        if noise is None:
            noise = self._pending[0] if self._pending else self.draw_noise()
        states, _, vfe = self._unroll(self._start_state(noise), noise, message_seq)
        return vfe, states

    @torch.no_grad()
    def select_and_act(self, received: torch.Tensor):
        """Steps 3-4 for this agent, after ``infer_window`` and the exchange.

        Returns ``(action, adopted_peer_mask, vfe_own, vfe_peer)``.
        """
        noise, own_states, own_msgs, vfe_own = self._pending
        if received is own_msgs or self.window_transitions == 0:
            vfe_peer, peer_states = vfe_own, own_states
        else:
            vfe_peer, peer_states = self.windowed_vfe(received, noise)
        adopt = vfe_peer < vfe_own  # "<=" keeps own on ties
        n = self.window_transitions
        mask3 = adopt.reshape(1, -1, 1)
        selected = torch.where(mask3, received, own_msgs)
        states = [a.index(adopt, b) for a, b in zip(own_states, peer_states)]
        m_prev = selected[-1] if n > 0 else torch.zeros(self.batch, self.model.cfg.message_dim, dtype=self.dtype)
        action = self.model.policy(states[-1], m_prev).clamp(-self.action_limit, self.action_limit)
        self.selected_history.append(m_prev)
        self.last_selected, self.last_noise = selected, noise
        self.action_queue.append(action)
        # slide: the state after the expiring step, under the selected messages
        if self.boundary is None:
            self.boundary = states[0]
        if n == self.cfg.window:
            self.boundary = states[1]
            self.obs_queue.popleft()
            self.action_queue.popleft()
        self._pending = None
        return action, adopt, vfe_own, vfe_peer


def exchange(messages_A: torch.Tensor, messages_B: torch.Tensor, enabled: bool):
    """Swap sampled message sequences; without communication each side gets its own back."""
    if enabled:
        return messages_B, messages_A
    return messages_A, messages_B


def act(rt_A: AgentRuntime, rt_B: AgentRuntime, obs_A, obs_B, cfg: CommConfig):
    """One control step for both agents.  Returns ``(action_A, action_B, info)``."""
    rt_A.push_observation(obs_A)
    rt_B.push_observation(obs_B)
    _, m_A = rt_A.infer_window()
    _, m_B = rt_B.infer_window()
    recv_A, recv_B = exchange(m_A, m_B, cfg.communication_enabled)
    a_A, adopt_A, vA_own, vA_peer = rt_A.select_and_act(recv_A)
    a_B, adopt_B, vB_own, vB_peer = rt_B.select_and_act(recv_B)
    info = {"adopt_A": adopt_A, "adopt_B": adopt_B,
            "vfe_A": (vA_own, vA_peer), "vfe_B": (vB_own, vB_peer)}
    return a_A, a_B, info


class ConnectedRuntime:
    """Incremental filter for the connected condition: one shared message."""

    def __init__(self, team: Team, batch: int, action_limit: float, seed: int = 0):
        self.team = team
        self.batch = batch
        self.action_limit = action_limit
        self.generator = torch.Generator().manual_seed(seed)
        mA = team["A"]
        self.states = {k: team[k].initial_state(batch) for k in ("A", "B")}
        self.prev_action = {k: torch.zeros(batch, 1, dtype=mA.dtype) for k in ("A", "B")}
        self.msg = torch.zeros(batch, mA.cfg.message_dim, dtype=mA.dtype)

    @torch.no_grad()
    def act(self, obs_A, obs_B):
        out = {}
        for k, o in (("A", obs_A), ("B", obs_B)):
            m = self.team[k]
            noise = UnrollNoise.draw(m.cfg, 0, self.batch, self.generator, m.dtype)
            h = m.recurrent_update(self.states[k], self.msg, self.prev_action[k])
            self.states[k] = LatentState(h, *m.posterior_latent(h, _as_tensor(o, m.dtype), noise.gumbel[0]))
            out[k] = m.policy(self.states[k], self.msg).clamp(-self.action_limit, self.action_limit)
            self.prev_action[k] = out[k]
        self.used_msg = self.msg
        noise = torch.randn(self.batch, self.msg.shape[-1], generator=self.generator, dtype=self.msg.dtype)
        self.msg = self.team["joint"](self.states["A"], self.states["B"]).rsample(noise)
        return out["A"], out["B"]


class SoloRuntime:
    """Incremental filter for the single fully observing agent."""

    def __init__(self, team: Team, batch: int, action_limit: float, seed: int = 0):
        self.model = team["agent"]
        self.batch = batch
        self.action_limit = action_limit
        self.generator = torch.Generator().manual_seed(seed)
        m = self.model
        self.state = m.initial_state(batch)
        self.prev_action = torch.zeros(batch, m.cfg.action_dim, dtype=m.dtype)
        self.msg = torch.zeros(batch, m.cfg.message_dim, dtype=m.dtype)

    @torch.no_grad()
    def act(self, obs):
        m = self.model
        noise = UnrollNoise.draw(m.cfg, 1, self.batch, self.generator, m.dtype)
        h = m.recurrent_update(self.state, self.msg, self.prev_action)
        self.state = LatentState(h, *m.posterior_latent(h, _as_tensor(obs, m.dtype), noise.gumbel[0]))
        action = m.policy(self.state, self.msg).clamp(-self.action_limit, self.action_limit)
        self.prev_action = action
        self.used_msg = self.msg
        self.msg = m.infer_message(self.state).rsample(noise.message[0])
        return action[:, 0], action[:, 1]


@dataclass
class RolloutRecord:
    positions: np.ndarray  # (B, steps+1, 2)
    actions: np.ndarray  # (B, steps, 2): a_A, a_B
    adopted: np.ndarray  # (B, steps, 2): 1 where the agent used the peer's messages
    messages: np.ndarray  # (B, steps, 2, d): message each agent's policy acted on (shared for BC)
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def trajectory(self) -> np.ndarray:
        """Positions after each control step, (B, steps, 2)."""
        return self.positions[:, 1:]

    def save(self, directory: str | Path) -> Path:
        arrays = {"positions": self.positions, "actions": self.actions, "adopted": self.adopted,
                  "messages": self.messages}
        return storage.write_arrays(directory, arrays, {"seed": self.seed, **self.meta}, kind="rollout")

    @classmethod
    def load(cls, directory: str | Path) -> "RolloutRecord":
        arrays, meta = storage.read_arrays(directory)
        seed = meta.pop("seed")
        return cls(arrays["positions"].astype(float), arrays["actions"].astype(float),
                   arrays["adopted"].astype(float), arrays["messages"].astype(float), seed, meta)


def rollout(team: Team | None, env_cfg: EnvConfig, comm_cfg: CommConfig, steps: int, n_trials: int = 1,
            seed: int = 0, controller: str = "policy", start: str = "random") -> RolloutRecord:
    """Run ``n_trials`` episodes in lock step.

    ``controller="expert"`` bypasses the learned policies with the expert;
    ``start="trajectory"`` places P on the curve at phase 0 instead of a
    uniformly random position.
    """
    rng = np.random.default_rng(seed)
    if start == "random":
        state = env.reset_random(env_cfg, rng, n_trials)
    elif start == "trajectory":
        state = EnvState(np.repeat(env.hypotrochoid_point(0.0, env_cfg)[None], n_trials, 0), 0.0, 0)
    else:
        raise ValueError(f"unknown start {start!r}")
    positions = [state.position.copy()]
    actions, adopted, messages = [], [], []
    runtime = None
    d = 0 if team is None else team[agent_names(team.condition)[0]].cfg.message_dim
    if controller == "policy":
        if team is None:
            raise ValueError("policy rollout needs a team")
        runtime = _make_runtime(team, env_cfg, comm_cfg, n_trials, seed)
    elif controller != "expert":
        raise ValueError(f"unknown controller {controller!r}")
    for _ in range(steps):
        flags = np.zeros((n_trials, 2))
        used = np.zeros((n_trials, 2, d))
        if controller == "expert":
            a_A, a_B = env.expert_actions(state, env_cfg)
        elif team.condition == "baseline":
            a_A, a_B = runtime.act(state.position)
            a_A, a_B = a_A.numpy(), a_B.numpy()
            used[:] = runtime.used_msg.numpy()[:, None]
        else:
            o_A = env.observe(state, "A", env_cfg, rng)
            o_B = env.observe(state, "B", env_cfg, rng)
            if team.condition == "bc":
                a_A, a_B = runtime.act(o_A, o_B)
                used[:] = runtime.used_msg.numpy()[:, None]
            else:
                a_A, a_B, info = act(runtime[0], runtime[1], o_A, o_B, comm_cfg)
                flags = np.stack([info["adopt_A"].numpy(), info["adopt_B"].numpy()], -1).astype(float)
                used = np.stack([r.selected_history[-1].numpy() for r in runtime], 1)
            a_A, a_B = a_A.numpy()[:, 0], a_B.numpy()[:, 0]
        a_A = env.clip_action(np.asarray(a_A, dtype=float), env_cfg)
        a_B = env.clip_action(np.asarray(a_B, dtype=float), env_cfg)
        state = env.step(state, a_A, a_B, env_cfg)
        positions.append(state.position.copy())
        actions.append(np.stack([a_A, a_B], -1))
        adopted.append(flags)
        messages.append(used)

    def stack(xs, shape):
        return np.stack(xs, 1) if xs else np.zeros(shape)

    meta = {"condition": None if team is None else team.condition, "controller": controller,
            "communication": comm_cfg.communication_enabled, "window": comm_cfg.window,
            "n_trials": n_trials, "steps": steps, "start": start}
    return RolloutRecord(np.stack(positions, 1), stack(actions, (n_trials, 0, 2)),
                         stack(adopted, (n_trials, 0, 2)), stack(messages, (n_trials, 0, 2, d)), seed, meta)


def _make_runtime(team: Team, env_cfg: EnvConfig, comm_cfg: CommConfig, batch: int, seed: int):
    limit = env_cfg.action_limit
    if team.condition == "baseline":
        return SoloRuntime(team, batch, limit, seed)
    if team.condition == "bc":
        return ConnectedRuntime(team, batch, limit, seed)
    return tuple(AgentRuntime(team[k], comm_cfg, batch, limit, seed=seed * 2 + i)
                 for i, k in enumerate(agent_names(team.condition)))
