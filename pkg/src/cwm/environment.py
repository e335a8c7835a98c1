"""Two-agent trajectory-drawing task.

Point P lives in the square [-w, w]^2.  Agent A pushes P along
e_u = (1, -1)/sqrt(2) and agent B along e_v = (1, 1)/sqrt(2), i.e. the x-y
frame rotated by -pi/4.  Agent A sees x exactly and a binned y; agent B sees
a binned x and y exactly.  Both readings carry Gaussian noise.

All functions accept batched inputs: positions of shape (..., 2) and scalar
actions of shape (...).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import ClassVar, Iterator, Sequence

import numpy as np

from . import storage

log = logging.getLogger(__name__)

R_OUTER, R_INNER, PEN = 5.0, 3.0, 5.0
THETA_MAX = 6.0 * math.pi  # curve closes after lcm(R, r) / R turns of the rolling circle

_S = 1.0 / math.sqrt(2.0)
E_U = np.array([_S, -_S])
E_V = np.array([_S, _S])


class _Infinite:
    """Sentinel for an unbinned sensory axis."""

    def __repr__(self) -> str:
        return "INFINITE"

    def __str__(self) -> str:
        return "inf"

    def __reduce__(self):
        return "INFINITE"


INFINITE = _Infinite()


def parse_bins(value) -> int | _Infinite:
    if value is INFINITE:
        return INFINITE
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "infinite", "infinity"):
            return INFINITE
        value = int(value)
    if isinstance(value, float) and math.isinf(value):
        return INFINITE
    if int(value) != value or int(value) < 1:
        raise ValueError(f"bins must be a positive integer or 'inf', got {value!r}")
    return int(value)


@dataclass(frozen=True)
class EnvConfig:
    bins_per_agent: int | _Infinite = INFINITE
    noise_std: float = 0.01
    episode_length: int = 200
    action_limit: float = 0.1
    workspace_halfwidth: float = 1.0
    trajectory_scale: float = 0.8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "bins_per_agent", parse_bins(self.bins_per_agent))
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.episode_length < 1:
            raise ValueError("episode_length must be positive")
        if self.action_limit <= 0 or self.workspace_halfwidth <= 0 or self.trajectory_scale <= 0:
            raise ValueError("action_limit, workspace_halfwidth and trajectory_scale must be positive")
        if self.trajectory_scale >= self.workspace_halfwidth:
            raise ValueError("trajectory must fit inside the workspace")

    @property
    def phase_step(self) -> float:
        return THETA_MAX / self.episode_length

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bins_per_agent"] = str(self.bins_per_agent)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        return cls(**d)


@dataclass
class EnvState:
    position: np.ndarray
    phase: float | np.ndarray = 0.0
    step: int = 0


@dataclass
class EpisodeRecord:
    obs_A: np.ndarray  # (T+1, 2)
    obs_B: np.ndarray
    act_A: np.ndarray  # (T,)
    act_B: np.ndarray
    truth: np.ndarray  # (T+1, 2)
    start_phase: float


def hypotrochoid_point(phase, cfg: EnvConfig) -> np.ndarray:
    """Point on the scaled 5-lobe hypotrochoid; ``phase`` may be an array."""
    theta = np.asarray(phase, dtype=float)
    k = (R_OUTER - R_INNER) / R_INNER
    scale = cfg.trajectory_scale / (R_OUTER - R_INNER + PEN)
    x = (R_OUTER - R_INNER) * np.cos(theta) + PEN * np.cos(k * theta)
    y = (R_OUTER - R_INNER) * np.sin(theta) - PEN * np.sin(k * theta)
    return scale * np.stack([x, y], axis=-1)


def ideal_trajectory(cfg: EnvConfig, start_phase: float = 0.0) -> np.ndarray:
    """One circuit sampled at the T control steps, shape (T, 2)."""
    return hypotrochoid_point(start_phase + cfg.phase_step * np.arange(cfg.episode_length), cfg)


def quantize(value, bins, halfwidth: float):
    """Center of the bin containing ``value`` when [-halfwidth, halfwidth]
    is cut into ``bins`` equal intervals.  Values outside are clamped."""
    bins = parse_bins(bins)
    v = np.clip(np.asarray(value, dtype=float), -halfwidth, halfwidth)
    if bins is INFINITE:
        return v
    width = 2.0 * halfwidth / bins
    idx = np.clip(np.floor((v + halfwidth) / width), 0, bins - 1)
    return -halfwidth + (idx + 0.5) * width


def clip_action(a, cfg: EnvConfig):
    return np.clip(a, -cfg.action_limit, cfg.action_limit)


def step(state: EnvState, a_A, a_B, cfg: EnvConfig) -> EnvState:
    a_A = np.asarray(a_A, dtype=float)[..., None]
    a_B = np.asarray(a_B, dtype=float)[..., None]
    return EnvState(position=state.position + a_A * E_U + a_B * E_V,
                    phase=state.phase + cfg.phase_step, step=state.step + 1)


def sense(position, agent: str, cfg: EnvConfig) -> np.ndarray:
    """Noise-free sensory reading."""
    w = cfg.workspace_halfwidth
    p = np.clip(np.asarray(position, dtype=float), -w, w)
    out = p.copy()
    if agent == "A":
        out[..., 1] = quantize(p[..., 1], cfg.bins_per_agent, w)
    elif agent == "B":
        out[..., 0] = quantize(p[..., 0], cfg.bins_per_agent, w)
    else:
        raise ValueError(f"unknown agent {agent!r}")
    return out


def observe(state: EnvState, agent: str, cfg: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    clean = sense(state.position, agent, cfg)
    if cfg.noise_std == 0:
        return clean
    return clean + rng.normal(0.0, cfg.noise_std, size=clean.shape)


def expert_actions(state: EnvState, cfg: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    """Exact inversion of the displacement to the next target point."""
    delta = hypotrochoid_point(state.phase + cfg.phase_step, cfg) - state.position
    return clip_action(delta @ E_U, cfg), clip_action(delta @ E_V, cfg)


def reset_random(cfg: EnvConfig, rng: np.random.Generator, n: int | None = None) -> EnvState:
    """Evaluation reset: P uniform over the workspace."""
    w = cfg.workspace_halfwidth
    shape = (2,) if n is None else (n, 2)
    return EnvState(position=rng.uniform(-w, w, size=shape), phase=0.0, step=0)


@dataclass
class Dataset(Sequence):
    """Stacked expert episodes; indexing yields :class:`EpisodeRecord`."""

    cfg: EnvConfig
    obs_A: np.ndarray  # (N, T+1, 2)
    obs_B: np.ndarray
    act_A: np.ndarray  # (N, T, 1)
    act_B: np.ndarray
    truth: np.ndarray  # (N, T+1, 2)
    start_phase: np.ndarray  # (N,)
    seed: int | None = None
    FIELDS: ClassVar[tuple] = ("obs_A", "obs_B", "act_A", "act_B", "truth", "start_phase")

    def __len__(self) -> int:
        return len(self.start_phase)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return EpisodeRecord(self.obs_A[i], self.obs_B[i], self.act_A[i, :, 0], self.act_B[i, :, 0],
                             self.truth[i], float(self.start_phase[i]))

    def __iter__(self) -> Iterator[EpisodeRecord]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.cfg, *(getattr(self, f)[idx] for f in self.FIELDS), seed=self.seed)

    def save(self, directory: str | Path) -> Path:
        arrays = {f: getattr(self, f) for f in self.FIELDS}
        meta = {"env": self.cfg.to_dict(), "seed": self.seed, "n_episodes": len(self)}
        return storage.write_arrays(directory, arrays, meta, kind="dataset")

    @classmethod
    def load(cls, directory: str | Path) -> "Dataset":
        arrays, meta = storage.read_arrays(directory)
        arrays = {k: v.astype(np.float64) for k, v in arrays.items()}
        return cls(EnvConfig.from_dict(meta["env"]), *(arrays[f] for f in cls.FIELDS),
                   seed=meta.get("seed"))


def generate_dataset(cfg: EnvConfig, n_episodes: int, rng: np.random.Generator | int | None = None,
                     allow_clipping: bool = False) -> Dataset:
    """Expert demonstrations: each episode starts on the curve at a random
    phase and traces one full circuit in ``cfg.episode_length`` steps.

    With the default limit the expert is never clipped for episodes of about
    115 steps or more.  Clipping raises unless ``allow_clipping`` is set, in
    which case the clipped demonstrations lag the curve and a warning is logged.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    seed = cfg.seed if rng is None else rng
    parent = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(seed)
    streams = parent.spawn(n_episodes)
    T = cfg.episode_length

    # per-episode streams: start phase first, then all sensor noise
    start = np.empty(n_episodes)
    noise = np.zeros((n_episodes, 2, T + 1, 2))
    for i, g in enumerate(streams):
        start[i] = g.uniform(0.0, THETA_MAX)
        if cfg.noise_std > 0:
            noise[i] = g.normal(0.0, cfg.noise_std, size=(2, T + 1, 2))

    state = EnvState(position=hypotrochoid_point(start, cfg), phase=start.copy())
    truth = np.empty((n_episodes, T + 1, 2))
    acts = np.empty((2, n_episodes, T))
    truth[:, 0] = state.position
    clipped = 0
    for t in range(T):
        delta = hypotrochoid_point(state.phase + cfg.phase_step, cfg) - state.position
        raw = np.stack([delta @ E_U, delta @ E_V])
        clipped += int(np.count_nonzero(np.abs(raw) > cfg.action_limit))
        raw = clip_action(raw, cfg)
        acts[:, :, t] = raw
        state = step(state, raw[0], raw[1], cfg)
        truth[:, t + 1] = state.position
    if clipped and not allow_clipping:
        raise RuntimeError(f"{clipped} expert actions clipped; raise action_limit or episode_length")
    if clipped:
        log.warning("%d expert actions clipped to +-%g", clipped, cfg.action_limit)

    obs_A = sense(truth, "A", cfg) + noise[:, 0]
    obs_B = sense(truth, "B", cfg) + noise[:, 1]
    return Dataset(cfg, obs_A, obs_B, acts[0][..., None], acts[1][..., None], truth, start,
                   seed=None if isinstance(seed, np.random.Generator) else seed)
