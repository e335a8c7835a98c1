"""Coordination score and message/trajectory RSA."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.distance import pdist
from scipy.stats import spearmanr

from . import environment as env
from .comms import CommConfig, rollout
from .environment import Dataset, EnvConfig
from .training import Team, UnrollNoise, batch_tensors, connected_unroll, individual_vfe

log = logging.getLogger(__name__)


class MetricUndefined(ValueError):
    """A metric has no value for this input (zero variance)."""


@dataclass
class TrialResult:
    max_cross_correlation: float
    trajectory: np.ndarray
    selection_rate_A: float = 0.0
    selection_rate_B: float = 0.0


@dataclass
class RsaResult:
    spearman_rho: float
    n_pairs: int


def max_cross_correlation(generated: np.ndarray, ideal: np.ndarray) -> float:
    """Max over circular lags of the mean per-axis Pearson correlation.

    Lag l compares ``generated[t]`` with ``ideal[(t + l) % T]``.
    """
    g = np.asarray(generated, dtype=float)
    f = np.asarray(ideal, dtype=float)
    if g.shape != f.shape or g.ndim != 2 or g.shape[0] < 2:
        raise ValueError(f"need two equal (T, D) arrays with T >= 2, got {g.shape} and {f.shape}")
    mag_g, mag_f = np.abs(g).max(0), np.abs(f).max(0)
    g = g - g.mean(0)
    f = f - f.mean(0)
    scale_g, scale_f = np.abs(g).max(0), np.abs(f).max(0)
    # an axis whose spread is at rounding level of its magnitude is constant
    if np.any(scale_g <= 1e-12 * mag_g) or np.any(scale_f <= 1e-12 * mag_f):
        raise MetricUndefined("trajectory axis with zero variance")
    # Pearson is scale-free; unit scaling keeps tiny axes out of subnormal range
    g, f = g / scale_g, f / scale_f
    norm = np.sqrt((g ** 2).sum(0) * (f ** 2).sum(0))
    # circular cross-correlation per axis: c[l] = sum_t g[t] f[t + l]
    c = np.fft.irfft(np.conj(np.fft.rfft(g, axis=0)) * np.fft.rfft(f, axis=0), n=g.shape[0], axis=0)
    return float((c / norm).mean(1).max())


def rsa_score(messages: np.ndarray, positions: np.ndarray) -> RsaResult:
    """Spearman correlation between the upper triangles of the two Euclidean
    dissimilarity matrices."""
    m = np.asarray(messages, dtype=float)
    p = np.asarray(positions, dtype=float)
    if len(m) != len(p) or len(m) < 3:
        raise ValueError("need equal-length sequences of at least 3 points")
    dm, dp = pdist(m), pdist(p)
    # spread at rounding level would rank pure noise
    if any(np.ptp(d) <= 1e-12 * max(np.abs(d).max(), 1e-300) for d in (dm, dp)):
        raise MetricUndefined("constant dissimilarities; rank correlation undefined")
    rho = spearmanr(dm, dp).statistic
    return RsaResult(float(rho), len(dm))


# ---------------------------------------------------------------- batch evaluation

@torch.no_grad()
def teacher_forced_messages(team: Team, data: Dataset, seed: int = 0) -> dict[str, np.ndarray]:
    """Message posterior means while reconstructing expert episodes.

    Returns arrays (N, T, d) keyed by agent ("A"/"B", "shared" for the
    connected condition, "agent" for the baseline).  Message means condition
    each transition so the analysis is deterministic apart from the latent
    draws, which come from ``seed``.
    """
    gen = torch.Generator().manual_seed(seed)
    b = batch_tensors(data, dtype=team.dtype)
    N, T1, _ = b["obs_A"].shape
    out = {}
    if team.condition == "bc":
        mA, mB = team["A"], team["B"]
        nA = UnrollNoise.draw(mA.cfg, T1 - 1, N, gen, team.dtype)
        nB = UnrollNoise.draw(mB.cfg, T1 - 1, N, gen, team.dtype)
        nA.message.zero_()  # zero noise: the shared message equals its mean
        _, dists, _ = connected_unroll(mA, mB, team["joint"], b["obs_A"], b["obs_B"], b["act_A"], b["act_B"], nA, nB)
        out["shared"] = torch.stack([d.mean for d in dists], 1).numpy()
        return out
    if team.condition == "baseline":
        items = [("agent", b["truth"], torch.cat([b["act_A"], b["act_B"]], -1))]
    else:
        items = [("A", b["obs_A"], b["act_A"]), ("B", b["obs_B"], b["act_B"])]
    for name, obs, acts in items:
        m = team[name]
        noise = UnrollNoise.draw(m.cfg, T1 - 1, N, gen, team.dtype)
        noise.message.zero_()
        u = individual_vfe(m, obs, acts, noise)
        out[name] = torch.stack([d.mean for d in u.messages], 1).numpy()
    return out


def rsa_for_team(team: Team, data: Dataset, seed: int = 0) -> dict[str, list[float]]:
    """Per-episode RSA of each message stream against the true P positions.

    Messages m_t are inferred from s_t for t = 0..T-1 and compared with
    P at the same steps.
    """
    msgs = teacher_forced_messages(team, data, seed)
    out = {}
    for name, arr in msgs.items():
        vals = []
        for i in range(arr.shape[0]):
            try:
                vals.append(rsa_score(arr[i], data.truth[i, :arr.shape[1]]).spearman_rho)
            except MetricUndefined:
                log.warning("RSA undefined for %s episode %d; skipped", name, i)
        out[name] = vals
    return out


@dataclass
class EvalSummary:
    condition: str
    bins: str
    seed: int
    communication: bool
    n_trials: int
    mean: float
    std: float
    exclusions: int
    rsa: dict[str, float] = field(default_factory=dict)
    selection_rate_A: float = 0.0
    selection_rate_B: float = 0.0

    @property
    def rsa_mean(self) -> float:
        return float(np.mean(list(self.rsa.values()))) if self.rsa else math.nan

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rsa_mean"] = self.rsa_mean
        return d


def score_trials(trajectories: np.ndarray, env_cfg: EnvConfig) -> tuple[list[float], int]:
    ideal = env.ideal_trajectory(env_cfg)
    scores, excluded = [], 0
    for traj in trajectories:
        try:
            scores.append(max_cross_correlation(traj, ideal))
        except MetricUndefined:
            excluded += 1
    if excluded:
        log.warning("%d degenerate trajectories excluded", excluded)
    return scores, excluded


def evaluate_condition(team: Team | None, env_cfg: EnvConfig, n_trials: int, communication: bool = True,
                       seed: int = 0, window: int = 10, test_data: Dataset | None = None,
                       controller: str = "policy", start: str = "random") -> tuple[EvalSummary, "RolloutRecord"]:
    """Coordination score over ``n_trials`` rollouts plus (optionally) RSA on
    held-out expert episodes."""
    w_kld = team.cfg.w_kld if team is not None else 0.01
    comm = CommConfig(window=window, communication_enabled=communication, w_kld=w_kld)
    rec = rollout(team, env_cfg, comm, env_cfg.episode_length, n_trials, seed, controller, start)
    scores, excluded = score_trials(rec.trajectory, env_cfg)
    rsa = {}
    if test_data is not None and team is not None:
        rsa = {k: float(np.mean(v)) if v else math.nan for k, v in rsa_for_team(team, test_data, seed).items()}
    condition = controller if team is None else team.condition
    adopted = rec.adopted.mean((0, 1)) if rec.adopted.size else np.zeros(2)
    summary = EvalSummary(condition, str(env_cfg.bins_per_agent), seed, communication, n_trials,
                          float(np.mean(scores)) if scores else math.nan,
                          float(np.std(scores)) if scores else math.nan,
                          excluded, rsa, float(adopted[0]), float(adopted[1]))
    return summary, rec


RESULT_COLUMNS = ["condition", "bins", "seed", "communication", "n_trials", "mean", "std", "exclusions",
                  "rsa_A", "rsa_B", "rsa_shared", "rsa_agent", "rsa_mean", "selection_rate_A", "selection_rate_B"]


def append_result(path: str | Path, summary: EvalSummary) -> None:
    """Append one row to the results table, writing the header on creation."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    d = summary.to_dict()
    row = {k: d.get(k, "") for k in RESULT_COLUMNS}
    row["communication"] = "on" if summary.communication else "off"
    for k in ("A", "B", "shared", "agent"):
        row[f"rsa_{k}"] = summary.rsa.get(k, "")
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        if new:
            writer.writeheader()
        writer.writerow(row)


def read_results(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))
