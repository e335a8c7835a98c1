"""Experiment plans: conditions x bins x seeds, on-disk layout and ordering checks.

Layout under the output root::

    <root>/plan.json
    <root>/results.csv                       results table, rebuilt from the cells
    <root>/<bins>/data/{train,test}/         datasets
    <root>/<bins>/<condition>/<seed>/checkpoint/
    <root>/<bins>/<condition>/<seed>/losses.csv
    <root>/<bins>/<condition>/<seed>/results/
    <root>/figures/
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import plotting, storage
from .environment import INFINITE, Dataset, EnvConfig, generate_dataset, parse_bins
from .evaluation import EvalSummary, append_result, evaluate_condition, read_results, teacher_forced_messages
from .training import CONDITIONS, TrainingConfig, fit, load_checkpoint

log = logging.getLogger(__name__)

PLAN_VERSION = 1
TEST_SEED_OFFSET = 10_000


@dataclass
class ExperimentPlan:
    bins_list: list = field(default_factory=lambda: ["inf", 8, 6, 2, 1])
    conditions: list = field(default_factory=lambda: ["ec", "bc", "nc", "baseline"])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    episodes: int = 2000
    test_episodes: int = 100
    epochs: int = 1000
    batch_size: int = 500
    learning_rate: float = 3e-4
    trials: int = 100
    window: int = 10
    data_seed: int = 0
    noise_std: float = 0.01
    episode_length: int = 200
    version: int = PLAN_VERSION

    def __post_init__(self):
        if not self.bins_list or not self.conditions or not self.seeds:
            raise ValueError("bins_list, conditions and seeds must be nonempty")
        self.bins_list = [str(parse_bins(b)) for b in self.bins_list]
        self.conditions = [c.lower() for c in self.conditions]
        bad = set(self.conditions) - set(CONDITIONS)
        if bad:
            raise ValueError(f"unknown conditions {sorted(bad)}")
        if self.version != PLAN_VERSION:
            raise ValueError(f"unsupported plan version {self.version}")

    @classmethod
    def scaled(cls) -> "ExperimentPlan":
        """Desk-scale preset used by the ordering checks.

        Batches of 125 keep the full preset's four updates per epoch on a
        quarter of the data.
        """
        return cls(bins_list=["inf", 1], seeds=[0], episodes=500, epochs=200, batch_size=125, learning_rate=1e-3)

    @classmethod
    def paper(cls) -> "ExperimentPlan":
        return cls()

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentPlan":
        return cls(**json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        storage.dump_json(asdict(self), Path(path))

    def cells(self):
        """(bins, condition, seed) triples.  The baseline ignores binning, so
        it is trained once per seed, at the unbinned setting when present."""
        base_bins = "inf" if "inf" in self.bins_list else self.bins_list[0]
        for b in self.bins_list:
            for c in self.conditions:
                if c == "baseline" and b != base_bins:
                    continue
                for s in self.seeds:
                    yield b, c, s

    def estimated_hours(self, seconds_per_agent_epoch_at_500: float = 3.0) -> float:
        """Single-core estimate: cost scales with episodes x epochs x agents."""
        agents = {"ec": 2.6, "nc": 2.0, "bc": 1.8, "baseline": 1.0}  # measured relative costs
        total = sum(agents[c] for _, c, _ in self.cells())
        per = seconds_per_agent_epoch_at_500 * self.episodes / 500 * self.epochs * self.episode_length / 200
        return total * per / 3600.0


def env_config(bins: str, plan: ExperimentPlan, seed: int) -> EnvConfig:
    return EnvConfig(bins_per_agent=bins, noise_std=plan.noise_std, episode_length=plan.episode_length, seed=seed)


def data_dirs(root: Path, bins: str) -> tuple[Path, Path]:
    return root / bins / "data" / "train", root / bins / "data" / "test"


def ensure_data(root: Path, bins: str, plan: ExperimentPlan) -> tuple[Dataset, Dataset]:
    train_dir, test_dir = data_dirs(root, bins)
    out = []
    for d, n, seed in ((train_dir, plan.episodes, plan.data_seed),
                       (test_dir, plan.test_episodes, plan.data_seed + TEST_SEED_OFFSET)):
        cfg = env_config(bins, plan, seed)
        if (d / storage.MANIFEST).exists():
            ds = Dataset.load(d)
            if len(ds) == n and ds.seed == seed and ds.cfg == cfg:
                out.append(ds)
                continue
        ds = generate_dataset(cfg, n)
        ds.save(d)
        out.append(Dataset.load(d))  # train on exactly what is on disk
    return out[0], out[1]


def cell_dir(root: Path, bins: str, condition: str, seed: int) -> Path:
    return root / bins / condition / str(seed)


def _checkpoint_matches(ckpt: Path, cfg: TrainingConfig) -> bool:
    try:
        meta = storage.read_manifest(ckpt)["meta"]
    except (FileNotFoundError, ValueError):
        return False
    return meta.get("training") == cfg.to_dict() and meta.get("epochs_completed") == cfg.epochs


def run_cell(root: Path, bins: str, condition: str, seed: int, plan: ExperimentPlan,
             resume: bool = True) -> list[EvalSummary]:
    train, test = ensure_data(root, bins, plan)
    out = cell_dir(root, bins, condition, seed)
    cfg = TrainingConfig(condition=condition, seed=seed, epochs=plan.epochs, batch_size=plan.batch_size,
                         learning_rate=plan.learning_rate)
    ckpt = out / "checkpoint"
    t0 = time.time()
    if resume and _checkpoint_matches(ckpt, cfg):
        log.info("reusing %s", ckpt)
    else:
        out.mkdir(parents=True, exist_ok=True)
        storage.dump_json({"training": cfg.to_dict(), "env": train.cfg.to_dict(), "version": PLAN_VERSION},
                          out / "config.json")
        fit(train, cfg, out)
    team, _ = load_checkpoint(ckpt)
    env_cfg = env_config(bins, plan, plan.data_seed)
    modes = [True, False] if condition == "ec" else [condition != "nc"]
    summaries = []
    for comm in modes:
        summary, rec = evaluate_condition(team, env_cfg, plan.trials, comm, seed=seed, window=plan.window,
                                          test_data=test)
        rec.save(out / "results" / f"rollout_{'on' if comm else 'off'}")
        storage.dump_json(summary.to_dict(), out / "results" / f"summary_{'on' if comm else 'off'}.json")
        summaries.append(summary)
    log.info("cell %s/%s/%s done in %.0fs", bins, condition, seed, time.time() - t0)
    return summaries


def run_plan(plan: ExperimentPlan, root: str | Path, resume: bool = True, jobs: int = 1,
             figure_format: str = "png") -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    plan.save(root / "plan.json")
    results = root / "results.csv"
    results.unlink(missing_ok=True)  # rebuilt from the cells on every run
    cells = list(plan.cells())
    for b in plan.bins_list:
        ensure_data(root, b, plan)
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            futures = [pool.submit(run_cell, root, b, c, s, plan, resume) for b, c, s in cells]
            for fut in futures:
                for summary in fut.result():
                    append_result(results, summary)
    else:
        for b, c, s in cells:
            for summary in run_cell(root, b, c, s, plan, resume):
                append_result(results, summary)
    messages = None
    if "ec" in plan.conditions:
        # message scatter for the most binned setting, where communication matters most
        b = plan.bins_list[-1]
        team, _ = load_checkpoint(cell_dir(root, b, "ec", plan.seeds[0]) / "checkpoint")
        messages = export_message_example(team, ensure_data(root, b, plan)[1], root / "figures" / "messages_example")
    render_figures(results, root / "figures", figure_format, messages)
    return results


def render_figures(results: str | Path, out_dir: str | Path, fmt: str = "png",
                   messages_dir: str | Path | None = None) -> list[Path]:
    rows = read_results(results)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [
        plotting.condition_figure(rows, out_dir / f"coordination_by_condition.{fmt}"),
        plotting.communication_figure(rows, out_dir / f"communication_ablation.{fmt}"),
        plotting.rsa_figure(rows, out_dir / f"rsa_by_condition.{fmt}"),
    ]
    if messages_dir is not None:
        arrays, _ = storage.read_arrays(messages_dir)
        msgs = {k.removeprefix("messages_"): v for k, v in arrays.items() if k.startswith("messages_")}
        paths.append(plotting.message_figure(arrays["positions"], msgs, out_dir / f"messages.{fmt}"))
    return paths


def export_message_example(team, data: Dataset, out_dir: str | Path, episode: int = 0, seed: int = 0) -> Path:
    """Teacher-forced messages for one episode, next to the true positions."""
    example = data.subset(slice(episode, episode + 1))
    msgs = teacher_forced_messages(team, example, seed)
    arrays = {"positions": example.truth[0, :data.cfg.episode_length]}
    arrays.update({f"messages_{k}": v[0] for k, v in msgs.items()})
    return storage.write_arrays(out_dir, arrays, {"condition": team.condition, "episode": episode}, kind="messages")


# ---------------------------------------------------------------- orderings

@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _mean_of(rows, condition, bins, comm=None, value="mean") -> float:
    vals = [float(r[value]) for r in rows
            if r["condition"] == condition and r["bins"] == bins and (comm is None or r["communication"] == comm)
            and r[value] not in ("", "nan")]
    return float(np.mean(vals)) if vals else math.nan


def check_orderings(rows: list[dict], markov_bins: str = "inf", dec_bins: str = "1") -> list[Check]:
    """Qualitative orderings on a results table (seed-averaged)."""
    checks = []
    base = _mean_of(rows, "baseline", markov_bins)
    if not math.isnan(base):
        means = {"ec": _mean_of(rows, "ec", markov_bins, "on"), "bc": _mean_of(rows, "bc", markov_bins),
                 "nc": _mean_of(rows, "nc", markov_bins, "off"), "baseline": base}
        ok = all(abs(v - base) <= 0.10 for v in means.values())
        checks.append(Check("markov_game_parity", ok,
                            ", ".join(f"{k}={v:.3f}" for k, v in means.items()) + " (all within 0.10 of baseline)"))
    ec = _mean_of(rows, "ec", dec_bins, "on")
    bc = _mean_of(rows, "bc", dec_bins)
    nc = _mean_of(rows, "nc", dec_bins, "off")
    if not any(math.isnan(v) for v in (ec, bc, nc)):
        ok = bc >= ec >= nc and ec - nc >= 0.05
        checks.append(Check("dec_pomdp_ordering", ok, f"bc={bc:.3f} >= ec={ec:.3f} >= nc={nc:.3f}, ec-nc={ec - nc:.3f} >= 0.05"))
    off = _mean_of(rows, "ec", dec_bins, "off")
    if not any(math.isnan(v) for v in (ec, off)):
        checks.append(Check("communication_ablation", ec > off, f"on={ec:.3f} > off={off:.3f}"))
    r_ec = _mean_of(rows, "ec", dec_bins, "on", "rsa_mean")
    r_bc = _mean_of(rows, "bc", dec_bins, None, "rsa_mean")
    r_nc = _mean_of(rows, "nc", dec_bins, "off", "rsa_mean")
    if not any(math.isnan(v) for v in (r_ec, r_bc, r_nc)):
        checks.append(Check("rsa_ordering", r_ec > r_bc and r_ec > r_nc,
                            f"ec={r_ec:.3f} > bc={r_bc:.3f}, ec > nc={r_nc:.3f}"))
    return checks
