"""Experiment configs, run directories and evaluation reports."""

from __future__ import annotations

import concurrent.futures
import csv
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .certified import build_replay, exploitability_upper, gap_bound, monte_carlo_value
from .exact import MAX, MIN, nash_backward_induction
from .game import ContractViolation, MarkovGame, builtin_game, generate_random_game, validate_game
from .learner import BASELINE, DEFAULT_EPS, FULL, EpisodeLog, Hyperparams, MetricsStream, run_baseline_hoeffding, \
    run_training
from .rng import SeededRng

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    game: dict  # {"builtin": name} | {"file": path} | {"random": {seed, S, A, B, H, reward_density}}
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    K: int = 1000
    seeds: list[int] = field(default_factory=lambda: [0])
    eps_grid: list[float] = field(default_factory=lambda: list(DEFAULT_EPS))
    output_dir: str = "runs"
    stride: int = 1
    algo: str = FULL

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.algo not in (FULL, BASELINE):
            raise ConfigError(f"algo must be {FULL!r} or {BASELINE!r}")
        if len(self.game) != 1 or next(iter(self.game)) not in ("builtin", "file", "random"):
            raise ConfigError("game must have exactly one of builtin, file, random")
        if "file" in self.game and not Path(self.game["file"]).exists():
            raise ConfigError(f"game file {self.game['file']} does not exist")
        try:
            self.hyperparams.validate()
        except ContractViolation as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "game": self.game,
            "hyperparams": self.hyperparams.to_dict(),
            "K": self.K,
            "seeds": list(self.seeds),
            "eps_grid": list(self.eps_grid),
            "output_dir": self.output_dir,
            "stride": self.stride,
            "algo": self.algo,
        }

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r}")
        hp_fields = {f.name for f in fields(Hyperparams)}
        hp = d.pop("hyperparams", {}) or {}
        unknown = set(hp) - hp_fields
        if unknown:
            raise ConfigError(f"unknown hyperparameters {sorted(unknown)}")
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        if "game" not in d:
            raise ConfigError("config needs a game")
        return cls(hyperparams=Hyperparams(**hp), **d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def load_game(source: dict) -> MarkovGame:
    if "builtin" in source:
        return builtin_game(source["builtin"])
    if "file" in source:
        return MarkovGame.load(source["file"])
    if "random" in source:
        p = dict(source["random"])
        return generate_random_game(int(p["seed"]), int(p["S"]), int(p["A"]), int(p["B"]), int(p["H"]),
                                    float(p.get("reward_density", 1.0)))
    raise ConfigError(f"bad game source {source!r}")


def worker_count(requested: int | None = None) -> int:
    cap = os.environ.get("ZSMG_THREADS")
    n = requested or os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_seed(cfg: ExperimentConfig, game: MarkovGame, seed: int, out: Path) -> dict:
    """Train one seed into ``out`` and return its manifest."""
    out.mkdir(parents=True, exist_ok=True)
    exact = nash_backward_induction(game)
    runner = run_training if cfg.algo == FULL else run_baseline_hoeffding
    state, metrics, log = runner(game, cfg.hyperparams, cfg.K, SeededRng(seed), exact, cfg.eps_grid)
    metrics.write_csv(out / "metrics.csv", cfg.stride)
    log.save(out / "episode_log.npz")
    np.savez_compressed(out / "learner.npz", **state.snapshot())
    game.save(out / "game.json")
    manifest = {
        "config_hash": cfg.config_hash(),
        "game_hash": game.content_hash(),
        "algo": cfg.algo,
        "seed": seed,
        "K": cfg.K,
        "stride": cfg.stride,
        "N0": state.params.N0,
        "iota": state.params.iota,
        "beta": state.params.beta,
        "gap_bound": float(np.mean(metrics.gap)),
        "negative_gaps": metrics.negative_gaps,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def _run_seed_job(args):
    cfg_dict, game_json, seed, out = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    return run_seed(cfg, MarkovGame.from_json(game_json), seed, Path(out))


def train(cfg: ExperimentConfig, workers: int | None = None) -> Path:
    cfg.validate()
    game = load_game(cfg.game)
    problems = validate_game(game)
    if problems:
        raise ContractViolation("invalid game: " + "; ".join(map(str, problems[:5])))
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg.to_dict(), game.to_json(), s, str(root / f"seed_{s}")) for s in cfg.seeds]
    n = min(worker_count(workers), len(jobs))
    if n <= 1:
        manifests = [_run_seed_job(j) for j in jobs]
    else:
        with concurrent.futures.ProcessPoolExecutor(n) as pool:
            manifests = list(pool.map(_run_seed_job, jobs))
    game.save(root / "game.json")
    _write_json(root / "config.json", cfg.to_dict())
    _write_json(root / "manifest.json", {
        "config_hash": cfg.config_hash(),
        "game_hash": game.content_hash(),
        "algo": cfg.algo,
        "seeds": list(cfg.seeds),
        "runs": manifests,
    })
    return root


def log_grid(K: int) -> list[int]:
    pts = sorted({max(1, K // 64), max(1, K // 16), max(1, K // 4), K})
    return pts


def prefix_log(log: EpisodeLog, K: int) -> EpisodeLog:
    events = [e for e in log.policy_events if e[2] <= K + 1]
    return EpisodeLog(log.H, log.S, log.A, log.B, K, log.states[:K], log.actions_a[:K], log.actions_b[:K],
                      log.next_states[:K], events)


def evaluate_run(run_dir, game: MarkovGame | None = None, mc_episodes: int = 0, budget: int | None = None) -> dict:
    """Evaluate every seed under ``run_dir``; returns the report dict and writes report.json
    and convergence.csv."""
    root = Path(run_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{manifest_path} not found")
    manifest = json.loads(manifest_path.read_text())
    if game is None:
        game = MarkovGame.load(root / "game.json")
    if game.content_hash() != manifest["game_hash"]:
        raise ContractViolation("game does not match the run (content hash differs)")
    exact = nash_backward_induction(game)
    kwargs = {} if budget is None else {"budget": budget}
    per_seed = []
    curve_rows = []
    for run in manifest["runs"]:
        seed = run["seed"]
        sdir = root / f"seed_{seed}"
        for name in ("metrics.csv", "episode_log.npz", "manifest.json"):
            if not (sdir / name).exists():
                raise FileNotFoundError(f"{sdir / name} not found")
        seed_manifest = json.loads((sdir / "manifest.json").read_text())
        if seed_manifest["config_hash"] != manifest["config_hash"] or seed_manifest["game_hash"] != manifest[
                "game_hash"]:
            raise ContractViolation(f"seed {seed} artifacts belong to a different config or game")
        metrics = MetricsStream.read_csv(sdir / "metrics.csv", game.H, game.S)
        log = EpisodeLog.load(sdir / "episode_log.npz")
        K = log.K
        store = build_replay(log)
        entry = {
            "seed": seed,
            "K": K,
            "gap_bound": gap_bound(metrics) if metrics.stride == 1 else None,
            "exploitability_upper_max": exploitability_upper(game, store, MAX, exact, **kwargs),
            "exploitability_upper_min": exploitability_upper(game, store, MIN, exact, **kwargs),
        }
        mc = []
        if mc_episodes:
            for side, opp in ((MAX, exact.ne_min), (MIN, exact.ne_max)):
                mean, se = monte_carlo_value(game, store, opp, side, mc_episodes, SeededRng(seed + 1_000_003))
                mc.append({"seed": seed, "side": side, "opponent": "nash", "episodes": mc_episodes,
                           "mean": mean, "stderr": se})
        entry["mc_estimates"] = mc
        per_seed.append(entry)
        for Kp in log_grid(K):
            sub = build_replay(prefix_log(log, Kp))
            gb = float(np.mean(metrics.gap[:Kp])) if metrics.stride == 1 else None
            curve_rows.append([seed, Kp, gb,
                               exploitability_upper(game, sub, MAX, exact, **kwargs)
                               + exploitability_upper(game, sub, MIN, exact, **kwargs)])

    def mean_of(key):
        vals = [e[key] for e in per_seed if e[key] is not None]
        return float(np.mean(vals)) if vals else None

    report = {
        "version": 1,
        "gap_bound": mean_of("gap_bound"),
        "exploitability_upper_max": mean_of("exploitability_upper_max"),
        "exploitability_upper_min": mean_of("exploitability_upper_min"),
        "mc_estimates": [m for e in per_seed for m in e["mc_estimates"]],
        "K": per_seed[0]["K"] if per_seed else 0,
        "seeds": [e["seed"] for e in per_seed],
        "config_hash": manifest["config_hash"],
        "per_seed": per_seed,
    }
    _write_json(root / "report.json", report)
    with open(root / "convergence.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "K", "gap_bound", "exploitability_upper"])
        for row in curve_rows:
            w.writerow([row[0], row[1], "" if row[2] is None else repr(row[2]), repr(row[3])])
    return report


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["gap_bound", "exploitability_upper_max", "exploitability_upper_min", "mc_estimates", "K", "seeds"],
    "properties": {
        "version": {"const": 1},
        "gap_bound": {"type": ["number", "null"]},
        "exploitability_upper_max": {"type": "number"},
        "exploitability_upper_min": {"type": "number"},
        "mc_estimates": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["seed", "side", "mean", "stderr"],
                "properties": {
                    "seed": {"type": "integer"},
                    "side": {"enum": ["max", "min"]},
                    "opponent": {"type": "string"},
                    "episodes": {"type": "integer", "minimum": 1},
                    "mean": {"type": "number"},
                    "stderr": {"type": "number"},
                },
            },
        },
        "K": {"type": "integer", "minimum": 1},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "config_hash": {"type": "string"},
        "per_seed": {"type": "array"},
    },
}


def dump_report_schema() -> str:
    return json.dumps(REPORT_SCHEMA, indent=2) + "\n"
