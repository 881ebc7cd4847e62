"""Experiment orchestration: plain-text configs, policy runs over seed
replicas, metrics/summary emission, checkpoints, and the CLI.

Determinism contract: every random stream derives from
default_rng([seed, tag, index]). Workload and initial-cache streams depend only
on the seed and episode index, never on the policy, so every policy faces
identical requests; evaluation episodes draw from separate streams shared by
all policies. Policy-private randomness (exploration, the random baseline) is
keyed by the policy id.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .agent_dqn import DqnAgent
from .agent_emrqn import EmrqnAgent, EpisodeResult, run_episode
from .baselines import (
    FifoPolicy,
    LeastRequestedPolicy,
    LruPolicy,
    RandomPolicy,
    ThresholdPolicy,
)
from .cache_env import CacheEnv
from .grad_core import CheckpointError, TrainingError, load_checkpoint, save_checkpoint
from .workload import (
    Catalog,
    RequestBatch,
    TraceHeader,
    build_catalog,
    sample_slot_requests,
    write_trace,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "parse_config_text",
    "load_config",
    "desk_preset",
    "make_policy",
    "run_seed",
    "SeedRunResult",
    "PhaseMetrics",
    "write_metrics",
    "read_metrics_hit_rate",
    "cmd_generate_trace",
    "cmd_run",
    "cmd_train",
    "cmd_evaluate",
    "cmd_compare",
    "main",
]

POLICY_NAMES = ("lru", "fifo", "least", "random", "threshold", "dqn", "emrqn")
TRAINABLE = ("dqn", "emrqn")
_POLICY_IDS = {name: i for i, name in enumerate(POLICY_NAMES)}

# stream tags for default_rng([seed, tag, index])
_TAG_TRAIN_REQUESTS = 0
_TAG_TRAIN_CACHE = 1
_TAG_EVAL_REQUESTS = 2
_TAG_EVAL_CACHE = 3
_TAG_POLICY = 4
_TAG_POLICY_INIT = 5
_TAG_TRACE = 6

METRICS_COLUMNS = ("episode", "step", "reward", "discounted_return", "epsilon",
                   "loss", "hit_num", "hit_den", "cache_size", "zipf")


class ConfigError(ValueError):
    """Raised on unknown keys, malformed values, or out-of-range settings."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Every tunable of the system; mirrors the documented key list in README."""

    # environment and workload
    catalog_size: int = 500
    cache_capacity: int = 50
    users: int = 20
    zipf: float = 1.2
    mean_requests: float = 1.0
    eta: float = 0.5
    cost_weight: float = 0.3  # config key: lambda
    empty_slot_mode: str = "agent"
    # experiment shape
    episodes: int = 200
    steps_per_episode: int = 500
    seeds: tuple[int, ...] = (0,)
    policy: str = "lru"
    out: str = "."
    gamma: float = 0.999
    eval_episodes: int = 10
    workers: int = 1
    # learning
    learning_rate: float = 0.0  # 0 selects the per-policy default
    weight_decay: float = 1e-5
    batch_size: int = 8
    replay_capacity: int = 100_000
    train_every: int = 4
    target_sync: int = 200
    hidden_size: int = 128
    epsilon_tau: float = 2000.0
    epsilon_floor: float = 0.01
    window: int = 8
    knn_k: int = 32
    memory_capacity: int = 80_000
    qex_mode: str = "stored"
    modify_targets: bool = False
    scan_recent: int = 0
    # compare grids
    policies: tuple[str, ...] = ()
    cache_sizes: tuple[int, ...] = ()
    zipfs: tuple[float, ...] = ()

    def default_learning_rate(self, policy: str) -> float:
        if self.learning_rate > 0:
            return self.learning_rate
        return {"dqn": 0.0002, "emrqn": 0.00015}.get(policy, 0.0)

    def validate(self) -> "ExperimentConfig":
        checks = [
            (self.catalog_size >= 1, "catalog_size must be >= 1"),
            (1 <= self.cache_capacity <= self.catalog_size,
             "cache_capacity must lie in [1, catalog_size]"),
            (self.users >= 1, "users must be >= 1"),
            (self.zipf >= 0, "zipf must be >= 0"),
            (self.mean_requests >= 0, "mean_requests must be >= 0"),
            (0 < self.eta < 1, "eta must lie in (0, 1)"),
            (0 < self.cost_weight < 1, "lambda must lie in (0, 1)"),
            (self.empty_slot_mode in ("agent", "threshold"),
             "empty_slot_mode must be 'agent' or 'threshold'"),
            (self.episodes >= 1, "episodes must be >= 1"),
            (self.steps_per_episode >= 1, "steps_per_episode must be >= 1"),
            (len(self.seeds) >= 1, "at least one seed required"),
            (self.policy in POLICY_NAMES, f"policy must be one of {', '.join(POLICY_NAMES)}"),
            (0 < self.gamma <= 1, "gamma must lie in (0, 1]"),
            (self.eval_episodes >= 1, "eval_episodes must be >= 1"),
            (self.workers >= 1, "workers must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.replay_capacity >= 1, "replay_capacity must be >= 1"),
            (self.train_every >= 1, "train_every must be >= 1"),
            (self.target_sync >= 1, "target_sync must be >= 1"),
            (self.hidden_size >= 1, "hidden_size must be >= 1"),
            (self.epsilon_tau > 0, "epsilon_tau must be > 0"),
            (0 <= self.epsilon_floor <= 1, "epsilon_floor must lie in [0, 1]"),
            (self.window >= 1, "window must be >= 1"),
            (self.knn_k >= 1, "knn_k must be >= 1"),
            (self.memory_capacity >= 1, "memory_capacity must be >= 1"),
            (self.qex_mode in ("stored", "reeval"), "qex_mode must be 'stored' or 'reeval'"),
            (self.scan_recent >= 0, "scan_recent must be >= 0"),
            (all(p in POLICY_NAMES for p in self.policies),
             f"policies entries must come from {', '.join(POLICY_NAMES)}"),
            (all(1 <= n <= self.catalog_size for n in self.cache_sizes),
             "cache_sizes entries must lie in [1, catalog_size]"),
            (all(z >= 0 for z in self.zipfs), "zipfs entries must be >= 0"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self


_FIELD_BY_KEY = {f.name: f for f in fields(ExperimentConfig)}
_KEY_ALIASES = {"lambda": "cost_weight"}


def _parse_value(key: str, raw: str):
    name = _KEY_ALIASES.get(key, key)
    f = _FIELD_BY_KEY.get(name)
    if f is None:
        raise ConfigError(f"unknown config key {key!r}")
    raw = raw.strip()
    try:
        if f.name == "seeds":
            return tuple(int(x) for x in raw.split(",") if x.strip() != "")
        if f.name == "policies":
            return tuple(x.strip() for x in raw.split(",") if x.strip() != "")
        if f.name == "cache_sizes":
            return tuple(int(x) for x in raw.split(",") if x.strip() != "")
        if f.name == "zipfs":
            return tuple(float(x) for x in raw.split(",") if x.strip() != "")
        if f.type == "int":
            return int(raw)
        if f.type == "float":
            return float(raw)
        if f.type == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"malformed value for {key!r}: {raw!r}") from exc


def parse_config_text(text: str) -> ExperimentConfig:
    """Flat key=value lines; blanks and '#' comments allowed; unknown keys fatal."""
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        values[_KEY_ALIASES.get(key, key)] = _parse_value(key, raw)
    return ExperimentConfig(**values).validate()


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def desk_preset(**overrides) -> ExperimentConfig:
    """Desk-scale defaults: catalog 500, N=50, K=20, mu=1.0, plus lean network
    knobs sized for CPU runs."""
    base = dict(catalog_size=500, cache_capacity=50, users=20, mean_requests=1.0,
                zipf=1.2, hidden_size=48, window=6, scan_recent=512, train_every=5)
    base.update(overrides)
    return ExperimentConfig(**base).validate()


def make_policy(name: str, config: ExperimentConfig, seed: int):
    if name not in POLICY_NAMES:
        raise ConfigError(f"unknown policy {name!r}")
    pid = _POLICY_IDS[name]
    policy_rng = np.random.default_rng([seed, _TAG_POLICY, pid])
    capacity = config.cache_capacity
    if name == "lru":
        return LruPolicy(capacity)
    if name == "fifo":
        return FifoPolicy(capacity)
    if name == "least":
        return LeastRequestedPolicy(capacity)
    if name == "random":
        return RandomPolicy(capacity, policy_rng)
    if name == "threshold":
        return ThresholdPolicy(capacity)
    init_rng = np.random.default_rng([seed, _TAG_POLICY_INIT, pid])
    common = dict(
        capacity=capacity,
        users=config.users,
        horizon=config.steps_per_episode,
        hidden_size=config.hidden_size,
        learning_rate=config.default_learning_rate(name),
        weight_decay=config.weight_decay,
        gamma=config.gamma,
        batch_size=config.batch_size,
        replay_capacity=config.replay_capacity,
        train_every=config.train_every,
        target_sync=config.target_sync,
        epsilon_tau=config.epsilon_tau,
        epsilon_floor=config.epsilon_floor,
        rng_init=init_rng,
        rng_explore=policy_rng,
    )
    if name == "dqn":
        return DqnAgent(**common)
    return EmrqnAgent(
        catalog_size=config.catalog_size,
        window=config.window,
        knn_k=config.knn_k,
        memory_capacity=config.memory_capacity,
        scan_recent=config.scan_recent,
        qex_mode=config.qex_mode,
        modify_targets=config.modify_targets,
        **common,
    )


def _batch_source(catalog: Catalog, config: ExperimentConfig,
                  rng: np.random.Generator) -> Callable[[int], RequestBatch]:
    def source(slot: int) -> RequestBatch:
        return sample_slot_requests(catalog, config.users, config.cache_capacity,
                                    config.mean_requests, rng, slot=slot)
    return source


def _initial_cache(config: ExperimentConfig, rng: np.random.Generator) -> list[int]:
    draw = rng.choice(config.catalog_size, size=config.cache_capacity, replace=False)
    return sorted(int(o) + 1 for o in draw)


@dataclass
class PhaseMetrics:
    """Step rows plus per-episode aggregates of one run phase."""

    rows: list[tuple] = field(default_factory=list)
    episode_g: list[float] = field(default_factory=list)
    episode_reward_mean: list[float] = field(default_factory=list)
    hit_num: int = 0
    hit_den: int = 0

    @property
    def hit_rate(self) -> float:
        return self.hit_num / self.hit_den if self.hit_den else 0.0

    @property
    def mean_g(self) -> float:
        return float(np.mean(self.episode_g)) if self.episode_g else 0.0

    def absorb(self, episode: int, result: EpisodeResult, config: ExperimentConfig) -> None:
        for t in range(len(result.rewards)):
            self.rows.append((
                episode, t, result.rewards[t], float(result.returns[t]),
                result.epsilons[t], result.losses[t],
                result.hit_numerators[t], result.hit_denominators[t],
                config.cache_capacity, config.zipf,
            ))
        self.episode_g.append(result.average_return)
        self.episode_reward_mean.append(float(np.mean(result.rewards)))
        self.hit_num += sum(result.hit_numerators)
        self.hit_den += sum(result.hit_denominators)


@dataclass
class SeedRunResult:
    seed: int
    policy: str
    train: PhaseMetrics
    eval: PhaseMetrics


def run_seed(
    config: ExperimentConfig,
    seed: int,
    policy_name: str | None = None,
    checkpoint_dir: str | Path | None = None,
) -> SeedRunResult:
    """Train/simulate for config.episodes, then evaluate config.eval_episodes
    frozen episodes on the shared evaluation streams."""
    name = policy_name or config.policy
    catalog = build_catalog(config.catalog_size, config.zipf)
    env = CacheEnv(config.catalog_size, config.cache_capacity, config.eta,
                   config.cost_weight, config.empty_slot_mode)
    policy = make_policy(name, config, seed)

    train = PhaseMetrics()
    for episode in range(config.episodes):
        req_rng = np.random.default_rng([seed, _TAG_TRAIN_REQUESTS, episode])
        cache_rng = np.random.default_rng([seed, _TAG_TRAIN_CACHE, episode])
        try:
            result = run_episode(env, policy, _batch_source(catalog, config, req_rng),
                                 config.steps_per_episode, config.gamma,
                                 _initial_cache(config, cache_rng))
        except TrainingError as exc:
            raise TrainingError(f"training diverged in episode {episode}: {exc}") from exc
        train.absorb(episode, result, config)
        if checkpoint_dir is not None and name in TRAINABLE:
            path = Path(checkpoint_dir) / f"checkpoint_{name}_seed{seed}.ckpt"
            meta = {**policy.checkpoint_meta(), "seed": seed, "episode": episode,
                    "steps_per_episode": config.steps_per_episode}
            save_checkpoint(path, policy.param_arrays(), meta)

    if name in TRAINABLE:
        policy.set_eval(True)
    evaluation = PhaseMetrics()
    for episode in range(config.eval_episodes):
        req_rng = np.random.default_rng([seed, _TAG_EVAL_REQUESTS, episode])
        cache_rng = np.random.default_rng([seed, _TAG_EVAL_CACHE, episode])
        result = run_episode(env, policy, _batch_source(catalog, config, req_rng),
                             config.steps_per_episode, config.gamma,
                             _initial_cache(config, cache_rng))
        evaluation.absorb(episode, result, config)
    return SeedRunResult(seed=seed, policy=name, train=train, eval=evaluation)


def _run_seed_task(config: ExperimentConfig, seed: int, policy: str,
                   checkpoint_dir: str | None) -> SeedRunResult:
    return run_seed(config, seed, policy, checkpoint_dir)


def run_all_seeds(config: ExperimentConfig, policy: str | None = None,
                  checkpoint_dir: str | Path | None = None) -> list[SeedRunResult]:
    """Seed replicas, sequential or process-parallel; outputs are identical
    either way because every replica owns its streams."""
    name = policy or config.policy
    ckpt = str(checkpoint_dir) if checkpoint_dir is not None else None
    if config.workers > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(_run_seed_task, config, s, name, ckpt)
                       for s in config.seeds]
            return [f.result() for f in futures]
    return [run_seed(config, s, name, ckpt) for s in config.seeds]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics(path: str | Path, rows: Sequence[tuple]) -> None:
    lines = [",".join(METRICS_COLUMNS)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_metrics_hit_rate(path: str | Path) -> float:
    """Recompute the request-weighted hit rate from a metrics file."""
    lines = Path(path).read_text(encoding="ascii").splitlines()
    header = lines[0].split(",")
    i_num, i_den = header.index("hit_num"), header.index("hit_den")
    num = den = 0
    for line in lines[1:]:
        parts = line.split(",")
        num += int(parts[i_num])
        den += int(parts[i_den])
    return num / den if den else 0.0


def write_summary(path: str | Path, entries: Sequence[tuple[str, object]]) -> None:
    lines = [f"{key}={_fmt(value)}" for key, value in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def summarize_results(config: ExperimentConfig, policy: str,
                      results: Sequence[SeedRunResult]) -> list[tuple[str, object]]:
    mean_g, std_g = _mean_std([r.train.mean_g for r in results])
    mean_hit, std_hit = _mean_std([r.train.hit_rate for r in results])
    mean_eg, std_eg = _mean_std([r.eval.mean_g for r in results])
    mean_eh, std_eh = _mean_std([r.eval.hit_rate for r in results])
    entries: list[tuple[str, object]] = [
        ("policy", policy),
        ("seeds", ",".join(str(s) for s in config.seeds)),
        ("episodes", config.episodes),
        ("steps_per_episode", config.steps_per_episode),
        ("eval_episodes", config.eval_episodes),
        ("cache_capacity", config.cache_capacity),
        ("catalog_size", config.catalog_size),
        ("zipf", config.zipf),
        ("mean_g", mean_g),
        ("std_g", std_g),
        ("mean_hit_rate", mean_hit),
        ("std_hit_rate", std_hit),
        ("mean_eval_g", mean_eg),
        ("std_eval_g", std_eg),
        ("mean_eval_hit_rate", mean_eh),
        ("std_eval_hit_rate", std_eh),
    ]
    for r in results:
        entries.append((f"seed_{r.seed}_g", r.train.mean_g))
        entries.append((f"seed_{r.seed}_hit_rate", r.train.hit_rate))
        entries.append((f"seed_{r.seed}_eval_g", r.eval.mean_g))
        entries.append((f"seed_{r.seed}_eval_hit_rate", r.eval.hit_rate))
    return entries


def _ensure_out(config: ExperimentConfig) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate_trace(config: ExperimentConfig) -> int:
    """Write one trace file per seed covering episodes * steps_per_episode slots."""
    out = _ensure_out(config)
    catalog = build_catalog(config.catalog_size, config.zipf)
    slots = config.episodes * config.steps_per_episode
    for seed in config.seeds:
        rng = np.random.default_rng([seed, _TAG_TRACE])
        batches = [
            sample_slot_requests(catalog, config.users, config.cache_capacity,
                                 config.mean_requests, rng, slot=t)
            for t in range(slots)
        ]
        header = TraceHeader(catalog_size=config.catalog_size, users=config.users,
                             cache_capacity=config.cache_capacity, zipf=config.zipf,
                             seed=seed, slots=slots)
        write_trace(out / f"trace_seed{seed}.txt", header, batches)
        print(f"wrote {out / f'trace_seed{seed}.txt'} ({slots} slots)")
    return 0


def cmd_run(config: ExperimentConfig) -> int:
    """Per-seed metrics files plus an aggregate summary for one policy."""
    out = _ensure_out(config)
    results = run_all_seeds(config)
    for r in results:
        write_metrics(out / f"metrics_{r.policy}_seed{r.seed}.csv", r.train.rows)
        write_metrics(out / f"eval_metrics_{r.policy}_seed{r.seed}.csv", r.eval.rows)
    write_summary(out / f"summary_{config.policy}.txt",
                  summarize_results(config, config.policy, results))
    mean_eh, _ = _mean_std([r.eval.hit_rate for r in results])
    mean_g, _ = _mean_std([r.train.mean_g for r in results])
    print(f"policy={config.policy} mean_g={mean_g!r} mean_eval_hit_rate={mean_eh!r}")
    return 0


def cmd_train(config: ExperimentConfig) -> int:
    """Train a learnable policy, persisting a rolling checkpoint every episode."""
    if config.policy not in TRAINABLE:
        raise ConfigError(f"policy {config.policy!r} has no trainable parameters")
    out = _ensure_out(config)
    results = run_all_seeds(config, checkpoint_dir=out)
    for r in results:
        write_metrics(out / f"metrics_{r.policy}_seed{r.seed}.csv", r.train.rows)
    write_summary(out / f"summary_{config.policy}.txt",
                  summarize_results(config, config.policy, results))
    for seed in config.seeds:
        print(f"checkpoint: {out / f'checkpoint_{config.policy}_seed{seed}.ckpt'}")
    return 0


def cmd_evaluate(config: ExperimentConfig, checkpoint: str | Path) -> int:
    """Frozen-policy evaluation from a checkpoint: epsilon=0, no learning, no
    memory writes (the external memory starts empty; it is not checkpointed)."""
    if config.policy not in TRAINABLE:
        raise ConfigError(f"policy {config.policy!r} does not load checkpoints")
    arrays, meta = load_checkpoint(checkpoint)
    if meta.get("policy") != config.policy:
        raise CheckpointError(
            f"checkpoint is for policy {meta.get('policy')!r}, config says {config.policy!r}")
    if meta.get("hidden_size") != config.hidden_size:
        raise CheckpointError(
            f"checkpoint hidden_size {meta.get('hidden_size')} does not match config "
            f"{config.hidden_size}")
    if config.policy == "emrqn" and meta.get("window") != config.window:
        raise CheckpointError(
            f"checkpoint window {meta.get('window')} does not match config {config.window}")
    out = _ensure_out(config)
    catalog = build_catalog(config.catalog_size, config.zipf)
    for seed in config.seeds:
        policy = make_policy(config.policy, config, seed)
        try:
            policy.load_param_arrays(arrays)
        except ValueError as exc:
            raise CheckpointError(str(exc)) from exc
        policy.set_eval(True)
        env = CacheEnv(config.catalog_size, config.cache_capacity, config.eta,
                       config.cost_weight, config.empty_slot_mode)
        phase = PhaseMetrics()
        for episode in range(config.eval_episodes):
            req_rng = np.random.default_rng([seed, _TAG_EVAL_REQUESTS, episode])
            cache_rng = np.random.default_rng([seed, _TAG_EVAL_CACHE, episode])
            result = run_episode(env, policy, _batch_source(catalog, config, req_rng),
                                 config.steps_per_episode, config.gamma,
                                 _initial_cache(config, cache_rng))
            phase.absorb(episode, result, config)
        write_metrics(out / f"eval_metrics_{config.policy}_seed{seed}.csv", phase.rows)
        print(f"seed={seed} eval_hit_rate={phase.hit_rate!r} eval_g={phase.mean_g!r}")
    return 0


def cmd_compare(config: ExperimentConfig) -> int:
    """Mean evaluation hit rate per (policy, cache size, zipf), as a CSV table."""
    if len(config.policies) < 2:
        raise ConfigError("compare needs a policies list with at least two entries")
    out = _ensure_out(config)
    cache_sizes = config.cache_sizes or (config.cache_capacity,)
    zipfs = config.zipfs or (config.zipf,)
    lines = ["policy,cache_size,zipf,mean_eval_hit_rate,std_eval_hit_rate"]
    for policy in config.policies:
        for n in cache_sizes:
            for z in zipfs:
                cell = replace(config, policy=policy, cache_capacity=n, zipf=z).validate()
                results = run_all_seeds(cell)
                mean_eh, std_eh = _mean_std([r.eval.hit_rate for r in results])
                lines.append(f"{policy},{n},{_fmt(z)},{_fmt(mean_eh)},{_fmt(std_eh)}")
                print(lines[-1])
    (out / "compare.csv").write_text("\n".join(lines) + "\n", encoding="ascii")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgecache",
        description="Cache content-update simulator and DRL experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="override: run this single seed")
        p.add_argument("--out", help="override: output directory")

    p = sub.add_parser("generate-trace", help="write synthetic request traces")
    common(p)
    p = sub.add_parser("run", help="run one policy over the configured seeds")
    common(p)
    p.add_argument("--policy", choices=POLICY_NAMES, help="override the config policy")
    p = sub.add_parser("train", help="train a learnable policy, saving checkpoints")
    common(p)
    p.add_argument("--policy", choices=TRAINABLE, help="override the config policy")
    p = sub.add_parser("evaluate", help="evaluate a checkpoint with a frozen policy")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file to load")
    p = sub.add_parser("compare", help="hit-rate matrix over policies/cache sizes/zipfs")
    common(p)
    return parser


def _config_from_args(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig().validate()
    updates = {}
    if args.seed is not None:
        updates["seeds"] = (args.seed,)
    if args.out is not None:
        updates["out"] = args.out
    if getattr(args, "policy", None):
        updates["policy"] = args.policy
    if updates:
        config = replace(config, **updates).validate()
    return config


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = _config_from_args(args)
        if args.command == "generate-trace":
            return cmd_generate_trace(config)
        if args.command == "run":
            return cmd_run(config)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "evaluate":
            return cmd_evaluate(config, args.checkpoint)
        if args.command == "compare":
            return cmd_compare(config)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, CheckpointError, TrainingError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
