"""Config-driven experiment pipeline.

One experiment = one JSON config describing the environment, the
demonstration data, the copycat, a roster of methods, and the evaluation
protocol. The runner executes every (method, seed) pair, writes per-run
artifacts into isolated directories, and aggregates a mean/std CSV over
seeds. Every artifact carries the config hash so runs from different configs
cannot be mixed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .bcpd import bcpd_scores_for_dataset
from .boosting import boosting_weights
from .copycat import (
    ApeTable,
    CopycatSpec,
    compute_ape,
    constant_mean_mse,
    copycat_condition,
    copycat_heldout_mse,
    export_ape_csv,
    squared_error_per_sample,
    train_copycat,
)
from .demos import (
    Dataset,
    Trajectory,
    build_history_dataset,
    collect_demonstrations,
    load_trajectories,
    save_trajectories,
    split_by_trajectory,
)
from .evaluation import avg_ape, loss_breakdown, rollout, rollout_imitation_error
from .imitation import PolicySpec, TrainedPolicy, dagger, load_policy, save_policy, train_bc, train_history_dropout
from .mlp import ConfigError, forward_batch
from .toycar import ToyCarConfig
from .training import TrainConfig, derived_seed
from .weighting import WeightScheme

EVAL_SEED_TAG = 2001
AVGAPE_SEED_TAG = 2002


@dataclass(frozen=True)
class DataConfig:
    episodes: int = 60
    noise_rate: float = 0.1
    history: int = 6
    context: int = 3
    val_fraction: float = 0.2
    seed: int = 1234
    context_source: str = "label"

    def to_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "noise_rate": self.noise_rate,
            "history": self.history,
            "context": self.context,
            "val_fraction": self.val_fraction,
            "seed": self.seed,
            "context_source": self.context_source,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        return cls(
            episodes=int(d.get("episodes", 60)),
            noise_rate=float(d.get("noise_rate", 0.1)),
            history=int(d.get("history", 6)),
            context=int(d.get("context", 3)),
            val_fraction=float(d.get("val_fraction", 0.2)),
            seed=int(d.get("seed", 1234)),
            context_source=str(d.get("context_source", "label")),
        )


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 100
    avg_ape: bool = True
    avg_ape_episodes: int = 16
    breakdown_percentile: float = 10.0
    stall_speed_fraction: float = 0.05
    stall_steps: int = 30

    def to_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "avg_ape": self.avg_ape,
            "avg_ape_episodes": self.avg_ape_episodes,
            "breakdown_percentile": self.breakdown_percentile,
            "stall_speed_fraction": self.stall_speed_fraction,
            "stall_steps": self.stall_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        return cls(
            episodes=int(d.get("episodes", 100)),
            avg_ape=bool(d.get("avg_ape", True)),
            avg_ape_episodes=int(d.get("avg_ape_episodes", 16)),
            breakdown_percentile=float(d.get("breakdown_percentile", 10.0)),
            stall_speed_fraction=float(d.get("stall_speed_fraction", 0.05)),
            stall_steps=int(d.get("stall_steps", 30)),
        )


@dataclass(frozen=True)
class MethodConfig:
    name: str
    policy: PolicySpec
    scheme: WeightScheme
    train: TrainConfig
    dagger: Optional[dict] = None  # {"query_budget": int, "n_rounds": int}

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "policy": self.policy.to_dict(),
            "scheme": self.scheme.to_dict(),
            "train": self.train.to_dict(),
        }
        if self.dagger is not None:
            d["dagger"] = dict(self.dagger)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MethodConfig":
        return cls(
            name=str(d["name"]),
            policy=PolicySpec.from_dict(d.get("policy", {})),
            scheme=WeightScheme.from_dict(d.get("scheme", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            dagger=dict(d["dagger"]) if "dagger" in d and d["dagger"] is not None else None,
        )


def _default_methods() -> tuple[MethodConfig, ...]:
    train = TrainConfig(learning_rate=1e-3, batch_size=128, iterations=3000, rng_seed=0)
    return (
        MethodConfig("BC-SO", PolicySpec(history=0, hidden_dims=(64, 64)), WeightScheme("uniform"), train),
        MethodConfig("BC-OH", PolicySpec(history=6, hidden_dims=(64, 64)), WeightScheme("uniform"), train),
        MethodConfig("Ours-step", PolicySpec(history=6, hidden_dims=(64, 64)), WeightScheme("step", thr=10.0, w=5.0), train),
    )


@dataclass(frozen=True)
class ExperimentConfig:
    env: ToyCarConfig = field(
        default_factory=lambda: ToyCarConfig(
            accel_brake=6.0, light_duration_min=100, light_duration_max=300, horizon=1000
        )
    )
    data: DataConfig = field(default_factory=DataConfig)
    copycat: CopycatSpec = field(
        default_factory=lambda: CopycatSpec(
            context=3,
            hidden_dims=(32, 32),
            train=TrainConfig(learning_rate=1e-3, batch_size=128, iterations=2000, rng_seed=5),
            folds=3,
        )
    )
    methods: tuple[MethodConfig, ...] = field(default_factory=_default_methods)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        names = [m.name for m in self.methods]
        if len(names) != len(set(names)):
            raise ConfigError(f"method names must be unique, got {names}")
        if not self.seeds:
            raise ConfigError("at least one seed required")
        if self.data.context != self.copycat.context:
            raise ConfigError("data.context must equal copycat.context")

    def to_dict(self) -> dict:
        return {
            "env": self.env.to_dict(),
            "data": self.data.to_dict(),
            "copycat": self.copycat.to_dict(),
            "methods": [m.to_dict() for m in self.methods],
            "seeds": list(self.seeds),
            "eval": self.eval.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        kwargs = {}
        if "env" in d:
            kwargs["env"] = ToyCarConfig.from_dict(d["env"])
        if "data" in d:
            kwargs["data"] = DataConfig.from_dict(d["data"])
        if "copycat" in d:
            kwargs["copycat"] = CopycatSpec.from_dict(d["copycat"])
        if "methods" in d:
            kwargs["methods"] = tuple(MethodConfig.from_dict(m) for m in d["methods"])
        if "seeds" in d:
            kwargs["seeds"] = tuple(int(s) for s in d["seeds"])
        if "eval" in d:
            kwargs["eval"] = EvalConfig.from_dict(d["eval"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(config.to_dict()).encode()).hexdigest()[:16]


def data_hash(config: ExperimentConfig) -> str:
    payload = {"env": config.env.to_dict(), "data": config.data.to_dict()}
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Data generation


def gen_data(config: ExperimentConfig, out_dir) -> dict:
    """Collect demonstrations, persist them, and export the APE table CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trajs = collect_demonstrations(config.env, config.data.episodes, config.data.noise_rate, config.data.seed)
    steps = int(sum(t.length for t in trajs))
    perturbed = int(sum(t.noise_mask.sum() for t in trajs))
    meta = {
        "data_hash": data_hash(config),
        "episodes": config.data.episodes,
        "steps": steps,
        "perturbed_steps": perturbed,
        "perturbed_fraction": perturbed / steps if steps else 0.0,
    }
    save_trajectories(trajs, out / "demos.jsonl", meta=meta)

    prep = prepare_data(config, trajs)
    export_ape_csv(prep.ape_train, prep.train, out / "ape_train.csv")
    export_ape_csv(prep.ape_val, prep.val, out / "ape_val.csv")
    return meta


@dataclass
class PreparedData:
    """Shared per-experiment artifacts: splits per history length, APE tables."""

    trajectories: list[Trajectory]
    train: Dataset  # built with data.history
    val: Dataset
    train_by_h: dict[int, Dataset]
    val_by_h: dict[int, Dataset]
    ape_train: ApeTable
    ape_val: ApeTable
    eps_cp_proxy: float
    baseline_mse: float


def prepare_data(config: ExperimentConfig, trajectories: list[Trajectory]) -> PreparedData:
    """Build per-history datasets, split them, train the copycat, score APE.

    All history variants share the same sample (trajectory, step) order, so
    one APE table aligns with every variant's train/val split.
    """
    histories = sorted({m.policy.history for m in config.methods} | {config.data.history})
    train_by_h, val_by_h = {}, {}
    for h in histories:
        ds = build_history_dataset(trajectories, h, config.data.context, config.data.context_source)
        train_by_h[h], val_by_h[h] = split_by_trajectory(ds, config.data.val_fraction, config.data.seed)
    train = train_by_h[config.data.history]
    val = val_by_h[config.data.history]
    ensemble = train_copycat(train, config.copycat)
    ape_train = compute_ape(ensemble, train)
    ape_val = compute_ape(ensemble, val)
    return PreparedData(
        trajectories=trajectories,
        train=train,
        val=val,
        train_by_h=train_by_h,
        val_by_h=val_by_h,
        ape_train=ape_train,
        ape_val=ape_val,
        eps_cp_proxy=copycat_heldout_mse(ensemble, val),
        baseline_mse=constant_mean_mse(train.targets, val.targets),
    )


# ---------------------------------------------------------------------------
# Single run


def train_method(method: MethodConfig, seed: int, config: ExperimentConfig, prep: PreparedData) -> TrainedPolicy:
    run_train = replace(method.train, rng_seed=derived_seed(method.train.rng_seed, seed))
    h = method.policy.history
    train_ds = prep.train_by_h[h]
    if method.dagger is not None:
        return dagger(
            config.env,
            method.policy,
            int(method.dagger["query_budget"]),
            int(method.dagger["n_rounds"]),
            run_train,
            seed=derived_seed(config.data.seed, seed),
            context=config.data.context,
        )
    if method.policy.history_dropout_rate > 0.0:
        return train_history_dropout(train_ds, method.policy, run_train)
    if method.scheme.kind == "boosting":
        result = boosting_weights(train_ds, method.policy, run_train, method.scheme.rounds, method.scheme.shrink)
        return result.policy
    return train_bc(train_ds, method.policy, method.scheme, run_train, ape_table=prep.ape_train)


def evaluate_policy(policy: TrainedPolicy, method: MethodConfig, seed: int, config: ExperimentConfig, prep: PreparedData) -> dict:
    ev = config.eval
    trajs, report = rollout(
        config.env,
        policy,
        ev.episodes,
        seed=derived_seed(EVAL_SEED_TAG, seed),
        stall_speed_fraction=ev.stall_speed_fraction,
        stall_steps=ev.stall_steps,
    )
    rie = rollout_imitation_error(trajs, config.env)
    h = method.policy.history
    breakdown = {
        "train": loss_breakdown(policy, prep.train_by_h[h], prep.ape_train, ev.breakdown_percentile),
        "val": loss_breakdown(policy, prep.val_by_h[h], prep.ape_val, ev.breakdown_percentile),
    }
    out = {
        "eval_report": report.to_dict(),
        "rollout_imitation_error": rie,
        "loss_breakdown": breakdown,
    }
    if ev.avg_ape:
        out["avg_ape"] = avg_ape(
            policy, config.env, ev.avg_ape_episodes, config.copycat, seed=derived_seed(AVGAPE_SEED_TAG, seed)
        ).to_dict()
    return out


def expert_reference(config: ExperimentConfig, seed: int) -> dict:
    """Expert rollout metrics and avgAPE under the same eval seeds as the methods."""
    ev = config.eval
    trajs, report = rollout(
        config.env,
        None,
        ev.episodes,
        seed=derived_seed(EVAL_SEED_TAG, seed),
        stall_speed_fraction=ev.stall_speed_fraction,
        stall_steps=ev.stall_steps,
    )
    out = {
        "eval_report": report.to_dict(),
        "rollout_imitation_error": rollout_imitation_error(trajs, config.env),
    }
    if ev.avg_ape:
        out["avg_ape"] = avg_ape(
            None, config.env, ev.avg_ape_episodes, config.copycat, seed=derived_seed(AVGAPE_SEED_TAG, seed)
        ).to_dict()
    return out


def run_single(args) -> dict:
    """One (method, seed) run; returns the run record (never raises)."""
    method, seed, config, prep, out_dir = args
    run_dir = Path(out_dir) / method.name / f"seed_{seed}"
    record = {
        "method": method.name,
        "seed": seed,
        "config_hash": config_hash(config),
        "status": "ok",
    }
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        policy = train_method(method, seed, config, prep)
        save_policy(policy, run_dir / "policy.json")
        results = evaluate_policy(policy, method, seed, config, prep)
        record.update(results)
        record["final_train_loss"] = float(np.mean(policy.loss_trace[-100:])) if policy.loss_trace is not None else None
    except Exception as e:  # noqa: BLE001 - a failed run must not kill siblings
        record["status"] = "failed"
        record["error"] = f"{type(e).__name__}: {e}"
        record["traceback"] = traceback.format_exc()
    try:
        with open(run_dir / "run.json", "w") as f:
            json.dump(record, f, indent=1)
    except OSError as e:
        record["status"] = "failed"
        record.setdefault("error", str(e))
    return record


# ---------------------------------------------------------------------------
# Aggregation

AGGREGATE_METRICS = (
    ("success", lambda r: r["eval_report"]["success_rate"]),
    ("violations", lambda r: r["eval_report"]["violations"]),
    ("progress", lambda r: r["eval_report"]["progress"]),
    ("avg_speed", lambda r: r["eval_report"]["avg_speed"]),
    ("stall_episodes", lambda r: r["eval_report"]["inertia_stalls"]),
    ("rollout_imitation_error", lambda r: r["rollout_imitation_error"]),
    ("val_changepoint_mse", lambda r: r["loss_breakdown"]["val"]["changepoint_mse"]),
    ("val_other_mse", lambda r: r["loss_breakdown"]["val"]["other_mse"]),
    ("val_overall_mse", lambda r: r["loss_breakdown"]["val"]["overall_mse"]),
    ("avg_ape", lambda r: r.get("avg_ape", {}).get("avg_ape")),
)


def aggregate_records(config: ExperimentConfig, records: list[dict]) -> list[dict]:
    """Mean/std per method over seeds, methods in config order."""
    chash = config_hash(config)
    for r in records:
        if r.get("config_hash") != chash:
            raise ConfigError(
                f"run {r.get('method')}/seed_{r.get('seed')} carries config hash "
                f"{r.get('config_hash')}, expected {chash}; refusing to aggregate"
            )
    rows = []
    for method in config.methods:
        runs = [r for r in records if r["method"] == method.name and r["status"] == "ok"]
        row = {"method": method.name, "n_runs": len(runs)}
        for metric, getter in AGGREGATE_METRICS:
            values = [getter(r) for r in runs]
            values = [v for v in values if v is not None]
            if values:
                row[f"{metric}_mean"] = float(np.mean(values))
                row[f"{metric}_std"] = float(np.std(values))
            else:
                row[f"{metric}_mean"] = None
                row[f"{metric}_std"] = None
        rows.append(row)
    return rows


def write_aggregate_csv(rows: list[dict], path) -> None:
    cols = ["method", "n_runs"]
    for metric, _ in AGGREGATE_METRICS:
        cols.append(f"{metric}_mean")
        cols.append(f"{metric}_std")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([_csv_cell(row.get(c)) for c in cols])


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def run_experiment(config: ExperimentConfig, out_dir, jobs: int = 1, dataset_path=None) -> dict:
    """Full pipeline: data (load or collect), copycat/APE, all runs, aggregate."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if dataset_path is None:
        dataset_path = out / "demos.jsonl"
    dataset_path = Path(dataset_path)
    if dataset_path.exists():
        trajs, meta = load_trajectories(dataset_path)
        if meta.get("data_hash") not in (None, data_hash(config)):
            raise ConfigError(
                f"{dataset_path} was generated under data hash {meta.get('data_hash')}, "
                f"current config has {data_hash(config)}"
            )
    else:
        gen_data(config, out)
        trajs, _ = load_trajectories(dataset_path)

    prep = prepare_data(config, trajs)
    tasks = [(m, s, config, prep, str(out)) for m in config.methods for s in config.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(run_single, tasks))
    else:
        records = [run_single(t) for t in tasks]

    expert_refs = {seed: expert_reference(config, seed) for seed in config.seeds}
    with open(out / "expert_reference.json", "w") as f:
        json.dump(expert_refs, f, indent=1)

    rows = aggregate_records(config, records)
    write_aggregate_csv(rows, out / "aggregate.csv")
    summary = {
        "config_hash": config_hash(config),
        "eps_cp_proxy": prep.eps_cp_proxy,
        "constant_mean_mse": prep.baseline_mse,
        "n_runs": len(records),
        "n_failed": sum(1 for r in records if r["status"] != "ok"),
        "failed": [
            {"method": r["method"], "seed": r["seed"], "error": r.get("error")}
            for r in records
            if r["status"] != "ok"
        ],
    }
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=1)
    return {"records": records, "rows": rows, "summary": summary, "expert": expert_refs}


# ---------------------------------------------------------------------------
# Diagnostics


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sa, sb = np.std(a), np.std(b)
    if sa == 0.0 or sb == 0.0:
        return 0.0
    return float(np.mean((a - np.mean(a)) * (b - np.mean(b))) / (sa * sb))


def diag(config: ExperimentConfig, out_dir, reference: str = "BC-OH", seed: Optional[int] = None) -> dict:
    """Copycat-preference verdict, APE histogram, per-trajectory APE/error traces.

    Needs the demos file; uses the `reference` method's trained policy from the
    run directory when present (for the APE-vs-error correlation and the
    verdict's reference MSE).
    """
    out = Path(out_dir)
    demos_path = out / "demos.jsonl"
    if not demos_path.exists():
        raise ConfigError(f"missing artifact: {demos_path} (run gen-data or run first)")
    trajs, _ = load_trajectories(demos_path)
    prep = prepare_data(config, trajs)

    seed = config.seeds[0] if seed is None else seed
    policy_path = out / reference / f"seed_{seed}" / "policy.json"
    ref_mse = None
    r_ape_error = None
    ours_errors = None
    if policy_path.exists():
        policy = load_policy(policy_path)
        h = policy.spec.history
        val = prep.val_by_h[h]
        errors = squared_error_per_sample(forward_batch(policy.model, val.windows), val.targets)
        ref_mse = float(np.mean(errors))
        r_ape_error = pearson(prep.ape_val.ape, errors)
    else:
        policy = None
        errors = None

    verdict = None
    if ref_mse is not None:
        verdict = copycat_condition(prep.eps_cp_proxy, ref_mse)

    # APE histogram
    hist, edges = np.histogram(prep.ape_val.ape, bins=30)
    with open(out / "ape_histogram.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_low", "bin_high", "count"])
        for i, c in enumerate(hist):
            writer.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(c)])

    # per-step validation trace: APE and reference error along each trajectory
    with open(out / "val_trace.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["traj_id", "step", "ape", "reference_error"])
        val = prep.val
        order = np.lexsort((val.steps, val.traj_ids))
        for i in order:
            writer.writerow(
                [
                    int(val.traj_ids[i]),
                    int(val.steps[i]),
                    repr(float(prep.ape_val.ape[i])),
                    "" if errors is None else repr(float(errors[i])),
                ]
            )

    report = {
        "config_hash": config_hash(config),
        "eps_cp_proxy": prep.eps_cp_proxy,
        "constant_mean_mse": prep.baseline_mse,
        "copycat_vs_constant_ratio": prep.eps_cp_proxy / prep.baseline_mse if prep.baseline_mse else None,
        "ape_summary": prep.ape_val.summary(),
        "reference_method": reference if ref_mse is not None else None,
        "reference_val_mse": ref_mse,
        "verdict": verdict,
        "pearson_ape_vs_reference_error": r_ape_error,
    }
    with open(out / "diag.json", "w") as f:
        json.dump(report, f, indent=1)
    return report


# ---------------------------------------------------------------------------
# Grid sweeps


def expand_grid(config: ExperimentConfig, method_name: str, grid: dict[str, list]) -> ExperimentConfig:
    """Replace `method_name` with one method per grid point (cartesian product)."""
    base = None
    others = []
    for m in config.methods:
        if m.name == method_name:
            base = m
        else:
            others.append(m)
    if base is None:
        raise ConfigError(f"no method named {method_name!r} in config")
    combos = [{}]
    for key, values in grid.items():
        combos = [{**c, key: v} for c in combos for v in values]
    variants = []
    for combo in combos:
        scheme = WeightScheme.from_dict({**base.scheme.to_dict(), **combo})
        tag = ",".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}" for k, v in combo.items())
        variants.append(MethodConfig(f"{base.name}[{tag}]", base.policy, scheme, base.train, base.dagger))
    return replace(config, methods=tuple(others + variants))
