"""Experiment orchestration: strict config ingestion, seeded end-to-end runs
(shadow corpus -> meta-classifier -> FL with the attacking server -> report),
artifact persistence, and plot-ready CSV reporting.

A run is a pure function of (config, seed): every random stream is derived
from the root seed with a labeled sub-seed, and report.json is byte-identical
across reruns (wall-clock timings live in a separate file).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import attack, data, fedsim, nn
from .errors import ConfigError, InputError
from .seeding import derive_seed

# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------

# Each leaf is (default, validator); validators raise ConfigError with the
# offending key path.  None defaults with required=False mean "optional".

_POS = lambda v: v > 0
_POS_INT = lambda v: isinstance(v, int) and v > 0
_NONNEG = lambda v: v >= 0
_FRAC = lambda v: 0 < v <= 1
_RANGE = lambda v: (isinstance(v, list) and len(v) == 2
                    and 0 <= v[0] <= v[1] <= 1)

_SCHEMA = {
    "seed": (1, lambda v: isinstance(v, int) and v >= 0),
    "output_dir": ("runs", lambda v: isinstance(v, str) and v != ""),
    "dataset": {
        "kind": ("synthetic", lambda v: v in ("synthetic", "idx")),
        "n_label": (10, lambda v: isinstance(v, int) and v >= 2),
        "dim": (16, lambda v: isinstance(v, int) and v >= 2),
        "sigma": (1.0, _POS),
        "images": (None, None),
        "labels": (None, None),
    },
    "federation": {
        "n_user": (10, _POS_INT),
        "user_size": (600, _POS_INT),
        "cp_range": ([0.4, 0.6], _RANGE),
        "cd_range": ([0.4, 0.6], _RANGE),
        "mode": ("majority", lambda v: v in ("majority", "minority")),
        "ud_target": (None, None),
        "id_target": (None, None),
        "equalize_rest": (True, lambda v: isinstance(v, bool)),
    },
    "fl": {
        "n_rounds": (15, _POS_INT),
        "client_fraction": (1.0, _FRAC),
        "local_epochs": (1, _POS_INT),
        "learning_rate": (0.03, _POS),
        "batch_size": (32, _POS_INT),
        "aggregation": ("selective", lambda v: v in ("selective", "fedavg")),
    },
    "attack": {
        "alpha": (0.001, _POS),
        "th_round": (3, _POS_INT),
        "x": (4, _POS_INT),
        "mode": ("majority", lambda v: v in ("majority", "minority")),
        "n_shadows": (40, _POS_INT),
        "aux_per_class": (150, _POS_INT),
        "shadow_epochs": (5, _POS_INT),
        "shadow_size": (None, None),
        "shadow_cp_range": ([0.35, 0.7], _RANGE),
        "shadow_cd_range": ([0.1, 0.6], _RANGE),
        "feature_mode": ("differential", lambda v: v in ("differential", "sensitivity")),
        "meta": {
            "hidden": (32, _POS_INT),
            "learning_rate": (0.1, _POS),
            "epochs": (300, _POS_INT),
            "batch_size": (16, _POS_INT),
        },
    },
    "model": {
        "kind": ("mlp", lambda v: v in ("mlp", "cnn")),
        "hidden": ([32], lambda v: isinstance(v, list) and all(_POS_INT(h) for h in v)),
    },
    "defense": {
        "apply": ("none", lambda v: v in ("none", "dropout", "dp")),
        "dropout_rate": (0.5, lambda v: 0 <= v < 1),
        "clip_norm": (10.0, _POS),
        "noise_multiplier": (0.0, _NONNEG),
        "noise_multipliers": ([0.05, 0.25, 1.0, 4.0],
                              lambda v: isinstance(v, list) and all(m >= 0 for m in v)),
    },
    "eval_per_class": (30, _POS_INT),
    "with_baseline": (True, lambda v: isinstance(v, bool)),
}


def _resolve(raw: dict, schema: dict, path: str, problems: list) -> dict:
    out = {}
    for key, value in raw.items():
        if key not in schema:
            problems.append(f"unknown key {path}{key}")
    for key, entry in schema.items():
        where = f"{path}{key}"
        if isinstance(entry, dict):
            sub = raw.get(key, {})
            if not isinstance(sub, dict):
                problems.append(f"{where} must be an object")
                sub = {}
            out[key] = _resolve(sub, entry, where + ".", problems)
            continue
        default, validator = entry
        value = raw.get(key, default)
        if value is not None and validator is not None and not validator(value):
            problems.append(f"invalid value for {where}: {value!r}")
        out[key] = value
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved, validated experiment description (plain dict inside)."""

    resolved: dict

    def __getitem__(self, key):
        return self.resolved[key]

    @property
    def seed(self) -> int:
        return self.resolved["seed"]

    def to_json(self) -> str:
        return json.dumps(self.resolved, sort_keys=True, indent=2)

    def with_overrides(self, **top_level) -> "ExperimentConfig":
        merged = json.loads(json.dumps(self.resolved))
        merged.update(top_level)
        return validate_config(json.dumps(merged))


def validate_config(raw_text: str) -> ExperimentConfig:
    """Parse, strictly validate and default-fill a JSON experiment config.

    Every violated invariant is reported with its key path; unknown keys are
    rejected.
    """
    try:
        raw = json.loads(raw_text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    problems: list = []
    resolved = _resolve(raw, _SCHEMA, "", problems)

    ds = resolved["dataset"]
    if ds["kind"] == "idx":
        for k in ("images", "labels"):
            if not ds[k]:
                problems.append(f"dataset.{k} is required for kind 'idx'")
            elif not Path(ds[k]).exists():
                problems.append(f"dataset.{k}: file not found: {ds[k]}")
    if resolved["attack"]["x"] >= resolved["federation"]["n_user"]:
        problems.append("attack.x must be smaller than federation.n_user")
    if resolved["attack"]["n_shadows"] < ds["n_label"]:
        problems.append("attack.n_shadows must be at least dataset.n_label")
    if resolved["model"]["kind"] == "cnn" and ds["kind"] == "synthetic":
        side = int(round(ds["dim"] ** 0.5))
        if side * side != ds["dim"]:
            problems.append("model.kind 'cnn' on synthetic data needs a square dataset.dim")
    if problems:
        raise ConfigError("; ".join(problems))
    return ExperimentConfig(resolved)


# ---------------------------------------------------------------------------
# Model and data staging
# ---------------------------------------------------------------------------


def build_model_arch(cfg: ExperimentConfig, n_label: int, feature_shape: tuple) -> nn.Architecture:
    """The client model: MLP with a dropout slot before the head, or the
    small two-convolution network for image-shaped data."""
    rate = cfg["defense"]["dropout_rate"]
    if cfg["model"]["kind"] == "mlp":
        dim = int(np.prod(feature_shape))
        layers, width = [], dim
        for h in cfg["model"]["hidden"]:
            layers += [nn.Dense(width, h), nn.Relu()]
            width = h
        layers += [nn.Dropout(rate), nn.Dense(width, n_label)]
        return nn.Architecture(tuple(layers), (dim,), n_label)
    if len(feature_shape) == 2:
        rows, cols = feature_shape
    else:
        side = int(round(feature_shape[0] ** 0.5))
        rows = cols = side
    h1 = rows - 2
    h2 = (h1 - 2) // 2
    flat = 16 * h2 * h2
    layers = (
        nn.Conv2d(1, 8, kernel=3), nn.Relu(),
        nn.Conv2d(8, 16, kernel=3), nn.Relu(),
        nn.MaxPool2d(2),
        nn.Dropout(rate),
        nn.Dense(flat, n_label),
    )
    return nn.Architecture(layers, (1, rows, cols), n_label)


@dataclass
class StagedData:
    pool: data.LabeledDataset
    clients: list
    aux: data.AuxiliaryStore
    test_X: np.ndarray
    test_y: np.ndarray
    arch: nn.Architecture
    fed_spec: data.FederationSpec


def stage_data(cfg: ExperimentConfig) -> StagedData:
    """Build the pool, disjoint client datasets, auxiliary store and test set."""
    seed = cfg.seed
    ds_cfg, fed_cfg = cfg["dataset"], cfg["federation"]
    n_label = ds_cfg["n_label"]
    fed_spec = data.make_federation_spec(
        n_user=fed_cfg["n_user"], n_label=n_label, total_size=fed_cfg["user_size"],
        cp_range=tuple(fed_cfg["cp_range"]), cd_range=tuple(fed_cfg["cd_range"]),
        seed=derive_seed(seed, "federation-spec"), mode=fed_cfg["mode"],
        ud_target=fed_cfg["ud_target"], id_target=fed_cfg["id_target"],
        equalize_rest=fed_cfg["equalize_rest"],
    )
    per_class_demand = np.stack([data.spec_counts(s) for s in fed_spec.specs]).sum(axis=0)
    need = int(per_class_demand.max()) + cfg["attack"]["aux_per_class"] + cfg["eval_per_class"]
    if ds_cfg["kind"] == "synthetic":
        pool = data.make_synthetic(n_label, ds_cfg["dim"], need,
                                   seed=derive_seed(seed, "pool"), sigma=ds_cfg["sigma"])
    else:
        pool = data.load_idx(ds_cfg["images"], ds_cfg["labels"])
        if pool.n_label != n_label:
            raise ConfigError(
                f"dataset.n_label is {n_label} but the IDX pool holds {pool.n_label} classes"
            )
    clients, used = data.build_federation(pool, fed_spec, seed=derive_seed(seed, "federation"))
    aux = data.build_auxiliary(pool, cfg["attack"]["aux_per_class"], excluded_indices=used)
    excluded = np.concatenate([used, np.concatenate(aux.source_indices)])
    test_batches, _ = data.sample_per_class(pool, cfg["eval_per_class"], excluded)
    test_X = np.concatenate(test_batches)
    test_y = np.repeat(np.arange(n_label), cfg["eval_per_class"])
    arch = build_model_arch(cfg, n_label, pool.feature_shape)
    return StagedData(pool, clients, aux, test_X, test_y, arch, fed_spec)


def client_train_config(cfg: ExperimentConfig) -> nn.TrainConfig:
    d = cfg["defense"]
    dp = (nn.DpConfig(clip_norm=d["clip_norm"], noise_multiplier=d["noise_multiplier"])
          if d["apply"] == "dp" else None)
    return nn.TrainConfig(
        learning_rate=cfg["fl"]["learning_rate"],
        epochs=cfg["fl"]["local_epochs"],
        batch_size=cfg["fl"]["batch_size"],
        dropout_enabled=d["apply"] == "dropout",
        dp=dp,
        seed=0,  # replaced per (round, user) by the round driver
    )


# ---------------------------------------------------------------------------
# Offline phase: shadows and meta-classifier
# ---------------------------------------------------------------------------


@dataclass
class OfflineArtifacts:
    shadows: list
    meta_samples: list
    meta: attack.MetaClassifier
    meta_samples_centralized: Optional[list] = None
    meta_centralized: Optional[attack.MetaClassifier] = None


def run_offline(cfg: ExperimentConfig, staged: StagedData, train_cfg: nn.TrainConfig,
                include_centralized: bool = False) -> OfflineArtifacts:
    seed = cfg.seed
    atk = cfg["attack"]
    n_label = staged.pool.n_label
    shadow_size = atk["shadow_size"]
    if shadow_size is None:
        shadow_size = max(n_label * 2, int(atk["aux_per_class"] * n_label / 10 * 1.3))
        cap = int(atk["aux_per_class"] / max(atk["shadow_cp_range"][1], 1e-9))
        shadow_size = min(shadow_size, cap)
    sampler = attack.default_shadow_sampler(
        n_label, shadow_size, tuple(atk["shadow_cp_range"]),
        tuple(atk["shadow_cd_range"]), atk["mode"],
    )
    shadow_cfg = dataclasses.replace(train_cfg, epochs=atk["shadow_epochs"],
                                     batch_size=min(train_cfg.batch_size, shadow_size))
    shadows = attack.train_shadows(staged.aux, staged.arch, atk["n_shadows"], sampler,
                                   shadow_cfg, atk["alpha"],
                                   seed=derive_seed(seed, "shadows"), mode=atk["mode"])
    update_cfg = dataclasses.replace(train_cfg, epochs=cfg["fl"]["local_epochs"],
                                     batch_size=min(train_cfg.batch_size, shadow_size))
    meta_samples = attack.build_meta_dataset_federated(
        shadows, staged.aux, staged.arch, atk["alpha"], update_cfg,
        seed=derive_seed(seed, "meta-fed"), mode=atk["mode"],
    )
    meta_cfg = nn.TrainConfig(
        learning_rate=atk["meta"]["learning_rate"], epochs=atk["meta"]["epochs"],
        batch_size=atk["meta"]["batch_size"], seed=derive_seed(seed, "meta-train"),
    )
    meta = attack.train_meta(meta_samples, n_label, meta_cfg, hidden=atk["meta"]["hidden"])
    out = OfflineArtifacts(shadows, meta_samples, meta)
    if include_centralized:
        out.meta_samples_centralized = attack.build_meta_dataset_centralized(
            shadows, staged.aux, staged.arch, atk["alpha"])
        out.meta_centralized = attack.train_meta(
            out.meta_samples_centralized, n_label, meta_cfg, hidden=atk["meta"]["hidden"])
    return out


# ---------------------------------------------------------------------------
# Online phase
# ---------------------------------------------------------------------------


@dataclass
class OnlineResult:
    profiler: attack.PreferenceProfiler
    states: list
    final_state: fedsim.RoundState


def run_online(cfg: ExperimentConfig, staged: StagedData, meta: attack.MetaClassifier,
               train_cfg: nn.TrainConfig, aggregation: Optional[str] = None) -> OnlineResult:
    seed = cfg.seed
    atk = cfg["attack"]
    n_user = cfg["federation"]["n_user"]
    aggregation = aggregation or cfg["fl"]["aggregation"]
    policy = (fedsim.SelectivePolicy(x=atk["x"], mode=atk["mode"])
              if aggregation == "selective" else "fedavg")
    init = nn.init_params(staged.arch, seed=derive_seed(seed, "global-init"))
    profiler = attack.PreferenceProfiler(
        staged.arch, staged.aux, meta, atk["alpha"], atk["th_round"], n_user,
        policy=policy, feature_mode=atk["feature_mode"], mode=atk["mode"],
    )
    profiler.prime(init)
    fl_cfg = fedsim.FlConfig(
        n_rounds=cfg["fl"]["n_rounds"], train=train_cfg,
        client_fraction=cfg["fl"]["client_fraction"],
        local_epochs=cfg["fl"]["local_epochs"], aggregation_policy=policy,
    )
    state = fedsim.initial_state(n_user, init)
    states = []
    for _ in range(fl_cfg.n_rounds):
        state = fedsim.run_round(state, staged.clients, staged.arch, fl_cfg, profiler,
                                 derive_seed(seed, "fl"))
        states.append(state)
    return OnlineResult(profiler, states, state)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    run_id: str
    config: dict
    truth: list
    class_counts: list
    predictions: list
    lock_rounds: list
    topk: dict
    utility_test_with: float
    utility_test_without: Optional[float]
    utility_own_with: float
    utility_own_without: Optional[float]
    meta_train_accuracy: float
    ds_trace_attack: list
    ds_trace_baseline: Optional[list]
    baseline_top1: Optional[float]
    round_log: list

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)


def _mean_test_acc(state: fedsim.RoundState, staged: StagedData) -> float:
    return float(np.mean([
        nn.accuracy(m, staged.arch, staged.test_X, staged.test_y)
        for m in state.distributed
    ]))


def _ds_trace(profiler: attack.PreferenceProfiler, truth: list) -> list:
    return [float(np.mean([tr.ds[u][truth[u]] for u in range(len(truth))]))
            for tr in profiler.history]


def _round_log(states: list, profiler: attack.PreferenceProfiler) -> list:
    log = []
    for st in states:
        for u in range(len(st.uploaded)):
            log.append({
                "round": st.round_index,
                "user": u,
                "local_acc_before": st.local_acc[u],
                "global_acc_after": st.global_acc[u],
                "locked": st.locked[u] is not None if st.locked else False,
                "predicted_class": (None if st.predictions is None
                                    else st.predictions[u]),
            })
    return log


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[Path] = None) -> RunReport:
    """Offline shadow/meta training, FL with the attack hook, evaluation.

    When fl.aggregation is "selective" and with_baseline is set, a second arm
    with plain FedAvg aggregation (same seeds, same attacker observation)
    provides the no-attack utility reference and the paired DS trace.
    """
    t0 = time.time()
    staged = stage_data(cfg)
    train_cfg = client_train_config(cfg)
    offline = run_offline(cfg, staged, train_cfg)
    t_offline = time.time() - t0

    arm = run_online(cfg, staged, offline.meta, train_cfg)
    baseline = None
    if cfg["with_baseline"] and cfg["fl"]["aggregation"] == "selective":
        baseline = run_online(cfg, staged, offline.meta, train_cfg, aggregation="fedavg")
    t_online = time.time() - t0 - t_offline

    truth = [data.preference_class(c.class_counts, cfg["attack"]["mode"])
             for c in staged.clients]
    counts = [c.class_counts.tolist() for c in staged.clients]
    rankings = arm.profiler.final_rankings
    topk = {str(k): attack.topk_accuracy_from_counts(rankings, counts, k)
            for k in (1, 2, 3)}
    report = RunReport(
        run_id=run_id_for(cfg),
        config=cfg.resolved,
        truth=truth,
        class_counts=counts,
        predictions=arm.profiler.final_predictions(),
        lock_rounds=arm.profiler.lock_rounds(),
        topk=topk,
        utility_test_with=_mean_test_acc(arm.final_state, staged),
        utility_test_without=(None if baseline is None
                              else _mean_test_acc(baseline.final_state, staged)),
        utility_own_with=float(np.mean(arm.final_state.global_acc)),
        utility_own_without=(None if baseline is None
                             else float(np.mean(baseline.final_state.global_acc))),
        meta_train_accuracy=offline.meta.train_accuracy,
        ds_trace_attack=_ds_trace(arm.profiler, truth),
        ds_trace_baseline=(None if baseline is None
                           else _ds_trace(baseline.profiler, truth)),
        baseline_top1=(None if baseline is None else attack.topk_accuracy_from_counts(
            baseline.profiler.final_rankings, counts, 1)),
        round_log=_round_log(arm.states, arm.profiler),
    )
    if out_dir is not None:
        persist_run(report, offline, Path(out_dir),
                    timings={"offline_s": t_offline, "online_s": t_online})
    return report


def run_id_for(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(cfg.to_json().encode("utf-8")).hexdigest()[:12]


def persist_run(report: RunReport, offline: Optional[OfflineArtifacts],
                out_dir: Path, timings: Optional[dict] = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(report.config, sort_keys=True, indent=2))
    (out_dir / "report.json").write_text(report.to_json())
    with open(out_dir / "rounds.jsonl", "w") as f:
        for entry in report.round_log:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    if offline is not None:
        attack.export_meta_csv(offline.meta_samples, out_dir / "meta_dataset.csv")
        nn.save_checkpoint(out_dir / "meta.ppam", offline.meta.params, offline.meta.arch)
    if timings is not None:
        (out_dir / "timings.json").write_text(json.dumps(timings, indent=2))
    return out_dir


def compare_meta_algorithms(cfg: ExperimentConfig) -> dict:
    """Score the centralized-features meta against the federated-features meta
    on one recorded simulation (identical trajectory for both).

    The headline number is the meta-classifier's accuracy in the federated
    simulation: the fraction of correct (round, user) predictions across the
    whole run.  The streak-locked pipeline verdicts are reported alongside.
    """
    staged = stage_data(cfg)
    train_cfg = client_train_config(cfg)
    offline = run_offline(cfg, staged, train_cfg, include_centralized=True)
    arm = run_online(cfg, staged, offline.meta, train_cfg)
    counts = [c.class_counts.tolist() for c in staged.clients]
    truth = [data.preference_class(c.class_counts, cfg["attack"]["mode"])
             for c in staged.clients]
    n_user = cfg["federation"]["n_user"]
    th = cfg["attack"]["th_round"]
    out = {}
    for label, meta, mode in (
        ("centralized", offline.meta_centralized, "sensitivity"),
        ("federated", offline.meta, "differential"),
    ):
        hits = total = 0
        for trace in arm.profiler.history:
            for u in range(n_user):
                f = trace.ds[u] if mode == "differential" else trace.sensitivities[u]
                hits += int(meta.predict(f) == truth[u])
                total += 1
        preds, rankings, locks = attack.replay_profiling(
            arm.profiler.history, meta, mode, th, n_user)
        out[label] = {
            "accuracy": hits / total,
            "locked_top1": attack.topk_accuracy_from_counts(rankings, counts, 1),
            "predictions": preds,
            "lock_rounds": locks,
            "meta_train_accuracy": meta.train_accuracy,
        }
    return out


# ---------------------------------------------------------------------------
# Multi-run reporting
# ---------------------------------------------------------------------------


def report_runs(run_dirs: list, k_values=(1, 2, 3), out_dir: Optional[Path] = None):
    """Summary table plus DS-vs-round series for one or more completed runs.

    Returns (summary rows, ds rows); writes summary.csv and ds_vs_round.csv
    when out_dir is given.  Raises on missing artifacts.
    """
    if not run_dirs:
        raise InputError("no run directories given")
    summary, ds_rows = [], []
    for d in run_dirs:
        d = Path(d)
        rp = d / "report.json"
        if not rp.exists():
            raise OSError(f"missing report.json under {d}")
        rep = json.loads(rp.read_text())
        cfg = rep["config"]
        rankings_counts = rep["class_counts"]
        row = {
            "run_id": rep["run_id"],
            "dir": str(d),
            "aggregation": cfg["fl"]["aggregation"],
            "x": cfg["attack"]["x"],
            "aux_per_class": cfg["attack"]["aux_per_class"],
            "n_user": cfg["federation"]["n_user"],
            "seed": cfg["seed"],
            "utility_test_with": rep["utility_test_with"],
            "utility_test_without": rep["utility_test_without"],
            "meta_train_accuracy": rep["meta_train_accuracy"],
        }
        for k in k_values:
            row[f"top{k}"] = rep["topk"].get(str(k))
        summary.append(row)
        for rnd, v in enumerate(rep["ds_trace_attack"], start=1):
            ds_rows.append({"run_id": rep["run_id"], "policy": cfg["fl"]["aggregation"],
                            "round": rnd, "mean_ds_at_truth": v})
        if rep.get("ds_trace_baseline"):
            for rnd, v in enumerate(rep["ds_trace_baseline"], start=1):
                ds_rows.append({"run_id": rep["run_id"], "policy": "fedavg-baseline",
                                "round": rnd, "mean_ds_at_truth": v})
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_csv(out_dir / "summary.csv", summary)
        _write_csv(out_dir / "ds_vs_round.csv", ds_rows)
    return summary, ds_rows


def _write_csv(path: Path, rows: list) -> None:
    if not rows:
        path.write_text("")
        return
    cols = list(rows[0].keys())
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for r in rows:
            f.write(",".join("" if r[c] is None else str(r[c]) for c in cols) + "\n")
