"""Run orchestration: named presets, YAML configs, multi-seed aggregation.

A scenario is a fully specified `WorldConfig`; its SHA-256 hash stamps every
artifact so plots can be traced back to the exact run that produced them.
The offline preset models slow commuter traffic around a long light; the
deployment preset is faster, burstier, and capacity-starved, so the learned
policies face a regime they never trained on.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml
from scipy import stats

from .agent import AgentHyper
from .baselines import PRETRAINABLE, PopulationModel
from .rewards import PreferenceVector
from .simulation import PHASE_TEST, PHASE_TRAIN, RunResult, World, WorldConfig

TRAINING_COLUMNS = ("epoch", "agent", "shot", "rl_reward", "credit_loss",
                    "forward_loss", "inverse_loss")


def preset(name: str) -> WorldConfig:
    """The two scenario regimes every experiment starts from."""
    if name == PHASE_TRAIN:
        return WorldConfig(
            phase=PHASE_TRAIN,
            horizon_steps=50000,
            algos=("moody",) * 6,
            seller_capacities=(30.0, 30.0),
            vehicle_mean_interarrival_ms=2200.0,
            vehicle_speed_mps=10.0 / 3.6,
            light_green_ms=30000,
        )
    if name == PHASE_TEST:
        return WorldConfig(
            phase=PHASE_TEST,
            horizon_steps=100000,
            algos=("moody",) * 12,
            seller_capacities=(5.0, 5.0),
            vehicle_mean_interarrival_ms=1000.0,
            vehicle_speed_mps=30.0 / 3.6,
            light_green_ms=15000,
            # a drift-triggered retrain is a short few-shot cycle; one bounded
            # shot per trigger is too small a dose to matter at this horizon
            hyper=AgentHyper(retrain_shots=8),
        )
    raise ValueError(f"unknown preset {name!r}")


# -- (de)serialization ---------------------------------------------------------


def config_to_dict(cfg: WorldConfig) -> dict:
    d = dataclasses.asdict(cfg)
    return d


def config_from_dict(data: dict) -> WorldConfig:
    data = dict(data)
    hyper = data.pop("hyper", None)
    base = data.pop("preset", None)
    cfg = preset(base) if base else WorldConfig()
    fields = {f.name for f in dataclasses.fields(WorldConfig)}
    unknown = set(data) - fields
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    merged = dataclasses.asdict(cfg)
    merged.update(data)
    hp = merged.pop("hyper")
    if hyper:
        hfields = {f.name for f in dataclasses.fields(AgentHyper)}
        bad = set(hyper) - hfields
        if bad:
            raise ValueError(f"unknown hyper keys: {sorted(bad)}")
        hp.update(hyper)
    # tuples come back from YAML/JSON as lists
    for key in ("algos", "type_names", "seller_capacities", "seller_extra_delay",
                "kappa_range", "unit_jitter", "arrival_jitter", "fixed_prefs"):
        if merged.get(key) is not None:
            merged[key] = tuple(merged[key])
    return WorldConfig(hyper=AgentHyper(**hp), **merged)


def load_config(path) -> WorldConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"config root must be a mapping, got {type(data).__name__}")
    return config_from_dict(data)


def config_hash(cfg: WorldConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


# -- statistics ----------------------------------------------------------------


@dataclass(frozen=True)
class Interval:
    """Mean with a 95% confidence half-width (Student t)."""

    mean: float
    half: float
    n: int

    @property
    def lo(self) -> float:
        return self.mean - self.half

    @property
    def hi(self) -> float:
        return self.mean + self.half


def t_interval(values: Sequence[float], confidence: float = 0.95) -> Interval:
    arr = np.asarray([v for v in values if not math.isnan(v)], dtype=float)
    if arr.size == 0:
        return Interval(float("nan"), float("nan"), 0)
    if arr.size == 1:
        return Interval(float(arr[0]), float("inf"), 1)
    sem = float(arr.std(ddof=1) / math.sqrt(arr.size))
    tq = float(stats.t.ppf(0.5 + confidence / 2, arr.size - 1))
    return Interval(float(arr.mean()), tq * sem, int(arr.size))


def paired_diff_interval(a: Sequence[float], b: Sequence[float]) -> Interval:
    if len(a) != len(b):
        raise ValueError("paired comparison needs equal-length samples")
    return t_interval([x - y for x, y in zip(a, b)])


# -- row aggregation -----------------------------------------------------------


def metric_mean(result: RunResult, metric: str, algo: Optional[str] = None,
                bidder: Optional[str] = None, min_window: int = 0) -> float:
    """Mean of one metric over a run's recorded windows."""
    vals = [r.value for r in result.metrics.rows
            if r.metric == metric and r.window >= min_window
            and (algo is None or r.algo == algo)
            and (bidder is None or r.bidder == bidder)]
    return float(np.mean(vals)) if vals else float("nan")


def bidder_values(result: RunResult, metric: str, algo: str,
                  min_window: int = 0) -> dict[str, list[float]]:
    out: dict[str, list[float]] = {}
    for r in result.metrics.rows:
        if r.metric == metric and r.algo == algo and r.window >= min_window:
            out.setdefault(r.bidder, []).append(r.value)
    return out


def run_ofr(result: RunResult, algo: Optional[str] = None) -> float:
    """Aggregate failure share over the whole run from the final counters."""
    losses = resolved = 0
    for row in result.report["per_bidder"]:
        if algo is None or row["algo"] == algo:
            losses += row["final_losses"]
            resolved += row["final_losses"] + row["successes"]
    return losses / resolved if resolved else float("nan")


# -- drivers --------------------------------------------------------------------


def run_world(cfg: WorldConfig, generic_params=None, generic_steps_trained: int = 0,
              stop_after_epochs: Optional[int] = None,
              baseline_models=None) -> RunResult:
    world = World(cfg, generic_params=generic_params,
                  generic_steps_trained=generic_steps_trained,
                  baseline_models=baseline_models)
    return world.run(stop_after_epochs=stop_after_epochs)


def train_generic(cfg: WorldConfig, stop_after_epochs: Optional[int] = None) -> RunResult:
    if cfg.phase != PHASE_TRAIN:
        raise ValueError("training requires a train-phase config")
    from .meta import run_offline_training
    return run_offline_training(cfg, epochs=stop_after_epochs)


def pretrain_population(cfg: WorldConfig, algo: str) -> tuple[PopulationModel, RunResult]:
    """Pretrain one baseline cohort in the offline environment.

    Every seat runs the requested kind and learns continuously for itself —
    no coordinator, no shared model.  The returned model carries one
    parameter snapshot per seat for deployment reuse.
    """
    if algo not in PRETRAINABLE:
        raise ValueError(f"bidder kind {algo!r} cannot be pretrained")
    pre = dataclasses.replace(cfg, phase=PHASE_TRAIN,
                              algos=tuple(algo for _ in cfg.algos))
    result = run_world(pre)
    model = PopulationModel(algo=algo, params_by_agent=result.population_params,
                            steps_trained=result.steps_trained)
    return model, result


def evaluate(cfg: WorldConfig, seeds: Sequence[int], generic_params=None,
             generic_steps_trained: int = 0, baseline_models=None) -> list[RunResult]:
    results = []
    for seed in seeds:
        results.append(run_world(dataclasses.replace(cfg, seed=int(seed)),
                                 generic_params=generic_params,
                                 generic_steps_trained=generic_steps_trained,
                                 baseline_models=baseline_models))
    return results


def sensitivity_sweep(cfg: WorldConfig, weight: str, grid: Sequence[float],
                      seeds: Sequence[int], generic_params=None,
                      generic_steps_trained: int = 0, baseline_models=None) -> list[dict]:
    """Sweep one preference weight (its coupled partner takes the complement).

    All bidders run the fixed vector, resampling disabled, so the measured
    response isolates the weight under study.
    """
    partners = {"w_utility": "w_beta", "w_beta": "w_utility",
                "w_neg_ofr": "w_fairness", "w_fairness": "w_neg_ofr",
                "w_bid_loss": "w_backoff", "w_backoff": "w_bid_loss"}
    if weight not in partners:
        raise ValueError(f"unknown preference weight {weight!r}")
    rows = []
    for value in grid:
        base = {"w_utility": 0.5, "w_neg_ofr": 0.5, "w_beta": 0.5,
                "w_fairness": 0.5, "w_bid_loss": 0.5, "w_backoff": 0.5}
        base[weight] = float(value)
        base[partners[weight]] = 1.0 - float(value)
        prefs = PreferenceVector(**base)
        fixed = (prefs.w_utility, prefs.w_neg_ofr, prefs.w_beta,
                 prefs.w_fairness, prefs.w_bid_loss, prefs.w_backoff)
        swept = dataclasses.replace(cfg, fixed_prefs=fixed)
        results = evaluate(swept, seeds, generic_params, generic_steps_trained,
                           baseline_models=baseline_models)
        ofr = t_interval([run_ofr(r) for r in results])
        fair = t_interval([metric_mean(r, "fairness") for r in results])
        util = t_interval([metric_mean(r, "utility") for r in results])
        rows.append({"weight": weight, "value": float(value),
                     "ofr_mean": ofr.mean, "ofr_half": ofr.half,
                     "fairness_mean": fair.mean, "fairness_half": fair.half,
                     "utility_mean": util.mean, "utility_half": util.half,
                     "seeds": len(results)})
    return rows


# -- artifact writing -------------------------------------------------------------


def write_training_csv(rows: list[dict], path) -> None:
    lines = [",".join(TRAINING_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in TRAINING_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def write_sensitivity_csv(rows: list[dict], path) -> None:
    cols = ("weight", "value", "ofr_mean", "ofr_half", "fairness_mean",
            "fairness_half", "utility_mean", "utility_half", "seeds")
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def write_report_json(results: list[RunResult], cfg: WorldConfig, path,
                      extra: Optional[dict] = None) -> None:
    payload = {
        "config_hash": config_hash(cfg),
        "config": config_to_dict(cfg),
        "runs": [r.report for r in results],
    }
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, default=str) + "\n",
                          encoding="utf-8")
