"""
Seeded Monte-Carlo experiment runner.

A sweep varies one config parameter over a value list; each (value, trial)
cell simulates a scene, runs the selected association algorithm, and scores
the estimates. Rows are written per algorithm to CSV with a fixed column
order, plus an aggregate JSON and a manifest recording the config hash and
base seed. Per-trial random streams derive from (base seed, sweep index,
trial index), so serial and parallel execution produce identical rows.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import baselines, metrics, saga
from .fitting import Chain
from .saga import AssociationResult, SagaConfig
from .scene import (
    Detection,
    KinematicState,
    NoiseModel,
    ObservationSet,
    SceneBounds,
    SensorArray,
    simulate_observations,
    simulate_scene,
)

ALGORITHMS = ("saga", "saesl", "nn", "mcf")
SCENE_MODES = ("well_separated", "adverse")

CSV_COLUMNS = ("sweep_param", "sweep_value", "algorithm", "trial", "ospa",
               "d_p_rmse", "d_v_rmse", "cardinality_error", "likelihood_evals",
               "fit_evals", "wall_time_s")

OUTPUT_DIR_ENV = "RDASSOC_OUTDIR"

_SWEEPABLE = {
    "n_targets": int,
    "n_sensors": int,
    "snr_db": float,
    "array_width_m": float,
    "p_miss": float,
    "p_false_alarm": float,
    "rho": int,
    "d_bar": float,
    "alpha": float,
    "beta": float,
    "p_fa": float,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment cell; defaults are the nominal simulation constants."""

    n_targets: int = 20
    n_sensors: int = 6
    snr_db: float = -10.0
    array_width_m: float = 4.0
    p_miss: float = 0.05
    p_false_alarm: float = 0.0
    rho: int = 4
    algorithms: Tuple[str, ...] = ("saga",)
    trials: int = 100
    seed: int = 0
    sweep_param: Optional[str] = None
    sweep_values: Tuple[float, ...] = ()
    scene_mode: str = "well_separated"
    delta_r: float = 0.3
    delta_d: float = 0.5
    d_bar: float = 5.0
    alpha: float = 0.05
    beta: float = 2.0
    p_fa: float = 0.01
    kappa: float = 1.0

    def __post_init__(self):
        for algo in self.algorithms:
            if algo not in ALGORITHMS:
                raise ValueError(f"unknown algorithm {algo!r}; choose from {ALGORITHMS}")
        if self.scene_mode not in SCENE_MODES:
            raise ValueError(f"unknown scene_mode {self.scene_mode!r}")
        if self.sweep_param is not None and self.sweep_param not in _SWEEPABLE:
            raise ValueError(
                f"cannot sweep {self.sweep_param!r}; sweepable: {sorted(_SWEEPABLE)}")

    def with_value(self, param: str, value) -> "ExperimentConfig":
        return replace(self, **{param: _SWEEPABLE[param](value)})

    def make_array(self) -> SensorArray:
        return SensorArray.uniform(self.n_sensors, self.array_width_m)

    def make_noise(self) -> NoiseModel:
        return NoiseModel.from_snr(
            self.snr_db, resolution=(self.delta_r, self.delta_d), kappa=self.kappa,
            p_miss=self.p_miss, p_false_alarm=self.p_false_alarm)

    def make_saga_config(self) -> SagaConfig:
        return SagaConfig(rho=self.rho, p_fa=self.p_fa, beta=self.beta,
                          alpha=self.alpha)

    def separation(self) -> Optional[Tuple[float, float]]:
        if self.scene_mode == "well_separated":
            return (self.delta_r, self.delta_d)
        return None

    def config_hash(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class TrialResult:
    trial_index: int
    seed: int
    algorithm: str
    report: metrics.EvalReport
    wall_time_s: float
    estimates: Tuple[KinematicState, ...]


def trial_seed(base_seed: int, sweep_index: int, trial_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=(base_seed, sweep_index, trial_index))


def run_algorithm(name: str, obs: ObservationSet, array: SensorArray,
                  noise: NoiseModel, config: SagaConfig) -> AssociationResult:
    if name == "saga":
        return saga.saga_associate(obs, array, noise, config)
    if name == "saesl":
        return baselines.saesl_associate(obs, array, noise, config)
    if name == "nn":
        return baselines.nn_associate(obs, array, noise, config)
    if name == "mcf":
        return baselines.mcf_associate(obs, array, noise, config)
    raise ValueError(f"unknown algorithm {name!r}")


def run_trial(config: ExperimentConfig, algorithm: str, sweep_index: int,
              trial_index: int) -> TrialResult:
    """Simulate one scene and score one algorithm on it.

    The scene/observation stream depends only on (seed, sweep, trial), so
    different algorithms on the same cell see identical inputs.
    """
    ss = trial_seed(config.seed, sweep_index, trial_index)
    scene_rng, obs_rng = [np.random.default_rng(s) for s in ss.spawn(2)]
    array = config.make_array()
    noise = config.make_noise()
    truth = simulate_scene(config.n_targets, separation=config.separation(),
                           array=array, rng_seed=scene_rng)
    obs = simulate_observations(truth, array, noise, rng_seed=obs_rng)
    algo_config = config.make_saga_config()
    t0 = time.perf_counter()
    result = run_algorithm(algorithm, obs, array, noise, algo_config)
    wall = time.perf_counter() - t0
    estimates = tuple(result.estimates())
    report = metrics.evaluate(estimates, truth, d_bar=config.d_bar,
                              likelihood_evals=result.likelihood_evals,
                              fit_evals=result.fit_evals)
    return TrialResult(trial_index=trial_index, seed=config.seed,
                       algorithm=algorithm, report=report, wall_time_s=wall,
                       estimates=estimates)


def _row(config: ExperimentConfig, sweep_value, algorithm: str,
         res: TrialResult) -> Dict[str, object]:
    rep = res.report
    return {
        "sweep_param": config.sweep_param or "",
        "sweep_value": sweep_value if sweep_value is not None else "",
        "algorithm": algorithm,
        "trial": res.trial_index,
        "ospa": rep.ospa,
        "d_p_rmse": rep.d_p_rmse,
        "d_v_rmse": rep.d_v_rmse,
        "cardinality_error": rep.cardinality_error,
        "likelihood_evals": rep.likelihood_evals,
        "fit_evals": rep.fit_evals,
        "wall_time_s": res.wall_time_s,
    }


def _failed_row(config: ExperimentConfig, sweep_value, algorithm: str,
                trial: int) -> Dict[str, object]:
    nan = float("nan")
    return {
        "sweep_param": config.sweep_param or "", "sweep_value": sweep_value or "",
        "algorithm": algorithm, "trial": trial, "ospa": nan, "d_p_rmse": nan,
        "d_v_rmse": nan, "cardinality_error": 0, "likelihood_evals": 0,
        "fit_evals": 0, "wall_time_s": nan,
    }


def _run_cell(args):
    config, algorithm, sweep_index, sweep_value, trial = args
    cell = config if sweep_value is None else config.with_value(config.sweep_param, sweep_value)
    try:
        res = run_trial(cell, algorithm, sweep_index, trial)
        return algorithm, sweep_value, trial, _row(config, sweep_value, algorithm, res), None
    except Exception as err:  # recorded, sweep continues
        return algorithm, sweep_value, trial, _failed_row(config, sweep_value, algorithm, trial), str(err)


def run_sweep(config: ExperimentConfig, out_dir: Path,
              jobs: int = 1) -> Dict[str, List[Dict[str, object]]]:
    """Run trials x sweep values x algorithms; write one CSV per algorithm,
    an aggregate JSON, and a manifest. Returns rows keyed by algorithm."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    values: Sequence = config.sweep_values if config.sweep_param else (None,)

    cells = [(config, algo, si, sv, trial)
             for algo in config.algorithms
             for si, sv in enumerate(values)
             for trial in range(config.trials)]
    failures: List[str] = []
    results: Dict[Tuple, Dict[str, object]] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for algo, sv, trial, row, err in pool.map(_run_cell, cells, chunksize=4):
                results[(algo, sv, trial)] = row
                if err:
                    failures.append(f"{algo} sweep={sv} trial={trial}: {err}")
    else:
        for cell in cells:
            algo, sv, trial, row, err = _run_cell(cell)
            results[(algo, sv, trial)] = row
            if err:
                failures.append(f"{algo} sweep={sv} trial={trial}: {err}")

    by_algo: Dict[str, List[Dict[str, object]]] = {a: [] for a in config.algorithms}
    for algo in config.algorithms:
        for si, sv in enumerate(values):
            for trial in range(config.trials):
                by_algo[algo].append(results[(algo, sv, trial)])

    aggregate = {}
    for algo, rows in by_algo.items():
        path = out_dir / f"results_{algo}.csv"
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
        aggregate[algo] = _aggregate(rows)
    with (out_dir / "aggregate.json").open("w") as fh:
        json.dump(aggregate, fh, indent=2, sort_keys=True)
    manifest = {
        "config": dataclasses.asdict(config),
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "csv_columns": list(CSV_COLUMNS),
        "failures": failures,
    }
    with (out_dir / "manifest.json").open("w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    return by_algo


def _aggregate(rows: List[Dict[str, object]]) -> List[Dict[str, float]]:
    """Mean and standard error of each metric per sweep value."""
    groups: Dict[object, List[Dict[str, object]]] = {}
    for row in rows:
        groups.setdefault(row["sweep_value"], []).append(row)
    out = []
    for value, group in groups.items():
        entry: Dict[str, object] = {"sweep_value": value, "n_trials": len(group)}
        for key in ("ospa", "d_p_rmse", "d_v_rmse", "cardinality_error",
                    "likelihood_evals", "fit_evals", "wall_time_s"):
            data = np.array([float(r[key]) for r in group])
            data = data[np.isfinite(data)]
            if len(data) == 0:
                entry[f"{key}_mean"] = float("nan")
                entry[f"{key}_stderr"] = float("nan")
                continue
            entry[f"{key}_mean"] = float(data.mean())
            entry[f"{key}_stderr"] = float(data.std(ddof=1) / math.sqrt(len(data))) \
                if len(data) > 1 else 0.0
        out.append(entry)
    return out


# ----------------------------------------------------------------------------
# Observation file format: line-oriented, diffable
# ----------------------------------------------------------------------------

def write_observations(path: Path, obs: ObservationSet, array: SensorArray,
                       seed: Optional[int] = None) -> None:
    """One detection per line: sensor_index range doppler truth_label.

    The header carries the array geometry; floats round-trip exactly.
    """
    path = Path(path)
    with path.open("w") as fh:
        fh.write("# rdassoc observations v1\n")
        fh.write("# sensors: " + " ".join(format(p, ".17g") for p in array.positions) + "\n")
        if seed is not None:
            fh.write(f"# seed: {seed}\n")
        fh.write("# columns: sensor_index range_m doppler truth_label\n")
        for s, col in enumerate(obs.detections):
            labels = obs.truth_labels[s] if obs.truth_labels else [-1] * len(col)
            for det, label in zip(col, labels):
                fh.write(f"{s} {det.range_m:.17g} {det.doppler:.17g} {label}\n")


def read_observations(path: Path) -> Tuple[ObservationSet, SensorArray]:
    path = Path(path)
    positions: Optional[Tuple[float, ...]] = None
    rows: List[Tuple[int, float, float, int]] = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# sensors:"):
                    positions = tuple(float(tok) for tok in line.split(":", 1)[1].split())
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            rows.append((int(parts[0]), float(parts[1]), float(parts[2]), int(parts[3])))
    if positions is None:
        raise ValueError(f"{path}: missing '# sensors:' header")
    array = SensorArray(positions)
    columns: List[List[Detection]] = [[] for _ in positions]
    labels: List[List[int]] = [[] for _ in positions]
    for sensor, r, d, label in rows:
        if not 0 <= sensor < len(positions):
            raise ValueError(f"{path}: sensor index {sensor} out of range")
        columns[sensor].append(Detection(range_m=r, doppler=d, sensor_index=sensor))
        labels[sensor].append(label)
    obs = ObservationSet(detections=tuple(tuple(c) for c in columns),
                         truth_labels=tuple(tuple(l) for l in labels))
    return obs, array


def resolve_output_dir(explicit: Optional[str]) -> Path:
    """CLI output dir: explicit flag, else env override, else ./rdassoc_out."""
    if explicit:
        return Path(explicit)
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        return Path(env)
    return Path("rdassoc_out")
