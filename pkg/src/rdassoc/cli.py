"""
Command-line experiment runner.

Subcommands:
  simulate   draw a scene, synthesize observations, write them to a file
  associate  read an observation file, run one association algorithm
  sweep      seeded Monte-Carlo sweep over a config parameter -> CSV/JSON
  crb        print the range/Doppler and position/velocity bounds

A JSON config file (keys mirroring the sweep config fields) can seed any
subcommand; explicit flags override file values. The output directory for
sweeps honors the RDASSOC_OUTDIR environment variable unless --out is given.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .experiment import (
    ALGORITHMS,
    ExperimentConfig,
    SCENE_MODES,
    read_observations,
    resolve_output_dir,
    run_algorithm,
    run_sweep,
    write_observations,
)
from .metrics import crb_position_velocity, crb_range_doppler
from .saga import REFERENCE_STATE
from .scene import KinematicState, NoiseModel, SensorArray, simulate_observations, simulate_scene


class CliError(RuntimeError):
    pass


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise CliError(f"cannot read config {path}: {err}")
    if not isinstance(data, dict):
        raise CliError(f"config {path} must hold a JSON object")
    return data


def _config_from(args, overrides: dict) -> ExperimentConfig:
    base = dataclasses.asdict(ExperimentConfig())
    file_cfg = _load_config(getattr(args, "config", None))
    unknown = set(file_cfg) - set(base)
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    base.update(file_cfg)
    base.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("algorithms", "sweep_values"):
        if key in base and isinstance(base[key], list):
            base[key] = tuple(base[key])
    try:
        return ExperimentConfig(**base)
    except (TypeError, ValueError) as err:
        raise CliError(str(err))


def _add_common_scene_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (flags override)")
    p.add_argument("--n-targets", type=int, dest="n_targets")
    p.add_argument("--n-sensors", type=int, dest="n_sensors")
    p.add_argument("--snr", type=float, dest="snr_db", help="SNR in dB")
    p.add_argument("--width", type=float, dest="array_width_m")
    p.add_argument("--p-miss", type=float, dest="p_miss")
    p.add_argument("--p-false-alarm", type=float, dest="p_false_alarm")
    p.add_argument("--scene-mode", choices=SCENE_MODES, dest="scene_mode")
    p.add_argument("--rho", type=int)
    p.add_argument("--seed", type=int)


def _scene_overrides(args) -> dict:
    keys = ("n_targets", "n_sensors", "snr_db", "array_width_m", "p_miss",
            "p_false_alarm", "scene_mode", "rho", "seed")
    return {k: getattr(args, k, None) for k in keys}


def cmd_simulate(args) -> int:
    config = _config_from(args, _scene_overrides(args))
    array = config.make_array()
    noise = config.make_noise()
    ss = np.random.SeedSequence(entropy=(config.seed, 0, 0))
    scene_rng, obs_rng = [np.random.default_rng(s) for s in ss.spawn(2)]
    truth = simulate_scene(config.n_targets, separation=config.separation(),
                           array=array, rng_seed=scene_rng)
    obs = simulate_observations(truth, array, noise, rng_seed=obs_rng)
    write_observations(Path(args.out), obs, array, seed=config.seed)
    print(f"wrote {obs.n_detections()} detections over {array.n_sensors} sensors "
          f"to {args.out}")
    return 0


def cmd_associate(args) -> int:
    config = _config_from(args, _scene_overrides(args))
    try:
        obs, array = read_observations(Path(args.obs))
    except (OSError, ValueError) as err:
        raise CliError(f"cannot read observations: {err}")
    noise = config.make_noise()
    result = run_algorithm(args.algo, obs, array, noise, config.make_saga_config())
    payload = {
        "algorithm": args.algo,
        "n_detections_per_sensor": list(obs.counts()),
        "n_chains": len(result.chains),
        "likelihood_evals": result.likelihood_evals,
        "fit_evals": result.fit_evals,
        "chains": [
            [{"sensor": det.sensor_index, "range_m": det.range_m,
              "doppler": det.doppler} for det in chain.detections]
            for chain in result.chains
        ],
        "states": [
            {"x": sf.state.x, "y": sf.state.y, "vx": sf.state.vx, "vy": sf.state.vy,
             "fit_error": sf.fit_error, "log_likelihood": sf.log_likelihood}
            for sf in result.states
        ],
    }
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"wrote {len(result.chains)} chains to {args.out}")
    else:
        print(text)
    return 0


def cmd_sweep(args) -> int:
    overrides = _scene_overrides(args)
    if args.param:
        overrides["sweep_param"] = args.param
    if args.values:
        overrides["sweep_values"] = tuple(float(v) for v in args.values.split(","))
    if args.algo:
        overrides["algorithms"] = tuple(args.algo.split(","))
    if args.trials is not None:
        overrides["trials"] = args.trials
    config = _config_from(args, overrides)
    out_dir = resolve_output_dir(args.out)
    rows = run_sweep(config, out_dir, jobs=args.jobs)
    total = sum(len(r) for r in rows.values())
    print(f"wrote {total} rows for {sorted(rows)} under {out_dir}")
    return 0


def crb_payload(snr_db: float, n_sensors: int, width: float,
                state: KinematicState, delta_r: float = 0.3,
                delta_d: float = 0.5, kappa: float = 1.0) -> dict:
    noise = NoiseModel.from_snr(snr_db, resolution=(delta_r, delta_d), kappa=kappa)
    array = SensorArray.uniform(n_sensors, width)
    sr2, sd2 = crb_range_doppler(noise, (delta_r, delta_d))
    report = crb_position_velocity(state, array, sr2, sd2)
    return {
        "snr_db": snr_db,
        "n_sensors": n_sensors,
        "array_width_m": width,
        "state": {"x": state.x, "y": state.y, "vx": state.vx, "vy": state.vy},
        "sigma_r2": report.sigma_r2,
        "sigma_d2": report.sigma_d2,
        "crb_p": report.crb_p,
        "crb_v": report.crb_v,
        "tau_z": report.tau_z,
    }


def cmd_crb(args) -> int:
    if args.state:
        parts = [float(v) for v in args.state.split(",")]
        if len(parts) != 4:
            raise CliError("--state needs x,y,vx,vy")
        state = KinematicState(*parts)
    else:
        state = REFERENCE_STATE
    payloads = [crb_payload(snr, args.n_sensors, args.width, state)
                for snr in args.snr]
    if args.json:
        text = json.dumps(payloads if len(payloads) > 1 else payloads[0], indent=2)
        if args.out:
            Path(args.out).write_text(text + "\n")
        else:
            print(text)
    else:
        for p in payloads:
            print(f"SNR {p['snr_db']:+.1f} dB: sigma_r2={p['sigma_r2']:.6g} m^2  "
                  f"sigma_d2={p['sigma_d2']:.6g} (m/s)^2  crb_p={p['crb_p']:.6g} m^2  "
                  f"crb_v={p['crb_v']:.6g} (m/s)^2  tau_z={p['tau_z']:.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rdassoc",
        description="Multi-sensor range-Doppler association benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="synthesize an observation file")
    _add_common_scene_flags(p_sim)
    p_sim.add_argument("--out", required=True, help="output observation file")
    p_sim.set_defaults(func=cmd_simulate)

    p_assoc = sub.add_parser("associate", help="associate an observation file")
    _add_common_scene_flags(p_assoc)
    p_assoc.add_argument("--obs", required=True, help="observation file")
    p_assoc.add_argument("--algo", choices=ALGORITHMS, default="saga")
    p_assoc.add_argument("--out", help="output JSON (default: stdout)")
    p_assoc.set_defaults(func=cmd_associate)

    p_sweep = sub.add_parser("sweep", help="Monte-Carlo sweep")
    _add_common_scene_flags(p_sweep)
    p_sweep.add_argument("--param", help="config parameter to sweep")
    p_sweep.add_argument("--values", help="comma-separated sweep values")
    p_sweep.add_argument("--algo", help="comma-separated algorithms")
    p_sweep.add_argument("--trials", type=int)
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.add_argument("--out", help=f"output dir (or ${'{'}RDASSOC_OUTDIR{'}'})")
    p_sweep.set_defaults(func=cmd_sweep)

    p_crb = sub.add_parser("crb", help="print estimation bounds")
    p_crb.add_argument("--snr", type=float, nargs="+", required=True,
                       help="one or more SNR values in dB")
    p_crb.add_argument("--n-sensors", type=int, default=6)
    p_crb.add_argument("--width", type=float, default=4.0)
    p_crb.add_argument("--state", help="reference state as x,y,vx,vy")
    p_crb.add_argument("--json", action="store_true")
    p_crb.add_argument("--out", help="write JSON here instead of stdout")
    p_crb.set_defaults(func=cmd_crb)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
