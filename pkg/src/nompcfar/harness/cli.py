"""``nompcfar`` command line.

Subcommands::

    nompcfar threshold --p-fa 0.01 --cells 256 --n-ref 50 [--snapshots S] [--variant OS --rank r]
    nompcfar simulate experiment.ini --out trials.csv [--seed 7] [--workers 4]
    nompcfar detect cube.lset --config detector.ini --out detections.csv [--snapshot-axis]
    nompcfar convert detections.csv --out states.csv [--f-c ... --mu ... --t-s ... --t-r ... --d ...]

Exit status is 0 on success, 2 for bad input or configuration and 3 when a
numerical routine fails.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from ..cfar_core import CfarVariant, FalseAlarmSpec, alpha_from_pfa, alpha_from_pfa_os
from ..nomp_cfar import detection_records, nomp_cfar, nomp_cfar_mmv, write_records
from ..errors import (
    ConfigError,
    IllConditionedError,
    NompCfarError,
    NumericalFailureError,
    OutOfFieldOfViewError,
)
from .experiment import AlgorithmSpec, algorithm_cfar, algorithm_settings, load_algorithm, run_experiment, summary_path
from .radar import RadarParams, freq_to_state
from .tensor_io import read_tensor

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

THRESHOLD_FIELDS = ("variant", "p_fa", "N", "Nr", "S", "r", "alpha", "alpha_db")
STATE_FIELDS = ("run_id", "k", "range_m", "velocity_mps", "azimuth_rad", "amplitude_db", "delta_db")


def _csv_writer(fh, fields):
    writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    return writer


def cmd_threshold(args) -> int:
    variant = CfarVariant(args.variant.upper())
    if variant is CfarVariant.OS:
        if args.snapshots != 1:
            raise ConfigError("OS thresholds are single-snapshot only")
        rank = args.rank if args.rank is not None else max(1, (3 * args.n_ref) // 4)
        alpha = alpha_from_pfa_os(args.p_fa, args.cells, args.n_ref, rank)
    else:
        rank = None
        alpha = alpha_from_pfa(FalseAlarmSpec(args.p_fa, args.cells, args.n_ref, args.snapshots))
    writer = _csv_writer(sys.stdout, THRESHOLD_FIELDS)
    writer.writerow({
        "variant": variant.value, "p_fa": args.p_fa, "N": args.cells, "Nr": args.n_ref,
        "S": args.snapshots, "r": "" if rank is None else rank,
        "alpha": f"{alpha:.6f}", "alpha_db": f"{10 * math.log10(alpha):.4f}",
    })
    return EXIT_OK


def cmd_simulate(args) -> int:
    summary = run_experiment(args.config, args.out, seed=args.seed, workers=args.workers)
    if args.out is None:
        writer = _csv_writer(sys.stdout, list(summary))
        writer.writerow(summary)
    else:
        print(f"wrote {args.out} and {summary_path(args.out)}", file=sys.stderr)
    return EXIT_OK


def cmd_detect(args) -> int:
    try:
        y = read_tensor(args.tensor)
    except OSError as exc:
        raise ConfigError(f"cannot read tensor {args.tensor}: {exc}") from exc
    alg = load_algorithm(args.config) if args.config else AlgorithmSpec()
    if alg.name != "nomp_cfar":
        raise ConfigError(f"detect runs nomp_cfar only, config names {alg.name!r}")
    if args.snapshot_axis:
        if y.ndim < 2:
            raise ConfigError("--snapshot-axis needs a tensor with at least two dimensions")
        dims, snapshots = y.shape[1:], y.shape[0]
    else:
        dims, snapshots = y.shape, 1
    cfar = algorithm_cfar(alg, int(np.prod(dims)), snapshots)
    settings = algorithm_settings(alg, cfar)
    report = nomp_cfar_mmv(y, settings) if args.snapshot_axis else nomp_cfar(y, settings)
    records = detection_records(report, run_id=args.run_id or Path(args.tensor).stem)
    write_records(records, sys.stdout if args.out is None else args.out, args.format)
    if not report.converged:
        print("warning: iteration cap reached before convergence", file=sys.stderr)
    return EXIT_OK


def _read_detections(path) -> list[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read detections {path}: {exc}") from exc
    if rows and "freqs" not in rows[0]:
        raise ConfigError(f"{path}: no 'freqs' column")
    return rows


def cmd_convert(args) -> int:
    params = RadarParams(args.f_c, args.mu, args.t_s, args.t_r, args.d)
    rows = _read_detections(args.detections)
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = _csv_writer(out, STATE_FIELDS)
        for row in rows:
            try:
                freqs = [float(v) for v in row["freqs"].split(";")]
            except ValueError as exc:
                raise ConfigError(f"bad frequency field {row['freqs']!r}") from exc
            try:
                rng, vel, az = freq_to_state(freqs, params)
            except OutOfFieldOfViewError as exc:
                print(f"warning: run {row.get('run_id')} component {row.get('k')}: {exc}", file=sys.stderr)
                rng, vel, _ = freq_to_state(freqs[:2], params)
                az = math.nan
            writer.writerow({
                "run_id": row.get("run_id", ""), "k": row.get("k", ""),
                "range_m": repr(rng), "velocity_mps": repr(vel), "azimuth_rad": repr(az),
                "amplitude_db": row.get("amplitude_db", ""), "delta_db": row.get("delta_db", ""),
            })
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nompcfar", description="CFAR-controlled Newtonized pursuit for line spectra")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("threshold", help="print the threshold multiplier for a false-alarm target")
    p.add_argument("--p-fa", type=float, required=True, help="false-alarm probability over the whole grid")
    p.add_argument("--cells", "-N", type=int, required=True, help="number of grid cells N")
    p.add_argument("--n-ref", type=int, default=50)
    p.add_argument("--snapshots", "-S", type=int, default=1)
    p.add_argument("--variant", default="CA", choices=["CA", "OS", "ca", "os"])
    p.add_argument("--rank", "-r", type=int, default=None, help="OS rank (default 3/4 of n-ref)")
    p.set_defaults(func=cmd_threshold)

    p = sub.add_parser("simulate", help="run a Monte Carlo experiment file")
    p.add_argument("config")
    p.add_argument("--out", default=None, help="per-trial CSV; the summary goes next to it")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("detect", help="run the detector on a tensor file")
    p.add_argument("tensor")
    p.add_argument("--config", default=None, help="INI file; only [algorithm] is used")
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=["csv", "json"], default=None)
    p.add_argument("--run-id", default=None)
    p.add_argument("--snapshot-axis", action="store_true", help="treat the first axis as snapshots")
    p.set_defaults(func=cmd_detect)

    defaults = RadarParams.iwr1642()
    p = sub.add_parser("convert", help="map detection frequencies to range, velocity and azimuth")
    p.add_argument("detections")
    p.add_argument("--out", default=None)
    p.add_argument("--f-c", type=float, default=defaults.f_c, help="carrier frequency (Hz)")
    p.add_argument("--mu", type=float, default=defaults.mu, help="chirp slope (Hz/s)")
    p.add_argument("--t-s", type=float, default=defaults.T_s, help="fast-time sample interval (s)")
    p.add_argument("--t-r", type=float, default=defaults.T_r, help="chirp repetition interval (s)")
    p.add_argument("--d", type=float, default=defaults.d, help="element spacing (m)")
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NumericalFailureError, IllConditionedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (NompCfarError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
