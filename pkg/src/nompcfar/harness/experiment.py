"""Seeded Monte Carlo runner.

An experiment file is INI text with three sections::

    [scenario]
    dims = 256            ; comma separated for several dimensions
    k_targets = 16
    snr_db = 15           ; one value or one per target
    min_sep_bins = 2.5
    snapshots = 1
    compression_ratio =   ; empty for none
    noise_fluct_db = 0

    [algorithm]
    name = nomp_cfar      ; nomp_cfar | nomp_cfar_forward | nomp_baseline | classical
    k_max = 32
    p_fa = 0.01
    alpha =               ; overrides the design from p_fa
    n_ref = 50
    n_guard = 4
    variant = CA
    os_rank =
    exclusion_radius =
    oversample = 4
    newton_steps = 1
    cyclic_rounds = 3
    refit_margins = true
    sigma2 = 1            ; noise level assumed by nomp_baseline

    [run]
    trials = 1000
    seed = 0
    workers = 1

Trial ``i`` draws from ``SeedSequence([seed, i])`` so any subset of trials
can be rerun on its own.
"""

from __future__ import annotations

import configparser
import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from ..analysis import score
from ..cfar_core import CfarConfig, CfarVariant, alpha_per_cell, design_config
from ..nomp_cfar import (
    NompCfarSettings,
    nomp_cfar,
    nomp_cfar_compressive,
    nomp_cfar_forward,
    nomp_cfar_mmv,
)
from ..errors import ConfigError, NompCfarError
from ..nomp import CandidateSet, RefineSettings, nomp_baseline
from .classical import classical_cfar_detect
from .scenario import Scenario, ScenarioSpec, generate_scenario

ALGORITHMS = ("nomp_cfar", "nomp_cfar_forward", "nomp_baseline", "classical")

TRIAL_FIELDS = (
    "trial", "seed", "scenario", "K", "K_hat", "n_detected", "n_false",
    "all_detected", "freq_mse", "nmse", "sigma2",
)
SUMMARY_FIELDS = (
    "algorithm", "trials", "p_fa_nominal", "alpha", "p_fa_measured", "p_d",
    "p_order", "freq_mse", "nmse",
)


@dataclass(frozen=True)
class AlgorithmSpec:
    name: str = "nomp_cfar"
    k_max: int = 32
    p_fa: float = 0.01
    alpha: float | None = None
    n_ref: int = 50
    n_guard: int = 4
    variant: str = "CA"
    os_rank: int | None = None
    exclusion_radius: int | None = None
    oversample: int = 4
    newton_steps: int = 1
    cyclic_rounds: int = 3
    refit_margins: bool = True
    sigma2: float = 1.0

    def __post_init__(self):
        if self.name not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.name!r}; choose from {', '.join(ALGORITHMS)}")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioSpec
    algorithm: AlgorithmSpec = field(default_factory=AlgorithmSpec)
    trials: int = 1000
    seed: int = 0
    workers: int = 1


# ---------------------------------------------------------------------------
# config parsing


def _parse_value(raw: str, kind: type, section: str, key: str):
    raw = raw.split(";")[0].strip()
    if raw == "" or raw.lower() == "none":
        return None
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            return tuple(float(v) for v in raw.split(","))
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: expected {kind.__name__}") from exc


_SCENARIO_KEYS = {
    "dims": tuple, "k_targets": int, "snr_db": tuple, "min_sep_bins": float,
    "snapshots": int, "compression_ratio": float, "noise_fluct_db": float,
}
_ALGORITHM_KEYS = {
    "name": str, "k_max": int, "p_fa": float, "alpha": float, "n_ref": int,
    "n_guard": int, "variant": str, "os_rank": int, "exclusion_radius": int,
    "oversample": int, "newton_steps": int, "cyclic_rounds": int,
    "refit_margins": bool, "sigma2": float,
}
_RUN_KEYS = {"trials": int, "seed": int, "workers": int}


def _section(parser: configparser.ConfigParser, name: str, keys: dict, required=()) -> dict:
    if not parser.has_section(name):
        if required:
            raise ConfigError(f"missing section [{name}]")
        return {}
    out = {}
    for key, raw in parser.items(name):
        if key not in keys:
            raise ConfigError(f"[{name}] unknown key {key!r}; expected one of {', '.join(keys)}")
        val = _parse_value(raw, keys[key], name, key)
        if val is not None:
            out[key] = val
    missing = [k for k in required if k not in out]
    if missing:
        raise ConfigError(f"[{name}] missing key(s): {', '.join(missing)}")
    return out


def _read_parser(text: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    extra = set(parser.sections()) - {"scenario", "algorithm", "run"}
    if extra:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(extra))}")
    return parser


def parse_algorithm(text: str) -> AlgorithmSpec:
    """Only the ``[algorithm]`` section; other sections are checked but ignored."""
    try:
        return AlgorithmSpec(**_section(_read_parser(text), "algorithm", _ALGORITHM_KEYS))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(text: str) -> ExperimentConfig:
    parser = _read_parser(text)
    sc = _section(parser, "scenario", _SCENARIO_KEYS, required=("dims", "k_targets"))
    sc["dims"] = tuple(int(v) for v in sc["dims"])
    if "snr_db" in sc and len(sc["snr_db"]) == 1:
        sc["snr_db"] = sc["snr_db"][0]
    al = _section(parser, "algorithm", _ALGORITHM_KEYS)
    run = _section(parser, "run", _RUN_KEYS)
    try:
        return ExperimentConfig(ScenarioSpec(**sc), AlgorithmSpec(**al), **run)
    except NompCfarError as exc:
        raise ConfigError(str(exc)) from exc


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    return parse_config(_read_text(path))


def load_algorithm(path) -> AlgorithmSpec:
    return parse_algorithm(_read_text(path))


# ---------------------------------------------------------------------------
# trials


def _n_cells(spec: ScenarioSpec) -> int:
    return int(np.prod(spec.dims))


def cfar_for(cfg: ExperimentConfig) -> CfarConfig:
    """The CFAR configuration an experiment runs with."""
    return algorithm_cfar(cfg.algorithm, _n_cells(cfg.scenario), cfg.scenario.snapshots)


def algorithm_cfar(alg: AlgorithmSpec, n_cells: int, snapshots: int = 1) -> CfarConfig:
    """CFAR configuration for ``alg`` on a grid of ``n_cells`` cells."""
    variant = CfarVariant(alg.variant.upper())
    rank = alg.os_rank
    if variant is CfarVariant.OS and rank is None:
        rank = max(1, (3 * alg.n_ref) // 4)
    if variant is CfarVariant.CA:
        rank = None
    if alg.alpha is not None:
        return CfarConfig(variant, alg.n_ref, alg.n_guard, rank, alg.alpha, alg.exclusion_radius)
    if alg.name == "classical":
        alpha = alpha_per_cell(alg.p_fa / n_cells, alg.n_ref, variant, rank)
        return CfarConfig(variant, alg.n_ref, alg.n_guard, rank, alpha, alg.exclusion_radius)
    return design_config(
        alg.p_fa, n_cells, alg.n_ref, alg.n_guard, snapshots, variant, rank, alg.exclusion_radius,
    )


def settings_for(cfg: ExperimentConfig, cfar: CfarConfig | None = None) -> NompCfarSettings:
    return algorithm_settings(cfg.algorithm, cfar or cfar_for(cfg))


def algorithm_settings(alg: AlgorithmSpec, cfar: CfarConfig) -> NompCfarSettings:
    refine = RefineSettings(alg.newton_steps, alg.cyclic_rounds, alg.oversample)
    return NompCfarSettings(alg.k_max, cfar, refine, refit_margins=alg.refit_margins)


def trial_rng(seed: int, index: int) -> tuple[np.random.Generator, int]:
    ss = np.random.SeedSequence([int(seed), int(index)])
    return np.random.default_rng(ss), int(ss.generate_state(1)[0])


def _raw_amplitudes(est: CandidateSet, phi: np.ndarray) -> CandidateSet:
    """Express amplitudes on normalised compressed atoms as raw-atom amplitudes."""
    if len(est) == 0:
        return est
    A = np.exp(1j * np.outer(np.arange(phi.shape[1]), est.freqs[:, 0]))
    norms = np.linalg.norm(phi @ A, axis=0)
    return CandidateSet(est.dims, est.freqs, est.amplitudes / norms)


def run_algorithm(cfg: ExperimentConfig, scene: Scenario, settings: NompCfarSettings) -> CandidateSet:
    name = cfg.algorithm.name
    if scene.phi is not None:
        if name != "nomp_cfar":
            raise ConfigError("compressed scenes support only nomp_cfar")
        return _raw_amplitudes(nomp_cfar_compressive(scene.y, scene.phi, settings).components, scene.phi)
    if cfg.scenario.snapshots > 1:
        if name != "nomp_cfar":
            raise ConfigError("multi-snapshot scenes support only nomp_cfar")
        return nomp_cfar_mmv(scene.y, settings).components
    if name == "nomp_cfar":
        return nomp_cfar(scene.y, settings).components
    if name == "nomp_cfar_forward":
        return nomp_cfar_forward(scene.y, settings).components
    if name == "nomp_baseline":
        return nomp_baseline(scene.y, cfg.algorithm.sigma2, cfg.algorithm.p_fa, settings.refine)
    return classical_cfar_detect(scene.y, settings.cfar).components


def run_trial(cfg: ExperimentConfig, index: int, settings: NompCfarSettings | None = None) -> dict:
    settings = settings or settings_for(cfg)
    rng, seed = trial_rng(cfg.seed, index)
    scene = generate_scenario(cfg.scenario, rng)
    est = run_algorithm(cfg, scene, settings)
    res = score(scene.truth, est)
    K = res.n_true
    return {
        "trial": index,
        "seed": seed,
        "scenario": f"{cfg.seed}:{index}",
        "K": K,
        "K_hat": res.n_estimated,
        "n_detected": res.n_detected_true,
        "n_false": res.n_false,
        "all_detected": int(res.all_detected),
        "freq_mse": res.freq_sq_error / K if K and not math.isnan(res.freq_sq_error) else math.nan,
        "nmse": res.nmse,
        "sigma2": scene.sigma2,
    }


def _run_chunk(args) -> list[dict]:
    cfg, indices = args
    settings = settings_for(cfg)
    return [run_trial(cfg, i, settings) for i in indices]


def run_trials(cfg: ExperimentConfig) -> list[dict]:
    """All trial rows in index order."""
    n = int(cfg.trials)
    if n <= 0:
        return []
    workers = max(1, int(cfg.workers))
    if workers == 1:
        return _run_chunk((cfg, range(n)))
    chunks = [(cfg, range(i, n, workers)) for i in range(workers)]
    rows: list[dict] = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for part in pool.map(_run_chunk, chunks):
            rows.extend(part)
    rows.sort(key=lambda r: r["trial"])
    return rows


def summarize(cfg: ExperimentConfig, rows: list[dict]) -> dict:
    n = len(rows)
    alpha = cfar_for(cfg).alpha if cfg.algorithm.name != "nomp_baseline" else math.nan

    def mean(key, subset=None):
        vals = [r[key] for r in (subset if subset is not None else rows) if not math.isnan(r[key])]
        return float(np.mean(vals)) if vals else math.nan

    correct = [r for r in rows if r["K_hat"] == r["K"]]
    return {
        "algorithm": cfg.algorithm.name,
        "trials": n,
        "p_fa_nominal": cfg.algorithm.p_fa,
        "alpha": alpha,
        "p_fa_measured": mean("n_false") if n else math.nan,
        "p_d": mean("all_detected") if n else math.nan,
        "p_order": len(correct) / n if n else math.nan,
        "freq_mse": mean("freq_mse", correct),
        "nmse": mean("nmse") if n else math.nan,
    }


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def summary_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.stem + "_summary.csv")


def run_experiment(config, out=None, seed: int | None = None, workers: int | None = None) -> dict:
    """Run an experiment file (or :class:`ExperimentConfig`) and write its CSVs.

    Per-trial rows go to ``out`` and the aggregate row to
    ``<out stem>_summary.csv``. Returns the aggregate row.
    """
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    over = {}
    if seed is not None:
        over["seed"] = seed
    if workers is not None:
        over["workers"] = workers
    if over:
        cfg = ExperimentConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, **over})
    rows = run_trials(cfg)
    summary = summarize(cfg, rows)
    if out is not None:
        _write_csv(out, TRIAL_FIELDS, rows)
        _write_csv(summary_path(out), SUMMARY_FIELDS, [summary])
    return summary


__all__ = [
    "AlgorithmSpec", "ExperimentConfig", "algorithm_cfar", "algorithm_settings", "cfar_for",
    "load_algorithm", "load_config", "parse_algorithm", "parse_config",
    "run_experiment", "run_trial", "run_trials", "settings_for", "summarize", "trial_rng",
]
