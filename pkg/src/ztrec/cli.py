"""Command-line pipeline: ``ztrec simulate``, ``ztrec fit`` and ``ztrec variance``.

Settings come from built-in defaults, then an optional JSON ``--config``
file (keys are the long option names with ``_`` for ``-``), then explicit
flags. Exit status is 0 on success, 2 for configuration or schema problems
and 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .census import BIN_YEARS
from .errors import ConfigurationError, DomainError, NumericalError, UnsupportedRuleError
from .estimator import fit
from .io import (config_hash, dataset_files, read_dataset, sha256_file, write_csv,
                 write_dataset, write_json)
from .model import MODEL_NAMES, ModelSpec
from .simulator import ScenarioSpec, simulate
from .variance import MultiplierPlan, bootstrap, multiplier_replicates, variance_bands

log = logging.getLogger("ztrec")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

# tau_left per profile; h = 9 and tau_right = 105 in both
PROFILES = {"real": 9.0, "simulation": 6.0}

SIMULATE_DEFAULTS = {"scenario": 2, "population": 20_000, "window_years": 7.0,
                     "census_resolution": "yearly", "start_year": 2010, "seed": 0, "threads": 1}
FIT_DEFAULTS = {"model": "SSV", "profile": "real", "bandwidth_units": 9.0, "tau_left": None,
                "tau_right": 105.0, "tolerance": 1e-4, "max_iterations": 50,
                "census_resolution": None, "jitter": False, "seed": 0, "threads": 1}
VARIANCE_DEFAULTS = dict(FIT_DEFAULTS, method="multiplier", replicates=None,
                         family="PoissonUnit", one_step=False, level=0.95)
DEFAULT_REPLICATES = {"multiplier": 400, "bootstrap": 1000}


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON file with default settings")
    p.add_argument("--out", type=Path, help="output directory (created if missing)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker processes")


def _add_fit_options(p: argparse.ArgumentParser):
    p.add_argument("--data", type=Path, help="directory with subjects/events/census CSVs")
    p.add_argument("--model", choices=MODEL_NAMES)
    p.add_argument("--profile", choices=sorted(PROFILES),
                   help="default tau_left: 9 units (real) or 6 units (simulation)")
    p.add_argument("--bandwidth-units", type=float)
    p.add_argument("--tau-left", type=float)
    p.add_argument("--tau-right", type=float)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--census-resolution", choices=sorted(BIN_YEARS))
    p.add_argument("--jitter", action="store_true", default=None,
                   help="spread tied event ages instead of rejecting them")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ztrec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ztrec {__version__}")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthetic population, cohort and census")
    _add_common(p)
    p.add_argument("--scenario", type=int, choices=[1, 2])
    p.add_argument("--population", type=int)
    p.add_argument("--window-years", type=float)
    p.add_argument("--census-resolution", choices=sorted(BIN_YEARS))
    p.add_argument("--start-year", type=int)

    p = sub.add_parser("fit", help="coefficient and baseline estimates")
    _add_common(p)
    _add_fit_options(p)

    p = sub.add_parser("variance", help="pointwise standard errors and bands")
    _add_common(p)
    _add_fit_options(p)
    p.add_argument("--method", choices=["multiplier", "bootstrap"])
    p.add_argument("--replicates", type=int, help="B (default 400 multiplier, 1000 bootstrap)")
    p.add_argument("--family", choices=["PoissonUnit", "StandardNormal"])
    p.add_argument("--one-step", action="store_true", default=None)
    p.add_argument("--level", type=float)
    return parser


def resolve_settings(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge defaults, the JSON config file and explicit flags, in that order."""
    settings = dict(defaults)
    paths = {}
    if args.config is not None:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigurationError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigurationError("config file must hold a JSON object")
        for key, value in cfg.items():
            key = key.replace("-", "_")
            if key in ("data", "out"):
                paths[key] = value
            elif key in settings:
                settings[key] = value
            else:
                raise ConfigurationError(f"unknown config key {key!r}")
    for key in settings:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    for key in ("data", "out"):
        value = getattr(args, key, None)
        if value is not None:
            paths[key] = value
    for key in ("data", "out"):
        if key in paths:
            paths[key] = Path(paths[key])
    if "out" not in paths:
        raise ConfigurationError("an output directory is required (--out)")
    if int(settings.get("threads", 1)) < 1:
        raise ConfigurationError("threads must be >= 1")
    settings["_paths"] = paths
    return settings


def _prepare_out(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"cannot create output directory {path}: {exc}") from None
    if not path.is_dir():
        raise ConfigurationError(f"{path} is not a directory")
    return path


def _public(settings: dict) -> dict:
    # threads never change results, so they stay out of the hash
    return {k: v for k, v in settings.items() if not k.startswith("_") and k != "threads"}


# ---------------------------------------------------------------------------
# simulate

def cmd_simulate(settings: dict) -> dict:
    out = _prepare_out(settings["_paths"]["out"])
    if int(settings["population"]) < 1:
        raise ConfigurationError("population must be >= 1")
    spec = ScenarioSpec(scenario=int(settings["scenario"]),
                        population_size=int(settings["population"]),
                        window_years=float(settings["window_years"]),
                        seed=int(settings["seed"]),
                        start_year=int(settings["start_year"]),
                        census_resolution=settings["census_resolution"])
    public = dict(_public(settings), command="simulate")
    chash = config_hash(public)
    seed = spec.seed
    log.info("simulating scenario %d, population %d", spec.scenario, spec.population_size)
    data = simulate(spec, n_jobs=int(settings["threads"]))
    files = write_dataset(out, data.cohort, data.census, chash, seed)
    truth = data.truth
    names = data.cohort.space.names
    mids = truth.grid.midpoints

    def truth_rows():
        for s in range(1, truth.n_strata + 1):
            cum = truth.cumulative_at(s, mids)
            for g, a in enumerate(mids):
                yield [a, s, *truth.beta[s - 1, g], truth.baseline[s - 1, g], cum[g]]

    files.append(out / "truth.csv")
    write_csv(files[-1], ["age_units", "stratum", *[f"beta_{n}" for n in names],
                          "baseline", "cumulative_baseline"], truth_rows(), chash, seed)
    manifest = {
        "tool": "ztrec", "version": __version__, "command": "simulate",
        "config_hash": chash, "seed": seed, "settings": public,
        "counts": {"population": data.population_size,
                   "cohort_count": data.cohort.n_subjects,
                   "events": int(data.cohort.event_age.size),
                   "census_periods": len(data.census.periods)},
        "cohort_fraction": data.cohort_fraction,
        "files": {f.name: sha256_file(f) for f in files},
    }
    write_json(out / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# fit and variance

def _model_spec(settings: dict) -> ModelSpec:
    tau_left = settings["tau_left"]
    if tau_left is None:
        if settings["profile"] not in PROFILES:
            raise ConfigurationError(f"unknown profile {settings['profile']!r}")
        tau_left = PROFILES[settings["profile"]]
    return ModelSpec.from_name(str(settings["model"]),
                               bandwidth_units=float(settings["bandwidth_units"]),
                               tau_left_units=float(tau_left),
                               tau_right_units=float(settings["tau_right"]),
                               tolerance=float(settings["tolerance"]),
                               max_iterations=int(settings["max_iterations"]))


def _census_resolution(settings: dict, data_dir: Path) -> str:
    if settings["census_resolution"] is not None:
        return settings["census_resolution"]
    manifest = data_dir / "manifest.json"
    if manifest.exists():
        try:
            return json.loads(manifest.read_text())["settings"]["census_resolution"]
        except (KeyError, TypeError, json.JSONDecodeError):
            pass
    return "yearly"


def _load(settings: dict, command: str):
    paths = settings["_paths"]
    if "data" not in paths:
        raise ConfigurationError("an input directory is required (--data)")
    data_dir = paths["data"]
    for f in dataset_files(data_dir):
        if not f.exists():
            raise ConfigurationError(f"missing input file {f}")
    settings["census_resolution"] = _census_resolution(settings, data_dir)
    spec = _model_spec(settings)
    public = dict(_public(settings), command=command)
    chash = config_hash(public, dataset_files(data_dir))
    cohort, census = read_dataset(data_dir, settings["census_resolution"], spec.grid,
                                  jitter=bool(settings["jitter"]))
    return spec, cohort, census, public, chash


def cmd_fit(settings: dict) -> dict:
    out = _prepare_out(settings["_paths"]["out"])
    spec, cohort, census, public, chash = _load(settings, "fit")
    seed = int(settings["seed"])
    log.info("fitting %s to %d subjects", spec.name, cohort.n_subjects)
    result = fit(cohort, census, spec)
    beta = result.coefficients
    names = cohort.space.names
    mids = spec.grid.midpoints
    write_csv(out / "coefficients.csv", ["age_units", "stratum", "covariate_name", "estimate"],
              ([a, s + 1, names[k], beta[s, g, k]]
               for s in range(beta.shape[0]) for g, a in enumerate(mids)
               for k in range(len(names))), chash, seed)
    cum = result.cumulative_baselines
    write_csv(out / "baselines.csv", ["age_units", "stratum", "cumulative_baseline"],
              ([a, s + 1, cum[s, g]] for s in range(cum.shape[0])
               for g, a in enumerate(spec.grid.edges)), chash, seed)
    diag = dict(result.diagnostics(), config_hash=chash, seed=seed, settings=public,
                n_subjects=cohort.n_subjects, n_events=int(cohort.event_age.size))
    write_json(out / "diagnostics.json", diag)
    return diag


def cmd_variance(settings: dict) -> dict:
    out = _prepare_out(settings["_paths"]["out"])
    method = settings["method"]
    if method not in DEFAULT_REPLICATES:
        raise ConfigurationError(f"unknown method {method!r}")
    if settings["replicates"] is None:
        settings["replicates"] = DEFAULT_REPLICATES[method]
    B = int(settings["replicates"])
    if B < 2:
        raise ConfigurationError("need at least 2 replicates")
    if method == "bootstrap" and settings["one_step"]:
        raise ConfigurationError("one-step refits apply to the multiplier method only")
    spec, cohort, census, public, chash = _load(settings, "variance")
    seed = int(settings["seed"])
    threads = int(settings["threads"])
    estimate = fit(cohort, census, spec)
    if method == "multiplier":
        plan = MultiplierPlan(settings["family"], B, seed)
        reps = multiplier_replicates(cohort, census, spec, plan, estimate,
                                     one_step=bool(settings["one_step"]), n_jobs=threads)
    else:
        reps = bootstrap(cohort, census, spec, B, seed, estimate, n_jobs=threads)
    bands = variance_bands(reps, estimate.coefficients, float(settings["level"]))
    names = cohort.space.names
    mids = spec.grid.midpoints
    S, G, p = bands.estimate.shape

    def rows():
        for s in range(S):
            for g, a in enumerate(mids):
                for k in range(p):
                    yield [a, s + 1, names[k], bands.estimate[s, g, k], bands.se[s, g, k],
                           bands.lower[s, g, k], bands.upper[s, g, k], method, B, reps.dropped]

    write_csv(out / "bands.csv", ["age_units", "stratum", "covariate_name", "estimate", "se",
                                  "ci_low", "ci_high", "method", "B", "dropped_replicates"],
              rows(), chash, seed)
    summary = {"config_hash": chash, "seed": seed, "settings": public, "method": method,
               "replicates": B, "successful": int(bands.n_replicates),
               "dropped_replicates": int(reps.dropped), "failures": reps.failures,
               "level": bands.level}
    write_json(out / "variance.json", summary)
    return summary


COMMANDS = {"simulate": (cmd_simulate, SIMULATE_DEFAULTS),
            "fit": (cmd_fit, FIT_DEFAULTS),
            "variance": (cmd_variance, VARIANCE_DEFAULTS)}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    command, defaults = COMMANDS[args.command]
    try:
        settings = resolve_settings(args, defaults)
        command(settings)
    except (ConfigurationError, DomainError, UnsupportedRuleError) as exc:
        print(f"ztrec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"ztrec {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"ztrec {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TypeError, ValueError) as exc:
        # malformed values from a config file
        print(f"ztrec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
