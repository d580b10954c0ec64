"""Command line front end.

Four subcommands (analyze, calibrate, simulate, weights) driven by a YAML
configuration file; the only flags are --config, --output, --threads and
--verbose, everything analytic lives in the config for auditability.  All
outputs are CSV plus one plain-text manifest per run.  Exit codes: 0 on
success, 1 for configuration or input problems, 2 for numeric failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import os
import platform
import sys

import numpy as np
import yaml

from . import __version__
from .calibration import calibrate
from .cox import fit_cox
from .data import load_csv
from .design import ModelMatrixSpec
from .errors import IrrvisError, NumericError, ValidationError
from .gee import MarginalModelSpec
from .inference import AnalysisConfig, Resampling, analyze_once, sweep
from .simlab import ScenarioConfig, run_study
from .weights import (SelectionSpec, balance_report, balancing_weights,
                      export_weights, mle_weights, q_values)

log = logging.getLogger("irrvis")

_TOP_KEYS = {"input", "schema", "output", "seed",
             "analyze", "calibrate", "simulate", "weights"}

_SECTION_KEYS = {
    "analyze": {"weight_kind", "z_terms", "h_terms", "x_terms", "link",
                "variance", "theta", "selection_transform", "phi_grid",
                "resampling", "bootstrap_b", "bootstrap_seed"},
    "calibrate": {"z_terms", "selection_transform", "time_spline_df",
                  "target_rho2"},
    "simulate": {"outcome", "gamma_z", "phi_true", "n", "scenario", "n_reps"},
    "weights": {"kind", "z_terms", "h_terms", "selection_transform", "phi"},
}

_MISSING = object()


def _load_config(path) -> dict:
    try:
        with open(path, "r") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read config file: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ValidationError(f"config file is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValidationError("config file must contain a key-value mapping")
    for key in raw:
        if key not in _TOP_KEYS:
            raise ValidationError(f"unknown key {key!r} in configuration")
    return raw


def _section(config: dict, name: str) -> dict:
    if name not in config:
        raise ValidationError(f"config has no {name!r} section")
    section = config[name]
    if not isinstance(section, dict):
        raise ValidationError(f"section {name!r} must be a key-value mapping")
    for key in section:
        if key not in _SECTION_KEYS[name]:
            raise ValidationError(f"unknown key {key!r} in section {name!r}")
    return section


def _get(section: dict, name: str, key: str, default=_MISSING):
    if key in section and section[key] is not None:
        return section[key]
    if default is _MISSING:
        raise ValidationError(f"section {name!r} needs key {key!r}")
    return default


def _terms(value, context: str) -> ModelMatrixSpec:
    if not isinstance(value, list) or not value:
        raise ValidationError(f"{context} must be a non-empty list of term strings")
    # YAML reads a bare constant term as the integer 1; accept it
    value = [str(v) if isinstance(v, (int, float)) else v for v in value]
    if not all(isinstance(v, str) for v in value):
        raise ValidationError(f"{context} must be a non-empty list of term strings")
    return ModelMatrixSpec(value)


def _dataset(config: dict):
    if "input" not in config:
        raise ValidationError("config needs an 'input' CSV path")
    schema = config.get("schema")
    if schema is not None and not isinstance(schema, dict):
        raise ValidationError("'schema' must be a mapping of field to column names")
    try:
        return load_csv(config["input"], schema)
    except OSError as exc:
        raise ValidationError(f"cannot read input file: {exc}") from exc


def _outdir(config: dict, flag) -> str:
    out = flag or config.get("output")
    if not out:
        raise ValidationError("no output directory: set 'output' in the config "
                              "or pass --output")
    os.makedirs(out, exist_ok=True)
    return out


def _seed(config: dict) -> int:
    seed = config.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ValidationError("'seed' must be a non-negative integer")
    return seed


def _fmt(value: float) -> str:
    return format(value, "g")


def _write_manifest(outdir: str, command: str, config_path, seed: int) -> None:
    with open(config_path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    lines = [
        f"command={command}",
        f"config_sha256={digest}",
        f"seed={seed}",
        f"irrvis={__version__}",
        f"python={platform.python_version()}",
        f"numpy={np.__version__}",
        f"pyyaml={yaml.__version__}",
    ]
    with open(os.path.join(outdir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_cox(path, cox) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["section", "key", "value"])
        for name, value in zip(cox.names, cox.gamma):
            writer.writerow(["coef", name, repr(float(value))])
        for time, inc in zip(cox.event_times, cox.increments):
            writer.writerow(["breslow", repr(float(time)), repr(float(inc))])


def _write_balance(path, report: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["term", "residual", "standardized_residual", "zero_sd"])
        for row in report:
            writer.writerow([row["term"], repr(row["residual"]),
                             repr(row["standardized_residual"]),
                             int(row["zero_sd"])])


def _marginal_model(section: dict, name: str) -> MarginalModelSpec:
    xspec = _terms(_get(section, name, "x_terms"), "x_terms")
    link = _get(section, name, "link", "identity")
    variance = _get(section, name, "variance", "constant")
    theta = _get(section, name, "theta", None)
    if theta is not None:
        theta = float(theta)
    return MarginalModelSpec(xspec, link=link, variance=variance, theta=theta)


def _analysis_config(config: dict) -> AnalysisConfig:
    section = _section(config, "analyze")
    kind = _get(section, "analyze", "weight_kind", "none")
    model = _marginal_model(section, "analyze")
    zspec = hspec = None
    if kind == "none":
        for key in ("z_terms", "h_terms"):
            if section.get(key) is not None:
                raise ValidationError(f"key {key!r} only applies to weighted "
                                      "analyses")
    else:
        zspec = _terms(_get(section, "analyze", "z_terms"), "z_terms")
    if kind == "balancing" or (kind == "mle" and section.get("h_terms") is not None):
        hspec = _terms(_get(section, "analyze", "h_terms"), "h_terms")
    selection = SelectionSpec(_get(section, "analyze", "selection_transform",
                                   "identity"))
    grid = _get(section, "analyze", "phi_grid", [0.0])
    if not isinstance(grid, list):
        raise ValidationError("phi_grid must be a list of numbers")
    kind_r = _get(section, "analyze", "resampling", "none")
    if kind_r == "bootstrap":
        resampling = Resampling("bootstrap",
                                int(_get(section, "analyze", "bootstrap_b", 200)),
                                int(_get(section, "analyze", "bootstrap_seed",
                                         _seed(config))))
    else:
        for key in ("bootstrap_b", "bootstrap_seed"):
            if section.get(key) is not None:
                raise ValidationError(f"key {key!r} only applies to bootstrap "
                                      "resampling")
        resampling = Resampling(kind_r)
    return AnalysisConfig(model=model, weight_kind=kind, zspec=zspec,
                          hspec=hspec, selection=selection,
                          phi_grid=tuple(float(p) for p in grid),
                          resampling=resampling)


def _phi_artifacts(dataset, outdir: str, kind: str, zspec, hspec,
                   selection, phi: float) -> None:
    """Per-phi weight, balance and visit-model files; skipped on failure."""
    tag = _fmt(phi)
    try:
        q = q_values(dataset, selection, phi)
        cox = fit_cox(dataset, zspec, q)
        if kind == "mle":
            wset = mle_weights(cox, dataset, q)
        else:
            wset = balancing_weights(dataset, hspec, q, cox)
    except NumericError as exc:
        log.warning("phi=%s: %s; no artifact files written", tag, exc)
        return
    _write_cox(os.path.join(outdir, f"cox_phi{tag}.csv"), cox)
    export_weights(dataset, wset, os.path.join(outdir, f"weights_phi{tag}.csv"))
    if hspec is not None:
        report = balance_report(dataset, hspec, wset, cox)
        _write_balance(os.path.join(outdir, f"balance_phi{tag}.csv"), report)


def cmd_analyze(config: dict, config_path, outdir: str, threads) -> int:
    dataset = _dataset(config)
    acfg = _analysis_config(config)
    log.info("analyze: %d patients, %d grid points",
             dataset.n_patients, len(acfg.phi_grid))
    result = sweep(dataset, acfg)
    result.to_csv(os.path.join(outdir, "sweep.csv"))
    if acfg.weight_kind != "none":
        for phi in acfg.phi_grid:
            _phi_artifacts(dataset, outdir, acfg.weight_kind, acfg.zspec,
                           acfg.hspec, acfg.selection, phi)
    _write_manifest(outdir, "analyze", config_path, _seed(config))
    return 0


def cmd_calibrate(config: dict, config_path, outdir: str, threads) -> int:
    dataset = _dataset(config)
    section = _section(config, "calibrate")
    zspec = _terms(_get(section, "calibrate", "z_terms"), "z_terms")
    transform = _get(section, "calibrate", "selection_transform", "identity")
    df = int(_get(section, "calibrate", "time_spline_df", 5))
    target = _get(section, "calibrate", "target_rho2", None)
    result = calibrate(dataset, zspec, transform, df,
                       None if target is None else float(target))
    result.to_csv(os.path.join(outdir, "calibration.csv"))
    with open(os.path.join(outdir, "calibration_report.txt"), "w") as fh:
        fh.write(result.report())
    _write_manifest(outdir, "calibrate", config_path, _seed(config))
    return 0


def cmd_simulate(config: dict, config_path, outdir: str, threads) -> int:
    section = _section(config, "simulate")
    cfg = ScenarioConfig(
        outcome=_get(section, "simulate", "outcome"),
        gamma_z=float(_get(section, "simulate", "gamma_z")),
        phi_true=float(_get(section, "simulate", "phi_true")),
        n=int(_get(section, "simulate", "n")),
        scenario=_get(section, "simulate", "scenario"),
        n_reps=int(_get(section, "simulate", "n_reps", 200)),
        seed=_seed(config),
    )
    log.info("simulate: %s reps=%d n=%d", cfg.scenario, cfg.n_reps, cfg.n)
    table = run_study(cfg, threads)
    table.to_csv(os.path.join(outdir, "metrics.csv"))
    with open(os.path.join(outdir, "replicates.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rep", "estimator", "parameter", "estimate"])
        for estimator, block in table.estimates.items():
            for rep in range(block.shape[0]):
                for j, parameter in enumerate(("beta1", "beta2")):
                    writer.writerow([rep, estimator, parameter,
                                     repr(float(block[rep, j]))])
    _write_manifest(outdir, "simulate", config_path, _seed(config))
    return 0


def cmd_weights(config: dict, config_path, outdir: str, threads) -> int:
    dataset = _dataset(config)
    section = _section(config, "weights")
    kind = _get(section, "weights", "kind")
    if kind not in ("mle", "balancing"):
        raise ValidationError("weights kind must be mle or balancing")
    zspec = _terms(_get(section, "weights", "z_terms"), "z_terms")
    hspec = None
    if kind == "balancing" or section.get("h_terms") is not None:
        hspec = _terms(_get(section, "weights", "h_terms"), "h_terms")
    selection = SelectionSpec(_get(section, "weights", "selection_transform",
                                   "identity"))
    phi = float(_get(section, "weights", "phi", 0.0))
    q = q_values(dataset, selection, phi)
    cox = fit_cox(dataset, zspec, q)
    if kind == "mle":
        wset = mle_weights(cox, dataset, q)
    else:
        wset = balancing_weights(dataset, hspec, q, cox)
    tag = _fmt(phi)
    _write_cox(os.path.join(outdir, f"cox_phi{tag}.csv"), cox)
    export_weights(dataset, wset, os.path.join(outdir, f"weights_phi{tag}.csv"))
    if hspec is not None:
        report = balance_report(dataset, hspec, wset, cox)
        _write_balance(os.path.join(outdir, f"balance_phi{tag}.csv"), report)
    _write_manifest(outdir, "weights", config_path, _seed(config))
    return 0


_COMMANDS = {
    "analyze": cmd_analyze,
    "calibrate": cmd_calibrate,
    "simulate": cmd_simulate,
    "weights": cmd_weights,
}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="irrvis",
        description="Marginal regression with irregular, possibly "
                    "outcome-dependent visit times.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML configuration file")
        p.add_argument("--output", help="output directory (overrides config)")
        p.add_argument("--threads", type=int,
                       help="parallel worker cap (default: IRRVIS_THREADS "
                            "or all cores)")
        p.add_argument("--verbose", action="store_true",
                       help="progress messages on stderr")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(message)s",
                        level=logging.INFO if args.verbose else logging.WARNING)
    try:
        config = _load_config(args.config)
        outdir = _outdir(config, args.output)
        return _COMMANDS[args.command](config, args.config, outdir, args.threads)
    except ValidationError as exc:
        print(f"irrvis: {exc}", file=sys.stderr)
        return 1
    except IrrvisError as exc:
        print(f"irrvis: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
