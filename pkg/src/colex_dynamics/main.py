from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from importlib import metadata
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import __version__
from .config import FULL_SCALE, RunConfig
from .diagnostics import RHAT_LIMIT
from .ingest import run_pipeline
from .model import FamilyData, ModelSpec
from .negbin import CountDataset, fit_negbin, read_counts
from .sampler import read_draws, run_family, summarize, write_summary
from .selection import compare, psis_loo, read_pointwise
from .simval import ValidationStudy
from .tables import read_predictors, read_trait_matrix
from .trees import read_tree_sample

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONVERGENCE = 3


class UsageError(ValueError):
    pass


def _versions() -> dict[str, str]:
    out = {}
    for dist in ("colex-dynamics", "numpy", "scipy", "pandas"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = __version__ if dist == "colex-dynamics" else "unknown"
    return out


def _write_json(path: Path, payload) -> None:
    with path.open("w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def write_manifest(out_dir: Path, config: RunConfig, **extra) -> None:
    payload = {"config": config.to_dict(), "versions": _versions(), "seed": config.seed, **extra}
    _write_json(out_dir / "manifest.json", payload)


def _require(config: RunConfig, *names: str) -> None:
    for name in names:
        value = getattr(config, name)
        if value is None:
            raise UsageError(f"{config.command} needs --{name.replace('_', '-')}")
        if not Path(value).exists():
            raise FileNotFoundError(f"{name} path does not exist: {value}")


def _output_dir(config: RunConfig) -> Path:
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_ingest(config: RunConfig) -> int:
    _require(config, "wordlist")
    for name in ("associations", "concept_forms", "frequencies", "borrowability", "blocklist"):
        if getattr(config, name) is not None:
            _require(config, name)
    result = run_pipeline(
        config.wordlist,
        config.ingest_settings(),
        associations=config.associations,
        concept_forms=config.concept_forms,
        frequencies=config.frequencies,
        borrowability=config.borrowability,
    )
    out = _output_dir(config)
    result.traits.to_csv(out / "traits.csv")
    result.predictors.to_csv(out / "predictors.csv")
    write_manifest(out, config, ingest=result.manifest)
    logger.info("Wrote %d pairs for %d languages to %s", result.traits.n_characters, result.traits.n_taxa, out)
    return EXIT_OK


def cmd_fit(config: RunConfig) -> int:
    _require(config, "trees", "traits", "predictors")
    traits = read_trait_matrix(config.traits)
    predictors = read_predictors(config.predictors)
    if config.standardize:
        predictors = predictors.standardized()
    trees = read_tree_sample(config.trees).restricted_to(traits.taxa)
    data = FamilyData(traits, predictors, trees)
    spec = ModelSpec.of(config.variant)

    draws = run_family(spec, data, config.sampler_config())
    summaries = summarize(draws)
    out = _output_dir(config)
    draws.to_csv(out / "draws.csv")
    draws.pointwise_frame().to_csv(out / "pointwise.csv", index=False)
    extra = {
        "variant": spec.variant.value,
        "n_draws": draws.n_draws,
        "divergent": int(draws.divergent.sum()),
        "max_depth_hits": draws.depth_hits,
    }
    if predictors.standardization is not None:
        extra["standardization"] = predictors.standardization.to_dict(predictors.names)
    write_summary(summaries, out / "summary.json", extra)
    write_manifest(out, config)

    unconverged = [s.param for s in summaries if not s.rhat <= RHAT_LIMIT]
    if unconverged:
        logger.warning("R-hat above %.2f for %s", RHAT_LIMIT, ", ".join(unconverged))
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_compare(config: RunConfig) -> int:
    if len(config.pointwise) < 2:
        raise UsageError("compare needs at least two --pointwise files")
    if config.names and len(config.names) != len(config.pointwise):
        raise UsageError("--names must give one name per pointwise file")
    names = config.names or tuple(Path(p).parent.name or Path(p).stem for p in config.pointwise)
    results = []
    for path, name in zip(config.pointwise, names):
        if not Path(path).exists():
            raise FileNotFoundError(f"pointwise path does not exist: {path}")
        results.append(psis_loo(read_pointwise(path, name)))
    table = compare(results)
    out = _output_dir(config)
    table.to_csv(out / "comparison.csv", index=False)
    _write_json(out / "loo.json", [r.to_dict() for r in results])
    write_manifest(out, config)
    return EXIT_OK


def cmd_validate(config: RunConfig) -> int:
    sampler = replace(config.sampler_config(), n_chains=1, trees=None)
    study = ValidationStudy(config.sizes, config.n_seeds, sampler)
    table = study.run(config.workers)
    out = _output_dir(config)
    table.to_csv(out / "validation.csv", index=False)
    study.outcomes_frame().to_csv(out / "validation_runs.csv", index=False)
    write_manifest(out, config)
    return EXIT_OK


def cmd_negbin(config: RunConfig) -> int:
    _require(config, "predictors")
    if config.traits is not None:
        _require(config, "traits")
        dataset = CountDataset.from_tables(read_trait_matrix(config.traits), read_predictors(config.predictors))
    else:
        dataset = read_counts(config.predictors)
    if config.intercept_only:
        dataset = dataset.intercept_only()
    fit = fit_negbin(dataset)
    out = _output_dir(config)
    payload = fit.to_dict()
    payload["loglik_history"] = fit.history
    _write_json(out / "negbin.json", payload)
    fit.table().to_csv(out / "negbin_table.csv", index=False)
    write_manifest(out, config)
    return EXIT_OK if fit.converged else EXIT_CONVERGENCE


def cmd_summary(config: RunConfig) -> int:
    _require(config, "draws")
    draws = read_draws(config.draws)
    out = _output_dir(config)
    write_summary(summarize(draws), out / "summary.json")
    write_manifest(out, config)
    return EXIT_OK


COMMANDS: dict[str, Callable[[RunConfig], int]] = {
    "ingest": cmd_ingest,
    "fit": cmd_fit,
    "compare": cmd_compare,
    "validate": cmd_validate,
    "negbin": cmd_negbin,
    "summary": cmd_summary,
}
SEEDED = ("fit", "validate")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with flat run settings")
    common.add_argument("--output", default=None, help="output directory")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    common.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))

    sampling = argparse.ArgumentParser(add_help=False)
    sampling.add_argument("--chains", dest="n_chains", type=int, default=None)
    sampling.add_argument("--iterations", dest="n_iterations", type=int, default=None)
    sampling.add_argument("--warmup-fraction", type=float, default=None)
    sampling.add_argument("--target-accept", type=float, default=None)
    sampling.add_argument("--max-tree-depth", type=int, default=None)
    sampling.add_argument("--full-scale", action="store_true", help="3 chains x 4000 iterations")

    parser = argparse.ArgumentParser(prog="colex-dynamics", description="Colexification change-rate models")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", parents=[common], help="build trait and predictor tables")
    ingest.add_argument("--wordlist")
    ingest.add_argument("--associations")
    ingest.add_argument("--concept-forms")
    ingest.add_argument("--frequencies")
    ingest.add_argument("--borrowability")
    ingest.add_argument("--blocklist")
    ingest.add_argument("--min-colex", type=int, default=None)
    ingest.add_argument("--min-attested", type=int, default=None)
    ingest.add_argument("--min-complete", type=int, default=None)

    fit = sub.add_parser("fit", parents=[common, sampling], help="sample one model variant")
    fit.add_argument("--trees")
    fit.add_argument("--traits")
    fit.add_argument("--predictors")
    fit.add_argument("--variant", choices=("full", "stationary-only", "speed-only", "null"), default=None)
    fit.add_argument("--standardize", action="store_true", default=None)
    fit.add_argument("--tree-indices", type=int, nargs="+", default=None)

    cmp_ = sub.add_parser("compare", parents=[common], help="PSIS-LOO model comparison")
    cmp_.add_argument("--pointwise", nargs="+", default=None)
    cmp_.add_argument("--names", nargs="+", default=None)

    validate = sub.add_parser("validate", parents=[common, sampling], help="simulation-based validation")
    validate.add_argument("--sizes", nargs="+", choices=("SMALL", "MEDIUM", "LARGE"), default=None)
    validate.add_argument("--n-seeds", type=int, default=None)

    negbin = sub.add_parser("negbin", parents=[common], help="negative binomial baseline")
    negbin.add_argument("--traits")
    negbin.add_argument("--predictors")
    negbin.add_argument("--intercept-only", action="store_true", default=None)

    summary = sub.add_parser("summary", parents=[common], help="summarize a draws file")
    summary.add_argument("--draws")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    flags = {k: v for k, v in vars(args).items() if k not in ("config", "log_level", "full_scale")}
    config = RunConfig.from_json(args.config) if args.config else RunConfig()
    if getattr(args, "full_scale", False):
        config = config.with_overrides(n_chains=FULL_SCALE.n_chains, n_iterations=FULL_SCALE.n_iterations)
    config = config.with_overrides(**flags)
    if config.command in SEEDED and config.seed is None:
        raise UsageError(f"{config.command} needs --seed")
    if config.command in SEEDED:
        config.sampler_config()
    return config


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    config = resolve_config(args)
    logger.debug("Resolved config: %s", config.to_dict())
    return COMMANDS[config.command](config)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        return run(argv)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
