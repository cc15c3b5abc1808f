"""Command-line pipelines: simulate, fit, attribute, evaluate and end-to-end scenario runs."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .attribution import (
    AttributionError,
    Normalization,
    Rule,
    SHAPLEY_MAX_ADS,
    attribute_corpus,
    dump_credits,
    load_credits,
)
from .estimation import EstimationError, FitConfig, StepControl, fit
from .evaluation import (
    EvaluationError,
    aicpe,
    evaluate,
    icpe,
    normalized_ad_total,
    predicted_metrics,
    write_report_csv,
    write_report_json,
)
from .events import Corpus, PathFormatError, load_paths
from .intensity import (
    CoefficientKey,
    ExactCount,
    IntensityModel,
    ModelSpec,
    ModelSpecError,
    SegmentationError,
    load_spec_document,
)
from .simulator import (
    CustomScenario,
    ScenarioConfig,
    simulate_dataset,
    split_groups,
    write_datasets,
)

logger = logging.getLogger("mta")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_DATA = 4

SCENARIO_TABLE_SCHEMA = "mta-scenario-table/1"


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1), got {v}")
    return v


def _read_json(path: str) -> Any:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {path}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelSpecError(f"{path}: invalid JSON ({exc})") from exc


def _read_corpus(path: str) -> Corpus:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {path}")
    with p.open(encoding="utf-8") as fh:
        return Corpus.from_paths(load_paths(fh))


def _group_only(corpus: Corpus, group: str | None) -> Corpus:
    if not group:
        return corpus
    return corpus.take(np.flatnonzero(corpus.user_feature("group") == group))


def _dump_json(obj: Any, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# ----------------------------------------------------------------------------
# Scenario pipeline


def true_multiplier(generator: IntensityModel, fit_spec: ModelSpec, key: CoefficientKey) -> float | None:
    """Ground-truth ``exp(beta)`` of a fitted key, when the generator determines it.

    Keys shared with the generator map directly.  A count-conditioned key
    (``exactly k`` ads in a bucket) maps to the generator's per-ad multiplier
    raised to ``k`` when a generating term has the same basis and predicate.
    """
    if key in generator.coefficients:
        return math.exp(generator.coefficients[key])
    term = next((t for t in fit_spec.terms if t.name == key.term), None)
    if term is None or not isinstance(term.conditioning, ExactCount):
        return None
    cond = term.conditioning
    for g in generator.spec.terms:
        if g.basis == term.basis and g.conditioning == cond.predicate and g.applies_to == term.applies_to:
            beta = generator.coefficients.get(CoefficientKey(g.name, key.index, g.qualifier), 0.0)
            return math.exp(cond.k * beta)
    return None


@dataclass
class DatasetResult:
    index: int
    coefficients: dict[CoefficientKey, float]
    offsets: dict[CoefficientKey, float]
    converged: bool
    icpe: float | None = None
    aicpe: float | None = None
    picppe: float | None = None
    floored: list[CoefficientKey] = field(default_factory=list)


def run_dataset(
    config: ScenarioConfig, index: int, fit_config: FitConfig = FitConfig(), predicted: bool = True
) -> DatasetResult:
    """Simulate one dataset, fit its exposed users, and compute the incrementality metrics.

    ``predicted=False`` skips PICPPE, which needs a second pass over both groups.
    """
    d = config.definition
    spec = d.fit_spec or d.model.spec
    corpus = simulate_dataset(config, index)
    exposed, unexposed = split_groups(corpus)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = fit(spec, exposed, fit_config)
    out = DatasetResult(
        index=index,
        coefficients=dict(result.model.coefficients),
        offsets=dict(result.per_key_offset),
        converged=result.converged,
        floored=list(result.floored_keys),
    )
    if unexposed.n_users and len(exposed.conv_t):
        out.icpe = icpe(exposed, unexposed)
        out.aicpe = aicpe(result.model, exposed)
        if predicted:
            out.picppe = predicted_metrics(result.model, exposed, unexposed)["PICPPE"]
    return out


def run_scenario(
    config: ScenarioConfig, workers: int = 1, fit_config: FitConfig = FitConfig(), predicted: bool = True
) -> list[DatasetResult]:
    """Per-dataset results, in dataset order regardless of ``workers``."""
    idx = range(config.datasets)
    if workers > 1 and config.datasets > 1:
        from joblib import Parallel, delayed

        return list(Parallel(n_jobs=workers)(delayed(run_dataset)(config, i, fit_config, predicted) for i in idx))
    return [run_dataset(config, i, fit_config, predicted) for i in idx]


def _summary(vals: Sequence[float]) -> dict[str, Any]:
    """Mean and linear-interpolated 2.5/97.5% quantiles across datasets."""
    a = np.asarray(vals, dtype=float)
    q = np.quantile(a, [0.025, 0.975])
    return {"mean": float(a.mean()), "q025": float(q[0]), "q975": float(q[1]), "n": len(a)}


def scenario_table(config: ScenarioConfig, results: Sequence[DatasetResult]) -> dict[str, Any]:
    """Coefficient table (mean and 95% interval of exp(beta) across datasets) plus metric rows."""
    d = config.definition
    spec = d.fit_spec or d.model.spec
    keys = sorted({k for r in results for k in r.coefficients}, key=str)
    rows = []
    for k in keys:
        vals = [math.exp(r.coefficients[k]) for r in results if k in r.coefficients]
        offs = [r.offsets.get(k, 0.0) for r in results]
        rows.append(
            {
                "key": str(k),
                "truth": true_multiplier(d.model, spec, k),
                **_summary(vals),
                "mean_offset": float(np.mean(offs)),
                "floored_in": sum(1 for r in results if k in r.floored),
            }
        )
    metrics = []
    for name in ("icpe", "aicpe", "picppe"):
        vals = [getattr(r, name) for r in results if getattr(r, name) is not None]
        if vals:
            metrics.append({"metric": name.upper(), **_summary(vals)})
    return {
        "schema": SCENARIO_TABLE_SCHEMA,
        "config": config.to_json(),
        "converged_datasets": sum(r.converged for r in results),
        "coefficients": rows,
        "metrics": metrics,
    }


def _table_csv(table: dict[str, Any]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "name", "truth", "mean", "q025", "q975", "n", "mean_offset"])
    for r in table["coefficients"]:
        truth = "" if r["truth"] is None else repr(r["truth"])
        w.writerow(["coefficient", r["key"], truth, repr(r["mean"]), repr(r["q025"]), repr(r["q975"]), r["n"],
                    repr(r["mean_offset"])])
    for m in table["metrics"]:
        w.writerow(["metric", m["metric"], "", repr(m["mean"]), repr(m["q025"]), repr(m["q975"]), m["n"], ""])
    return buf.getvalue()


# ----------------------------------------------------------------------------
# Commands


def _scenario_config(args: argparse.Namespace, scenario: str) -> ScenarioConfig:
    custom = None
    if scenario == "custom":
        if not args.scenario_file:
            raise UsageError("--scenario custom needs --scenario-file")
        custom = CustomScenario.from_json(_read_json(args.scenario_file))
    elif getattr(args, "scenario_file", None):
        raise UsageError("--scenario-file is only valid with --scenario custom")
    return ScenarioConfig(
        scenario=scenario,
        users=args.users,
        window_days=args.window_days,
        datasets=args.datasets,
        seed=args.seed,
        unexposed_fraction=args.unexposed_fraction,
        paired=args.paired,
        custom=custom,
    )


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _scenario_config(args, args.scenario)
    files = write_datasets(config, args.out, workers=args.workers)
    logger.info("wrote %d dataset(s) to %s", len(files), args.out)
    return EXIT_OK


def _fit_config(args: argparse.Namespace) -> FitConfig:
    return FitConfig(
        max_iterations=args.max_iterations,
        gradient_tolerance=args.tolerance,
        ridge_penalty=args.ridge,
        step_control=StepControl(args.step_control),
    )


def cmd_fit(args: argparse.Namespace) -> int:
    spec = load_spec_document(_read_json(args.spec))
    corpus = _group_only(_read_corpus(args.paths), args.group)
    if corpus.n_users == 0:
        raise EstimationError("corpus is empty")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = fit(spec, corpus, _fit_config(args))
    Path(args.out).write_text(result.model.dumps() + "\n", encoding="utf-8")
    report = args.report or str(Path(args.out).with_suffix(".report.json"))
    _dump_json(result.report(), report)
    if not result.converged:
        logger.error("fit did not converge after %d iterations (gradient %.3g)", result.iterations,
                     result.gradient_max_norm)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_attribute(args: argparse.Namespace) -> int:
    model = IntensityModel.from_json(_read_json(args.model))
    corpus = _group_only(_read_corpus(args.paths), args.group)
    credits = attribute_corpus(
        model, corpus, Rule(args.rule), Normalization(args.normalization), args.incremental, args.max_ads
    )
    if args.out in (None, "-"):
        dump_credits(credits, sys.stdout)
    else:
        with open(args.out, "w", encoding="utf-8") as fh:
            dump_credits(credits, fh)
    return EXIT_OK


def _credit_per_user(exposed: Corpus, path: str) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {path}")
    with p.open(encoding="utf-8") as fh:
        credits = load_credits(fh)
    row = {str(u): i for i, u in enumerate(exposed.user_ids)}
    out = np.zeros(exposed.n_users)
    for a in credits:
        if a.user_id not in row:
            continue  # credits for users outside the exposed group
        out[row[a.user_id]] += normalized_ad_total(a)
    return out


def cmd_evaluate(args: argparse.Namespace) -> int:
    if args.paths:
        if args.exposed or args.unexposed:
            raise UsageError("use either --paths or --exposed/--unexposed")
        exposed, unexposed = split_groups(_read_corpus(args.paths))
    elif args.exposed and args.unexposed:
        exposed, unexposed = _read_corpus(args.exposed), _read_corpus(args.unexposed)
    else:
        raise UsageError("evaluate needs --paths or both --exposed and --unexposed")
    model = IntensityModel.from_json(_read_json(args.model)) if args.model else None
    credit = _credit_per_user(exposed, args.credits) if args.credits else None
    reports = evaluate(
        exposed, unexposed, model=model, credit=credit, replicates=args.replicates, seed=args.seed,
        workers=args.workers, incremental=args.incremental,
    )
    buf = io.StringIO()
    if args.format == "csv":
        write_report_csv(reports, buf)
    else:
        write_report_json(reports, buf, {"seed": args.seed, "replicates": args.replicates})
    if args.out in (None, "-"):
        sys.stdout.write(buf.getvalue())
    else:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    return EXIT_OK


def cmd_scenario(args: argparse.Namespace) -> int:
    config = _scenario_config(args, args.id)
    results = run_scenario(config, workers=args.workers, fit_config=_fit_config(args))
    table = scenario_table(config, results)
    text = _table_csv(table) if args.format == "csv" else json.dumps(table, indent=2, sort_keys=True) + "\n"
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK if table["converged_datasets"] == len(results) else EXIT_NUMERICAL


# ----------------------------------------------------------------------------
# Parser


def _add_scenario_args(p: argparse.ArgumentParser, default_unexposed: float) -> None:
    p.add_argument("--scenario-file", help="scenario JSON (mta-scenario/1) for the custom scenario")
    p.add_argument("--users", type=_positive_int, default=200_000)
    p.add_argument("--datasets", type=_positive_int, default=50)
    p.add_argument("--window-days", type=float, default=30.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unexposed-fraction", type=_fraction, default=default_unexposed,
                   help="share of all users that are counterfactual users with ads withheld")
    p.add_argument("--paired", action="store_true", help="unexposed users copy exposed users' query layouts")


def _add_fit_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ridge", type=float, default=0.0)
    p.add_argument("--max-iterations", type=_positive_int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.add_argument("--step-control", choices=[s.value for s in StepControl], default=StepControl.NEWTON.value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mta", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate synthetic path datasets")
    p.add_argument("--scenario", choices=["1", "2", "3", "4", "custom"], required=True)
    _add_scenario_args(p, 0.0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=_positive_int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit an intensity model to a paths file")
    p.add_argument("--paths", required=True)
    p.add_argument("--spec", required=True, help="model spec JSON (bare spec or mta-model/1)")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="fit report path (default: <out>.report.json)")
    p.add_argument("--group", help="only fit users whose 'group' feature has this value")
    p.add_argument("--workers", type=_positive_int, default=1)
    _add_fit_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("attribute", help="assign credit to ads for every conversion")
    p.add_argument("--model", required=True)
    p.add_argument("--paths", required=True)
    p.add_argument("--out")
    p.add_argument("--rule", choices=[r.value for r in Rule] + ["be"], default=Rule.BACKWARDS_ELIMINATION.value)
    p.add_argument("--normalization", choices=[n.value for n in Normalization], default=Normalization.RAW.value)
    p.add_argument("--incremental", action="store_true")
    p.add_argument("--max-ads", type=_positive_int, default=SHAPLEY_MAX_ADS)
    p.add_argument("--group", help="only attribute users whose 'group' feature has this value")
    p.add_argument("--workers", type=_positive_int, default=1)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("evaluate", help="incrementality metrics with bootstrap intervals")
    p.add_argument("--paths", help="paths file with a 'group' user feature (exposed/unexposed)")
    p.add_argument("--exposed")
    p.add_argument("--unexposed")
    p.add_argument("--model", help="fitted model for PICPU/PICPPE/AICPE")
    p.add_argument("--credits", help="credit file (mta-credit/1) for AICPE")
    p.add_argument("--incremental", action="store_true")
    p.add_argument("--replicates", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--out")
    p.add_argument("--workers", type=_positive_int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("scenario", help="simulate, fit and evaluate a reference scenario end to end")
    p.add_argument("--id", choices=["1", "2", "3", "4", "custom"], required=True)
    _add_scenario_args(p, 0.5)
    _add_fit_args(p)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--out")
    p.add_argument("--workers", type=_positive_int, default=1)
    p.set_defaults(func=cmd_scenario)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "rule", None) == "be":
        args.rule = Rule.BACKWARDS_ELIMINATION.value
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return int(args.func(args))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mta: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PathFormatError, ModelSpecError, SegmentationError, EstimationError, AttributionError,
            EvaluationError) as exc:
        print(f"mta: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"mta: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
