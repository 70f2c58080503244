"""Command-line entry point: ``facility-enum {enumerate,check,evaluate,generate}``.

Exit codes: 0 success / compliant, 1 non-compliant, 2 usage or configuration
error, 3 runtime or transport error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .compliance import BuildingContext, evaluate, load_catalog
from .core import EnumerationResult, FacilityType, Plan
from .detection import DETECTOR_URL_ENV, DetectorConfig, fetch_detections, filter_doors, load_detections
from .enumerator import PipelineConfig, enumerate_facility
from .errors import ConfigError, FacilityEnumError, GenerationError, SchemaError, StageError, ValidationError
from .evaluation import DatasetManifest, EvalConfig, run_comparison
from .gateway import CACHE_DIR_ENV, DiskCache, LLMGateway, MemoryCache, OracleBackend, OracleFixture, RemoteBackend
from .gateway.backends import LLM_KEY_ENV, LLM_MODEL_ENV, LLM_URL_ENV
from .synthetic import ScenarioSpec, random_spec, write_dataset

logger = logging.getLogger("facility_enum")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3

DEFAULTS: dict[str, Any] = {
    "backend": "oracle",
    "oracle_error_rate": 0.0,
    "oracle_seed": 0,
    "cache_dir": None,
    "llm_url": None,
    "llm_key": None,
    "llm_model": None,
    "detector_url": None,
    "confidence_threshold": 0.5,
    "dedup_iou_threshold": 0.8,
    "pair_strategy": "all-pairs",
    "radius_fraction": 0.4,
    "max_workers": 1,
    "template_version": "v1",
}
ENV = {
    "cache_dir": CACHE_DIR_ENV,
    "llm_url": LLM_URL_ENV,
    "llm_key": LLM_KEY_ENV,
    "llm_model": LLM_MODEL_ENV,
    "detector_url": DETECTOR_URL_ENV,
}


def resolve_settings(args: argparse.Namespace) -> dict[str, Any]:
    """flags > environment > config file > defaults."""
    file_cfg: dict[str, Any] = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out = {}
    for key, default in DEFAULTS.items():
        value = getattr(args, key, None)
        if value is None and key in ENV:
            value = os.environ.get(ENV[key]) or None
        if value is None:
            value = file_cfg.get(key, default)
        out[key] = value
    return out


def effective_settings(settings: dict[str, Any]) -> dict[str, Any]:
    shown = dict(settings)
    if shown.get("llm_key"):
        shown["llm_key"] = "***"
    return shown


def build_backend(settings: dict[str, Any], fixtures: dict[str, OracleFixture] | None = None):
    if settings["backend"] == "remote":
        return RemoteBackend(settings["llm_url"], settings["llm_key"], settings["llm_model"],
                             max_in_flight=max(1, int(settings["max_workers"])))
    if settings["backend"] != "oracle":
        raise ConfigError(f"unknown backend {settings['backend']!r}")
    if not fixtures:
        raise ConfigError("oracle backend needs fixtures (--oracle or a manifest with oracle paths)")
    return OracleBackend(fixtures, float(settings["oracle_error_rate"]), int(settings["oracle_seed"]))


def build_gateway(settings: dict[str, Any], backend) -> LLMGateway:
    cache = DiskCache(settings["cache_dir"]) if settings["cache_dir"] else MemoryCache()
    return LLMGateway(backend, cache, settings["template_version"])


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with default settings")
    p.add_argument("--backend", choices=("oracle", "remote"))
    p.add_argument("--cache-dir", dest="cache_dir", help=f"answer cache directory (env {CACHE_DIR_ENV})")
    p.add_argument("--oracle-error-rate", dest="oracle_error_rate", type=float)
    p.add_argument("--oracle-seed", dest="oracle_seed", type=int)
    p.add_argument("--llm-url", dest="llm_url")
    p.add_argument("--llm-model", dest="llm_model")
    p.add_argument("--pair-strategy", dest="pair_strategy", choices=("all-pairs", "distance-gated"))
    p.add_argument("--radius-fraction", dest="radius_fraction", type=float)
    p.add_argument("--confidence-threshold", dest="confidence_threshold", type=float)
    p.add_argument("--dedup-iou", dest="dedup_iou_threshold", type=float)
    p.add_argument("--max-workers", dest="max_workers", type=int)
    p.add_argument("--template-version", dest="template_version")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facility-enum", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enumerate", help="count facilities on one plan")
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--plan-id")
    p.add_argument("--detections", type=Path, help="detection manifest JSON")
    p.add_argument("--detector-url", dest="detector_url", help=f"detector service (env {DETECTOR_URL_ENV})")
    p.add_argument("--facility", action="append", default=None,
                   help="facility type (repeatable, or 'all'); default toilet")
    p.add_argument("--oracle", type=Path, help="oracle fixture JSON for the oracle backend")
    p.add_argument("--out", required=True, type=Path)
    _add_common(p)

    p = sub.add_parser("check", help="check counts against the rule catalog")
    p.add_argument("--results", required=True, type=Path, help="directory written by 'enumerate'")
    p.add_argument("--context", required=True, type=Path, help="building context JSON")
    p.add_argument("--catalog", type=Path, help="rule catalog JSON (default: bundled NCC catalog)")
    p.add_argument("--param", action="append", default=[], metavar="NAME=VALUE",
                   help="override a catalog parameter")
    p.add_argument("--out", type=Path, help="also write the report JSON here")
    p.add_argument("--format", choices=("both", "json", "table"), default="both")

    p = sub.add_parser("evaluate", help="accuracy of baseline and pipeline over a manifest")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--backends", default="baseline,cot", help="comma-separated labels: baseline, cot")
    p.add_argument("--facility", action="append", default=None)
    p.add_argument("--exclude-failures", action="store_true")
    p.add_argument("--out", required=True, type=Path)
    _add_common(p)

    p = sub.add_parser("generate", help="write synthetic plans, detections, fixtures and a manifest")
    p.add_argument("--spec", type=Path, help="scenario JSON (object, list, or {dataset, scenarios})")
    p.add_argument("--random", type=int, default=0, metavar="N", help="add N random scenarios")
    p.add_argument("--seed", type=int, default=0, help="first seed for --random")
    p.add_argument("--dataset", default="synthetic")
    p.add_argument("--out", required=True, type=Path)
    return parser


def _facilities(values: Sequence[str] | None, default=("toilet",)) -> list[FacilityType]:
    values = list(values or default)
    if any(v == "all" for v in values):
        return list(FacilityType)
    return [FacilityType.parse(v) for v in values]


def cmd_enumerate(args, parser) -> int:
    settings = resolve_settings(args)
    if args.detections is None and not settings["detector_url"]:
        parser.error(f"enumerate needs --detections or a detector endpoint (--detector-url / {DETECTOR_URL_ENV})")
    plan = Plan.from_path(args.image, args.plan_id)
    det_cfg = DetectorConfig(float(settings["confidence_threshold"]), float(settings["dedup_iou_threshold"]),
                             settings["detector_url"])
    warnings: list[str] = []
    if args.detections is not None:
        raw = load_detections(args.detections, plan.ref, warnings)
    else:
        raw = fetch_detections(plan.ref, det_cfg, plan.image, warnings=warnings)
    doors = filter_doors(raw, det_cfg)
    fixtures = None
    if settings["backend"] == "oracle":
        if args.oracle is None:
            raise ConfigError("oracle backend needs --oracle FIXTURE")
        fx = OracleFixture.load(args.oracle)
        fixtures = {plan.plan_id: replace(fx, plan_id=plan.plan_id)}
    backend = build_backend(settings, fixtures)
    gateway = build_gateway(settings, backend)
    base = PipelineConfig(pair_strategy=settings["pair_strategy"],
                          radius_fraction=float(settings["radius_fraction"]),
                          max_workers=int(settings["max_workers"]))
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    meta: dict[str, Any] = {"started": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "settings": effective_settings(settings),
                            "detector": det_cfg.to_dict(), "warnings": warnings, "timings_s": {}}
    failed = False
    try:
        for fac in _facilities(args.facility):
            try:
                res = enumerate_facility(plan, doors, gateway, replace(base, facility_type=fac))
            except StageError as exc:
                failed = True
                logger.error("%s", exc)
                _write_json(out / f"{fac.value}.json", {"plan_id": plan.plan_id, "facility_type": fac.value,
                                                         "status": "failed", "stage": exc.stage, "error": str(exc)})
                continue
            prov = dict(res.provenance)
            meta["timings_s"][fac.value] = prov.pop("timings_s", {})
            prov["detector"] = det_cfg.to_dict()
            _write_json(out / f"{fac.value}.json", {**res.to_dict(), "status": "ok"})
            _write_json(out / f"{fac.value}.provenance.json", prov)
            print(f"{plan.plan_id}\t{fac.value}\t{res.n_final}")
    finally:
        meta["backend_invocations"] = backend.invocations
        meta["cache_hits"], meta["cache_misses"] = gateway.hits, gateway.misses
        _write_json(out / "run_meta.json", meta)
    return EXIT_RUNTIME if failed else EXIT_OK


def load_results_dir(path: Path) -> tuple[dict[FacilityType, int], list[str]]:
    counts: dict[FacilityType, int] = {}
    notes = []
    if not path.is_dir():
        raise ValidationError(f"results directory {path} does not exist")
    for f in sorted(path.glob("*.json")):
        if f.name.endswith(".provenance.json") or f.name == "run_meta.json":
            continue
        data = json.loads(f.read_text())
        if not isinstance(data, dict) or "facility_type" not in data:
            continue
        fac = FacilityType.parse(data["facility_type"])
        if data.get("status") == "failed":
            notes.append(f"{fac.value}: enumeration failed, no count available")
            continue
        counts[fac] = counts.get(fac, 0) + EnumerationResult.from_dict(data).n_final
    return counts, notes


def cmd_check(args, parser) -> int:
    try:
        ctx_data = json.loads(args.context.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read context {args.context}: {exc}") from exc
    counts, notes = load_results_dir(args.results)
    if isinstance(ctx_data, dict) and "standard_parking_spaces" not in ctx_data:
        ctx_data = {**ctx_data, "standard_parking_spaces": counts.get(FacilityType.PARKING_STANDARD, 0)}
    ctx = BuildingContext.from_dict(ctx_data)
    overrides = {}
    for item in args.param:
        name, _, value = item.partition("=")
        try:
            overrides[name] = float(value)
        except ValueError:
            raise ConfigError(f"--param expects NAME=NUMBER, got {item!r}") from None
    catalog = load_catalog(args.catalog, overrides)
    report = evaluate({f.value: n for f, n in counts.items()}, ctx, catalog)
    for note in notes:
        logger.warning(note)
    if args.out:
        args.out.write_text(report.to_json())
    if args.format in ("both", "json"):
        sys.stdout.write(report.to_json())
    if args.format in ("both", "table"):
        sys.stdout.write(report.to_table())
    return EXIT_OK if report.overall_pass else EXIT_FAIL


def cmd_evaluate(args, parser) -> int:
    settings = resolve_settings(args)
    manifest = DatasetManifest.load(args.manifest)
    labels = [b.strip() for b in args.backends.split(",") if b.strip()]
    if not labels:
        parser.error("--backends must name at least one of baseline, cot")
    fixtures = manifest.load_fixtures() if settings["backend"] == "oracle" else None
    backend = build_backend(settings, fixtures)
    gateway = build_gateway(settings, backend)
    cfg = EvalConfig(
        facilities=tuple(_facilities(args.facility)) if args.facility else None,
        pipeline=PipelineConfig(pair_strategy=settings["pair_strategy"],
                                radius_fraction=float(settings["radius_fraction"])),
        detector=DetectorConfig(float(settings["confidence_threshold"]), float(settings["dedup_iou_threshold"])),
        exclude_failures=args.exclude_failures,
        max_workers=int(settings["max_workers"]),
    )
    started = time.time()
    result = run_comparison(manifest, {label: gateway for label in labels}, cfg)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(result.to_csv())
    (out / "results.txt").write_text(result.to_table())
    _write_json(out / "run_meta.json", {
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "elapsed_s": time.time() - started,
        "settings": effective_settings(settings),
        "backend": backend.name,
        "backend_invocations": backend.invocations,
        "cache_hits": gateway.hits,
        "cache_misses": gateway.misses,
        "failures": result.failures,
    })
    sys.stdout.write(result.to_table())
    return EXIT_OK


def _scenario_specs(args) -> tuple[list[ScenarioSpec], str]:
    specs: list[ScenarioSpec] = []
    dataset = args.dataset
    if args.spec is not None:
        try:
            data = json.loads(args.spec.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read spec {args.spec}: {exc}") from exc
        if isinstance(data, dict) and "scenarios" in data:
            dataset = data.get("dataset", dataset)
            data = data["scenarios"]
        items = data if isinstance(data, list) else [data]
        specs += [ScenarioSpec.from_dict(item) for item in items]
    specs += [random_spec(args.seed + i) for i in range(args.random)]
    if not specs:
        raise ValidationError("generate needs --spec and/or --random N")
    return specs, dataset


def cmd_generate(args, parser) -> int:
    specs, dataset = _scenario_specs(args)
    path = write_dataset(specs, args.out, dataset)
    print(path)
    return EXIT_OK


COMMANDS = {"enumerate": cmd_enumerate, "check": cmd_check, "evaluate": cmd_evaluate, "generate": cmd_generate}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, parser)
    except (ValidationError, ConfigError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FacilityEnumError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("interrupted; partial results kept", file=sys.stderr)
        return 130


if __name__ == "__main__":
    raise SystemExit(main())
