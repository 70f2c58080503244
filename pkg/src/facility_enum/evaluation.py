"""Dataset manifests, exact-count accuracy, image tiling and baseline-vs-pipeline runs."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .core import DoorBox, FacilityType, FloorPlanRef, Plan, canonical_order, sha256_hex
from .detection import DetectorConfig, filter_doors, load_detections, suppress_overlaps
from .enumerator import PipelineConfig, baseline_count, enumerate_facility
from .errors import FacilityEnumError, SchemaError, ValidationError
from .gateway import LLMGateway, OracleFixture
from .validation import check_counts

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ("dataset", "facility", "backend", "n_plans", "n_correct", "accuracy")


# -- manifest -----------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    plan: FloorPlanRef
    truth: Mapping[FacilityType, int]
    oracle_path: Path | None = None
    detections_path: Path | None = None

    def load_plan(self) -> Plan:
        path = Path(self.plan.image_uri)
        try:
            image = path.read_bytes()
        except OSError as exc:
            raise ValidationError(f"plan {self.plan.plan_id}: cannot read image {path}: {exc}") from exc
        if sha256_hex(image) != self.plan.image_bytes_digest:
            raise ValidationError(f"plan {self.plan.plan_id}: image digest does not match the manifest")
        return Plan(self.plan, image)

    def load_doors(self) -> list[DoorBox]:
        if self.detections_path is None:
            raise ValidationError(f"plan {self.plan.plan_id}: manifest entry has no detections file")
        return load_detections(self.detections_path, self.plan)


@dataclass(frozen=True)
class DatasetManifest:
    dataset_name: str
    plans: tuple[ManifestEntry, ...]

    def __post_init__(self):
        ids = [e.plan.plan_id for e in self.plans]
        if len(set(ids)) != len(ids):
            raise ValidationError("plan ids in a manifest must be unique")

    @classmethod
    def from_dict(cls, data: Any, base_dir: str | Path = ".") -> DatasetManifest:
        base = Path(base_dir)
        if not isinstance(data, Mapping):
            raise SchemaError("expected a JSON object", "<root>")
        if not isinstance(data.get("dataset"), str):
            raise SchemaError("missing or non-string", "dataset")
        plans = data.get("plans")
        if not isinstance(plans, list):
            raise SchemaError("missing or not a list", "plans")
        entries = []
        for i, item in enumerate(plans):
            where = f"plans[{i}]"
            try:
                ref = FloorPlanRef.from_dict(item["plan"])
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"bad plan reference: {exc}", f"{where}.plan") from exc
            uri = Path(ref.image_uri)
            ref = replace(ref, image_uri=str(uri if uri.is_absolute() else base / uri))
            truth = check_counts(item.get("truth", {}), f"{where}.truth")

            def resolve(key):
                p = item.get(key)
                if p is None:
                    return None
                p = Path(p)
                return p if p.is_absolute() else base / p

            entries.append(ManifestEntry(ref, truth, resolve("oracle"), resolve("detections")))
        return cls(data["dataset"], tuple(entries))

    @classmethod
    def load(cls, path: str | Path) -> DatasetManifest:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise ValidationError(f"cannot read manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}", "<root>") from exc
        return cls.from_dict(data, path.parent)

    def facilities(self) -> list[FacilityType]:
        present = {f for e in self.plans for f in e.truth}
        return [f for f in FacilityType if f in present]

    def load_fixtures(self) -> dict[str, OracleFixture]:
        out = {}
        for e in self.plans:
            if e.oracle_path is None:
                raise ValidationError(f"plan {e.plan.plan_id}: no oracle fixture in manifest")
            out[e.plan.plan_id] = OracleFixture.load(e.oracle_path)
        return out


# -- metric -------------------------------------------------------------------

def accuracy(predictions: Mapping[str, int | None], truth: Mapping[str, int]) -> float:
    """Fraction of plans whose predicted count equals the true count exactly."""
    missing = sorted(set(truth) - set(predictions))
    extra = sorted(set(predictions) - set(truth))
    if missing or extra:
        raise ValidationError(f"prediction/truth keys differ: missing={missing} extra={extra}")
    if not truth:
        raise ValidationError("accuracy over zero plans is undefined")
    correct = sum(1 for k, n in truth.items() if predictions[k] == n)
    return correct / len(truth)


# -- tiling -------------------------------------------------------------------

@dataclass(frozen=True)
class TilingPlan:
    tile_size_px: int
    overlap_px: int
    width: int
    height: int
    tiles: tuple[tuple[tuple[int, int], tuple[int, int, int, int]], ...]  # (origin, window)


def _axis_origins(length: int, tile: int, overlap: int) -> list[int]:
    if length <= tile:
        return [0]
    stride = tile - overlap
    origins = [0]
    while origins[-1] + tile < length:
        origins.append(min(origins[-1] + stride, length - tile))
    return origins


def plan_tiles(plan: FloorPlanRef | Plan, tile_size_px: int = 1024, overlap_px: int = 128) -> TilingPlan:
    ref = plan.ref if isinstance(plan, Plan) else plan
    if tile_size_px <= 0 or overlap_px < 0:
        raise ValidationError("tile_size_px must be positive and overlap_px non-negative")
    if overlap_px >= tile_size_px:
        raise ValidationError(f"overlap_px ({overlap_px}) must be smaller than tile_size_px ({tile_size_px})")
    w, h = ref.width_px, ref.height_px
    tiles = []
    for oy in _axis_origins(h, tile_size_px, overlap_px):
        for ox in _axis_origins(w, tile_size_px, overlap_px):
            tiles.append(((ox, oy), (ox, oy, min(w, ox + tile_size_px), min(h, oy + tile_size_px))))
    return TilingPlan(tile_size_px, overlap_px, w, h, tuple(tiles))


def merge_tile_detections(per_tile: Sequence[tuple[tuple[int, int], Sequence[DoorBox]]],
                          dedup_iou: float = 0.8) -> list[DoorBox]:
    """Shift tile-local boxes to plan coordinates and drop cross-tile duplicates.

    Survivors are renumbered in reading order, so the output does not depend
    on which tile reported a door first.
    """
    pooled = []
    for (ox, oy), doors in per_tile:
        for d in doors:
            pooled.append(d.translated(ox, oy).with_id(len(pooled)))
    return canonical_order(suppress_overlaps(pooled, dedup_iou))


def tiled_detections(plan: Plan | FloorPlanRef, detect: Callable[[tuple[int, int, int, int]], Sequence[DoorBox]],
                     tile_size_px: int = 1024, overlap_px: int = 128, dedup_iou: float = 0.8) -> list[DoorBox]:
    """Run ``detect`` on every tile window and merge the results."""
    tiling = plan_tiles(plan, tile_size_px, overlap_px)
    return merge_tile_detections([(origin, detect(window)) for origin, window in tiling.tiles], dedup_iou)


# -- comparison runs ------------------------------------------------------------

@dataclass(frozen=True)
class EvalConfig:
    facilities: tuple[FacilityType, ...] | None = None
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    detector: DetectorConfig | None = field(default_factory=DetectorConfig)
    exclude_failures: bool = False
    max_workers: int = 1

    def __post_init__(self):
        if self.facilities is not None:
            object.__setattr__(self, "facilities", tuple(FacilityType.parse(f) for f in self.facilities))
        if self.max_workers < 1:
            raise ValidationError("max_workers must be >= 1")


@dataclass(frozen=True)
class ResultRow:
    dataset: str
    facility: str
    backend: str
    n_plans: int
    n_correct: int
    n_failed: int = 0

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_plans if self.n_plans else 0.0

    def csv_row(self) -> list[str]:
        return [self.dataset, self.facility, self.backend, str(self.n_plans), str(self.n_correct),
                f"{self.accuracy:.6f}"]


@dataclass
class ComparisonResult:
    rows: list[ResultRow]
    predictions: dict[str, dict[str, dict[str, int | None]]]
    failures: list[dict[str, str]]

    def accuracy(self, backend: str, facility: str | FacilityType) -> float:
        fac = FacilityType.parse(facility).value
        for r in self.rows:
            if r.backend == backend and r.facility == fac:
                return r.accuracy
        raise KeyError((backend, fac))

    def overall(self, backend: str) -> float:
        rows = [r for r in self.rows if r.backend == backend]
        total = sum(r.n_plans for r in rows)
        return sum(r.n_correct for r in rows) / total if total else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for r in self.rows:
            writer.writerow(r.csv_row())
        return buf.getvalue()

    def to_table(self) -> str:
        backends = list(dict.fromkeys(r.backend for r in self.rows))
        keys = list(dict.fromkeys((r.dataset, r.facility) for r in self.rows))
        acc = {(r.dataset, r.facility, r.backend): r for r in self.rows}
        header = ["dataset", "facility", *[f"{b} acc (%)" for b in backends], "plans"]
        body = []
        for ds, fac in keys:
            cells = [f"{100 * acc[(ds, fac, b)].accuracy:.2f}" if (ds, fac, b) in acc else "-" for b in backends]
            n = max(acc[(ds, fac, b)].n_plans for b in backends if (ds, fac, b) in acc)
            body.append([ds, fac, *cells, str(n)])
        widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
        fmt = " | ".join(f"{{:<{w}}}" for w in widths)
        lines = [fmt.format(*header), "-+-".join("-" * w for w in widths)]
        lines += [fmt.format(*row) for row in body]
        return "\n".join(lines) + "\n"


def _mode(label: str) -> str:
    return "baseline" if label.lower().startswith("baseline") else "cot"


def _predict_plan(entry: ManifestEntry, facilities, backends, cfg: EvalConfig):
    """Predictions for one plan: {backend: {facility: count or None}}, plus failures."""
    out: dict[str, dict[str, int | None]] = {b: {} for b in backends}
    failures = []
    try:
        plan = entry.load_plan()
        doors = None
        if any(_mode(b) == "cot" for b in backends):
            doors = entry.load_doors()
            if cfg.detector is not None:
                doors = filter_doors(doors, cfg.detector)
    except FacilityEnumError as exc:
        for b in backends:
            for fac in facilities:
                out[b][fac.value] = None
                failures.append({"plan_id": entry.plan.plan_id, "backend": b, "facility": fac.value,
                                 "error": str(exc)})
        return out, failures
    for label, gateway in backends.items():
        for fac in facilities:
            try:
                if _mode(label) == "baseline":
                    n = baseline_count(plan, gateway, fac)
                else:
                    n = enumerate_facility(plan, doors, gateway, replace(cfg.pipeline, facility_type=fac)).n_final
            except FacilityEnumError as exc:
                logger.error("plan %s %s %s failed: %s", plan.plan_id, label, fac.value, exc)
                failures.append({"plan_id": plan.plan_id, "backend": label, "facility": fac.value,
                                 "error": str(exc)})
                n = None
            out[label][fac.value] = n
    return out, failures


def run_comparison(manifest: DatasetManifest, backends: Mapping[str, LLMGateway],
                   cfg: EvalConfig | None = None) -> ComparisonResult:
    """Accuracy per (facility, backend) over the manifest.

    Labels starting with ``baseline`` ask one whole-image count question per
    plan and facility; any other label runs the three-stage pipeline.
    Failed plans count as incorrect unless ``cfg.exclude_failures`` is set.
    """
    cfg = cfg or EvalConfig()
    if not manifest.plans:
        raise ValidationError(f"manifest {manifest.dataset_name!r} has no plans")
    if not backends:
        raise ValidationError("at least one backend is required")
    facilities = list(cfg.facilities) if cfg.facilities else manifest.facilities()
    if not facilities:
        raise ValidationError("no facility types to evaluate")

    def work(entry):
        return _predict_plan(entry, facilities, backends, cfg)

    if cfg.max_workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.max_workers) as pool:
            per_plan = list(pool.map(work, manifest.plans))
    else:
        per_plan = [work(e) for e in manifest.plans]

    predictions: dict[str, dict[str, dict[str, int | None]]] = {b: {f.value: {} for f in facilities} for b in backends}
    failures = []
    for entry, (preds, fails) in zip(manifest.plans, per_plan):
        failures += fails
        for b in backends:
            for f in facilities:
                predictions[b][f.value][entry.plan.plan_id] = preds[b][f.value]

    rows = []
    for f in facilities:
        truth = {e.plan.plan_id: e.truth.get(f, 0) for e in manifest.plans}
        for b in backends:
            preds = predictions[b][f.value]
            failed = {pid for pid, n in preds.items() if n is None}
            considered = {pid: n for pid, n in truth.items() if not (cfg.exclude_failures and pid in failed)}
            n_correct = sum(1 for pid, n in considered.items() if preds[pid] == n)
            rows.append(ResultRow(manifest.dataset_name, f.value, b, len(considered), n_correct, len(failed)))
    return ComparisonResult(rows, predictions, failures)
