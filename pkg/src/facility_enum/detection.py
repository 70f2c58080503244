"""Door detections: manifest loading, remote detector client, post-filtering."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from sklearn.base import BaseEstimator, TransformerMixin

from .core import DoorBox, FloorPlanRef, iou
from .errors import ConfigError, ProtocolError, SchemaError, TransportError, ValidationError

logger = logging.getLogger(__name__)

DETECTOR_URL_ENV = "FE_DETECTOR_URL"


@dataclass(frozen=True)
class DetectorConfig:
    confidence_threshold: float = 0.50
    dedup_iou_threshold: float = 0.80
    endpoint: str | None = None
    timeout_s: float = 30.0
    max_attempts: int = 3
    backoff_s: float = 0.5

    def __post_init__(self):
        for name in ("confidence_threshold", "dedup_iou_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {value}")
        if self.max_attempts < 1:
            raise ValidationError("max_attempts must be >= 1")

    def resolved_endpoint(self) -> str | None:
        return self.endpoint or os.environ.get(DETECTOR_URL_ENV) or None

    def to_dict(self) -> dict[str, Any]:
        return {
            "confidence_threshold": self.confidence_threshold,
            "dedup_iou_threshold": self.dedup_iou_threshold,
            "endpoint": self.resolved_endpoint(),
        }


@dataclass
class DetectionManifest:
    plan_id: str
    detector_name: str
    entries: list[tuple[tuple[float, float, float, float], float]] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: Any, error_cls: type[Exception] = SchemaError) -> DetectionManifest:
        def fail(msg: str, fld: str):
            if error_cls is SchemaError:
                raise SchemaError(msg, fld)
            raise error_cls(f"{fld}: {msg}")

        if not isinstance(data, Mapping):
            fail("expected a JSON object", "<root>")
        if not isinstance(data.get("plan_id"), str):
            fail("missing or non-string", "plan_id")
        detections = data.get("detections")
        if not isinstance(detections, list):
            fail("missing or not a list", "detections")
        entries = []
        for i, item in enumerate(detections):
            if not isinstance(item, Mapping):
                fail("expected an object", f"detections[{i}]")
            box = item.get("box")
            if (
                not isinstance(box, list)
                or len(box) != 4
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in box)
            ):
                fail("expected [x0, y0, x1, y1] numbers", f"detections[{i}].box")
            conf = item.get("confidence")
            if not isinstance(conf, (int, float)) or isinstance(conf, bool):
                fail("missing or non-numeric", f"detections[{i}].confidence")
            entries.append((tuple(float(v) for v in box), float(conf)))
        return cls(data["plan_id"], str(data.get("detector", "unknown")), entries)

    def to_dict(self) -> dict[str, Any]:
        return {
            "plan_id": self.plan_id,
            "detector": self.detector_name,
            "detections": [{"box": list(box), "confidence": conf} for box, conf in self.entries],
        }

    @classmethod
    def from_doors(cls, plan_id: str, doors: Iterable[DoorBox], detector_name: str = "fixture") -> DetectionManifest:
        return cls(plan_id, detector_name, [(tuple(d.box), d.confidence) for d in doors])


def doors_from_entries(
    entries: Sequence[tuple[Sequence[float], float]],
    plan: FloorPlanRef,
    warnings: list[str] | None = None,
) -> list[DoorBox]:
    """Validate raw (box, confidence) pairs, clamping boxes that overrun the plan."""
    doors = []
    for i, (box, conf) in enumerate(entries):
        if not 0.0 <= conf <= 1.0:
            raise ValidationError(f"detection {i}: confidence {conf} outside [0, 1]")
        x0, y0, x1, y1 = (int(round(v)) for v in box)
        cx0, cy0 = max(0, x0), max(0, y0)
        cx1, cy1 = min(plan.width_px, x1), min(plan.height_px, y1)
        if (cx0, cy0, cx1, cy1) != (x0, y0, x1, y1):
            msg = f"plan {plan.plan_id} detection {i}: box {[x0, y0, x1, y1]} clamped to {[cx0, cy0, cx1, cy1]}"
            logger.warning(msg)
            if warnings is not None:
                warnings.append(msg)
        if cx0 >= cx1 or cy0 >= cy1:
            msg = f"plan {plan.plan_id} detection {i}: box lies outside the plan, dropped"
            logger.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            continue
        doors.append(DoorBox(len(doors), (cx0, cy0, cx1, cy1), conf))
    return doors


def load_detections(
    manifest_path: str | Path, plan: FloorPlanRef, warnings: list[str] | None = None
) -> list[DoorBox]:
    try:
        data = json.loads(Path(manifest_path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}", "<root>") from exc
    manifest = DetectionManifest.from_dict(data)
    if manifest.plan_id != plan.plan_id:
        logger.warning("manifest plan_id %s differs from plan %s", manifest.plan_id, plan.plan_id)
    return doors_from_entries(manifest.entries, plan, warnings)


def _read_image(uri: str) -> bytes:
    path = uri[len("file://"):] if uri.startswith("file://") else uri
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read plan image {uri!r}: {exc}") from exc


def fetch_detections(
    plan: FloorPlanRef,
    cfg: DetectorConfig,
    image: bytes | None = None,
    client=None,
    warnings: list[str] | None = None,
) -> list[DoorBox]:
    """POST the plan image to a detector service and validate its reply."""
    import httpx

    endpoint = cfg.resolved_endpoint()
    if not endpoint:
        raise ConfigError(f"no detector endpoint configured (set {DETECTOR_URL_ENV})")
    if image is None:
        image = _read_image(plan.image_uri)
    owns_client = client is None
    client = client or httpx.Client(timeout=cfg.timeout_s)
    try:
        last = ""
        for attempt in range(1, cfg.max_attempts + 1):
            try:
                resp = client.post(endpoint, content=image, headers={"content-type": "image/png"})
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code < 400:
                    try:
                        payload = resp.json()
                    except ValueError as exc:
                        raise ProtocolError(f"detector returned non-JSON body: {exc}") from exc
                    manifest = DetectionManifest.from_dict(payload, error_cls=ProtocolError)
                    return doors_from_entries(manifest.entries, plan, warnings)
                if resp.status_code < 500 and resp.status_code != 429:
                    raise ProtocolError(f"detector rejected request: HTTP {resp.status_code}")
                last = f"HTTP {resp.status_code}"
            if attempt < cfg.max_attempts:
                time.sleep(cfg.backoff_s * 2 ** (attempt - 1))
        raise TransportError(f"detector at {endpoint} failed: {last}", attempts=cfg.max_attempts)
    finally:
        if owns_client:
            client.close()


def suppress_overlaps(doors: Sequence[DoorBox], iou_threshold: float) -> list[DoorBox]:
    """Greedy NMS: highest confidence first, ties broken by lower door_id.

    Returns survivors in their input door_id order, ids untouched.
    """
    kept: list[DoorBox] = []
    for door in sorted(doors, key=lambda d: (-d.confidence, d.door_id)):
        if all(iou(door, k) < iou_threshold for k in kept):
            kept.append(door)
    return sorted(kept, key=lambda d: d.door_id)


def filter_doors(doors: Sequence[DoorBox], cfg: DetectorConfig | None = None) -> list[DoorBox]:
    cfg = cfg or DetectorConfig()
    gated = [d for d in doors if d.confidence >= cfg.confidence_threshold]
    kept = suppress_overlaps(gated, cfg.dedup_iou_threshold)
    return [d.with_id(i) for i, d in enumerate(kept)]


class DoorFilter(BaseEstimator, TransformerMixin):
    """Confidence gate plus overlap suppression as a stateless transformer.

    ``transform`` accepts a list of door lists (one per plan) and returns
    the filtered lists, so it can sit in front of :class:`FacilityEnumerator`.
    """

    def __init__(self, confidence_threshold=0.5, dedup_iou_threshold=0.8):
        self.confidence_threshold = confidence_threshold
        self.dedup_iou_threshold = dedup_iou_threshold

    def fit(self, X=None, y=None):
        self.config_ = DetectorConfig(self.confidence_threshold, self.dedup_iou_threshold)
        return self

    def transform(self, X):
        cfg = getattr(self, "config_", None) or DetectorConfig(self.confidence_threshold, self.dedup_iou_threshold)
        return [filter_doors(list(doors), cfg) for doors in X]
