"""Domain types and count arithmetic used throughout the package.

Pixel coordinates are integers with the origin at the top-left corner,
x growing rightward and y growing downward.  Boxes use corner form
``(x_min, y_min, x_max, y_max)`` with exclusive maxima, so a box
``(0, 0, 10, 10)`` covers 100 pixels.
"""

from __future__ import annotations

import enum
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import FormatError, ValidationError

Box = tuple[int, int, int, int]


class FacilityType(str, enum.Enum):
    TOILET = "toilet"
    KITCHEN = "kitchen"
    LAUNDRY = "laundry"
    EXIT = "exit"
    EMERGENCY_EXIT = "emergency-exit"
    FIRE_SAFETY = "fire-safety"
    ACCESSIBILITY = "accessibility"
    PARKING_STANDARD = "parking-standard"
    PARKING_ACCESSIBLE = "parking-accessible"

    @classmethod
    def parse(cls, value: str | FacilityType) -> FacilityType:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            names = ", ".join(f.value for f in cls)
            raise ValidationError(f"unknown facility type {value!r}; expected one of {names}") from None

    def __str__(self) -> str:
        return self.value


class Verdict(str, enum.Enum):
    YES = "yes"
    NO = "no"

    def __bool__(self) -> bool:
        return self is Verdict.YES

    @classmethod
    def of(cls, flag: bool) -> Verdict:
        return cls.YES if flag else cls.NO


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class FloorPlanRef:
    """Identity and size of one floor-plan raster."""

    plan_id: str
    image_bytes_digest: str
    width_px: int
    height_px: int
    image_uri: str = ""

    def __post_init__(self):
        if not self.plan_id:
            raise ValidationError("plan_id must be non-empty")
        if int(self.width_px) <= 0 or int(self.height_px) <= 0:
            raise ValidationError(
                f"plan {self.plan_id}: image size must be positive, got {self.width_px}x{self.height_px}"
            )
        if len(self.image_bytes_digest) != 64:
            raise ValidationError(f"plan {self.plan_id}: image_bytes_digest must be a sha256 hex digest")

    @property
    def diagonal(self) -> float:
        return float((self.width_px**2 + self.height_px**2) ** 0.5)

    def to_dict(self) -> dict[str, Any]:
        return {
            "plan_id": self.plan_id,
            "image_bytes_digest": self.image_bytes_digest,
            "width_px": self.width_px,
            "height_px": self.height_px,
            "image_uri": self.image_uri,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> FloorPlanRef:
        return cls(
            plan_id=str(data["plan_id"]),
            image_bytes_digest=str(data["image_bytes_digest"]),
            width_px=int(data["width_px"]),
            height_px=int(data["height_px"]),
            image_uri=str(data.get("image_uri", "")),
        )


def image_size(image: bytes) -> tuple[int, int]:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(io.BytesIO(image)) as im:
            return im.size
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"cannot decode image: {exc}") from exc


@dataclass(frozen=True)
class Plan:
    """A floor-plan reference together with its raster bytes."""

    ref: FloorPlanRef
    image: bytes = field(repr=False)

    @property
    def plan_id(self) -> str:
        return self.ref.plan_id

    @classmethod
    def from_bytes(cls, image: bytes, plan_id: str, image_uri: str = "") -> Plan:
        if not image:
            raise FormatError("empty image")
        width, height = image_size(image)
        ref = FloorPlanRef(plan_id, sha256_hex(image), width, height, image_uri)
        return cls(ref, image)

    @classmethod
    def from_path(cls, path: str | Path, plan_id: str | None = None) -> Plan:
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise ValidationError(f"cannot read plan image {path}: {exc}") from exc
        return cls.from_bytes(data, plan_id or path.stem, image_uri=str(path))


@dataclass(frozen=True)
class DoorBox:
    door_id: int
    box: Box
    confidence: float = 1.0

    def __post_init__(self):
        if len(self.box) != 4:
            raise ValidationError(f"door {self.door_id}: box needs 4 coordinates, got {self.box!r}")
        x0, y0, x1, y1 = (int(v) for v in self.box)
        object.__setattr__(self, "box", (x0, y0, x1, y1))
        if not (x0 < x1 and y0 < y1):
            raise ValidationError(f"door {self.door_id}: degenerate box {self.box}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"door {self.door_id}: confidence {self.confidence} outside [0, 1]")

    @property
    def area(self) -> int:
        x0, y0, x1, y1 = self.box
        return (x1 - x0) * (y1 - y0)

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.box
        return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)

    def within(self, width: int, height: int) -> bool:
        x0, y0, x1, y1 = self.box
        return x0 >= 0 and y0 >= 0 and x1 <= width and y1 <= height

    def with_id(self, door_id: int) -> DoorBox:
        return DoorBox(door_id, self.box, self.confidence)

    def translated(self, dx: int, dy: int) -> DoorBox:
        x0, y0, x1, y1 = self.box
        return DoorBox(self.door_id, (x0 + dx, y0 + dy, x1 + dx, y1 + dy), self.confidence)

    def to_dict(self) -> dict[str, Any]:
        return {"door_id": self.door_id, "box": list(self.box), "confidence": self.confidence}


def iou(a: DoorBox, b: DoorBox) -> float:
    """Intersection over union of two boxes."""
    ax0, ay0, ax1, ay1 = a.box
    bx0, by0, bx1, by1 = b.box
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / float(a.area + b.area - inter)


def final_count(representatives_size: int, n_missing: int) -> int:
    """Facility count: one per consolidated room plus the instances no door reached."""
    if representatives_size < 0 or n_missing < 0:
        raise ValidationError("counts must be non-negative")
    return representatives_size + n_missing


def canonical_order(doors: Iterable[DoorBox]) -> list[DoorBox]:
    """Sort doors top-to-bottom, left-to-right and renumber them from 0."""
    ordered = sorted(doors, key=lambda d: (d.box[1], d.box[0], d.box[3], d.box[2], -d.confidence))
    return [d.with_id(i) for i, d in enumerate(ordered)]


@dataclass(frozen=True)
class EnumerationResult:
    """Count for one facility type on one plan, with its intermediate door sets."""

    plan_id: str
    facility_type: FacilityType
    door_set_size: int
    connected_doors: tuple[int, ...]
    representatives: tuple[int, ...]
    n_missing: int
    n_final: int
    provenance: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "facility_type", FacilityType.parse(self.facility_type))
        object.__setattr__(self, "connected_doors", tuple(self.connected_doors))
        object.__setattr__(self, "representatives", tuple(self.representatives))
        m = len(self.representatives)
        if self.n_missing < 0 or self.door_set_size < 0:
            raise ValidationError("n_missing and door_set_size must be non-negative")
        if not m <= len(self.connected_doors) <= self.door_set_size:
            raise ValidationError(
                f"count chain violated: M={m}, |D_T|={len(self.connected_doors)}, N={self.door_set_size}"
            )
        if not set(self.representatives) <= set(self.connected_doors):
            raise ValidationError("representatives must be a subset of connected_doors")
        if self.n_final != m + self.n_missing:
            raise ValidationError(f"n_final={self.n_final} != M + n_missing = {m} + {self.n_missing}")

    @property
    def m(self) -> int:
        return len(self.representatives)

    def to_dict(self) -> dict[str, Any]:
        return {
            "plan_id": self.plan_id,
            "facility_type": self.facility_type.value,
            "door_set_size": self.door_set_size,
            "connected_doors": list(self.connected_doors),
            "representatives": list(self.representatives),
            "n_missing": self.n_missing,
            "n_final": self.n_final,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> EnumerationResult:
        return cls(
            plan_id=str(data["plan_id"]),
            facility_type=FacilityType.parse(data["facility_type"]),
            door_set_size=int(data["door_set_size"]),
            connected_doors=tuple(int(d) for d in data["connected_doors"]),
            representatives=tuple(int(d) for d in data["representatives"]),
            n_missing=int(data["n_missing"]),
            n_final=int(data["n_final"]),
        )


def doors_by_id(doors: Sequence[DoorBox]) -> dict[int, DoorBox]:
    table = {d.door_id: d for d in doors}
    if len(table) != len(doors):
        raise ValidationError("door ids must be unique")
    return table
