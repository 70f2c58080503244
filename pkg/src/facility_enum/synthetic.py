"""Synthetic floor plans with exact ground truth for offline pipeline runs.

Rooms are axis-aligned rectangles packed into a shuffled grid.  Each room is
either a target facility (with one or two doors, or no door at all) or a
decoy room whose door leads nowhere of interest.  Doors straddle the top or
bottom wall of their room.  The oracle fixture answers every pipeline
question exactly, so a zero-error run must reproduce the ground truth.
"""

from __future__ import annotations

import io
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from PIL import Image, ImageDraw

from .core import DoorBox, FacilityType, Plan, canonical_order
from .detection import DetectionManifest
from .errors import GenerationError, ValidationError
from .gateway.backends import OracleFixture

DECOY = "decoy"
MIN_CELL_PX = 40


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int = 0
    rooms: Mapping[str, int] = field(default_factory=dict)
    doorless: Mapping[str, int] = field(default_factory=dict)
    width: int = 512
    height: int = 512
    decoy_doors: int = 0
    double_door_prob: float = 0.3
    double_door_rooms: Mapping[str, int] | None = None
    plan_id: str | None = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"image size must be positive, got {self.width}x{self.height}")
        if not 0.0 <= self.double_door_prob <= 1.0:
            raise ValidationError("double_door_prob must lie in [0, 1]")
        if self.decoy_doors < 0:
            raise ValidationError("decoy_doors must be >= 0")
        for name in ("rooms", "doorless", "double_door_rooms"):
            table = getattr(self, name)
            if table is None:
                continue
            clean = {}
            for k, v in table.items():
                if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                    raise ValidationError(f"{name}[{k}] must be a non-negative integer")
                clean[FacilityType.parse(k).value] = v
            object.__setattr__(self, name, clean)
        if self.double_door_rooms:
            for k, v in self.double_door_rooms.items():
                if v > self.rooms.get(k, 0):
                    raise ValidationError(f"double_door_rooms[{k}] exceeds rooms[{k}]")

    @property
    def resolved_plan_id(self) -> str:
        return self.plan_id or f"synthetic-{self.seed}"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ScenarioSpec:
        allowed = set(cls.__dataclass_fields__)
        extra = set(data) - allowed
        if extra:
            raise ValidationError(f"unknown scenario fields: {sorted(extra)}")
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed, "rooms": dict(self.rooms), "doorless": dict(self.doorless),
            "width": self.width, "height": self.height, "decoy_doors": self.decoy_doors,
            "double_door_prob": self.double_door_prob,
            "double_door_rooms": dict(self.double_door_rooms) if self.double_door_rooms is not None else None,
            "plan_id": self.resolved_plan_id,
        }


@dataclass(frozen=True)
class RoomLayout:
    kind: str  # facility value or DECOY
    rect: tuple[int, int, int, int]
    doors: tuple[DoorBox, ...] = ()

    @property
    def doorless(self) -> bool:
        return not self.doors


@dataclass
class Scenario:
    spec: ScenarioSpec
    plan: Plan
    doors: list[DoorBox]
    fixture: OracleFixture
    truth: dict[str, int]
    rooms: list[RoomLayout]


def _room_plan(spec: ScenarioSpec, rng: random.Random) -> list[tuple[str, int]]:
    """(kind, n_doors) for every room, in a deterministic order."""
    out = []
    for fac in FacilityType:
        n = spec.rooms.get(fac.value, 0)
        if spec.double_door_rooms is not None:
            doubles = spec.double_door_rooms.get(fac.value, 0)
            counts = [2] * doubles + [1] * (n - doubles)
        else:
            counts = [2 if rng.random() < spec.double_door_prob else 1 for _ in range(n)]
        out += [(fac.value, c) for c in counts]
        out += [(fac.value, 0)] * spec.doorless.get(fac.value, 0)
    out += [(DECOY, 1)] * spec.decoy_doors
    return out


def _layout(spec: ScenarioSpec, rng: random.Random) -> list[RoomLayout]:
    plan = _room_plan(spec, rng)
    n = len(plan)
    if n == 0:
        return []
    cols = max(1, math.ceil(math.sqrt(n * spec.width / spec.height)))
    rows = math.ceil(n / cols)
    cw, ch = spec.width // cols, spec.height // rows
    if cw < MIN_CELL_PX or ch < MIN_CELL_PX:
        raise GenerationError(
            f"{n} rooms do not fit a {spec.width}x{spec.height} image "
            f"(cells would be {cw}x{ch}px, need {MIN_CELL_PX}); use a larger image"
        )
    cells = list(range(rows * cols))
    rng.shuffle(cells)
    door = max(6, min(20, cw // 4, ch // 4))
    margin = door // 2 + 2
    layouts = []
    for (kind, n_doors), cell in zip(plan, cells):
        cx, cy = (cell % cols) * cw, (cell // cols) * ch
        slack_x, slack_y = max(0, cw // 8), max(0, ch // 8)
        x0 = cx + margin + rng.randint(0, slack_x)
        y0 = cy + margin + rng.randint(0, slack_y)
        x1 = cx + cw - margin - rng.randint(0, slack_x)
        y1 = cy + ch - margin - rng.randint(0, slack_y)
        boxes = []
        for wall in range(n_doors):
            wy = y0 if wall == 0 else y1
            dx = rng.randint(x0 + 2, max(x0 + 2, x1 - door - 2))
            dy = wy - door // 2
            conf = round(rng.uniform(0.6, 0.99), 3)
            boxes.append(DoorBox(-1, (dx, dy, dx + door, dy + door), conf))
        layouts.append(RoomLayout(kind, (x0, y0, x1, y1), tuple(boxes)))
    return layouts


def _glyph(draw: ImageDraw.ImageDraw, kind: str, rect) -> None:
    x0, y0, x1, y1 = rect
    cx, cy = (x0 + x1) // 2, (y0 + y1) // 2
    r = max(3, min(x1 - x0, y1 - y0) // 6)
    ink = (40, 40, 40)
    if kind == "toilet":
        draw.ellipse((cx - r, cy - r // 2 - r, cx + r, cy + r), outline=ink, width=2)
        draw.rectangle((cx - r, cy - 2 * r, cx + r, cy - r), outline=ink, width=2)
    elif kind == "kitchen":
        for ox, oy in ((-1, -1), (1, -1), (-1, 1), (1, 1)):
            draw.ellipse((cx + ox * r - r // 2, cy + oy * r - r // 2, cx + ox * r + r // 2, cy + oy * r + r // 2),
                         outline=ink, width=1)
    elif kind == "laundry":
        draw.rectangle((cx - r, cy - r, cx + r, cy + r), outline=ink, width=2)
        draw.ellipse((cx - r // 2, cy - r // 2, cx + r // 2, cy + r // 2), outline=ink, width=1)
    elif kind in ("exit", "emergency-exit"):
        draw.polygon([(cx - r, cy - r), (cx + r, cy), (cx - r, cy + r)], outline=ink)
        if kind == "emergency-exit":
            draw.line((cx - r, cy, cx + r, cy), fill=ink, width=1)
    elif kind == "fire-safety":
        draw.ellipse((cx - r, cy - r, cx + r, cy + r), fill=(90, 90, 90))
    elif kind == "accessibility":
        draw.ellipse((cx - r // 2, cy - r, cx + r // 2, cy), outline=ink, width=2)
        draw.arc((cx - r, cy - r // 2, cx + r, cy + r + r // 2), 30, 330, fill=ink, width=2)
    elif kind.startswith("parking"):
        draw.line((x0 + 3, cy, x1 - 3, cy), fill=ink, width=1)
        if kind == "parking-accessible":
            draw.rectangle((cx - r // 2, cy - r // 2, cx + r // 2, cy + r // 2), fill=ink)
    else:
        draw.rectangle((cx - r, cy - r // 2, cx + r, cy + r // 2), outline=(150, 150, 150), width=1)


def render(spec: ScenarioSpec, rooms: Sequence[RoomLayout]) -> bytes:
    im = Image.new("RGB", (spec.width, spec.height), (255, 255, 255))
    draw = ImageDraw.Draw(im)
    for room in rooms:
        x0, y0, x1, y1 = room.rect
        if room.doorless:
            # open room: three walls only
            draw.line((x0, y1, x0, y0, x1, y0, x1, y1), fill=(0, 0, 0), width=2)
        else:
            draw.rectangle(room.rect, outline=(0, 0, 0), width=2)
        for door in room.doors:
            bx0, by0, bx1, by1 = door.box
            draw.rectangle((bx0, by0 + 2, bx1 - 1, by1 - 3), fill=(255, 255, 255))
            draw.arc((bx0, by0 - (by1 - by0) // 2, bx1 + (bx1 - bx0), by1), 90, 180, fill=(0, 0, 180), width=1)
            draw.line((bx0, by0, bx0, by1 - 1), fill=(0, 0, 180), width=1)
        _glyph(draw, room.kind, room.rect)
    buf = io.BytesIO()
    im.save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def generate(spec: ScenarioSpec) -> Scenario:
    rng = random.Random(spec.seed)
    raw_rooms = _layout(spec, rng)

    flat = [(i, d) for i, room in enumerate(raw_rooms) for d in room.doors]
    # canonical ids: top-to-bottom, left-to-right
    order = sorted(range(len(flat)), key=lambda k: (flat[k][1].box[1], flat[k][1].box[0]))
    new_id = {k: i for i, k in enumerate(order)}
    per_room: dict[int, list[DoorBox]] = {}
    for k, (room_idx, d) in enumerate(flat):
        per_room.setdefault(room_idx, []).append(d.with_id(new_id[k]))
    rooms = [RoomLayout(r.kind, r.rect, tuple(per_room.get(i, ()))) for i, r in enumerate(raw_rooms)]
    doors = sorted((d for r in rooms for d in r.doors), key=lambda d: d.door_id)
    assert [d.door_id for d in doors] == [d.door_id for d in canonical_order(doors)]

    plan_id = spec.resolved_plan_id
    fixture = OracleFixture(plan_id)
    for room in rooms:
        ids = [d.door_id for d in room.doors]
        if room.kind != DECOY:
            fac = FacilityType(room.kind)
            table = fixture.connection.setdefault(fac, {})
            for d in ids:
                table[d] = True
            if room.doorless:
                fixture.missing[fac] = fixture.missing.get(fac, 0) + 1
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                fixture.same_room.add((min(ids[a], ids[b]), max(ids[a], ids[b])))
    for fac in FacilityType:
        fixture.missing.setdefault(fac, 0)

    truth = {fac.value: spec.rooms.get(fac.value, 0) + spec.doorless.get(fac.value, 0) for fac in FacilityType}
    image = render(spec, rooms)
    plan = Plan.from_bytes(image, plan_id, image_uri=f"{plan_id}.png")
    return Scenario(spec, plan, doors, fixture, truth, rooms)


def random_spec(seed: int, max_doors: int = 25, width: int = 512, height: int = 512) -> ScenarioSpec:
    """A random scenario touching several facility types, with at most ``max_doors`` doors."""
    rng = random.Random(10_000 + seed)
    budget = rng.randint(0, max_doors)
    rooms: dict[str, int] = {}
    doubles: dict[str, int] = {}
    doorless: dict[str, int] = {}
    facs = [f.value for f in FacilityType]
    used = 0
    for fac in rng.sample(facs, rng.randint(1, len(facs))):
        n = rng.randint(0, 3)
        d = sum(rng.random() < 0.35 for _ in range(n))
        if used + n + d > budget:
            n, d = 0, 0
        rooms[fac] = n
        doubles[fac] = d
        used += n + d
        if rng.random() < 0.3:
            doorless[fac] = rng.randint(1, 2)
    decoys = rng.randint(0, max(0, min(4, budget - used)))
    return ScenarioSpec(seed=seed, rooms=rooms, doorless=doorless, width=width, height=height,
                        decoy_doors=decoys, double_door_rooms=doubles)


# -- bundles ------------------------------------------------------------------

def write_bundle(scenario: Scenario, out_dir: str | Path) -> dict[str, Any]:
    """Write raster, detections and oracle fixture; return the manifest entry."""
    out_dir = Path(out_dir)
    pid = scenario.plan.plan_id
    sub = out_dir / pid
    sub.mkdir(parents=True, exist_ok=True)
    (sub / "plan.png").write_bytes(scenario.plan.image)
    det = DetectionManifest.from_doors(pid, scenario.doors, "synthetic")
    (sub / "detections.json").write_text(json.dumps(det.to_dict(), indent=1, sort_keys=True) + "\n")
    (sub / "oracle.json").write_text(json.dumps(scenario.fixture.to_dict(), indent=1, sort_keys=True) + "\n")
    ref = scenario.plan.ref.to_dict()
    ref["image_uri"] = f"{pid}/plan.png"
    return {
        "plan": ref,
        "truth": dict(scenario.truth),
        "oracle": f"{pid}/oracle.json",
        "detections": f"{pid}/detections.json",
    }


def write_dataset(specs: Sequence[ScenarioSpec], out_dir: str | Path, dataset: str = "synthetic") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = [s.resolved_plan_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValidationError("scenario plan ids must be unique")
    entries = [write_bundle(generate(s), out_dir) for s in specs]
    path = out_dir / "manifest.json"
    path.write_text(json.dumps({"dataset": dataset, "plans": entries}, indent=1, sort_keys=True) + "\n")
    return path


# -- simulated tile detector ---------------------------------------------------

class WindowDetector:
    """Reports ground-truth doors visible in a window, as a detector would on a crop.

    A door cut by the window edge is reported only when at least
    ``min_visible`` of its area is inside, clipped to the window and with
    confidence scaled by the visible fraction.
    """

    def __init__(self, doors: Sequence[DoorBox], min_visible: float = 0.85):
        self.doors = list(doors)
        self.min_visible = min_visible

    def detect(self, window: tuple[int, int, int, int]) -> list[DoorBox]:
        wx0, wy0, wx1, wy1 = window
        out = []
        for d in self.doors:
            x0, y0, x1, y1 = d.box
            cx0, cy0, cx1, cy1 = max(x0, wx0), max(y0, wy0), min(x1, wx1), min(y1, wy1)
            if cx0 >= cx1 or cy0 >= cy1:
                continue
            frac = (cx1 - cx0) * (cy1 - cy0) / d.area
            if frac < self.min_visible:
                continue
            local = (cx0 - wx0, cy0 - wy0, cx1 - wx0, cy1 - wy0)
            out.append(DoorBox(len(out), local, round(d.confidence * frac, 6)))
        return out
