"""Draw door boxes onto the plan raster that is shown to the model."""

from __future__ import annotations

import enum
import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .core import DoorBox, sha256_hex
from .errors import FormatError, ValidationError

RENDERER_VERSION = "overlay-1"
RED = (255, 0, 0)


class BoxRole(str, enum.Enum):
    QUERIED = "queried"
    RETAINED = "retained"


def default_stroke(width: int, height: int, base: int = 3) -> int:
    return base * max(1, round(min(width, height) / 640))


@dataclass(frozen=True)
class OverlaySpec:
    boxes: tuple[tuple[DoorBox, BoxRole], ...] = ()
    stroke_width_px: int = 3
    colors: Mapping[BoxRole, tuple[int, int, int]] = field(
        default_factory=lambda: {BoxRole.QUERIED: RED, BoxRole.RETAINED: RED}
    )

    def __post_init__(self):
        if self.stroke_width_px < 1:
            raise ValidationError("stroke_width_px must be >= 1")
        object.__setattr__(self, "boxes", tuple((d, BoxRole(r)) for d, r in self.boxes))

    @classmethod
    def for_image(
        cls, doors: Sequence[DoorBox], role: BoxRole, width: int, height: int
    ) -> OverlaySpec:
        return cls(tuple((d, role) for d in doors), default_stroke(width, height))

    def digest(self) -> str:
        """Stable hash of everything that determines the rendered pixels."""
        payload = {
            "renderer": RENDERER_VERSION,
            "stroke": self.stroke_width_px,
            "boxes": [[list(d.box), role.value, list(self.colors[role])] for d, role in self.boxes],
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _decode(image: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(image)) as im:
            return np.array(im.convert("RGB"))
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"cannot decode image: {exc}") from exc


def encode_png(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    # fixed settings and no metadata keep the bytes stable across runs
    Image.fromarray(pixels, "RGB").save(buf, format="PNG", compress_level=6, optimize=False)
    return buf.getvalue()


def draw_rectangle(pixels: np.ndarray, box, stroke: int, color) -> None:
    """Paint an inward stroke of ``stroke`` pixels along the clamped box outline."""
    h, w = pixels.shape[:2]
    x0, y0, x1, y1 = box
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(w, x1), min(h, y1)
    if x0 >= x1 or y0 >= y1:
        return
    s = min(stroke, x1 - x0, y1 - y0)
    pixels[y0:y0 + s, x0:x1] = color
    pixels[y1 - s:y1, x0:x1] = color
    pixels[y0:y1, x0:x0 + s] = color
    pixels[y0:y1, x1 - s:x1] = color


def render_overlay(image: bytes, spec: OverlaySpec) -> tuple[bytes, str]:
    """Return PNG bytes with the spec's boxes drawn, and their sha256 digest."""
    pixels = _decode(image)
    for door, role in spec.boxes:
        draw_rectangle(pixels, door.box, spec.stroke_width_px, spec.colors[role])
    out = encode_png(pixels)
    return out, sha256_hex(out)
