"""The question kinds the pipeline can put to a model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Union

from ..core import FacilityType, Verdict
from ..errors import ParseError, ValidationError


@dataclass(frozen=True)
class ConnectionQuery:
    """Does door ``door_id`` lead into a room of ``facility``?"""

    facility: FacilityType
    door_id: int

    expects = "verdict"

    def canonical(self) -> dict[str, Any]:
        return {"kind": "connection", "facility": FacilityType.parse(self.facility).value, "door": self.door_id}


@dataclass(frozen=True)
class SameRoomQuery:
    """Do two doors open into the same room?  Stored with ids ascending."""

    door_id_a: int
    door_id_b: int
    facility: FacilityType | None = None

    expects = "verdict"

    def __post_init__(self):
        if self.door_id_a == self.door_id_b:
            raise ValidationError("SameRoomQuery needs two distinct doors")
        if self.door_id_a > self.door_id_b:
            a, b = self.door_id_b, self.door_id_a
            object.__setattr__(self, "door_id_a", a)
            object.__setattr__(self, "door_id_b", b)

    @property
    def pair(self) -> tuple[int, int]:
        return (self.door_id_a, self.door_id_b)

    def canonical(self) -> dict[str, Any]:
        fac = FacilityType.parse(self.facility).value if self.facility is not None else None
        return {"kind": "same_room", "facility": fac, "doors": [self.door_id_a, self.door_id_b]}


@dataclass(frozen=True)
class OmissionQuery:
    """How many ``facility`` instances are not marked by any highlighted door?"""

    facility: FacilityType
    marked_door_ids: tuple[int, ...] = ()

    expects = "count"

    def __post_init__(self):
        ids = tuple(self.marked_door_ids)
        if len(set(ids)) != len(ids):
            raise ValidationError("marked_door_ids must be duplicate-free")
        object.__setattr__(self, "marked_door_ids", tuple(sorted(ids)))

    def canonical(self) -> dict[str, Any]:
        return {
            "kind": "omission",
            "facility": FacilityType.parse(self.facility).value,
            "marked": list(self.marked_door_ids),
        }


@dataclass(frozen=True)
class CountQuery:
    """Whole-image count with no door anchors; the comparison baseline."""

    facility: FacilityType

    expects = "count"

    def canonical(self) -> dict[str, Any]:
        return {"kind": "count", "facility": FacilityType.parse(self.facility).value}


Query = Union[ConnectionQuery, SameRoomQuery, OmissionQuery, CountQuery]


@dataclass(frozen=True)
class ModelAnswer:
    value: Verdict | int
    raw_text: str = ""
    reason_text: str = ""

    def __post_init__(self):
        if isinstance(self.value, Verdict):
            return
        if isinstance(self.value, bool) or not isinstance(self.value, int):
            raise ValidationError(f"answer value must be a Verdict or int, got {self.value!r}")
        if self.value < 0:
            raise ParseError(f"negative count {self.value}", self.raw_text)

    @property
    def verdict(self) -> Verdict:
        if not isinstance(self.value, Verdict):
            raise TypeError("answer holds a count, not a verdict")
        return self.value

    @property
    def count(self) -> int:
        if isinstance(self.value, Verdict):
            raise TypeError("answer holds a verdict, not a count")
        return self.value

    def to_dict(self) -> dict[str, Any]:
        value = self.value.value if isinstance(self.value, Verdict) else self.value
        return {"value": value, "raw_text": self.raw_text, "reason_text": self.reason_text}

    @classmethod
    def from_dict(cls, data) -> ModelAnswer:
        value = data["value"]
        value = Verdict(value) if isinstance(value, str) else int(value)
        return cls(value, data.get("raw_text", ""), data.get("reason_text", ""))
