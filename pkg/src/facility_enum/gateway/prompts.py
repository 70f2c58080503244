"""Versioned prompt templates, loaded from JSON files next to this module."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from typing import Any, Mapping

from ..core import DoorBox, FacilityType
from ..errors import ConfigError
from .queries import ConnectionQuery, CountQuery, OmissionQuery, Query, SameRoomQuery

DEFAULT_TEMPLATE_VERSION = "v1"
PROMPT_SUFFIX = "tell me the reason"


@lru_cache(maxsize=None)
def load_templates(version: str = DEFAULT_TEMPLATE_VERSION) -> Mapping[str, Any]:
    try:
        text = resources.files(__package__).joinpath("templates", f"{version}.json").read_text()
    except (FileNotFoundError, OSError):
        raise ConfigError(f"unknown prompt template version {version!r}") from None
    data = json.loads(text)
    for key in ("connection", "same_room", "omission", "count"):
        if not data[key].endswith(PROMPT_SUFFIX):
            raise ConfigError(f"template {version}/{key} must end with {PROMPT_SUFFIX!r}")
    return data


def facility_profile(facility: FacilityType | str, version: str = DEFAULT_TEMPLATE_VERSION) -> str:
    return load_templates(version)["profiles"][FacilityType.parse(facility).value]


def reprompt_text(expects: str, version: str = DEFAULT_TEMPLATE_VERSION) -> str:
    return load_templates(version)["reprompt_verdict" if expects == "verdict" else "reprompt_count"]


def _facility_words(facility) -> str:
    return FacilityType.parse(facility).value.replace("-", " ")


def build_prompt(
    query: Query,
    facility_profile: str,
    boxes: Mapping[int, DoorBox] | None = None,
    version: str = DEFAULT_TEMPLATE_VERSION,
) -> str:
    """Render the prompt text for ``query``.  Same inputs give the same string."""
    t = load_templates(version)
    boxes = boxes or {}
    if isinstance(query, ConnectionQuery):
        if not facility_profile or not facility_profile.strip():
            raise ConfigError("connection prompts need a non-empty facility profile")
        door = boxes.get(query.door_id)
        if door is not None:
            x0, y0, x1, y1 = door.box
            location = t["location"].format(x0=x0, y0=y0, x1=x1, y1=y1)
        else:
            location = t["location"].split(",")[0] + "."
        return t["connection"].format(
            location=location, profile=facility_profile.strip(), facility=_facility_words(query.facility)
        )
    if isinstance(query, SameRoomQuery):
        a, b = boxes.get(query.door_id_a), boxes.get(query.door_id_b)
        if a is not None and b is not None:
            location = t["pair_location"].format(
                ax0=a.box[0], ay0=a.box[1], ax1=a.box[2], ay1=a.box[3],
                bx0=b.box[0], by0=b.box[1], bx1=b.box[2], by1=b.box[3],
            )
        else:
            location = t["pair_location"].split(":")[0] + "."
        clause = f"Both doors were judged to lead to: {facility_profile.strip()} " if facility_profile else ""
        return t["same_room"].format(location=location, profile_clause=clause)
    if isinstance(query, OmissionQuery):
        return t["omission"].format(
            facility=_facility_words(query.facility),
            n_marked=len(query.marked_door_ids),
            profile=facility_profile.strip(),
        )
    if isinstance(query, CountQuery):
        return t["count"].format(facility=_facility_words(query.facility), profile=facility_profile.strip())
    raise TypeError(f"unsupported query {query!r}")
