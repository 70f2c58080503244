"""Input checks in the style of ``sklearn.utils.validation``."""

from __future__ import annotations

from typing import Any, Mapping, Sequence

from .core import DoorBox, FacilityType, Plan
from .errors import ValidationError


def check_plan_samples(X) -> list:
    """Accept a sequence of PlanSample-like objects (``.plan`` and ``.doors``)."""
    from .enumerator import PlanSample

    if isinstance(X, PlanSample):
        raise ValidationError("expected a sequence of PlanSample, got a single sample")
    try:
        rows = list(X)
    except TypeError:
        raise ValidationError(f"expected a sequence of PlanSample, got {type(X).__name__}") from None
    out = []
    for i, row in enumerate(rows):
        if isinstance(row, tuple) and len(row) == 2 and isinstance(row[0], Plan):
            row = PlanSample(row[0], tuple(row[1]))
        if not isinstance(row, PlanSample):
            raise ValidationError(f"X[{i}]: expected PlanSample or (Plan, doors), got {type(row).__name__}")
        for d in row.doors:
            if not isinstance(d, DoorBox):
                raise ValidationError(f"X[{i}]: doors must be DoorBox instances")
            if not d.within(row.plan.ref.width_px, row.plan.ref.height_px):
                raise ValidationError(f"X[{i}]: door {d.door_id} lies outside the plan")
        out.append(row)
    ids = [r.plan.plan_id for r in out]
    if len(set(ids)) != len(ids):
        raise ValidationError("plan ids must be unique")
    return out


def check_counts(counts: Mapping[Any, Any], where: str = "counts") -> dict[FacilityType, int]:
    out = {}
    for key, value in counts.items():
        fac = FacilityType.parse(key)
        if isinstance(value, bool) or not isinstance(value, int) or value < 0:
            raise ValidationError(f"{where}[{fac.value}] must be a non-negative integer, got {value!r}")
        out[fac] = value
    return out


def check_truth(y: Sequence[Mapping[str, int]], n_samples: int) -> list[dict[str, int]]:
    rows = list(y)
    if len(rows) != n_samples:
        raise ValidationError(f"y has {len(rows)} rows but X has {n_samples}")
    return [{f.value: n for f, n in check_counts(r, f"y[{i}]").items()} for i, r in enumerate(rows)]


def check_non_negative_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise ValidationError(f"{name} must be a non-negative integer, got {value!r}")
    return value
