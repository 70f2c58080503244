"""Declarative rule catalog and evaluation of facility counts against it."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from ..core import FacilityType
from ..errors import SchemaError, ValidationError

logger = logging.getLogger(__name__)

BUILDING_CLASSES = tuple(range(1, 10))


@dataclass(frozen=True)
class BuildingContext:
    building_class: int
    dwellings: int = 0
    floors: int = 1
    occupant_load: int = 0
    residents_without_private_amenities: int = 0
    long_term_accommodation: bool = False
    use_tags: frozenset[str] = frozenset()
    standard_parking_spaces: int = 0

    def __post_init__(self):
        cls = self.building_class
        if isinstance(cls, bool) or not isinstance(cls, int) or cls not in BUILDING_CLASSES:
            raise ValidationError(f"building_class must be an integer 1-9, got {cls!r}")
        if isinstance(self.floors, bool) or not isinstance(self.floors, int) or self.floors < 1:
            raise ValidationError(f"floors must be an integer >= 1, got {self.floors!r}")
        for name in ("dwellings", "occupant_load", "residents_without_private_amenities", "standard_parking_spaces"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise ValidationError(f"{name} must be a non-negative integer, got {v!r}")
        object.__setattr__(self, "use_tags", frozenset(str(t).lower() for t in self.use_tags))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> BuildingContext:
        if not isinstance(data, Mapping):
            raise ValidationError("building context must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown building context fields: {sorted(unknown)}")
        if "building_class" not in data:
            raise ValidationError("building context needs building_class")
        kwargs = dict(data)
        if "use_tags" in kwargs:
            kwargs["use_tags"] = frozenset(kwargs["use_tags"])
        return cls(**kwargs)

    def to_dict(self) -> dict[str, Any]:
        return {
            "building_class": self.building_class,
            "dwellings": self.dwellings,
            "floors": self.floors,
            "occupant_load": self.occupant_load,
            "residents_without_private_amenities": self.residents_without_private_amenities,
            "long_term_accommodation": self.long_term_accommodation,
            "use_tags": sorted(self.use_tags),
            "standard_parking_spaces": self.standard_parking_spaces,
        }


def ceil_div(n: int, per: int) -> int:
    return -(-n // per)


@dataclass(frozen=True)
class Rule:
    rule_id: str
    applicable_classes: frozenset[int]
    facility_type: FacilityType
    required_fn: Callable[[BuildingContext], int] = field(compare=False, repr=False)
    condition_fn: Callable[[BuildingContext], bool] = field(default=lambda ctx: True, compare=False, repr=False)
    citation: str = ""
    formula: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def applies(self, ctx: BuildingContext) -> bool:
        return ctx.building_class in self.applicable_classes and self.condition_fn(ctx)


@dataclass(frozen=True)
class NotApplicable:
    classes: frozenset[int]
    facility_type: FacilityType
    reason: str


@dataclass(frozen=True)
class Catalog:
    rules: tuple[Rule, ...]
    not_applicable: tuple[NotApplicable, ...] = ()
    parameters: Mapping[str, float] = field(default_factory=dict)
    name: str = "catalog"
    version: str = "0"

    def __iter__(self):
        return iter(self.rules)

    def __len__(self) -> int:
        return len(self.rules)

    def rule(self, rule_id: str) -> Rule:
        for r in self.rules:
            if r.rule_id == rule_id:
                return r
        raise KeyError(rule_id)

    def resolve(self, building_class: int, facility: FacilityType) -> list[Rule] | NotApplicable | None:
        rules = [r for r in self.rules if r.facility_type is facility and building_class in r.applicable_classes]
        if rules:
            return rules
        for na in self.not_applicable:
            if na.facility_type is facility and building_class in na.classes:
                return na
        return None


# -- formula compilation ----------------------------------------------------

def _param(value, params: Mapping[str, float], where: str):
    if isinstance(value, Mapping):
        name = value.get("param")
        if name not in params:
            raise SchemaError(f"unknown parameter {name!r}", where)
        value = params[name]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value <= 0:
        raise SchemaError(f"expected a positive number, got {value!r}", where)
    return value


def _ctx_field(name, where: str) -> str:
    if name not in BuildingContext.__dataclass_fields__:
        raise SchemaError(f"unknown context field {name!r}", where)
    return name


def compile_formula(spec: Mapping[str, Any], params: Mapping[str, float], where: str) -> Callable[[BuildingContext], int]:
    kind = spec.get("kind")
    if kind == "constant":
        value = int(spec["value"])
        return lambda ctx: value
    if kind == "per_floor":
        per = _param(spec.get("per", 1), params, where)
        return lambda ctx: int(math.ceil(per * ctx.floors))
    if kind == "per_dwelling":
        floor = int(spec.get("min", 0))
        return lambda ctx: max(floor, ctx.dwellings)
    if kind == "ratio":
        fld = _ctx_field(spec.get("field"), where)
        per = _param(spec.get("per"), params, where)
        if int(per) != per:
            raise SchemaError("ratio divisor must be an integer", where)
        per = int(per)
        add = spec.get("add_field")
        if add is not None:
            add = _ctx_field(add, where)
        return lambda ctx: ceil_div(getattr(ctx, fld), per) + (getattr(ctx, add) if add else 0)
    raise SchemaError(f"unknown formula kind {kind!r}", where)


def compile_condition(spec: Mapping[str, Any] | None, where: str) -> Callable[[BuildingContext], bool]:
    if not spec:
        return lambda ctx: True
    checks = []
    for key, value in spec.items():
        if key == "use_tags_any":
            tags = frozenset(str(t).lower() for t in value)
            checks.append(lambda ctx, tags=tags: bool(ctx.use_tags & tags))
        elif key == "long_term_accommodation":
            checks.append(lambda ctx, v=bool(value): ctx.long_term_accommodation is v)
        else:
            raise SchemaError(f"unknown condition {key!r}", where)
    return lambda ctx: all(c(ctx) for c in checks)


def _classes(values, where: str) -> frozenset[int]:
    classes = frozenset(int(c) for c in values)
    if not classes or not classes <= set(BUILDING_CLASSES):
        raise SchemaError("classes must be a non-empty subset of 1-9", where)
    return classes


def catalog_from_dict(data: Mapping[str, Any], overrides: Mapping[str, float] | None = None) -> Catalog:
    params = {}
    for name, p in data.get("parameters", {}).items():
        params[name] = p["value"] if isinstance(p, Mapping) else p
    params.update(overrides or {})
    rules = []
    seen = set()
    for i, r in enumerate(data.get("rules", [])):
        where = f"rules[{i}]"
        rid = r.get("rule_id")
        if not rid or rid in seen:
            raise SchemaError("missing or duplicate rule_id", where)
        seen.add(rid)
        rules.append(Rule(
            rule_id=rid,
            applicable_classes=_classes(r.get("classes", []), where),
            facility_type=FacilityType.parse(r["facility"]),
            required_fn=compile_formula(r.get("formula", {}), params, where),
            condition_fn=compile_condition(r.get("condition"), where),
            citation=r.get("citation", ""),
            formula=dict(r.get("formula", {})),
        ))
    nas = tuple(
        NotApplicable(_classes(n.get("classes", []), f"not_applicable[{i}]"),
                      FacilityType.parse(n["facility"]), n.get("reason", ""))
        for i, n in enumerate(data.get("not_applicable", []))
    )
    return Catalog(tuple(rules), nas, params, data.get("catalog", "catalog"), str(data.get("version", "0")))


def load_catalog(path: str | Path | None = None, overrides: Mapping[str, float] | None = None) -> Catalog:
    """Load a catalog JSON file; without a path, the bundled NCC catalog."""
    if path is None:
        text = resources.files(__package__).joinpath("ncc_catalog.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}", "<root>") from exc
    return catalog_from_dict(data, overrides)


def required_quantity(rule: Rule, ctx: BuildingContext) -> int:
    """Minimum count the rule demands; 0 when the rule does not apply to ``ctx``."""
    if not rule.applies(ctx):
        return 0
    return max(0, int(rule.required_fn(ctx)))


# -- reports ----------------------------------------------------------------

@dataclass(frozen=True)
class ReportEntry:
    rule_id: str
    facility_type: FacilityType
    required: int
    provided: int
    citation: str = ""

    @property
    def passed(self) -> bool:
        return self.provided >= self.required

    @property
    def shortfall(self) -> int:
        return max(0, self.required - self.provided)

    def to_dict(self) -> dict[str, Any]:
        return {
            "rule_id": self.rule_id,
            "facility": self.facility_type.value,
            "required": self.required,
            "provided": self.provided,
            "pass": self.passed,
            "shortfall": self.shortfall,
            "citation": self.citation,
        }


@dataclass(frozen=True)
class ComplianceReport:
    context: BuildingContext
    entries: tuple[ReportEntry, ...]
    not_applicable: tuple[dict[str, str], ...] = ()
    warnings: tuple[str, ...] = ()
    catalog: str = ""

    @property
    def overall_pass(self) -> bool:
        return all(e.passed for e in self.entries)

    def entry(self, rule_id: str) -> ReportEntry:
        for e in self.entries:
            if e.rule_id == rule_id:
                return e
        raise KeyError(rule_id)

    def to_dict(self) -> dict[str, Any]:
        return {
            "catalog": self.catalog,
            "context": self.context.to_dict(),
            "overall_pass": self.overall_pass,
            "entries": [e.to_dict() for e in self.entries],
            "not_applicable": list(self.not_applicable),
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        header = ("rule", "facility", "required", "provided", "status", "shortfall")
        rows = [(e.rule_id, e.facility_type.value, str(e.required), str(e.provided),
                 "PASS" if e.passed else "FAIL", str(e.shortfall)) for e in self.entries]
        widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
        lines += [fmt.format(*r) for r in rows]
        lines.append(f"overall: {'PASS' if self.overall_pass else 'FAIL'} (class {self.context.building_class})")
        return "\n".join(lines) + "\n"


def evaluate(results: Mapping[Any, int], ctx: BuildingContext, catalog: Catalog | Iterable[Rule] | None = None) -> ComplianceReport:
    """Compare provided counts with every applicable rule's minimum.

    Facility types absent from ``results`` count as 0 provided and are
    reported as data-gap warnings.
    """
    if not isinstance(ctx, BuildingContext):
        raise ValidationError("ctx must be a BuildingContext")
    if catalog is None:
        catalog = load_catalog()
    if not isinstance(catalog, Catalog):
        catalog = Catalog(tuple(catalog))
    provided: dict[FacilityType, int] = {}
    for key, n in results.items():
        if isinstance(n, bool) or not isinstance(n, int) or n < 0:
            raise ValidationError(f"provided count for {key} must be a non-negative integer, got {n!r}")
        provided[FacilityType.parse(key)] = n
    entries, warnings, skipped = [], [], []
    for rule in catalog.rules:
        if not rule.applies(ctx):
            if ctx.building_class in rule.applicable_classes:
                skipped.append({"rule_id": rule.rule_id, "facility": rule.facility_type.value,
                                "reason": "condition not met"})
            continue
        if rule.facility_type not in provided:
            msg = f"no count for {rule.facility_type.value}; treated as 0 for {rule.rule_id}"
            logger.warning(msg)
            warnings.append(msg)
        entries.append(ReportEntry(rule.rule_id, rule.facility_type, required_quantity(rule, ctx),
                                   provided.get(rule.facility_type, 0), rule.citation))
    for na in catalog.not_applicable:
        if ctx.building_class in na.classes:
            skipped.append({"rule_id": "", "facility": na.facility_type.value, "reason": na.reason})
    return ComplianceReport(ctx, tuple(entries), tuple(skipped), tuple(warnings), catalog.name)
