"""Three-stage door-anchored counting for one facility type on one plan.

1. connection: ask, door by door, whether the door leads to the target room type;
2. consolidation: ask, pair by pair, whether two connected doors share a room,
   then keep one representative door per connected component of "yes" answers;
3. omission: highlight the representatives and ask how many instances are
   still unmarked.  The final count is representatives + unmarked.
"""

from __future__ import annotations

import itertools
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Sequence

from sklearn.base import BaseEstimator

from .core import DoorBox, EnumerationResult, FacilityType, Plan, Verdict, doors_by_id, final_count
from .errors import FacilityEnumError, StageError, ValidationError
from .gateway import ConnectionQuery, LLMGateway, OmissionQuery, SameRoomQuery
from .overlay import BoxRole, OverlaySpec
from .validation import check_plan_samples, check_truth

logger = logging.getLogger(__name__)

ALL_PAIRS = "all-pairs"
DISTANCE_GATED = "distance-gated"


@dataclass(frozen=True)
class PipelineConfig:
    facility_type: FacilityType = FacilityType.TOILET
    pair_strategy: str = ALL_PAIRS
    radius_px: float | None = None
    radius_fraction: float = 0.4  # of the image diagonal, used when radius_px is unset
    representative_rule: str = "highest-confidence"
    max_workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "facility_type", FacilityType.parse(self.facility_type))
        if self.pair_strategy not in (ALL_PAIRS, DISTANCE_GATED):
            raise ValidationError(f"unknown pair_strategy {self.pair_strategy!r}")
        if self.pair_strategy == DISTANCE_GATED:
            if self.radius_px is not None and self.radius_px <= 0:
                raise ValidationError("radius_px must be positive")
            if self.radius_px is None and self.radius_fraction <= 0:
                raise ValidationError("radius_fraction must be positive")
        if self.representative_rule != "highest-confidence":
            raise ValidationError(f"unknown representative_rule {self.representative_rule!r}")
        if self.max_workers < 1:
            raise ValidationError("max_workers must be >= 1")

    def radius_for(self, plan: Plan) -> float:
        return self.radius_px if self.radius_px is not None else self.radius_fraction * plan.ref.diagonal

    def to_dict(self) -> dict[str, Any]:
        return {
            "facility_type": self.facility_type.value,
            "pair_strategy": self.pair_strategy,
            "radius_px": self.radius_px,
            "radius_fraction": self.radius_fraction,
            "representative_rule": self.representative_rule,
        }


class UnionFind:
    def __init__(self, items: Iterable[int] = ()):
        self.parent = {x: x for x in items}

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)

    def groups(self) -> list[list[int]]:
        out: dict[int, list[int]] = {}
        for x in sorted(self.parent):
            out.setdefault(self.find(x), []).append(x)
        return sorted(out.values())


@dataclass
class ConsolidationGraph:
    nodes: tuple[int, ...]
    yes_edges: set[tuple[int, int]] = field(default_factory=set)

    def add_edge(self, a: int, b: int) -> None:
        if a == b or a not in self.nodes or b not in self.nodes:
            raise ValidationError(f"edge ({a}, {b}) must join two distinct nodes of the graph")
        self.yes_edges.add((min(a, b), max(a, b)))

    def components(self) -> list[list[int]]:
        uf = UnionFind(self.nodes)
        for a, b in sorted(self.yes_edges):
            uf.union(a, b)
        return uf.groups()


def pick_representative(component: Sequence[int], table: Mapping[int, DoorBox]) -> int:
    return min(component, key=lambda d: (-table[d].confidence, d))


def _map(fn: Callable, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def _plan_dims(plan: Plan) -> tuple[int, int]:
    return plan.ref.width_px, plan.ref.height_px


def stage1_connection(
    doors: Sequence[DoorBox], plan: Plan, gateway: LLMGateway, cfg: PipelineConfig,
    trace: dict | None = None,
) -> list[int]:
    """Door ids whose connection verdict is yes, ascending."""
    table = doors_by_id(doors)
    ordered = sorted(table)
    w, h = _plan_dims(plan)

    def ask(door_id):
        overlay = OverlaySpec.for_image([table[door_id]], BoxRole.QUERIED, w, h)
        try:
            return gateway.ask(ConnectionQuery(cfg.facility_type, door_id), plan, overlay, table)
        except FacilityEnumError as exc:
            raise StageError("connection", cfg.facility_type.value, exc, f"door {door_id}") from exc

    answers = _map(ask, ordered, cfg.max_workers)
    if trace is not None:
        trace["queries"] = [
            {"door": d, "verdict": a.verdict.value, "raw": a.raw_text, "cache_key": k.digest}
            for d, (a, k) in zip(ordered, answers)
        ]
    return [d for d, (a, _) in zip(ordered, answers) if a.verdict is Verdict.YES]


def eligible_pairs(ids: Sequence[int], table: Mapping[int, DoorBox], plan: Plan,
                   cfg: PipelineConfig) -> list[tuple[int, int]]:
    pairs = list(itertools.combinations(sorted(ids), 2))
    if cfg.pair_strategy == DISTANCE_GATED:
        radius = cfg.radius_for(plan)

        def near(p):
            (ax, ay), (bx, by) = table[p[0]].center, table[p[1]].center
            return ((ax - bx) ** 2 + (ay - by) ** 2) ** 0.5 <= radius

        pairs = [p for p in pairs if near(p)]
    return pairs


def stage2_consolidate(
    connected: Sequence[int], doors: Sequence[DoorBox], plan: Plan, gateway: LLMGateway,
    cfg: PipelineConfig, trace: dict | None = None,
) -> list[int]:
    """One representative door id per room, ascending."""
    if len(set(connected)) != len(connected):
        raise ValidationError("connected door ids must be duplicate-free")
    table = doors_by_id(doors)
    pairs = eligible_pairs(connected, table, plan, cfg)
    w, h = _plan_dims(plan)

    def ask(pair):
        a, b = pair
        overlay = OverlaySpec.for_image([table[a], table[b]], BoxRole.QUERIED, w, h)
        try:
            return gateway.ask(SameRoomQuery(a, b, cfg.facility_type), plan, overlay, table)
        except FacilityEnumError as exc:
            raise StageError("consolidation", cfg.facility_type.value, exc, f"doors {a},{b}") from exc

    answers = _map(ask, pairs, cfg.max_workers)
    graph = ConsolidationGraph(tuple(sorted(connected)))
    for (a, b), (ans, _) in zip(pairs, answers):
        if ans.verdict is Verdict.YES:
            graph.add_edge(a, b)
    components = graph.components()

    room_of = {d: i for i, comp in enumerate(components) for d in comp}
    conflicts = [
        list(p) for p, (ans, _) in zip(pairs, answers)
        if ans.verdict is Verdict.NO and room_of[p[0]] == room_of[p[1]]
    ]
    if conflicts:
        logger.warning(
            "plan %s %s: %d 'no' answers contradict transitive 'yes' chains; components kept",
            plan.plan_id, cfg.facility_type.value, len(conflicts),
        )
    reps = sorted(pick_representative(c, table) for c in components)
    if trace is not None:
        trace["pair_strategy"] = cfg.pair_strategy
        if cfg.pair_strategy == DISTANCE_GATED:
            trace["radius_px"] = cfg.radius_for(plan)
        trace["queries"] = [
            {"pair": list(p), "verdict": a.verdict.value, "raw": a.raw_text, "cache_key": k.digest}
            for p, (a, k) in zip(pairs, answers)
        ]
        trace["yes_edges"] = [list(e) for e in sorted(graph.yes_edges)]
        trace["components"] = components
        trace["representatives"] = [
            {"component": c, "door": pick_representative(c, table),
             "confidence": table[pick_representative(c, table)].confidence}
            for c in components
        ]
        trace["consistency_warnings"] = conflicts
    return reps


def stage3_omission(
    representatives: Sequence[int], doors: Sequence[DoorBox], plan: Plan, gateway: LLMGateway,
    cfg: PipelineConfig, trace: dict | None = None,
) -> int:
    table = doors_by_id(doors)
    w, h = _plan_dims(plan)
    overlay = OverlaySpec.for_image([table[d] for d in sorted(representatives)], BoxRole.RETAINED, w, h)
    try:
        answer, key = gateway.ask(OmissionQuery(cfg.facility_type, tuple(representatives)), plan, overlay, table)
        n_missing = answer.count
    except FacilityEnumError as exc:
        raise StageError("omission", cfg.facility_type.value, exc) from exc
    if trace is not None:
        trace["queries"] = [{"marked": sorted(representatives), "count": n_missing,
                             "raw": answer.raw_text, "cache_key": key.digest}]
    return n_missing


def enumerate_facility(plan: Plan, doors: Sequence[DoorBox], gateway: LLMGateway,
                       cfg: PipelineConfig) -> EnumerationResult:
    doors = list(doors)
    for d in doors:
        if not d.within(plan.ref.width_px, plan.ref.height_px):
            raise ValidationError(f"door {d.door_id} lies outside plan {plan.plan_id}")
    table = doors_by_id(doors)
    prov: dict[str, Any] = {"plan_id": plan.plan_id, "config": cfg.to_dict(),
                            "backend": gateway.backend.name, "template_version": gateway.template_version,
                            "stages": {}, "timings_s": {}}
    t0 = time.perf_counter()
    s1: dict = {}
    connected = stage1_connection(doors, plan, gateway, cfg, s1)
    prov["stages"]["connection"] = s1
    t1 = time.perf_counter()
    s2: dict = {}
    if connected:
        reps = stage2_consolidate(connected, doors, plan, gateway, cfg, s2)
    else:
        reps = []
        s2["skipped"] = True
    prov["stages"]["consolidation"] = s2
    t2 = time.perf_counter()
    s3: dict = {}
    n_missing = stage3_omission(reps, doors, plan, gateway, cfg, s3)
    prov["stages"]["omission"] = s3
    t3 = time.perf_counter()
    prov["timings_s"] = {"connection": t1 - t0, "consolidation": t2 - t1, "omission": t3 - t2}
    prov["doors"] = [table[d].to_dict() for d in sorted(table)]
    return EnumerationResult(
        plan_id=plan.plan_id,
        facility_type=cfg.facility_type,
        door_set_size=len(doors),
        connected_doors=tuple(connected),
        representatives=tuple(reps),
        n_missing=n_missing,
        n_final=final_count(len(reps), n_missing),
        provenance=prov,
    )


def enumerate_plan(plan: Plan, doors: Sequence[DoorBox], gateway: LLMGateway,
                   facilities: Iterable[FacilityType | str],
                   base: PipelineConfig | None = None) -> dict[FacilityType, EnumerationResult | StageError]:
    """Run every facility type; a failure in one facility leaves the others intact."""
    base = base or PipelineConfig()
    out: dict[FacilityType, EnumerationResult | StageError] = {}
    for fac in facilities:
        fac = FacilityType.parse(fac)
        try:
            out[fac] = enumerate_facility(plan, doors, gateway, replace(base, facility_type=fac))
        except StageError as exc:
            logger.error("%s", exc)
            out[fac] = exc
    return out


def check_chain(result: EnumerationResult) -> None:
    """Re-verify count invariants from the provenance record alone."""
    prov = result.provenance
    n = len(prov["doors"])
    d_t = [q["door"] for q in prov["stages"]["connection"]["queries"] if q["verdict"] == "yes"]
    s2 = prov["stages"]["consolidation"]
    m = 0 if s2.get("skipped") else len(s2["representatives"])
    n_missing = prov["stages"]["omission"]["queries"][0]["count"]
    assert list(result.connected_doors) == d_t
    assert 0 <= m <= len(d_t) <= n == result.door_set_size
    assert result.n_final == m + n_missing
    assert result.n_final >= m


def baseline_count(plan: Plan, gateway: LLMGateway, facility: FacilityType | str) -> int:
    """Single whole-image count question, no door anchors."""
    from .gateway import CountQuery

    answer, _ = gateway.ask(CountQuery(FacilityType.parse(facility)), plan, None)
    return answer.count


@dataclass(frozen=True)
class PlanSample:
    """One estimator input row: a plan raster and its detected doors."""

    plan: Plan
    doors: tuple[DoorBox, ...] = ()


class FacilityEnumerator(BaseEstimator):
    """Estimator-style wrapper around the three-stage pipeline.

    ``predict`` maps each :class:`PlanSample` to ``{facility: count}``;
    ``score`` is the exact-count accuracy over every (plan, facility) cell.
    Nothing is learned, so ``fit`` only validates its input.
    """

    def __init__(self, gateway=None, facility_types=("toilet",), pair_strategy=ALL_PAIRS,
                 radius_fraction=0.4, max_workers=1, door_filter=None, on_error="raise"):
        self.gateway = gateway
        self.facility_types = facility_types
        self.pair_strategy = pair_strategy
        self.radius_fraction = radius_fraction
        self.max_workers = max_workers
        self.door_filter = door_filter
        self.on_error = on_error

    def _config(self) -> PipelineConfig:
        return PipelineConfig(pair_strategy=self.pair_strategy, radius_fraction=self.radius_fraction,
                              max_workers=self.max_workers)

    def fit(self, X, y=None):
        X = check_plan_samples(X)
        if y is not None:
            check_truth(y, len(X))
        if self.on_error not in ("raise", "ignore"):
            raise ValidationError("on_error must be 'raise' or 'ignore'")
        self.facility_types_ = tuple(FacilityType.parse(f) for f in self.facility_types)
        self._config()
        return self

    def _ensure_ready(self):
        if self.gateway is None:
            raise ValidationError("FacilityEnumerator needs a gateway")
        if not hasattr(self, "facility_types_"):
            self.facility_types_ = tuple(FacilityType.parse(f) for f in self.facility_types)

    def enumerate(self, X) -> list[dict[FacilityType, EnumerationResult | StageError]]:
        self._ensure_ready()
        X = check_plan_samples(X)
        doors = [list(s.doors) for s in X]
        if self.door_filter is not None:
            doors = self.door_filter.transform(doors)
        return [enumerate_plan(s.plan, d, self.gateway, self.facility_types_, self._config())
                for s, d in zip(X, doors)]

    def predict(self, X) -> list[dict[str, int | None]]:
        out = []
        for per_plan in self.enumerate(X):
            row: dict[str, int | None] = {}
            for fac, res in per_plan.items():
                if isinstance(res, StageError):
                    if self.on_error == "raise":
                        raise res
                    row[fac.value] = None
                else:
                    row[fac.value] = res.n_final
            out.append(row)
        return out

    def score(self, X, y) -> float:
        y = check_truth(y, len(X))
        preds = self.predict(X)
        cells = [(p.get(f.value), t.get(f.value, 0)) for p, t in zip(preds, y) for f in self.facility_types_]
        return sum(a == b for a, b in cells) / len(cells) if cells else 0.0
