"""One test per acceptance criterion; each prints a PASS/FAIL line with the measured values."""

import json
import random
import statistics
import time
from collections import deque

import pytest

from facility_enum import DoorBox, FacilityType, LLMGateway, OracleBackend, OracleFixture, Plan, iou
from facility_enum.cli import main as cli_main
from facility_enum.compliance import BUILDING_CLASSES, BuildingContext, load_catalog, required_quantity
from facility_enum.enumerator import PipelineConfig, check_chain, enumerate_facility, stage2_consolidate
from facility_enum.evaluation import (
    DatasetManifest, EvalConfig, accuracy, merge_tile_detections, plan_tiles, run_comparison, tiled_detections,
)
from facility_enum.synthetic import WindowDetector, generate, random_spec, write_dataset

from conftest import blank_png

ALL_FACILITIES = tuple(FacilityType)


def verdict(name, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def suite():
    return [generate(random_spec(seed)) for seed in range(200)]


def test_oracle_exactness(tmp_path):
    start = time.perf_counter()
    specs = [random_spec(seed) for seed in range(200)]
    manifest = DatasetManifest.load(write_dataset(specs, tmp_path, "synthetic-200"))
    gw = LLMGateway(OracleBackend(manifest.load_fixtures()))
    result = run_comparison(manifest, {"cot": gw}, EvalConfig(facilities=ALL_FACILITIES))
    elapsed = time.perf_counter() - start

    door_counts = [len(e.load_doors()) for e in manifest.plans]
    scenarios = [generate(s) for s in specs]
    coverage = {
        "min_doors": min(door_counts),
        "max_doors": max(door_counts),
        "multi_door_rooms": sum(len(r.doors) > 1 for sc in scenarios for r in sc.rooms),
        "doorless_rooms": sum(r.doorless for sc in scenarios for r in sc.rooms),
        "types_present": sum(any(e.truth.get(f, 0) for e in manifest.plans) for f in ALL_FACILITIES),
    }
    per_type = {r.facility: r.accuracy for r in result.rows}
    ok = (
        len(manifest.plans) >= 200
        and all(per_type[f.value] == 1.0 for f in ALL_FACILITIES)
        and not result.failures
        and coverage["min_doors"] == 0 and coverage["max_doors"] == 25
        and coverage["multi_door_rooms"] > 0 and coverage["doorless_rooms"] > 0
        and coverage["types_present"] == len(ALL_FACILITIES)
        and elapsed < 60.0
    )
    verdict("oracle exactness", ok, f"plans={len(manifest.plans)} accuracy={per_type} {coverage} "
                                    f"runtime={elapsed:.1f}s")


def bfs_components(n, edges):
    adj = {i: [] for i in range(n)}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen, comps = set(), []
    for s in range(n):
        if s in seen:
            continue
        seen.add(s)
        queue, comp = deque([s]), []
        while queue:
            x = queue.popleft()
            comp.append(x)
            for y in adj[x]:
                if y not in seen:
                    seen.add(y)
                    queue.append(y)
        comps.append(sorted(comp))
    return sorted(comps)


def test_consolidation_equivalence():
    rng = random.Random(2024)
    plan = Plan.from_bytes(blank_png(800, 100), "graphs")
    doors = [DoorBox(i, (10 + 60 * i, 20, 40 + 60 * i, 50), round(rng.uniform(0.5, 1.0), 3)) for i in range(12)]
    mismatches, checked = [], 0
    for g in range(1000):
        n = rng.randint(1, 12)
        density = rng.random()
        edges = {(a, b) for a in range(n) for b in range(a + 1, n) if rng.random() < density * 0.5}
        fx = OracleFixture("graphs", {FacilityType.TOILET: {i: True for i in range(n)}}, edges)
        trace = {}
        reps = stage2_consolidate(list(range(n)), doors[:n], plan, LLMGateway(OracleBackend(fx)),
                                  PipelineConfig(), trace)
        expected = bfs_components(n, edges)
        if trace["components"] != expected or len(reps) != len(expected) or not len(reps) <= n:
            mismatches.append(g)
        checked += 1
    verdict("consolidation equivalence", checked == 1000 and not mismatches,
            f"graphs={checked} mismatches={mismatches[:5]}")


def test_chain_invariants(suite):
    runs, violations = 0, []
    for eps in (0.0, 0.1, 0.3):
        gw = LLMGateway(OracleBackend({sc.plan.plan_id: sc.fixture for sc in suite}, eps, seed=17))
        for sc in suite:
            for fac in ALL_FACILITIES:
                res = enumerate_facility(sc.plan, sc.doors, gw, PipelineConfig(fac))
                runs += 1
                try:
                    check_chain(res)
                    assert res.n_final == len(res.representatives) + res.n_missing
                except AssertionError:
                    violations.append((sc.plan.plan_id, fac.value, eps))
    verdict("formula and chain invariants", runs >= 200 * 9 * 3 and not violations,
            f"runs={runs} violations={violations[:5]}")


def test_metric_arithmetic():
    def pct(n_correct, n_plans):
        truth = {f"p{i}": 1 for i in range(n_plans)}
        preds = {k: (1 if i < n_correct else 2) for i, k in enumerate(truth)}
        return 100 * accuracy(preds, truth)

    cubi, sesyd = pct(85, 97), pct(46, 48)
    ok = abs(cubi - 87.63) <= 0.01 and abs(sesyd - 95.83) <= 0.01
    verdict("metric arithmetic", ok, f"85/97={cubi:.4f}% 46/48={sesyd:.4f}%")


def test_rule_catalog():
    cat = load_catalog()
    problems = []
    parking = cat.rule("parking.accessible-ratio")
    p = lambda n: required_quantity(parking, BuildingContext(5, standard_parking_spaces=n))
    if (p(50), p(51), p(0)) != (1, 2, 0):
        problems.append(("parking examples", p(50), p(51), p(0)))
    problems += [("parking ceil", n) for n in range(0, 501) if p(n) != -(-n // 50)]

    exits = cat.rule("exit.per-floor")
    for cls in range(2, 10):
        for floors in range(1, 11):
            got = required_quantity(exits, BuildingContext(cls, floors=floors))
            if got != 2 * floors:
                problems.append(("exits", cls, floors, got))

    sanitary = cat.rule("sanitary.class3")
    for residents in range(0, 201):
        got = required_quantity(sanitary, BuildingContext(3, residents_without_private_amenities=residents))
        if got != -(-residents // 10):
            problems.append(("class-3 sanitary", residents, got))

    gaps = [(c, f.value) for c in BUILDING_CLASSES for f in FacilityType if not cat.resolve(c, f)]
    problems += [("unresolved", g) for g in gaps]
    verdict("rule catalog", not problems, f"problems={problems[:5]} pairs_checked={9 * len(FacilityType)}")


def test_error_injection_monotonicity(tmp_path):
    specs = [random_spec(seed) for seed in range(1000, 1050)]
    manifest = DatasetManifest.load(write_dataset(specs, tmp_path, "synthetic-50"))
    fixtures = manifest.load_fixtures()
    cfg = EvalConfig(facilities=ALL_FACILITIES)
    medians = {}
    for eps in (0.0, 0.05, 0.1, 0.2):
        scores = [run_comparison(manifest, {"cot": LLMGateway(OracleBackend(fixtures, eps, seed))}, cfg).overall("cot")
                  for seed in range(20)]
        medians[eps] = statistics.median(scores)
    values = list(medians.values())
    ok = medians[0.0] == 1.0 and all(a >= b for a, b in zip(values, values[1:]))
    verdict("error-injection monotonicity", ok, "median accuracy " +
            " ".join(f"eps={e}:{m:.4f}" for e, m in medians.items()))


def straddles(door, tiling):
    x0, y0, x1, y1 = door.box
    for _, (wx0, wy0, wx1, wy1) in tiling.tiles:
        touches = x0 < wx1 and wx0 < x1 and y0 < wy1 and wy0 < y1
        inside = wx0 <= x0 and wy0 <= y0 and x1 <= wx1 and y1 <= wy1
        if touches and not inside:
            return True
    return False


def test_tiling_equivalence():
    tile, overlap = 320, 64
    clean, straddled, problems = 0, 0, []
    for seed in range(300):
        sc = generate(random_spec(seed, width=768, height=768))
        tiling = plan_tiles(sc.plan, tile, overlap)
        detector = WindowDetector(sc.doors)
        whole = detector.detect((0, 0, 768, 768))
        merged = tiled_detections(sc.plan, detector.detect, tile, overlap)
        if any(straddles(d, tiling) for d in sc.doors):
            straddled += 1
            matches = [[m for m in merged if iou(m, d) >= 0.5] for d in sc.doors]
            if len(merged) != len(sc.doors) or any(len(m) != 1 for m in matches):
                problems.append(("straddle", seed, len(merged), len(sc.doors)))
            continue
        clean += 1
        if [d.box for d in merged] != [d.box for d in whole]:
            problems.append(("boxes", seed))
            continue
        gw = LLMGateway(OracleBackend(sc.fixture))
        for fac in ALL_FACILITIES:
            a = enumerate_facility(sc.plan, whole, gw, PipelineConfig(fac))
            b = enumerate_facility(sc.plan, merged, gw, PipelineConfig(fac))
            if a != b:
                problems.append(("enumeration", seed, fac.value))

    # hand-built straddle: the same door seen by two tiles, global iou 0.92
    a = DoorBox(0, (500, 100, 550, 150), 0.9)
    b_local = DoorBox(0, (104, 100, 150, 150), 0.8)
    pair_iou = iou(a, b_local.translated(400, 0))
    hand = merge_tile_detections([((0, 0), [a]), ((400, 0), [b_local])], 0.8)
    if abs(pair_iou - 0.92) > 1e-9 or len(hand) != 1:
        problems.append(("hand straddle", pair_iou, len(hand)))

    ok = not problems and clean >= 20 and straddled >= 20
    verdict("tiling equivalence", ok, f"clean={clean} straddle={straddled} problems={problems[:5]}")


def test_cache_determinism(tmp_path, capsys):
    manifest = write_dataset([random_spec(seed) for seed in range(500, 520)], tmp_path / "data", "cache-check")
    cache = tmp_path / "cache"
    codes = []
    for run in ("first", "second"):
        codes.append(cli_main(["evaluate", "--manifest", str(manifest), "--cache-dir", str(cache),
                               "--backends", "baseline,cot", "--facility", "all",
                               "--oracle-error-rate", "0.1", "--oracle-seed", "3", "--out", str(tmp_path / run)]))
    first = (tmp_path / "first" / "results.csv").read_bytes()
    second = (tmp_path / "second" / "results.csv").read_bytes()
    meta1 = json.loads((tmp_path / "first" / "run_meta.json").read_text())
    meta2 = json.loads((tmp_path / "second" / "run_meta.json").read_text())
    ok = (codes == [0, 0] and first == second and meta1["backend_invocations"] > 0
          and meta2["backend_invocations"] == 0)
    verdict("cache determinism", ok, f"exit={codes} identical_csv={first == second} "
                                     f"invocations={meta1['backend_invocations']}->{meta2['backend_invocations']}")
