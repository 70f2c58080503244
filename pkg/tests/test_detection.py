import itertools
import json
import random

import httpx
import pytest
from hypothesis import given, settings, strategies as st

from facility_enum.core import DoorBox, FloorPlanRef, iou
from facility_enum.detection import (
    DetectionManifest, DetectorConfig, DoorFilter, fetch_detections, filter_doors, load_detections,
)
from facility_enum.errors import ConfigError, ProtocolError, SchemaError, TransportError, ValidationError

PLAN = FloorPlanRef("plan-a", "a" * 64, 100, 80, "unused.png")


def write_manifest(tmp_path, detections, plan_id="plan-a"):
    path = tmp_path / "det.json"
    path.write_text(json.dumps({"plan_id": plan_id, "detector": "test", "detections": detections}))
    return path


def test_load_three_entries(tmp_path):
    path = write_manifest(tmp_path, [
        {"box": [0, 0, 10, 10], "confidence": 0.9},
        {"box": [20, 20, 30, 30], "confidence": 0.8},
        {"box": [40, 40, 50, 50], "confidence": 0.7},
    ])
    doors = load_detections(path, PLAN)
    assert [d.door_id for d in doors] == [0, 1, 2]
    assert doors[1].box == (20, 20, 30, 30)


def test_load_rejects_confidence_above_one(tmp_path):
    path = write_manifest(tmp_path, [{"box": [0, 0, 10, 10], "confidence": 1.2}])
    with pytest.raises(ValidationError):
        load_detections(path, PLAN)


def test_load_clamps_overrun_and_warns(tmp_path, caplog):
    path = write_manifest(tmp_path, [{"box": [90, 10, 120, 20], "confidence": 0.9}])
    warnings = []
    doors = load_detections(path, PLAN, warnings)
    assert doors[0].box == (90, 10, min(120, PLAN.width_px), 20)
    assert len(warnings) == 1 and "clamped" in warnings[0]
    assert "clamped" in caplog.text


def test_load_drops_box_entirely_outside(tmp_path):
    path = write_manifest(tmp_path, [{"box": [150, 10, 160, 20], "confidence": 0.9},
                                     {"box": [0, 0, 5, 5], "confidence": 0.9}])
    doors = load_detections(path, PLAN)
    assert [(d.door_id, d.box) for d in doors] == [(0, (0, 0, 5, 5))]


@pytest.mark.parametrize("doc, field", [
    ({"detector": "x", "detections": []}, "plan_id"),
    ({"plan_id": "p", "detections": [{"box": [0, 0, 1], "confidence": 0.5}]}, "detections[0].box"),
    ({"plan_id": "p", "detections": [{"box": [0, 0, 1, 1]}]}, "detections[0].confidence"),
    ({"plan_id": "p", "detections": "nope"}, "detections"),
])
def test_schema_errors_name_field(tmp_path, doc, field):
    path = tmp_path / "d.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaError) as err:
        load_detections(path, PLAN)
    assert err.value.field == field


def test_manifest_round_trip():
    m = DetectionManifest("p", "det", [((0.0, 0.0, 4.0, 4.0), 0.5)])
    assert DetectionManifest.from_dict(m.to_dict()).entries == m.entries


# -- remote detector -----------------------------------------------------------

def service(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def test_fetch_healthy_service():
    seen = {}

    def handler(request):
        seen["ctype"] = request.headers["content-type"]
        seen["body"] = request.content
        return httpx.Response(200, json={"plan_id": "plan-a", "detector": "svc", "detections": [
            {"box": [1, 1, 9, 9], "confidence": 0.9}, {"box": [20, 20, 29, 29], "confidence": 0.6}]})

    cfg = DetectorConfig(endpoint="http://det/detect", backoff_s=0)
    doors = fetch_detections(PLAN, cfg, image=b"PNGDATA", client=service(handler))
    assert len(doors) == 2
    assert seen == {"ctype": "image/png", "body": b"PNGDATA"}


def test_fetch_retries_then_transport_error():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(503)

    cfg = DetectorConfig(endpoint="http://det/detect", max_attempts=3, backoff_s=0)
    with pytest.raises(TransportError) as err:
        fetch_detections(PLAN, cfg, image=b"x", client=service(handler))
    assert err.value.attempts == 3 and len(calls) == 3
    assert "3 attempts" in str(err.value)


def test_fetch_recovers_after_transient_failure():
    state = {"n": 0}

    def handler(request):
        state["n"] += 1
        if state["n"] == 1:
            raise httpx.ConnectError("boom")
        return httpx.Response(200, json={"plan_id": "plan-a", "detections": []})

    cfg = DetectorConfig(endpoint="http://det", backoff_s=0)
    assert fetch_detections(PLAN, cfg, image=b"x", client=service(handler)) == []
    assert state["n"] == 2


def test_fetch_missing_confidence_is_protocol_error():
    def handler(request):
        return httpx.Response(200, json={"plan_id": "plan-a", "detections": [{"box": [0, 0, 5, 5]}]})

    with pytest.raises(ProtocolError):
        fetch_detections(PLAN, DetectorConfig(endpoint="http://d"), image=b"x", client=service(handler))


def test_fetch_uses_env_endpoint(monkeypatch):
    monkeypatch.setenv("FE_DETECTOR_URL", "http://from-env/detect")
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        return httpx.Response(200, json={"plan_id": "plan-a", "detections": []})

    fetch_detections(PLAN, DetectorConfig(), image=b"x", client=service(handler))
    assert seen["url"] == "http://from-env/detect"


def test_fetch_without_endpoint(monkeypatch):
    monkeypatch.delenv("FE_DETECTOR_URL", raising=False)
    with pytest.raises(ConfigError):
        fetch_detections(PLAN, DetectorConfig(), image=b"x")


# -- filtering -------------------------------------------------------------------

def test_confidence_gate():
    doors = [DoorBox(0, (0, 0, 10, 10), 0.9), DoorBox(1, (20, 20, 30, 30), 0.3)]
    out = filter_doors(doors, DetectorConfig(confidence_threshold=0.5))
    assert [(d.door_id, d.confidence) for d in out] == [(0, 0.9)]


def test_identical_boxes_keep_higher_confidence():
    doors = [DoorBox(0, (0, 0, 10, 10), 0.7), DoorBox(1, (0, 0, 10, 10), 0.8)]
    out = filter_doors(doors, DetectorConfig(dedup_iou_threshold=0.9))
    assert len(out) == 1 and out[0].confidence == 0.8 and out[0].door_id == 0


def test_tie_keeps_lower_id():
    doors = [DoorBox(0, (0, 0, 10, 10), 0.8), DoorBox(1, (1, 0, 11, 10), 0.8)]
    out = filter_doors(doors, DetectorConfig(dedup_iou_threshold=0.5))
    assert [d.box for d in out] == [(0, 0, 10, 10)]


def test_empty():
    assert filter_doors([], DetectorConfig()) == []


def test_reindexes_densely():
    doors = [DoorBox(i, (i * 20, 0, i * 20 + 10, 10), c) for i, c in enumerate([0.9, 0.1, 0.9, 0.2, 0.9])]
    assert [d.door_id for d in filter_doors(doors)] == [0, 1, 2]


door_lists = st.lists(
    st.tuples(st.integers(0, 60), st.integers(0, 60), st.integers(2, 20), st.integers(2, 20),
              st.sampled_from([0.2, 0.5, 0.6, 0.8, 0.9, 1.0])),
    max_size=12,
).map(lambda xs: [DoorBox(i, (x, y, x + w, y + h), c) for i, (x, y, w, h, c) in enumerate(xs)])
cfgs = st.builds(DetectorConfig, st.sampled_from([0.0, 0.5, 0.7]), st.sampled_from([0.3, 0.5, 0.8, 1.0]))


@given(door_lists, cfgs)
def test_filter_properties(doors, cfg):
    out = filter_doors(doors, cfg)
    assert filter_doors(out, cfg) == out  # idempotent
    assert len(out) <= len(doors)
    inputs = {(d.box, d.confidence) for d in doors}
    assert all((d.box, d.confidence) in inputs for d in out)
    assert all(d.confidence >= cfg.confidence_threshold for d in out)
    assert all(iou(a, b) < cfg.dedup_iou_threshold for a, b in itertools.combinations(out, 2))


@settings(max_examples=50)
@given(door_lists, cfgs, st.randoms(use_true_random=False))
def test_filter_permutation_independent(doors, cfg, rnd):
    shuffled = list(doors)
    rnd.shuffle(shuffled)
    key = lambda ds: sorted((d.box, d.confidence) for d in ds)
    assert key(filter_doors(shuffled, cfg)) == key(filter_doors(doors, cfg))


def test_door_filter_transformer():
    from sklearn.base import clone

    f = DoorFilter(confidence_threshold=0.5)
    assert f.get_params() == {"confidence_threshold": 0.5, "dedup_iou_threshold": 0.8}
    g = clone(f).set_params(confidence_threshold=0.95)
    X = [[DoorBox(0, (0, 0, 5, 5), 0.9)], []]
    assert f.fit_transform(X) == [[DoorBox(0, (0, 0, 5, 5), 0.9)], []]
    assert g.fit(X).transform(X) == [[], []]


def test_detector_config_ranges():
    with pytest.raises(ValidationError):
        DetectorConfig(confidence_threshold=1.5)
