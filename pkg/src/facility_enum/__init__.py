"""Door-anchored facility counting on floor plans, with rule checks and evaluation."""

__version__ = "0.1.0"

from .core import DoorBox, EnumerationResult, FacilityType, FloorPlanRef, Plan, Verdict, final_count, iou
from .detection import DetectorConfig, DoorFilter, filter_doors, load_detections
from .enumerator import FacilityEnumerator, PipelineConfig, PlanSample, enumerate_facility, enumerate_plan
from .gateway import LLMGateway, OracleBackend, OracleFixture, RemoteBackend

__all__ = [
    "DoorBox", "EnumerationResult", "FacilityType", "FloorPlanRef", "Plan", "Verdict", "final_count", "iou",
    "DetectorConfig", "DoorFilter", "filter_doors", "load_detections",
    "FacilityEnumerator", "PipelineConfig", "PlanSample", "enumerate_facility", "enumerate_plan",
    "LLMGateway", "OracleBackend", "OracleFixture", "RemoteBackend",
]
