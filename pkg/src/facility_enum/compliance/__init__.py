from .rules import (
    BUILDING_CLASSES,
    BuildingContext,
    Catalog,
    ComplianceReport,
    NotApplicable,
    ReportEntry,
    Rule,
    catalog_from_dict,
    evaluate,
    load_catalog,
    required_quantity,
)

__all__ = [
    "BUILDING_CLASSES", "BuildingContext", "Catalog", "ComplianceReport", "NotApplicable",
    "ReportEntry", "Rule", "catalog_from_dict", "evaluate", "load_catalog", "required_quantity",
]
