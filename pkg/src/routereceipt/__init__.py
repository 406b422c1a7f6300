"""Route receipts: per-answer records of the service path behind an AI response."""
from routereceipt.receipt import (
    SCHEMA_ID,
    SCHEMA_VERSION,
    InvalidReceiptError,
    RouteReceipt,
    ValidationReport,
    canonical_serialize,
    check_consistency,
    export_schema,
    parse_receipt,
    validate_document,
)

__all__ = [
    "SCHEMA_ID",
    "SCHEMA_VERSION",
    "InvalidReceiptError",
    "RouteReceipt",
    "ValidationReport",
    "canonical_serialize",
    "check_consistency",
    "export_schema",
    "parse_receipt",
    "validate_document",
]

__version__ = "0.1.0"
