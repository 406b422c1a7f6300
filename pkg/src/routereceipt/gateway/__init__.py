"""Simulated-provider gateway that emits a receipt for every completion."""
from routereceipt.gateway.service import (
    CompletionExchange,
    Gateway,
    ProbeError,
    ProbeReport,
    run_alias_drift_probe,
    run_fallback_probe,
)
from routereceipt.gateway.simulator import CompletionRequest, Decision, SimScenario, Simulator

__all__ = [
    "CompletionExchange",
    "CompletionRequest",
    "Decision",
    "Gateway",
    "ProbeError",
    "ProbeReport",
    "SimScenario",
    "Simulator",
    "run_alias_drift_probe",
    "run_fallback_probe",
]
