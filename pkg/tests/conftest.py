import json
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"
GOLDEN = Path(__file__).resolve().parent / "golden"

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


def load(path: Path):
    return json.loads(path.read_text("utf-8"))


@pytest.fixture
def golden_doc() -> dict:
    """The Northstar reference receipt with its envelope, as a fresh dict."""
    return load(FIXTURES / "northstar" / "receipt.json")


@pytest.fixture
def northstar_policy() -> dict:
    return load(FIXTURES / "northstar" / "policy.json")


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
