import io

import numpy as np
import pytest
from PIL import Image

from facility_enum.core import Plan
from facility_enum.gateway.backends import Backend

_acceptance: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        doc = report.nodeid.split("::")[-1]
        _acceptance.append((doc, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance:
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {name}")


class ScriptedBackend(Backend):
    """Returns canned replies in order; records every prompt it sees."""

    name = "scripted"

    def __init__(self, replies, needs_image=True):
        super().__init__()
        self.replies = list(replies)
        self.prompts = []
        self.images = []
        self.needs_image = needs_image

    def complete(self, request):
        self._tick()
        self.prompts.append(request.prompt)
        self.images.append(request.image)
        return self.replies.pop(0)


def blank_png(width=64, height=48, color=(255, 255, 255)):
    buf = io.BytesIO()
    Image.new("RGB", (width, height), color).save(buf, format="PNG")
    return buf.getvalue()


def noise_png(width=80, height=60, seed=0):
    rng = np.random.default_rng(seed)
    buf = io.BytesIO()
    Image.fromarray(rng.integers(0, 256, (height, width, 3), dtype=np.uint8), "RGB").save(buf, format="PNG")
    return buf.getvalue()


@pytest.fixture
def small_plan():
    return Plan.from_bytes(blank_png(200, 100), "p1")
