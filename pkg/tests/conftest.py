import numpy as np
import pytest

from calens import kernels


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    previous = kernels.current_backend()
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" and outcome != "error":
                continue
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props:
                status = "PASS" if outcome == "passed" else "FAIL"
                lines.append((props["criterion"], status, rep.duration))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, status, dur in sorted(lines, key=lambda x: int(x[0].split()[0][2:])):
            terminalreporter.write_line(f"{status}  {name}  ({dur:.2f}s)")


