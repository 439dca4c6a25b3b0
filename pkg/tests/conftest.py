import numpy as np
import pytest

from shadownet.protocols import placeholder
from shadownet.ring import DEFAULT, RingParams, generator, share
from shadownet.transport import Session

L8 = RingParams(l=8, p=67, f_scale=0)


def run_shared(fn, *plain, params: RingParams = DEFAULT, seed=0, extra=(), session=None):
    """Share ring tensors ``plain`` between P0/P1, run ``fn(ctx, *shares, *extra)``
    on all three parties and reconstruct the result.

    Returns ``(reconstructed ring tensor, session)``.
    """
    rng = generator(seed, "test-inputs")
    halves = [share(params.reduce(p), rng, params) for p in plain]
    args = [tuple(h[0].payload for h in halves) + tuple(extra),
            tuple(h[1].payload for h in halves) + tuple(extra),
            tuple(placeholder(np.shape(p)) for p in plain) + tuple(extra)]
    s = session or Session("inproc", seed, params)
    out = s.run(fn, args)
    return params.add(out[0], out[1]), s


@pytest.fixture
def l8():
    return L8


@pytest.fixture
def inproc():
    with Session("inproc", 11) as s:
        yield s


ACCEPTANCE: dict = {}


def record_criterion(number: int, title: str, failures: list, detail: str = "") -> None:
    """Store one acceptance line; printed in the terminal summary."""
    status = "PASS" if not failures else "FAIL"
    line = f"criterion {number} [{status}] {title}"
    if detail:
        line += f" ({detail})"
    for f in failures:
        line += f"\n    failed: {f}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
