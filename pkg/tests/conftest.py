import pytest

CRITERIA = {
    1: "gradient correctness",
    2: "CKA invariances",
    3: "alignment loss anchors",
    4: "decoupling coefficient",
    5: "zero-init extension",
    6: "flow and sampling oracles",
    7: "metric oracles",
    8: "smoke training regression",
    9: "directional ablation report",
    10: "persistence",
}


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture
def acceptance(request):
    """``acceptance(n, ok, detail)`` records one criterion verdict and asserts it."""
    store = request.config._acceptance

    def record(n: int, ok: bool, detail: str = "") -> None:
        store[n] = (bool(ok), detail)
        assert ok, f"criterion {n} ({CRITERIA[n]}) failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config._acceptance
    if not store:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n in store:
            ok, detail = store[n]
            tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {name}: {detail}")
        else:
            tr.write_line(f"[NOT RUN] {n:2d}. {name}: deselected, or aborted before a verdict")
