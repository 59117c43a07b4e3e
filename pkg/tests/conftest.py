import pytest

# filled by tests/test_acceptance.py: criterion id -> (passed, detail)
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k[0]), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key:<6} {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record():
    def _record(key: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE[key] = (bool(ok), detail)
        print(f"[acceptance {key}] {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return _record
