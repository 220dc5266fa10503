import pytest

# criterion number -> (title, status, detail); filled in by test_acceptance.py
ACCEPTANCE = {}


def record(num, title, ok, detail=""):
    prev = ACCEPTANCE.get(num)
    ok = ok and (prev is None or prev[1] == "PASS")
    ACCEPTANCE[num] = (title, "PASS" if ok else "FAIL", "; ".join(x for x in (prev and prev[2], detail) if x))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[num]
        tr.write_line(f"{status} [{num:2d}] {title}: {detail}")


@pytest.fixture
def acceptance_record():
    return record
