"""Collects the acceptance verdicts and prints them at the end of the run."""

import pytest

_VERDICTS = {}


class Verdicts:
    def record(self, number: int, title: str, ok: bool, detail: str) -> bool:
        _VERDICTS[number] = (title, bool(ok), detail)
        print(f"{'PASS' if ok else 'FAIL'} criterion {number:>2} {title}: {detail}", flush=True)
        return bool(ok)


@pytest.fixture(scope="session")
def verdicts():
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        title, ok, detail = _VERDICTS[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number:>2} {title}: {detail}")
    passed = sum(ok for _, ok, _ in _VERDICTS.values())
    terminalreporter.write_line(f"{passed}/{len(_VERDICTS)} acceptance criteria passed")
