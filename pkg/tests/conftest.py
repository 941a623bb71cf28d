"""One PASS/FAIL line per acceptance criterion at the end of the run."""
from __future__ import annotations


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args))


def pytest_terminal_summary(terminalreporter):
    lines = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" not in props:
                continue
            n, title = props["criterion"]
            verdict = "PASS" if rep.passed else "FAIL"
            if lines.get(n, ("PASS",))[0] == "PASS":
                lines[n] = (verdict, f"criterion {n:>2} {verdict}  {title}  "
                                     f"{props.get('detail', '')}".rstrip())
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n][1])
