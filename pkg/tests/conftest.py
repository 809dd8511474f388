"""Shared pytest hooks.

The only customization is a per-criterion verdict table printed after the
run: every test in test_acceptance.py named ``test_criterion_NN_*`` guards
one release criterion, and this hook condenses their outcomes into one
PASS/FAIL line each so the gate can be read at a glance.
"""

from __future__ import annotations

_CRITERIA = {
    "01": "five benchmark seeds: mAP@50 >= 0.95, mAP@25 = 1.0, "
    "5 tracks per seed, under two minutes per run",
    "02": "perfect top-1 classification; class-anchor queries return "
    "instances of the right class",
    "03": "streamed box statistics match batch values on 200 sequences "
    "(relative error <= 1e-6)",
    "04": "assignment equals brute-force search on 1000 cost matrices "
    "up to 7x7",
    "05": "box index answers 500 operation sequences exactly like a "
    "linear scan",
    "06": "density clustering equals the quadratic reference on 100 "
    "point sets",
    "07": "sphere fusion: 99% of shell voxels within one voxel of the "
    "true surface",
    "08": "embedding banks stay bounded and unit-norm and track the "
    "naive oracle over 10k-step streams",
    "09": "detect+track+embed under 50 ms per 640x480 frame; bench "
    "reports the per-stage breakdown",
    "10": "re-running a benchmark scenario reproduces map and report "
    "byte for byte",
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes: dict[str, set[str]] = {}
    for status in ("passed", "failed", "error", "skipped"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid:
                continue
            name = nodeid.split("::")[-1]
            num = name.removeprefix("test_criterion_")[:2]
            outcomes.setdefault(num, set()).add(status)
    if not outcomes:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(outcomes):
        seen = outcomes[num]
        if "failed" in seen or "error" in seen:
            verdict = "FAIL"
        elif "passed" in seen:
            verdict = "PASS"
        else:
            verdict = "SKIP"
        text = _CRITERIA.get(num, "")
        terminalreporter.write_line(f"{verdict}  criterion {int(num)}: {text}")
