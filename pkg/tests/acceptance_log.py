"""Collects one verdict line per acceptance criterion for the terminal summary."""

LINES: list[str] = []


def record(criterion: str, passed: bool, detail: str) -> bool:
    line = f"{'PASS' if passed else 'FAIL'}  {criterion:<3} {detail}"
    LINES.append(line)
    print(line)
    return passed
