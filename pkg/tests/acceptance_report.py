"""Collected one-line verdicts for the acceptance suite."""

LINES: list = []


def verdict(number: int, name: str, ok: bool, detail: str) -> str:
    line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    LINES.append(line)
    print(line, flush=True)
    return line
