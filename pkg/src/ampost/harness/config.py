"""Flat ``key = value`` configuration files."""

from __future__ import annotations

from pathlib import Path


def parse_config(text: str) -> dict[str, str]:
    """Parse lines of ``key = value``; ``#`` starts a comment, blank lines are skipped.

    Later keys override earlier ones.  Values stay strings; the consuming
    config classes convert them.
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    if path is None:
        return {}
    return parse_config(Path(path).read_text())
