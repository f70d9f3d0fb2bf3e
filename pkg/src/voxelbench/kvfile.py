"""Line-oriented ``key = value`` text files (configs and phantom specs)."""

from __future__ import annotations

from pathlib import Path

from .errors import DataError


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise DataError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        if key in out:
            raise DataError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    return parse_kv(path.read_text(), str(path))


def split_list(value: str) -> list[str]:
    return [v for v in (p.strip() for p in value.replace(",", " ").split()) if v]
