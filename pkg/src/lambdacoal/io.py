"""Deterministic CSV output shared by every module."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence


def fmt(value) -> str:
    """17 significant digits for floats, plain text otherwise."""
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            return "nan"
        return f"{value:.17g}"
    if hasattr(value, "dtype") and value.dtype.kind == "f":
        return fmt(float(value))
    if hasattr(value, "dtype") and value.dtype.kind in "iu":
        return str(int(value))
    return str(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence], comments: Mapping[str, object] | None = None) -> str:
    buf = io.StringIO()
    for key, val in (comments or {}).items():
        buf.write(f"# {key}={fmt(val)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows, comments=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(header, rows, comments))
    return path


def read_csv(path) -> tuple[dict[str, str], list[str], list[list[str]]]:
    """Inverse of :func:`write_csv`: (comment map, header, rows as strings)."""
    comments, lines = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            key, _, val = line[2:].partition("=")
            comments[key] = val
        else:
            lines.append(line)
    rows = list(csv.reader(lines))
    return comments, rows[0], rows[1:]
