"""CSV report files.

Layout: one ``# generated: <ISO-8601>`` comment line, a fixed header, then
data rows.  Reals use 9 significant digits, the C locale, and ``\\n`` line
endings, so reruns differ only in the comment line.
"""

from __future__ import annotations

import csv
import io
import math
from datetime import datetime, timezone

REAL_FORMAT = "%.9g"


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return REAL_FORMAT % value
    return str(value)


def render_table(rows, columns, timestamp: bool = True) -> str:
    buf = io.StringIO()
    if timestamp:
        buf.write(f"# generated: {datetime.now(timezone.utc).isoformat(timespec='seconds')}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        unknown = set(row) - set(columns)
        if unknown:
            raise ValueError(f"row has columns outside the header: {sorted(unknown)}")
        writer.writerow([format_cell(row.get(col)) for col in columns])
    return buf.getvalue()


def write_table(path, rows, columns, timestamp: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(render_table(rows, columns, timestamp))


def read_table(path, columns=None) -> list[dict]:
    """Strict reader: comment lines first, then a header equal to ``columns`` if given."""
    with open(path, newline="") as fh:
        lines = fh.read()
    if lines and not lines.endswith("\n"):
        raise ValueError(f"{path}: file is not newline-terminated")
    body = [ln for ln in lines.splitlines() if not ln.startswith("#")]
    reader = csv.reader(body)
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError(f"{path}: missing header") from None
    if columns is not None and list(header) != list(columns):
        raise ValueError(f"{path}: header {header} differs from expected {list(columns)}")
    out = []
    for i, rec in enumerate(reader, start=2):
        if len(rec) != len(header):
            raise ValueError(f"{path}: row {i} has {len(rec)} fields, header has {len(header)}")
        out.append(dict(zip(header, rec)))
    return out


def strip_timestamp(text: str) -> str:
    return "".join(ln for ln in text.splitlines(keepends=True) if not ln.startswith("# generated:"))
