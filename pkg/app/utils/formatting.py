"""Serialization of result files.

CSV is RFC-4180 (CRLF record separator, header row) with reals printed to 17
significant digits so that files round-trip exactly; JSON goes through orjson
with sorted keys so reruns produce byte-identical output.
"""

import csv
import io
import math
from typing import Any, Iterable, Sequence

import numpy as np
import orjson


JSON_OPTIONS = orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY | orjson.OPT_INDENT_2


def format_real(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        x = float(value)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return f"{x:.17g}"
    return str(value)


def to_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
    writer.writerow(list(header))
    for row in rows:
        writer.writerow([format_real(v) for v in row])
    return buf.getvalue()


def _default(obj: Any) -> Any:
    if hasattr(obj, "model_dump"):
        return obj.model_dump()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"Type is not JSON serializable: {type(obj).__name__}")


def _finite(obj: Any) -> Any:
    # orjson writes non-finite floats as null; keep them legible instead
    if isinstance(obj, float) and not math.isfinite(obj):
        return format_real(obj)
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def to_json(obj: Any) -> bytes:
    if hasattr(obj, "model_dump"):
        obj = obj.model_dump()
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    return orjson.dumps(_finite(obj), default=_default, option=JSON_OPTIONS) + b"\n"


def parse_floats(text: str) -> list:
    """Parse a comma separated list of reals (whitespace tolerant)."""
    parts = [p.strip() for p in str(text).split(",")]
    return [float(p) for p in parts if p]
