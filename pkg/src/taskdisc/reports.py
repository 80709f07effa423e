"""CSV and JSON report emission."""
from __future__ import annotations

import csv
import json
import math

import numpy as np

from .errors import ContractError


def _plain(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


def format_cell(v):
    v = _plain(v)
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return format(v, ".6g")
    if isinstance(v, (list, tuple, dict)):
        return json.dumps(v, separators=(",", ":"))
    return str(v)


def emit_report(records, fmt, path, columns=None):
    """Write homogeneous records as CSV (6 significant digits) or JSON.

    CSV columns follow ``columns`` or the key order of the first record; an
    empty record list with ``columns`` gives a header-only file. JSON keeps
    full float precision so records round-trip exactly.
    """
    records = list(records)
    if records:
        keys = list(records[0].keys())
        for i, r in enumerate(records):
            if set(r.keys()) != set(keys):
                raise ContractError(f"record {i} has keys {sorted(r)}, expected {sorted(keys)}")
        columns = list(columns) if columns is not None else keys
    else:
        columns = list(columns or [])
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in records:
                w.writerow([format_cell(r[c]) for c in columns])
    elif fmt == "json":
        with open(path, "w") as fh:
            json.dump([{c: _plain(r[c]) for c in columns} for r in records], fh, indent=1)
            fh.write("\n")
    else:
        raise ValueError(f"format must be 'csv' or 'json', got {fmt!r}")


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
