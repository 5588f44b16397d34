"""CSV and 16-bit PGM writers with embedded provenance headers.

Every emitted file carries (config_hash, seed, tool_version) style key=value
comment lines so a replay with the identical triple is byte-comparable.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np


def provenance_lines(provenance):
    return [f"# {k}={v}" for k, v in (provenance or {}).items()]


def write_csv(path, fieldnames, rows, provenance=None):
    """rows: iterables matching fieldnames. Values are written as-is."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    for line in provenance_lines(provenance):
        buf.write(line + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fieldnames)
    for row in rows:
        writer.writerow(row)
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path):
    """Returns (provenance dict, fieldnames, rows of strings)."""
    provenance = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            provenance[key.strip()] = value
        else:
            body.append(line)
    reader = csv.reader(body)
    records = list(reader)
    return provenance, records[0], records[1:]


def write_pgm(path, values, provenance=None):
    """16-bit big-endian P5 graymap. values are min-max scaled to [0, 65535];
    a constant map writes zeros."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"PGM export expects a 2-D map, got shape {arr.shape}")
    lo, hi = arr.min(), arr.max()
    scaled = np.zeros_like(arr) if hi <= lo else (arr - lo) / (hi - lo)
    pixels = np.round(scaled * 65535).astype(">u2")
    h, w = arr.shape
    header = [b"P5"]
    for line in provenance_lines(provenance):
        header.append(line.encode("utf-8"))
    header.append(f"{w} {h}".encode())
    header.append(b"65535")
    path.write_bytes(b"\n".join(header) + b"\n" + pixels.tobytes())


def read_pgm(path):
    """Returns (values scaled back to [0,1] float64, provenance dict)."""
    raw = Path(path).read_bytes()
    provenance = {}
    pos = 0
    tokens = []
    while len(tokens) < 4:
        end = raw.index(b"\n", pos)
        line = raw[pos:end]
        pos = end + 1
        if line.startswith(b"#"):
            key, _, value = line[1:].strip().partition(b"=")
            provenance[key.decode()] = value.decode()
            continue
        tokens.extend(line.split())
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != b"P5":
        raise ValueError(f"not a P5 graymap: magic {magic!r}")
    pixels = np.frombuffer(raw[pos:pos + 2 * w * h], dtype=">u2").reshape(h, w)
    return pixels.astype(np.float64) / maxval, provenance
