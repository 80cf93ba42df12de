"""CSV and binary export of value and policy fields.

Binary layout (little-endian, no padding)::

    offset  type      field
    0       8 bytes   magic  b"CCVFLD01"
    8       u32       d (number of x axes)
    12      u32       has_m (0 or 1)
    16      u32       ku (policy u components, 0 = no policy)
    20      u32       ka (policy a components, 0 or d)
    24      f8        t0
    32      f8        T
    40      u32       nt (time intervals)
    44      d+has_m records of (f8 lower, f8 upper, u32 nodes), x axes then m
    ...     u32       kind length L, then L bytes UTF-8
    ...     u32       meta length K, then K bytes UTF-8 JSON
    ...     f8[N]     values (N = (nt+1) * prod(nodes), C order, -inf if masked)
    ...     u8[N]     mask
    ...     f8[N*ku]  policy u, then f8[N*ka] policy a
"""

from __future__ import annotations

import csv
import io
import json
import struct
from typing import Optional

import numpy as np

from .grid import Grid, PolicyField, ValueField

MAGIC = b"CCVFLD01"


class FieldFormatError(ValueError):
    pass


def _jsonable(meta):
    out = {}
    for k, v in meta.items():
        if isinstance(v, (np.floating, np.integer)):
            v = v.item()
        if isinstance(v, (str, int, float, bool)) or v is None:
            out[k] = v
    return out


def field_to_bytes(field: ValueField, policy: Optional[PolicyField] = None) -> bytes:
    g = field.grid
    ku = 0 if policy is None else policy.u.shape[-1]
    ka = 0 if policy is None or policy.a is None else policy.a.shape[-1]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IIII", g.dim, int(g.has_m), ku, ka))
    buf.write(struct.pack("<ddI", g.t0, g.T, g.nt))
    for lo, hi, n in zip(g.x_lower, g.x_upper, g.nx):
        buf.write(struct.pack("<ddI", lo, hi, n))
    if g.has_m:
        buf.write(struct.pack("<ddI", g.m_lower, g.m_upper, g.nm))
    kind = field.kind.encode()
    meta = json.dumps(_jsonable(field.meta), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(kind)) + kind)
    buf.write(struct.pack("<I", len(meta)) + meta)
    buf.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(field.masked, dtype="u1").tobytes())
    if ku:
        buf.write(np.ascontiguousarray(policy.u, dtype="<f8").tobytes())
    if ka:
        buf.write(np.ascontiguousarray(policy.a, dtype="<f8").tobytes())
    return buf.getvalue()


def field_from_bytes(data: bytes):
    """Inverse of :func:`field_to_bytes`; returns ``(field, policy or None)``."""
    if data[:8] != MAGIC:
        raise FieldFormatError("not a value-field dump (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise FieldFormatError("truncated header")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    d, has_m, ku, ka = take("<IIII")
    t0, T, nt = take("<ddI")
    axes = [take("<ddI") for _ in range(d + has_m)]
    (L,) = take("<I")
    kind = data[pos:pos + L].decode()
    pos += L
    (K,) = take("<I")
    meta = json.loads(data[pos:pos + K].decode())
    pos += K
    xa = axes[:d]
    grid = Grid(t0, T, nt, tuple(a[0] for a in xa), tuple(a[1] for a in xa), tuple(a[2] for a in xa),
                *((axes[d][0], axes[d][1], axes[d][2]) if has_m else (None, None, None)))
    N = int(np.prod(grid.shape))
    need = N * 8 + N + N * 8 * (ku + ka)
    if len(data) - pos != need:
        raise FieldFormatError(f"payload has {len(data) - pos} bytes, expected {need}")
    values = np.frombuffer(data, dtype="<f8", count=N, offset=pos).reshape(grid.shape).copy()
    pos += N * 8
    masked = np.frombuffer(data, dtype="u1", count=N, offset=pos).reshape(grid.shape).astype(bool)
    pos += N
    field = ValueField(grid, values, masked, kind, meta)
    policy = None
    if ku:
        u = np.frombuffer(data, dtype="<f8", count=N * ku, offset=pos).reshape(grid.shape + (ku,)).copy()
        pos += N * ku * 8
        a = None
        if ka:
            a = np.frombuffer(data, dtype="<f8", count=N * ka, offset=pos).reshape(grid.shape + (ka,)).copy()
        policy = PolicyField(grid, u, a)
    return field, policy


def field_to_csv(field: ValueField, policy: Optional[PolicyField] = None) -> str:
    """One row per node: t, x1..xd, [m], value, masked, [u*..., a*...]."""
    g = field.grid
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    head = ["t"] + [f"x{i + 1}" for i in range(g.dim)] + (["m"] if g.has_m else []) + ["value", "masked"]
    if policy is not None:
        head += [f"u{j + 1}" for j in range(policy.u.shape[-1])]
        if policy.a is not None:
            head += [f"a{j + 1}" for j in range(policy.a.shape[-1])]
    w.writerow(head)
    axes = [g.times] + g.axes
    for idx in np.ndindex(*g.shape):
        row = [repr(float(axes[k][i])) for k, i in enumerate(idx)]
        v = field.values[idx]
        row += ["-inf" if v == -np.inf else repr(float(v)), int(field.masked[idx])]
        if policy is not None:
            row += [repr(float(c)) for c in policy.u[idx]]
            if policy.a is not None:
                row += [repr(float(c)) for c in policy.a[idx]]
        w.writerow(row)
    return out.getvalue()


def write_field(path, field: ValueField, policy: Optional[PolicyField] = None, fmt: str = "csv"):
    data = field_to_csv(field, policy).encode() if fmt == "csv" else field_to_bytes(field, policy)
    with open(path, "wb") as fh:
        fh.write(data)


def read_field(path):
    with open(path, "rb") as fh:
        return field_from_bytes(fh.read())
