"""Minimal header-driven PLY reader/writer (ASCII and binary little-endian)."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ugsplat.errors import PLYParseError

_SCALAR_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass
class PLYProperty:
    name: str
    dtype: str
    # for list properties: dtype of the length prefix
    count_dtype: str | None = None

    @property
    def is_list(self) -> bool:
        return self.count_dtype is not None


@dataclass
class PLYElement:
    name: str
    count: int
    properties: list[PLYProperty] = field(default_factory=list)


@dataclass
class PLYHeader:
    fmt: str
    elements: list[PLYElement]
    header_bytes: int


def _parse_header(raw: bytes, path) -> PLYHeader:
    end = raw.find(b"end_header")
    if end < 0:
        raise PLYParseError(f"{path}: missing 'end_header'")
    nl = raw.find(b"\n", end)
    header_bytes = len(raw) if nl < 0 else nl + 1
    lines = raw[:header_bytes].decode("ascii", errors="replace").splitlines()

    if not lines or lines[0].strip() != "ply":
        raise PLYParseError(f"{path}: line 1: expected 'ply', got {lines[0].strip()!r}" if lines
                            else f"{path}: empty file")
    fmt = None
    elements: list[PLYElement] = []
    for lineno, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        kw = tok[0]
        if kw == "format":
            if len(tok) != 3 or tok[1] not in ("ascii", "binary_little_endian"):
                raise PLYParseError(f"{path}: line {lineno}: unsupported format {line.strip()!r}")
            fmt = tok[1]
        elif kw == "element":
            if len(tok) != 3:
                raise PLYParseError(f"{path}: line {lineno}: malformed element {line.strip()!r}")
            try:
                count = int(tok[2])
            except ValueError:
                raise PLYParseError(f"{path}: line {lineno}: bad element count {tok[2]!r}") from None
            if count < 0:
                raise PLYParseError(f"{path}: line {lineno}: negative element count")
            elements.append(PLYElement(tok[1], count))
        elif kw == "property":
            if not elements:
                raise PLYParseError(f"{path}: line {lineno}: property before any element")
            if len(tok) == 3 and tok[1] in _SCALAR_TYPES:
                elements[-1].properties.append(PLYProperty(tok[2], _SCALAR_TYPES[tok[1]]))
            elif (len(tok) == 5 and tok[1] == "list"
                  and tok[2] in _SCALAR_TYPES and tok[3] in _SCALAR_TYPES):
                elements[-1].properties.append(
                    PLYProperty(tok[4], _SCALAR_TYPES[tok[3]], _SCALAR_TYPES[tok[2]]))
            else:
                raise PLYParseError(f"{path}: line {lineno}: malformed property {line.strip()!r}")
        elif kw == "end_header":
            break
        else:
            raise PLYParseError(f"{path}: line {lineno}: unknown header keyword {kw!r}")
    if fmt is None:
        raise PLYParseError(f"{path}: header has no 'format' line")
    return PLYHeader(fmt, elements, header_bytes)


def _read_ascii(body: bytes, header: PLYHeader, path) -> dict[str, dict[str, np.ndarray]]:
    lines = body.decode("ascii", errors="replace").splitlines()
    lines = [ln for ln in lines if ln.strip()]
    out: dict[str, dict[str, np.ndarray]] = {}
    pos = 0
    for el in header.elements:
        cols: dict[str, list] = {p.name: [] for p in el.properties}
        for _ in range(el.count):
            if pos >= len(lines):
                raise PLYParseError(f"{path}: unexpected end of data in element {el.name!r}")
            tok = lines[pos].split()
            pos += 1
            k = 0
            try:
                for p in el.properties:
                    if p.is_list:
                        n = int(tok[k])
                        cols[p.name].append([float(t) for t in tok[k + 1:k + 1 + n]])
                        k += 1 + n
                    else:
                        cols[p.name].append(float(tok[k]))
                        k += 1
            except (IndexError, ValueError):
                raise PLYParseError(
                    f"{path}: malformed data row {pos} in element {el.name!r}") from None
        out[el.name] = {
            p.name: (np.asarray(cols[p.name], dtype=np.dtype(p.dtype)) if not p.is_list
                     else np.asarray(cols[p.name], dtype=object))
            for p in el.properties
        }
    return out


def _read_binary(body: bytes, header: PLYHeader, path) -> dict[str, dict[str, np.ndarray]]:
    out: dict[str, dict[str, np.ndarray]] = {}
    offset = 0
    for el in header.elements:
        if not any(p.is_list for p in el.properties):
            dt = np.dtype([(p.name, "<" + p.dtype) for p in el.properties])
            nbytes = dt.itemsize * el.count
            if offset + nbytes > len(body):
                raise PLYParseError(f"{path}: truncated binary data in element {el.name!r}")
            arr = np.frombuffer(body, dtype=dt, count=el.count, offset=offset)
            offset += nbytes
            out[el.name] = {p.name: arr[p.name].copy() for p in el.properties}
            continue
        cols: dict[str, list] = {p.name: [] for p in el.properties}
        try:
            for _ in range(el.count):
                for p in el.properties:
                    if p.is_list:
                        cdt = np.dtype("<" + p.count_dtype)
                        n = int(np.frombuffer(body, cdt, 1, offset)[0])
                        offset += cdt.itemsize
                        vdt = np.dtype("<" + p.dtype)
                        cols[p.name].append(np.frombuffer(body, vdt, n, offset).copy())
                        offset += vdt.itemsize * n
                    else:
                        vdt = np.dtype("<" + p.dtype)
                        cols[p.name].append(np.frombuffer(body, vdt, 1, offset)[0])
                        offset += vdt.itemsize
        except ValueError:
            raise PLYParseError(f"{path}: truncated binary data in element {el.name!r}") from None
        out[el.name] = {
            p.name: (np.asarray(cols[p.name], dtype=object) if p.is_list
                     else np.asarray(cols[p.name], dtype=np.dtype(p.dtype)))
            for p in el.properties
        }
    return out


def read_ply(path: str | os.PathLike) -> dict[str, dict[str, np.ndarray]]:
    """Read every element of a PLY file into ``{element: {property: array}}``."""
    path = Path(path)
    raw = path.read_bytes()
    header = _parse_header(raw, path)
    body = raw[header.header_bytes:]
    if header.fmt == "ascii":
        return _read_ascii(body, header, path)
    return _read_binary(body, header, path)


def write_ply(path: str | os.PathLike, vertex: dict[str, np.ndarray], binary: bool = False) -> None:
    """Write a single ``vertex`` element.  Column dtypes are taken from the arrays.

    ASCII floats are written with ``repr`` so float64 values round-trip exactly.
    """
    inv = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
           "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}
    names = list(vertex)
    cols = [np.asarray(vertex[n]) for n in names]
    n = len(cols[0]) if cols else 0
    if any(len(c) != n for c in cols):
        raise ValueError("all vertex columns must have the same length")
    kinds = []
    for c in cols:
        if c.dtype.kind not in "fiu":
            raise ValueError(f"unsupported dtype {c.dtype}")
        kinds.append(c.dtype.kind + str(c.dtype.itemsize))
    header = ["ply", "format %s 1.0" % ("binary_little_endian" if binary else "ascii"),
              f"element vertex {n}"]
    header += [f"property {inv[k]} {name}" for k, name in zip(kinds, names)]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        dt = np.dtype([(name, "<" + k) for name, k in zip(names, kinds)])
        rec = np.empty(n, dtype=dt)
        for name, c in zip(names, cols):
            rec[name] = c
        data = rec.tobytes()
    else:
        rows = []
        for i in range(n):
            rows.append(" ".join(repr(float(c[i])) if c.dtype.kind == "f" else str(int(c[i]))
                                 for c in cols))
        data = ("\n".join(rows) + ("\n" if rows else "")).encode("ascii")
    Path(path).write_bytes(head + data)
