"""Binary matrix files, the factorization container and loss-trace CSVs.

All integers are little-endian and all reals are IEEE float64.

Matrix file (AMF)::

    "ARMF" | u32 version=1 | u8 dtype=1 | u64 rows | u64 cols | rows*cols f64, row-major

Container (ARMC)::

    "ARMC" | u32 version=1 | u64 d_out | u64 d_in | u64 d_block | u64 has_scales
    u64 n_sections | n_sections * (4-byte tag, u64 offset, u64 length)
    sections, in table order:
      ABLK  A blocks, (d_out/d_block) x d_block x d_block f64
      BBLK  B blocks, (d_in/d_block) x d_block x d_block f64
      CVAL  per group (row-major over rows, then groups): two f64 kept values
      CIDX  per group: one byte, bits 0-1 = i1, bits 2-3 = i2, i1 < i2
      RSC1  (optional) column scales, d_in f64
      RSC2  (optional) row scales, d_out f64
"""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path

import numpy as np

from .driver import LossTrace
from .tensor import BlockDiagonal, FactorizationState, SparseCore24

AMF_MAGIC = b"ARMF"
ARMC_MAGIC = b"ARMC"
VERSION = 1
DTYPE_F64 = 1
_AMF_HEADER = struct.Struct("<4sIBQQ")
_ARMC_HEADER = struct.Struct("<4sIQQQQ")
_SECTION = struct.Struct("<4sQQ")
_F64 = np.dtype("<f8")


class FormatError(ValueError):
    pass


# -- matrices -------------------------------------------------------------

def amf_bytes(x) -> bytes:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise FormatError(f"AMF holds matrices or vectors, got {arr.ndim}-D data")
    rows, cols = arr.shape
    return _AMF_HEADER.pack(AMF_MAGIC, VERSION, DTYPE_F64, rows, cols) + arr.astype(_F64).tobytes()


def parse_amf(data: bytes) -> np.ndarray:
    if len(data) < _AMF_HEADER.size:
        raise FormatError("AMF file shorter than its header")
    magic, version, dtype, rows, cols = _AMF_HEADER.unpack_from(data)
    if magic != AMF_MAGIC:
        raise FormatError(f"bad AMF magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported AMF version {version}")
    if dtype != DTYPE_F64:
        raise FormatError(f"unsupported AMF dtype code {dtype}")
    payload = data[_AMF_HEADER.size:]
    if len(payload) != 8 * rows * cols:
        raise FormatError(f"AMF payload is {len(payload)} bytes, expected {8 * rows * cols}")
    return np.frombuffer(payload, dtype=_F64).astype(np.float64).reshape(rows, cols)


def write_amf(path, x) -> None:
    Path(path).write_bytes(amf_bytes(x))


def read_amf(path) -> np.ndarray:
    return parse_amf(Path(path).read_bytes())


def read_matrix(path) -> np.ndarray:
    """AMF, or comma-separated text when the name ends in ``.csv``."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        try:
            return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    return read_amf(path)


def read_vector(path) -> np.ndarray:
    m = read_matrix(path)
    if 1 not in m.shape:
        raise FormatError(f"{path} holds a {m.shape} matrix, expected a vector")
    return m.ravel()


# -- container ------------------------------------------------------------

def container_bytes(state: FactorizationState, r1=None, r2=None) -> bytes:
    d_out, d_in = state.shape
    bs = state.block_size
    has_scales = r1 is not None and r2 is not None
    mask = state.core.mask.reshape(d_out, d_in // 4, 4)
    vals = state.core.values.reshape(d_out, d_in // 4, 4)
    kept = np.argsort(~mask, axis=-1, kind="stable")[..., :2]  # kept positions, ascending
    kept_vals = np.take_along_axis(vals, kept, axis=-1)
    idx = (kept[..., 0] | (kept[..., 1] << 2)).astype(np.uint8)

    sections = [(b"ABLK", state.a.blocks.astype(_F64).tobytes()),
                (b"BBLK", state.b.blocks.astype(_F64).tobytes()),
                (b"CVAL", kept_vals.astype(_F64).tobytes()),
                (b"CIDX", idx.tobytes())]
    if has_scales:
        sections.append((b"RSC1", np.asarray(r1, dtype=_F64).tobytes()))
        sections.append((b"RSC2", np.asarray(r2, dtype=_F64).tobytes()))
    head = _ARMC_HEADER.pack(ARMC_MAGIC, VERSION, d_out, d_in, bs, int(has_scales))
    offset = len(head) + 8 + _SECTION.size * len(sections)
    table = [struct.pack("<Q", len(sections))]
    for tag, payload in sections:
        table.append(_SECTION.pack(tag, offset, len(payload)))
        offset += len(payload)
    return b"".join([head, *table, *(p for _, p in sections)])


def parse_container(data: bytes):
    """Returns ``(state, r1, r2)``; the scales are ``None`` when absent."""
    if len(data) < _ARMC_HEADER.size + 8:
        raise FormatError("container shorter than its header")
    magic, version, d_out, d_in, bs, has_scales = _ARMC_HEADER.unpack_from(data)
    if magic != ARMC_MAGIC:
        raise FormatError(f"bad container magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    if bs == 0 or d_out % bs or d_in % bs or d_in % 4:
        raise FormatError(f"inconsistent dimensions {d_out}x{d_in} / block {bs}")
    pos = _ARMC_HEADER.size
    (n_sec,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if n_sec > 16 or len(data) < pos + n_sec * _SECTION.size:
        raise FormatError("truncated section table")
    sections = {}
    for _ in range(n_sec):
        tag, off, length = _SECTION.unpack_from(data, pos)
        pos += _SECTION.size
        if off + length > len(data):
            raise FormatError(f"section {tag!r} runs past the end of the file")
        sections[tag] = data[off:off + length]

    n_groups = d_out * d_in // 4
    expected = {b"ABLK": 8 * d_out * bs, b"BBLK": 8 * d_in * bs,
                b"CVAL": 16 * n_groups, b"CIDX": n_groups}
    if has_scales:
        expected.update({b"RSC1": 8 * d_in, b"RSC2": 8 * d_out})
    for tag, size in expected.items():
        if tag not in sections:
            raise FormatError(f"missing section {tag.decode()}")
        if len(sections[tag]) != size:
            raise FormatError(f"section {tag.decode()} is {len(sections[tag])} bytes, expected {size}")

    idx = np.frombuffer(sections[b"CIDX"], dtype=np.uint8).astype(np.int64)
    i1, i2 = idx & 3, (idx >> 2) & 3
    if np.any(idx >> 4) or np.any(i1 >= i2):
        raise FormatError("core index byte violates i1 < i2")
    kept_vals = np.frombuffer(sections[b"CVAL"], dtype=_F64).reshape(n_groups, 2)
    vals = np.zeros((n_groups, 4))
    mask = np.zeros((n_groups, 4), dtype=bool)
    g = np.arange(n_groups)
    vals[g, i1], vals[g, i2] = kept_vals[:, 0], kept_vals[:, 1]
    mask[g, i1] = mask[g, i2] = True

    a = np.frombuffer(sections[b"ABLK"], dtype=_F64).reshape(d_out // bs, bs, bs)
    b = np.frombuffer(sections[b"BBLK"], dtype=_F64).reshape(d_in // bs, bs, bs)
    state = FactorizationState(BlockDiagonal(a), BlockDiagonal(b),
                               SparseCore24(vals.reshape(d_out, d_in), mask.reshape(d_out, d_in)))
    r1 = r2 = None
    if has_scales:
        r1 = np.frombuffer(sections[b"RSC1"], dtype=_F64).astype(np.float64)
        r2 = np.frombuffer(sections[b"RSC2"], dtype=_F64).astype(np.float64)
    return state, r1, r2


def write_container(path, state: FactorizationState, r1=None, r2=None) -> None:
    Path(path).write_bytes(container_bytes(state, r1, r2))


def read_container(path):
    return parse_container(Path(path).read_bytes())


# -- traces ---------------------------------------------------------------

def trace_csv(trace) -> str:
    buf = io.StringIO()
    buf.write("iter,phase,loss\n")
    for it, phase, loss in trace:
        buf.write(f"{it},{phase},{loss:.17g}\n")
    return buf.getvalue()


def parse_trace_csv(text: str) -> LossTrace:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["iter", "phase", "loss"]:
        raise FormatError("trace CSV must start with the header iter,phase,loss")
    trace = LossTrace()
    for row in rows[1:]:
        if not row:
            continue
        if len(row) != 3:
            raise FormatError(f"bad trace row {row!r}")
        trace.record(int(row[0]), row[1], float(row[2]))
    return trace


def write_trace(path, trace) -> None:
    Path(path).write_text(trace_csv(trace))


def read_trace(path) -> LossTrace:
    return parse_trace_csv(Path(path).read_text())
