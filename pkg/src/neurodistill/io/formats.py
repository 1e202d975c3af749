"""Little-endian binary containers.

BDDS  dataset         magic, u16 version, u32 n/T/C, f32 fs, u8 task, u8 has_labels,
                      labels (u32 class or f32 target per window), n*T*C f32 samples
BDTE  teacher export  magic, u16 version, u32 n/d_t/K, u8 label kind,
                      Z_T, W_T, b_T, logits (f32), optional labels
BDCK  checkpoint      magic, u16 version, JSON config block, tensor table,
                      u8 quant flag, [JSON quant block, tensor table]

Tensor table: u32 count, then per tensor u16 name length, utf-8 name,
u8 dtype code, u8 ndim, u32 dims, raw little-endian data.
"""
from __future__ import annotations

import io as _io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from ..distill import TeacherExport
from ..errors import FormatError, IntegrityError, ParseError

VERSION = 1
TASKS = {"classification": 0, "regression": 1}
TASK_NAMES = {v: k for k, v in TASKS.items()}
DTYPES = {0: "<f4", 1: "<i4", 2: "<i8", 3: "<f8", 4: "<u1"}
DTYPE_CODES = {np.dtype(v).str: k for k, v in DTYPES.items()}

PathLike = Union[str, Path]


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise ParseError(f"truncated input: wanted {n} bytes, {len(self.data) - self.offset} left",
                             self.offset)
        out = self.data[self.offset:self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def magic(self, expected: bytes):
        got = self.take(4)
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}")
        (version,) = self.unpack("<H")
        if version != VERSION:
            raise FormatError(f"unsupported {expected.decode()} version {version}")

    def finish(self):
        if self.offset != len(self.data):
            raise ParseError(f"{len(self.data) - self.offset} trailing bytes", self.offset)


def _read_bytes(src) -> bytes:
    if isinstance(src, (bytes, bytearray)):
        return bytes(src)
    return Path(src).read_bytes()


def _write(dst, payload: bytes) -> bytes:
    if dst is not None:
        Path(dst).write_bytes(payload)
    return payload


@dataclass
class Dataset:
    windows: np.ndarray  # (n, T, C)
    sample_rate_hz: float
    task: str = "classification"
    labels: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.windows.shape[0]


def dump_bdds(ds: Dataset, path: Optional[PathLike] = None) -> bytes:
    w = np.asarray(ds.windows)
    n, t, c = w.shape
    out = _io.BytesIO()
    out.write(b"BDDS" + struct.pack("<HIIIfBB", VERSION, n, t, c, ds.sample_rate_hz,
                                    TASKS[ds.task], ds.labels is not None))
    if ds.labels is not None:
        dtype = "<u4" if ds.task == "classification" else "<f4"
        out.write(np.asarray(ds.labels).astype(dtype).tobytes())
    out.write(w.astype("<f4").tobytes())
    return _write(path, out.getvalue())


def load_bdds(src) -> Dataset:
    r = _Reader(_read_bytes(src))
    r.magic(b"BDDS")
    n, t, c, fs, task, has_labels = r.unpack("<IIIfBB")
    if task not in TASK_NAMES:
        raise FormatError(f"unknown task tag {task}")
    labels = None
    if has_labels:
        labels = r.array("<u4" if task == 0 else "<f4", n)
        labels = labels.astype(np.int64) if task == 0 else labels.astype(np.float64)
    windows = r.array("<f4", n * t * c).reshape(n, t, c).astype(np.float64)
    r.finish()
    return Dataset(windows, float(fs), TASK_NAMES[task], labels)


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).astype("<f4")


def teacher_to_f32(teacher: TeacherExport) -> TeacherExport:
    """Round a teacher to the on-disk precision, recomputing logits from the
    rounded Z, W, b so the stored export passes its own consistency check."""
    z, w, b = (_f32(a).astype(np.float64) for a in (teacher.z_t, teacher.w_t, teacher.b_t))
    logits = _f32(z @ w + b).astype(np.float64)
    return TeacherExport(z, w, b, logits, teacher.labels)


def dump_bdte(teacher: TeacherExport, path: Optional[PathLike] = None, *, recompute: bool = True) -> bytes:
    t = teacher_to_f32(teacher) if recompute else teacher
    if t.labels is None:
        kind = 0
    elif np.issubdtype(np.asarray(t.labels).dtype, np.integer):
        kind = 1
    else:
        kind = 2
    out = _io.BytesIO()
    out.write(b"BDTE" + struct.pack("<HIIIB", VERSION, t.n, t.d_t, t.n_out, kind))
    for a in (t.z_t, t.w_t, t.b_t, t.logits):
        out.write(_f32(a).tobytes())
    if kind:
        out.write(np.asarray(t.labels).astype("<u4" if kind == 1 else "<f4").tobytes())
    return _write(path, out.getvalue())


def load_bdte(src, check: bool = True) -> TeacherExport:
    r = _Reader(_read_bytes(src))
    r.magic(b"BDTE")
    n, d_t, k, kind = r.unpack("<IIIB")
    z = r.array("<f4", n * d_t).reshape(n, d_t)
    w = r.array("<f4", d_t * k).reshape(d_t, k)
    b = r.array("<f4", k)
    logits = r.array("<f4", n * k).reshape(n, k)
    labels = None
    if kind == 1:
        labels = r.array("<u4", n).astype(np.int64)
    elif kind == 2:
        labels = r.array("<f4", n).astype(np.float64)
    elif kind != 0:
        raise FormatError(f"unknown label kind {kind}")
    r.finish()
    teacher = TeacherExport(*(a.astype(np.float64) for a in (z, w, b, logits)), labels=labels)
    if check and not teacher.consistent():
        raise IntegrityError(f"teacher logits disagree with Z W + b (residual {teacher.logit_residual():.3g})")
    return teacher


@dataclass
class Checkpoint:
    config: dict
    tensors: dict
    quant_meta: Optional[dict] = None
    quant_tensors: dict = field(default_factory=dict)


def _dump_tensors(out, tensors: dict):
    out.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype.kind == "f" and arr.dtype != np.float64:
            arr = arr.astype("<f4")
        code = DTYPE_CODES.get(arr.dtype.newbyteorder("<").str)
        if code is None:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode()
        out.write(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())


def _load_tensors(r: _Reader) -> dict:
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (length,) = r.unpack("<H")
        name = r.take(length).decode()
        code, ndim = r.unpack("<BB")
        if code not in DTYPES:
            raise FormatError(f"unknown dtype code {code} for tensor {name!r}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        tensors[name] = r.array(DTYPES[code], int(np.prod(shape))).reshape(shape)
    return tensors


def _dump_json(out, obj):
    raw = json.dumps(obj, sort_keys=True).encode()
    out.write(struct.pack("<I", len(raw)) + raw)


def _load_json(r: _Reader):
    (length,) = r.unpack("<I")
    try:
        return json.loads(r.take(length).decode())
    except ValueError as exc:
        raise FormatError(f"corrupt JSON block: {exc}") from exc


def dump_bdck(ck: Checkpoint, path: Optional[PathLike] = None, float_dtype: str = "<f4") -> bytes:
    """Serialize a checkpoint; float tensors are stored as f32 unless ``float_dtype='<f8'``."""
    out = _io.BytesIO()
    out.write(b"BDCK" + struct.pack("<H", VERSION))
    _dump_json(out, ck.config)
    _dump_tensors(out, {k: np.asarray(v).astype(float_dtype) if np.asarray(v).dtype.kind == "f" else v
                        for k, v in ck.tensors.items()})
    out.write(struct.pack("<B", ck.quant_meta is not None))
    if ck.quant_meta is not None:
        _dump_json(out, ck.quant_meta)
        _dump_tensors(out, ck.quant_tensors)
    return _write(path, out.getvalue())


def load_bdck(src) -> Checkpoint:
    r = _Reader(_read_bytes(src))
    r.magic(b"BDCK")
    config = _load_json(r)
    tensors = _load_tensors(r)
    (has_quant,) = r.unpack("<B")
    meta, qt = None, {}
    if has_quant:
        meta = _load_json(r)
        qt = _load_tensors(r)
    r.finish()
    return Checkpoint(config, tensors, meta, qt)
