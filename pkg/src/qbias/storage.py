"""Versioned little-endian binary formats: index, parameters, frames.

Every format opens with magic, version, flags, and the declared total
file length, and closes with a CRC32 over everything before it.  Load
failures are typed and checked in a fixed order: wrong magic, then
unsupported version, then short-of-declared-length (truncation), then
checksum, then structure.  Tests inject each fault separately.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .attention import ProjectionSet
from .catalogue import PackedIndex
from .errors import (
    BadMagicError,
    BadVersionError,
    ChecksumError,
    DataError,
    InputError,
    TruncatedFileError,
)
from .fsq import FsqParams, packing_supported

__all__ = [
    "save_index",
    "load_index",
    "save_params",
    "load_params",
    "save_frames",
    "load_frames",
    "load_phrases",
]

INDEX_MAGIC = b"QBIX"
PARAMS_MAGIC = b"QBPR"
FRAMES_MAGIC = b"QBFR"
FORMAT_VERSION = 1

_FLAG_PACKED = 1
_HEADER = struct.Struct("<4sHHQ")  # magic, version, flags, total length


class _Writer:
    def __init__(self, magic: bytes, flags: int):
        # length is patched in by finish(); zero for now
        self.parts: list[bytes] = [_HEADER.pack(magic, FORMAT_VERSION, flags, 0)]

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u16(self, v):
        self.parts.append(struct.pack("<H", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def u64(self, v):
        self.parts.append(struct.pack("<Q", v))

    def raw(self, b: bytes):
        self.parts.append(b)

    def array(self, arr: np.ndarray):
        self.raw(np.ascontiguousarray(arr).tobytes())

    def text(self, s: str):
        b = s.encode("utf-8")
        self.u16(len(b))
        self.raw(b)

    def finish(self, path):
        payload = bytearray(b"".join(self.parts))
        struct.pack_into("<Q", payload, 8, len(payload) + 4)
        payload = bytes(payload)
        Path(path).write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = _HEADER.size
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(f"{self.path}: declared sizes overrun the file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def array(self, dtype, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64)) if len(shape) else 1
        raw = self.take(n * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    def text(self) -> str:
        return self.take(self.u16()).decode("utf-8")

    def done(self):
        if self.pos != len(self.data):
            raise DataError(f"{self.path}: {len(self.data) - self.pos} trailing bytes")


def _open_checked(path, magic: bytes) -> tuple[_Reader, int]:
    data = Path(path).read_bytes()
    if len(data) < 6:
        raise TruncatedFileError(f"{path}: shorter than magic and version")
    if data[:4] != magic:
        raise BadMagicError(f"{path}: expected {magic!r}, found {data[:4]!r}")
    version = struct.unpack_from("<H", data, 4)[0]
    if version != FORMAT_VERSION:
        raise BadVersionError(f"{path}: version {version}, supported {FORMAT_VERSION}")
    if len(data) < _HEADER.size:
        raise TruncatedFileError(f"{path}: file ends inside the header")
    _, _, flags, declared = _HEADER.unpack_from(data)
    if len(data) < declared:
        raise TruncatedFileError(
            f"{path}: {len(data)} bytes of a declared {declared}"
        )
    if len(data) > declared:
        raise DataError(f"{path}: {len(data) - declared} bytes past the declared end")
    want = struct.unpack_from("<I", data, len(data) - 4)[0]
    got = zlib.crc32(data[:-4])
    if want != got:
        raise ChecksumError(f"{path}: CRC32 {got:#010x} != stored {want:#010x}")
    return _Reader(data[:-4], path), flags


def _write_params_block(w: _Writer, params: FsqParams):
    w.u32(params.dim)
    w.u32(params.groups)
    w.u32(len(params.levels))
    for l in params.levels:
        w.u8(l)
    for arr in (params.a_in, params.b_in, params.a_out, params.b_out):
        w.array(arr)


def _read_params_block(r: _Reader) -> FsqParams:
    dim = r.u32()
    groups = r.u32()
    n_lev = r.u32()
    if groups == 0 or dim == 0 or n_lev == 0 or dim % groups:
        raise DataError(f"{r.path}: inconsistent header geometry")
    levels = tuple(r.u8() for _ in range(n_lev))
    s = dim // groups
    return FsqParams(
        levels,
        r.array(np.float32, (groups, n_lev, s)),
        r.array(np.float32, (groups, n_lev)),
        r.array(np.float32, (groups, s, n_lev)),
        r.array(np.float32, (groups, s)),
    )


def _write_proj_block(w: _Writer, proj: ProjectionSet):
    for arr in (proj.w_q, proj.w_k, proj.w_v):
        w.array(arr)


def _read_proj_block(r: _Reader, dim: int) -> ProjectionSet:
    return ProjectionSet(
        r.array(np.float32, (dim, dim)),
        r.array(np.float32, (dim, dim)),
        r.array(np.float32, (dim, dim)),
    )


def save_index(index: PackedIndex, path) -> None:
    w = _Writer(INDEX_MAGIC, _FLAG_PACKED if index.packed else 0)
    _write_params_block(w, index.params)
    _write_proj_block(w, index.proj)
    w.u64(len(index.phrases))
    w.u64(index.embedder_seed)
    w.text(index.embedder_ident)
    w.array(index.code_data)
    w.array(index.provenance.astype(np.int64))
    encoded = [p.encode("utf-8") for p in index.phrases]
    blob = b"".join(encoded)
    if len(blob) > 0xFFFFFFFF:
        raise InputError("phrase block exceeds the 32-bit offset format")
    offsets = np.zeros(len(encoded) + 1, dtype=np.uint32)
    np.cumsum([len(e) for e in encoded], out=offsets[1:])
    w.array(offsets)
    w.u64(len(blob))
    w.raw(blob)
    w.finish(path)


def load_index(path) -> PackedIndex:
    r, flags = _open_checked(path, INDEX_MAGIC)
    params = _read_params_block(r)
    proj = _read_proj_block(r, params.dim)
    n = r.u64()
    seed = r.u64()
    ident = r.text()
    if flags & _FLAG_PACKED:
        if not packing_supported(params.levels):
            raise DataError(f"{path}: packed flag set for unpackable levels")
        code_data = r.array(np.uint16, (n, params.groups))
    else:
        code_data = r.array(np.uint8, (n, params.groups, len(params.levels)))
    provenance = r.array(np.int64, (n,))
    offsets = r.array(np.uint32, (n + 1,))
    blob_len = r.u64()
    if int(offsets[-1]) != blob_len or np.any(np.diff(offsets.astype(np.int64)) < 0):
        raise DataError(f"{path}: phrase offsets are inconsistent")
    blob = r.take(blob_len)
    r.done()
    phrases = [blob[offsets[i] : offsets[i + 1]].decode("utf-8") for i in range(n)]
    return PackedIndex(phrases, provenance, code_data, params, proj, seed, ident)


def save_params(params: FsqParams, proj: ProjectionSet, path) -> None:
    """Trained quantizer plus the projections it was trained against."""
    if proj.dim != params.dim:
        raise InputError("projection dim does not match parameter dim")
    w = _Writer(PARAMS_MAGIC, 0)
    _write_params_block(w, params)
    _write_proj_block(w, proj)
    w.finish(path)


def load_params(path) -> tuple[FsqParams, ProjectionSet]:
    r, _ = _open_checked(path, PARAMS_MAGIC)
    params = _read_params_block(r)
    proj = _read_proj_block(r, params.dim)
    r.done()
    return params, proj


def save_frames(frames: np.ndarray, path, text: bool = False) -> None:
    """(T, D) float32 rows; binary by default, whitespace text on request."""
    frames = np.ascontiguousarray(frames, dtype=np.float32)
    if frames.ndim != 2:
        raise InputError("frames must be a (T, D) matrix")
    if text:
        with open(path, "w", encoding="utf-8") as fh:
            for row in frames:
                fh.write(" ".join(repr(float(v)) for v in row))
                fh.write("\n")
        return
    w = _Writer(FRAMES_MAGIC, 0)
    w.u64(frames.shape[0])
    w.u32(frames.shape[1])
    w.array(frames)
    w.finish(path)


def load_frames(path) -> np.ndarray:
    """Reads the binary format, falling back to whitespace text."""
    head = Path(path).read_bytes()[:4]
    if head != FRAMES_MAGIC:
        return _load_frames_text(path)
    r, _ = _open_checked(path, FRAMES_MAGIC)
    t_n = r.u64()
    dim = r.u32()
    frames = r.array(np.float32, (t_n, dim))
    r.done()
    return frames


def _load_frames_text(path) -> np.ndarray:
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                row = [float(p) for p in parts]
            except ValueError as exc:
                raise DataError(f"{path}:{ln}: not a number row: {exc}") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataError(f"{path}:{ln}: expected {width} columns, got {len(row)}")
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: no frame rows found")
    return np.asarray(rows, dtype=np.float32)


def load_phrases(path) -> list[str]:
    """One phrase per line; blank lines skipped.  JSON-lines rows with a
    "phrase" field are accepted too (detected per line)."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("{"):
                try:
                    row = json.loads(line)
                    text = row["phrase"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise DataError(f"{path}:{ln}: bad JSON phrase row: {exc}") from None
                if not isinstance(text, str) or not text.strip():
                    raise DataError(f"{path}:{ln}: phrase must be a non-empty string")
                out.append(text)
            else:
                out.append(line)
    return out
