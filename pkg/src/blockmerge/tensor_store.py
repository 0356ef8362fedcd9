"""Flat tensor archives (safetensors-compatible).

Layout: bytes 0..7 hold a little-endian uint64 ``N``; bytes 8..8+N hold a
UTF-8 JSON object mapping tensor name -> {"dtype", "shape", "data_offsets"};
the rest is raw row-major little-endian tensor data. ``data_offsets`` are
relative to the first byte after the header and must tile the data section
contiguously in header order. An optional ``__metadata__`` string map is
preserved opaquely.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import MalformedHeader, TruncatedData, UnsupportedDtype
from .naming import compile_name_pattern

DTYPES = {
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "U8": np.dtype("|u1"),  # bit-packed masks
}
_NP_TO_CODE = {v: k for k, v in DTYPES.items()}


def dtype_code(arr: np.ndarray) -> str:
    try:
        return _NP_TO_CODE[arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype]
    except KeyError:
        raise UnsupportedDtype(f"no archive dtype for numpy dtype {arr.dtype}")


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: str  # wire code, e.g. "F32"
    shape: tuple[int, ...]
    byte_offset: int
    byte_length: int


@dataclass
class Checkpoint:
    """Ordered named tensors plus opaque metadata.

    Insertion order of ``tensors`` is the archive header order. Arrays are
    little-endian and C-contiguous; treat a loaded checkpoint as immutable.
    """

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] | None = None
    source_path: str | None = None

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def metas(self) -> list[TensorMeta]:
        offset = 0
        out = []
        for name, arr in self.tensors.items():
            n = arr.nbytes
            out.append(TensorMeta(name, dtype_code(arr), tuple(arr.shape), offset, n))
            offset += n
        return out

    def same_tensors(self, other: "Checkpoint") -> bool:
        if self.names != other.names or (self.metadata or None) != (other.metadata or None):
            return False
        for name in self.tensors:
            a, b = self.tensors[name], other.tensors[name]
            if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True


def _canonical(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:  # ascontiguousarray would flatten 0-d
        arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    if arr.dtype not in _NP_TO_CODE:
        raise UnsupportedDtype(f"unsupported dtype {arr.dtype}")
    return arr


def read_archive(path: str) -> Checkpoint:
    """Parse an archive file into a Checkpoint.

    Raises MalformedHeader, UnsupportedDtype or TruncatedData; never reads
    past the declared extents.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise MalformedHeader(f"{path}: file shorter than the 8-byte length prefix")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if header_len > len(blob) - 8:
        raise MalformedHeader(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"{path}: header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeader(f"{path}: header must be a JSON object")

    metadata = header.pop("__metadata__", None)
    if metadata is not None and not (
        isinstance(metadata, dict) and all(isinstance(v, str) for v in metadata.values())
    ):
        raise MalformedHeader(f"{path}: __metadata__ must be a string map")

    data = blob[8 + header_len :]
    tensors: dict[str, np.ndarray] = {}
    expected_offset = 0
    for name, entry in header.items():
        if not isinstance(entry, dict):
            raise MalformedHeader(f"{path}: entry for {name!r} is not an object")
        code = entry.get("dtype")
        if code not in DTYPES:
            raise UnsupportedDtype(f"{path}: tensor {name!r} has dtype {code!r}")
        shape = entry.get("shape")
        if not isinstance(shape, list) or any(not isinstance(s, int) or s < 0 for s in shape):
            raise MalformedHeader(f"{path}: tensor {name!r} has invalid shape {shape!r}")
        offsets = entry.get("data_offsets")
        if not (isinstance(offsets, list) and len(offsets) == 2 and all(isinstance(o, int) for o in offsets)):
            raise MalformedHeader(f"{path}: tensor {name!r} has invalid data_offsets")
        begin, end = offsets
        dtype = DTYPES[code]
        count = math.prod(shape)
        if begin != expected_offset or end - begin != count * dtype.itemsize:
            raise MalformedHeader(
                f"{path}: tensor {name!r} offsets [{begin}, {end}) do not tile the data section"
            )
        if end > len(data):
            raise TruncatedData(f"{path}: data section ends at {len(data)}, tensor {name!r} needs {end}")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=begin).reshape(shape).copy()
        tensors[name] = arr
        expected_offset = end
    if expected_offset != len(data):
        raise MalformedHeader(f"{path}: {len(data) - expected_offset} trailing bytes after last tensor")
    return Checkpoint(tensors=tensors, metadata=metadata, source_path=path)


def write_archive(checkpoint: Checkpoint, path: str) -> None:
    """Serialize a Checkpoint; reading the file back yields an equal Checkpoint."""
    header: dict[str, object] = {}
    if checkpoint.metadata is not None:
        header["__metadata__"] = dict(checkpoint.metadata)
    arrays = []
    offset = 0
    for name, arr in checkpoint.tensors.items():
        arr = _canonical(arr)
        arrays.append(arr)
        header[name] = {
            "dtype": dtype_code(arr),
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + arr.nbytes],
        }
        offset += arr.nbytes
    payload = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for arr in arrays:
            fh.write(arr.tobytes())


@dataclass
class AlignmentReport:
    ok: bool
    mismatches: list[tuple[str, str]]  # (tensor name, kind in {missing, shape, dtype})


def validate_aligned(
    pretrained: Checkpoint,
    finetuned: list[Checkpoint],
    exclude: list[str] | None = None,
) -> AlignmentReport:
    """Check that every non-excluded tensor exists in all checkpoints with the
    same shape and dtype. Excluded names (e.g. task heads) are ignored."""
    patterns = [compile_name_pattern(p) for p in (exclude or [])]

    def keep(name: str) -> bool:
        return not any(p.fullmatch(name) for p in patterns)

    mismatches: list[tuple[str, str]] = []
    seen = set()
    base = {n: t for n, t in pretrained.tensors.items() if keep(n)}
    for ckpt in finetuned:
        for name, ref in base.items():
            if name not in ckpt.tensors:
                key = (name, "missing")
            else:
                arr = ckpt.tensors[name]
                if arr.shape != ref.shape:
                    key = (name, "shape")
                elif arr.dtype != ref.dtype:
                    key = (name, "dtype")
                else:
                    continue
            if key not in seen:
                seen.add(key)
                mismatches.append(key)
        for name in ckpt.tensors:
            if keep(name) and name not in base:
                key = (name, "missing")
                if key not in seen:
                    seen.add(key)
                    mismatches.append(key)
    return AlignmentReport(ok=not mismatches, mismatches=mismatches)
