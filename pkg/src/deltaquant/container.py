"""Binary container for named float32/uint8 tensors (``.dqt`` files).

Layout: 4-byte magic ``DQTC``, u32 LE version (= 1), u64 LE header length,
a UTF-8 JSON header, then a data region starting at the first multiple of
64 at or past the header end. The header maps tensor names to
dtype/shape/offset/nbytes records (offsets relative to the data region,
each a multiple of 64) plus string-to-string metadata. Tensor records are
serialized in lexicographic name order and padding bytes are zero, so
identical maps always produce identical files.

Only rank-0/1/2 tensors are supported, stored row-major little-endian.
float32 carries model weights and statistics; uint8 carries packed code
buffers, which record their logical element count in an ``elements`` field.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DQTC"
VERSION = 1
ALIGNMENT = 64

_DTYPE_TO_TAG = {np.dtype(np.float32): "f32", np.dtype(np.uint8): "u8"}
_TAG_TO_DTYPE = {"f32": np.dtype(np.float32), "u8": np.dtype(np.uint8)}


class ContainerError(Exception):
    """Malformed container file or invalid tensor map."""


class CompatibilityError(Exception):
    """Two tensor maps do not describe the same set of tensors."""


class TensorMap:
    """Named collection of dense tensors plus string metadata.

    ``entries`` maps names to numpy arrays (float32 or uint8, rank <= 2).
    uint8 entries are packed buffers and must have a logical element count
    registered in ``elements``.
    """

    def __init__(
        self,
        entries: dict[str, np.ndarray] | None = None,
        meta: dict[str, str] | None = None,
        elements: dict[str, int] | None = None,
    ) -> None:
        self.entries: dict[str, np.ndarray] = dict(entries or {})
        self.meta: dict[str, str] = dict(meta or {})
        self.elements: dict[str, int] = dict(elements or {})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.entries[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return sorted(self.entries)

    def put_packed(self, name: str, buf: np.ndarray, elements: int) -> None:
        """Store a packed uint8 buffer together with its logical length."""
        self.entries[name] = np.ascontiguousarray(buf, dtype=np.uint8)
        self.elements[name] = int(elements)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TensorMap):
            return NotImplemented
        if self.meta != other.meta or set(self.entries) != set(other.entries):
            return False
        for name, arr in self.entries.items():
            brr = other.entries[name]
            if arr.dtype != brr.dtype or arr.shape != brr.shape:
                return False
            if arr.tobytes() != brr.tobytes():
                return False
            if self.elements.get(name) != other.elements.get(name):
                return False
        return True

    def __repr__(self) -> str:
        return f"TensorMap({len(self.entries)} tensors, meta={self.meta!r})"


def _align_up(n: int, alignment: int = ALIGNMENT) -> int:
    return (n + alignment - 1) // alignment * alignment


def _validate_for_save(tmap: TensorMap) -> None:
    if not isinstance(tmap.meta, dict) or any(
        not isinstance(k, str) or not isinstance(v, str) for k, v in tmap.meta.items()
    ):
        raise ContainerError("meta must map strings to strings")
    for name, arr in tmap.entries.items():
        if not isinstance(name, str) or not name or not name.isascii():
            raise ContainerError(f"invalid tensor name {name!r}: must be non-empty ASCII")
        if not isinstance(arr, np.ndarray):
            raise ContainerError(f"tensor {name!r} is not a numpy array")
        if arr.ndim > 2:
            raise ContainerError(f"tensor {name!r} has rank {arr.ndim}; rank <= 2 required")
        if arr.dtype not in _DTYPE_TO_TAG:
            raise ContainerError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        if arr.dtype == np.uint8 and name not in tmap.elements:
            raise ContainerError(f"packed tensor {name!r} is missing its element count")


def save_container(tmap: TensorMap, path: str | Path) -> None:
    """Write ``tmap`` to ``path`` in the container format.

    Deterministic: the same map always yields byte-identical files.
    """
    _validate_for_save(tmap)
    names = sorted(tmap.entries)
    records: dict[str, dict] = {}
    blobs: list[tuple[int, bytes]] = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(tmap.entries[name])
        data = arr.tobytes()
        rec = {
            "dtype": _DTYPE_TO_TAG[arr.dtype],
            "shape": [int(d) for d in arr.shape],
            "offset": offset,
            "nbytes": len(data),
        }
        if arr.dtype == np.uint8:
            rec["elements"] = int(tmap.elements[name])
        records[name] = rec
        blobs.append((offset, data))
        offset = _align_up(offset + len(data))

    header = json.dumps(
        {"meta": tmap.meta, "tensors": records},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    data_start = _align_up(16 + len(header))

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        if blobs:
            f.write(b"\x00" * (data_start - 16 - len(header)))
            pos = 0
            for off, data in blobs:
                f.write(b"\x00" * (off - pos))
                f.write(data)
                pos = off + len(data)


def _reject_duplicate_keys(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise ContainerError(f"duplicate name {key!r} in header")
        out[key] = value
    return out


def load_container(path: str | Path) -> TensorMap:
    """Read a container file, validating structure and bounds."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ContainerError("truncated header: file shorter than 16 bytes")
    if raw[:4] != MAGIC:
        raise ContainerError("bad magic: not a DQTC container")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    if 16 + header_len > len(raw):
        raise ContainerError("truncated header: declared length exceeds file size")
    try:
        header = json.loads(
            raw[16 : 16 + header_len].decode("utf-8"),
            object_pairs_hook=_reject_duplicate_keys,
        )
    except ContainerError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"malformed header JSON: {exc}") from exc

    if not isinstance(header, dict) or "meta" not in header or "tensors" not in header:
        raise ContainerError("header must contain 'meta' and 'tensors'")
    meta = header["meta"]
    tensors = header["tensors"]
    if not isinstance(meta, dict) or any(
        not isinstance(k, str) or not isinstance(v, str) for k, v in meta.items()
    ):
        raise ContainerError("meta must map strings to strings")
    if not isinstance(tensors, dict):
        raise ContainerError("tensor table must be a JSON object")

    data_start = _align_up(16 + header_len)
    tmap = TensorMap(meta=meta)
    for name in sorted(tensors):
        rec = tensors[name]
        if not name or not name.isascii():
            raise ContainerError(f"invalid tensor name {name!r}")
        if not isinstance(rec, dict):
            raise ContainerError(f"tensor record for {name!r} must be an object")
        dtype_tag = rec.get("dtype")
        if dtype_tag not in _TAG_TO_DTYPE:
            raise ContainerError(f"tensor {name!r}: unsupported dtype {dtype_tag!r}")
        shape = rec.get("shape")
        if (
            not isinstance(shape, list)
            or len(shape) > 2
            or any(not isinstance(d, int) or d < 0 for d in shape)
        ):
            raise ContainerError(f"tensor {name!r}: invalid shape {shape!r}")
        offset = rec.get("offset")
        nbytes = rec.get("nbytes")
        if not isinstance(offset, int) or not isinstance(nbytes, int) or nbytes < 0:
            raise ContainerError(f"tensor {name!r}: invalid offset/nbytes")
        if offset < 0:
            raise ContainerError(f"tensor {name!r}: header/data overlap (negative offset)")
        if offset % ALIGNMENT != 0:
            raise ContainerError(f"tensor {name!r}: offset {offset} not {ALIGNMENT}-byte aligned")
        dtype = _TAG_TO_DTYPE[dtype_tag]
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if expected != nbytes:
            raise ContainerError(
                f"tensor {name!r}: nbytes {nbytes} does not match shape {shape} ({expected})"
            )
        end = data_start + offset + nbytes
        if end > len(raw):
            raise ContainerError(f"truncated data: tensor {name!r} extends past end of file")
        buf = raw[data_start + offset : end]
        arr = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
        tmap.entries[name] = arr
        if dtype == np.uint8:
            elements = rec.get("elements", nbytes)
            if not isinstance(elements, int) or elements < 0:
                raise ContainerError(f"tensor {name!r}: invalid element count")
            tmap.elements[name] = elements
    return tmap


def check_compatible(a: TensorMap, b: TensorMap) -> None:
    """Verify that two maps are checkpoint-compatible.

    Compatibility means identical name sets, shapes, and dtypes. Raises
    CompatibilityError naming the first mismatch in sorted name order.
    """
    for name in sorted(set(a.entries) | set(b.entries)):
        if name not in a.entries:
            raise CompatibilityError(f"missing tensor {name!r} in first map")
        if name not in b.entries:
            raise CompatibilityError(f"missing tensor {name!r} in second map")
        ta, tb = a.entries[name], b.entries[name]
        if ta.shape != tb.shape:
            raise CompatibilityError(
                f"shape mismatch for {name!r}: {tuple(ta.shape)} vs {tuple(tb.shape)}"
            )
        if ta.dtype != tb.dtype:
            raise CompatibilityError(f"dtype mismatch for {name!r}: {ta.dtype} vs {tb.dtype}")
