"""File formats: MNIST-style IDX tensors, the TNSR named-tensor container,
and JSON-lines scene annotations.

All readers validate fully before returning: a parsed object is either
completely valid or a DataError is raised, never a truncated result.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .grids import BBox

IDX_UBYTE = 0x08
IDX_REAL32 = 0x0D
_IDX_DTYPE_SIZE = {IDX_UBYTE: 1, IDX_REAL32: 4}

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1
TNSR_DTYPE_UBYTE = 1
TNSR_DTYPE_REAL32 = 2


@dataclass
class IdxHeader:
    dtype_code: int
    dims: list[int]

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def magic(self) -> int:
        """Header words as one big-endian integer (2051 for ubyte rank-3)."""
        return (self.dtype_code << 8) | self.ndim


def parse_idx_header(data: bytes) -> tuple[IdxHeader, int]:
    """Decode the IDX header; returns (header, payload offset)."""
    if len(data) < 4:
        raise DataError("IDX stream shorter than magic")
    if data[0] != 0 or data[1] != 0:
        raise DataError(f"bad magic: first bytes {data[0]:#04x} {data[1]:#04x}, expected zeros")
    dtype_code, ndim = data[2], data[3]
    if dtype_code not in _IDX_DTYPE_SIZE:
        raise DataError(f"unsupported IDX dtype code {dtype_code:#04x}")
    offset = 4 + 4 * ndim
    if len(data) < offset:
        raise DataError("IDX stream truncated in dimension list")
    dims = [struct.unpack_from(">I", data, 4 + 4 * i)[0] for i in range(ndim)]
    return IdxHeader(dtype_code, dims), offset


def parse_idx(data: bytes, rescale: bool = False) -> tuple[IdxHeader, np.ndarray]:
    """Parse a full IDX stream into (header, array).

    With ``rescale`` a ubyte payload is converted to float32 in [0, 1].
    """
    header, offset = parse_idx_header(data)
    count = int(np.prod(header.dims, dtype=np.int64)) if header.dims else 1
    expected = count * _IDX_DTYPE_SIZE[header.dtype_code]
    payload = data[offset:]
    if len(payload) != expected:
        raise DataError(f"IDX payload is {len(payload)} bytes, expected {expected}")
    if header.dtype_code == IDX_UBYTE:
        arr = np.frombuffer(payload, dtype=np.uint8).reshape(header.dims)
        if rescale:
            arr = (arr.astype(np.float32) / np.float32(255.0))
    else:
        arr = np.frombuffer(payload, dtype=">f4").astype(np.float32).reshape(header.dims)
    return header, arr.copy()


def write_idx(header: IdxHeader, tensor: np.ndarray) -> bytes:
    """Serialize to IDX bytes; inverse of parse_idx (bit-exact round-trip)."""
    tensor = np.asarray(tensor)
    if not header.dims:
        raise DataError("IDX header needs at least one dimension")
    if list(tensor.shape) != list(header.dims):
        raise DataError(f"tensor shape {tensor.shape} does not match header dims {header.dims}")
    out = bytearray([0, 0, header.dtype_code, header.ndim])
    for d in header.dims:
        out += struct.pack(">I", d)
    if header.dtype_code == IDX_UBYTE:
        if tensor.dtype != np.uint8:
            raise DataError(f"ubyte header but tensor dtype {tensor.dtype}")
        out += tensor.tobytes()
    elif header.dtype_code == IDX_REAL32:
        if tensor.dtype != np.float32:
            raise DataError(f"real32 header but tensor dtype {tensor.dtype}")
        out += tensor.astype(">f4").tobytes()
    else:
        raise DataError(f"unsupported IDX dtype code {header.dtype_code:#04x}")
    return bytes(out)


def load_idx(path, rescale: bool = False) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_idx(fh.read(), rescale=rescale)[1]


def save_idx(path, tensor: np.ndarray) -> None:
    tensor = np.asarray(tensor)
    code = IDX_UBYTE if tensor.dtype == np.uint8 else IDX_REAL32
    if code == IDX_REAL32:
        tensor = tensor.astype(np.float32)
    blob = write_idx(IdxHeader(code, list(tensor.shape)), tensor)
    with open(path, "wb") as fh:
        fh.write(blob)


# -- TNSR container ------------------------------------------------------
#
# magic "TNSR", u32 LE version, then per entry:
#   u16 LE name length, UTF-8 name, u8 dtype {1=ubyte, 2=real32},
#   u8 ndim, ndim x u64 LE dims, raw little-endian payload.


def write_container_bytes(tensors: dict[str, np.ndarray]) -> bytes:
    out = bytearray(TNSR_MAGIC)
    out += struct.pack("<I", TNSR_VERSION)
    seen = set()
    for name, arr in tensors.items():
        if name in seen:
            raise DataError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        if arr.dtype == np.uint8:
            code = TNSR_DTYPE_UBYTE
        elif arr.dtype == np.float32:
            code = TNSR_DTYPE_REAL32
        else:
            raise DataError(f"tensor {name!r} has unsupported dtype {arr.dtype} (use uint8 or float32)")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise DataError(f"tensor name too long: {name[:32]!r}...")
        out += struct.pack("<H", len(raw))
        out += raw
        out += struct.pack("<BB", code, arr.ndim)
        for d in arr.shape:
            out += struct.pack("<Q", d)
        out += np.ascontiguousarray(arr, dtype="<u1" if code == TNSR_DTYPE_UBYTE else "<f4").tobytes()
    return bytes(out)


def read_container_bytes(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != TNSR_MAGIC:
        raise DataError(f"bad container magic {data[:4]!r}")
    if len(data) < 8:
        raise DataError("container truncated in version field")
    version = struct.unpack_from("<I", data, 4)[0]
    if version != TNSR_VERSION:
        raise DataError(f"unsupported container version {version}")
    pos = 8
    tensors: dict[str, np.ndarray] = {}
    while pos < len(data):
        if pos + 2 > len(data):
            raise DataError("container truncated in name length")
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + nlen + 2 > len(data):
            raise DataError("container truncated in entry header")
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        if code not in (TNSR_DTYPE_UBYTE, TNSR_DTYPE_REAL32):
            raise DataError(f"tensor {name!r}: unknown dtype code {code}")
        if pos + 8 * ndim > len(data):
            raise DataError(f"tensor {name!r}: truncated dimension list")
        dims = [struct.unpack_from("<Q", data, pos + 8 * i)[0] for i in range(ndim)]
        pos += 8 * ndim
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        nbytes = count * (1 if code == TNSR_DTYPE_UBYTE else 4)
        if pos + nbytes > len(data):
            raise DataError(f"tensor {name!r}: truncated payload")
        raw = data[pos : pos + nbytes]
        pos += nbytes
        if name in tensors:
            raise DataError(f"duplicate tensor name {name!r}")
        dt = np.uint8 if code == TNSR_DTYPE_UBYTE else np.dtype("<f4")
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(
            np.uint8 if code == TNSR_DTYPE_UBYTE else np.float32
        )
    return tensors


def write_container(path, tensors: dict[str, np.ndarray]) -> None:
    blob = write_container_bytes(tensors)
    with open(path, "wb") as fh:
        fh.write(blob)


def read_container(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_container_bytes(fh.read())


def pack_json(obj) -> np.ndarray:
    """JSON-encode into a ubyte tensor, for metadata entries in containers."""
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def unpack_json(arr: np.ndarray):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))


# -- annotations ----------------------------------------------------------


@dataclass
class SceneAnnotation:
    image_id: str
    class_id: int
    count: int
    boxes: list[BBox] = field(default_factory=list)

    def __post_init__(self):
        if self.count < 0:
            raise DataError(f"{self.image_id}: negative count")
        if self.count != len(self.boxes):
            raise DataError(
                f"{self.image_id}: count {self.count} != number of boxes {len(self.boxes)}"
            )


def save_annotations(path, annotations: list[SceneAnnotation], meta: dict | None = None) -> None:
    """Write one JSON object per line; optional leading _run_config line."""
    with open(path, "w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(json.dumps({"_run_config": meta}, sort_keys=True) + "\n")
        for ann in annotations:
            rec = {
                "image_id": ann.image_id,
                "class_id": ann.class_id,
                "count": ann.count,
                "boxes": [[float(v) for v in b.as_list()] for b in ann.boxes],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_annotations(path) -> list[SceneAnnotation]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if "_run_config" in rec:
                continue
            try:
                boxes = [BBox(*map(float, b)) for b in rec["boxes"]]
                out.append(
                    SceneAnnotation(
                        image_id=str(rec["image_id"]),
                        class_id=int(rec["class_id"]),
                        count=int(rec["count"]),
                        boxes=boxes,
                    )
                )
            except (KeyError, TypeError, ValueError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out
