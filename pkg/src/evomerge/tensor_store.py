"""Checkpoint container, weight flattening, and elementwise vector arithmetic.

Checkpoints are stored in the common header+buffer tensor layout: an 8-byte
little-endian header length, a UTF-8 JSON table mapping tensor names to
``{"dtype": "F32", "shape": [...], "data_offsets": [begin, end]}`` (plus an
optional ``"__metadata__"`` string map), followed by the raw little-endian
float32 buffers. Files written here are readable by standard tooling for that
layout, and serialization is deterministic: the same map always produces the
same bytes.

Only 32-bit floats are supported; anything else is rejected rather than
converted, so a save/load round trip is bit-exact (NaN payloads included).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

F32 = np.dtype("<f4")

_HEADER_LEN_BYTES = 8
_METADATA_KEY = "__metadata__"


class CheckpointError(ValueError):
    """Malformed, truncated, or unsupported checkpoint file."""


class SchemaMismatch(ValueError):
    """Tensors or vectors do not agree on names, shapes, or layout."""


class TensorMap:
    """A named collection of float32 tensors; one checkpoint in memory.

    Iteration order is the lexicographic order of tensor names. Instances are
    immutable after construction (backing arrays are marked read-only), so
    they are safe to share across threads.
    """

    def __init__(self, tensors=None, metadata=None):
        self._tensors: dict[str, np.ndarray] = {}
        self.metadata: dict[str, str] = {str(k): str(v) for k, v in (metadata or {}).items()}
        for name, data in (tensors or {}).items():
            if not isinstance(name, str) or not name:
                raise CheckpointError(f"tensor names must be non-empty strings, got {name!r}")
            if name == _METADATA_KEY:
                raise CheckpointError(f"{_METADATA_KEY!r} is reserved and cannot name a tensor")
            arr = np.asarray(data)
            if arr.dtype != F32:
                if arr.dtype.kind not in "fiu":
                    raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
                # Accept exact python/int inputs for convenience; reject other float widths.
                if arr.dtype.kind == "f" and arr.dtype.itemsize != 8:
                    raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
                arr = arr.astype(F32)
            arr = np.ascontiguousarray(arr, dtype=F32)
            if arr.ndim == 0:
                arr = arr.reshape(1)
            arr = arr.copy()
            arr.flags.writeable = False
            self._tensors[name] = arr
        self._order = tuple(sorted(self._tensors))

    def names(self) -> tuple[str, ...]:
        return self._order

    def __iter__(self):
        return iter(self._order)

    def __len__(self) -> int:
        return len(self._order)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def tensor(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def shape(self, name: str) -> tuple[int, ...]:
        return tuple(self._tensors[name].shape)

    def items(self):
        for name in self._order:
            yield name, self._tensors[name]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorMap):
            return NotImplemented
        if self._order != other._order or self.metadata != other.metadata:
            return False
        for name in self._order:
            a, b = self._tensors[name], other._tensors[name]
            if a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}:{list(t.shape)}" for n, t in self.items())
        return f"TensorMap({inner})"


@dataclass(frozen=True)
class ParamSlot:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(math.prod(self.shape))


@dataclass(frozen=True)
class ParamSchema:
    """Flattening layout: ordered (name, shape, offset) slots over a length-d vector.

    Slot order is the lexicographic tensor-name order, offsets are contiguous
    from 0, and ``total_dim`` is the sum of the slot sizes.
    """

    slots: tuple[ParamSlot, ...]
    total_dim: int

    def __post_init__(self):
        offset = 0
        names = set()
        for slot in self.slots:
            if slot.name in names:
                raise SchemaMismatch(f"duplicate slot name {slot.name!r}")
            names.add(slot.name)
            if slot.offset != offset:
                raise SchemaMismatch(f"slot {slot.name!r} offset {slot.offset} != expected {offset}")
            offset += slot.size
        if offset != self.total_dim:
            raise SchemaMismatch(f"total_dim {self.total_dim} != sum of slot sizes {offset}")

    @classmethod
    def from_shapes(cls, shapes: dict[str, tuple[int, ...]]) -> "ParamSchema":
        slots = []
        offset = 0
        for name in sorted(shapes):
            shape = tuple(int(s) for s in shapes[name])
            if any(s <= 0 for s in shape):
                raise SchemaMismatch(f"non-positive dimension in shape of {name!r}: {shape}")
            slots.append(ParamSlot(name, shape, offset))
            offset += int(math.prod(shape))
        return cls(slots=tuple(slots), total_dim=offset)

    @classmethod
    def from_tensor_map(cls, tmap: TensorMap) -> "ParamSchema":
        return cls.from_shapes({name: tmap.shape(name) for name in tmap})

    def slot(self, name: str) -> ParamSlot:
        for s in self.slots:
            if s.name == name:
                return s
        raise KeyError(name)

    def digest(self) -> str:
        """Stable hash of the layout, for run manifests."""
        payload = json.dumps(
            [[s.name, list(s.shape), s.offset] for s in self.slots], separators=(",", ":")
        ).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True)
class FlatVector:
    """A checkpoint flattened to a length-d float32 vector under a ParamSchema.

    Immutable; two vectors are combinable only when their schemas are equal.
    """

    schema: ParamSchema
    values: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=F32)
        if arr.ndim != 1:
            raise SchemaMismatch(f"flat vector must be 1-D, got shape {arr.shape}")
        if arr.shape[0] != self.schema.total_dim:
            raise SchemaMismatch(
                f"vector length {arr.shape[0]} != schema total_dim {self.schema.total_dim}"
            )
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return self.schema.total_dim

    def same_schema(self, other: "FlatVector") -> bool:
        return self.schema == other.schema

    def bitwise_equal(self, other: "FlatVector") -> bool:
        return self.schema == other.schema and self.values.tobytes() == other.values.tobytes()


def require_same_schema(*vectors: FlatVector) -> ParamSchema:
    schema = vectors[0].schema
    for v in vectors[1:]:
        if v.schema != schema:
            raise SchemaMismatch("flat vectors do not share a schema")
    return schema


def flatten(tmap: TensorMap, schema: ParamSchema) -> FlatVector:
    """Concatenate the map's tensors (row-major) into a flat vector per the schema."""
    names = tmap.names()
    schema_names = tuple(s.name for s in schema.slots)
    if names != schema_names:
        missing = set(schema_names) - set(names)
        extra = set(names) - set(schema_names)
        raise SchemaMismatch(f"tensor names differ from schema (missing={sorted(missing)}, extra={sorted(extra)})")
    out = np.empty(schema.total_dim, dtype=F32)
    for slot in schema.slots:
        t = tmap.tensor(slot.name)
        if tuple(t.shape) != slot.shape:
            raise SchemaMismatch(f"tensor {slot.name!r} shape {tuple(t.shape)} != schema {slot.shape}")
        out[slot.offset : slot.offset + slot.size] = t.reshape(-1)
    return FlatVector(schema=schema, values=out)


def unflatten(vec: FlatVector, metadata: dict[str, str] | None = None) -> TensorMap:
    """Inverse of :func:`flatten` under the vector's schema."""
    tensors = {}
    for slot in vec.schema.slots:
        tensors[slot.name] = vec.values[slot.offset : slot.offset + slot.size].reshape(slot.shape)
    return TensorMap(tensors, metadata=metadata)


def axpy(a: float, x: FlatVector, y: FlatVector) -> FlatVector:
    """Elementwise ``a*x + y`` in float32; inputs are never modified."""
    schema = require_same_schema(x, y)
    return FlatVector(schema=schema, values=np.float32(a) * x.values + y.values)


def zeros_like(vec: FlatVector) -> FlatVector:
    return FlatVector(schema=vec.schema, values=np.zeros(vec.dim, dtype=F32))


def _encode_header(tmap: TensorMap) -> bytes:
    header: dict[str, object] = {}
    if tmap.metadata:
        header[_METADATA_KEY] = dict(sorted(tmap.metadata.items()))
    offset = 0
    for name, tensor in tmap.items():
        nbytes = tensor.size * 4
        header[name] = {
            "dtype": "F32",
            "shape": list(tensor.shape),
            "data_offsets": [offset, offset + nbytes],
        }
        offset += nbytes
    raw = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    # Pad to an 8-byte boundary with spaces (JSON whitespace), as common writers do.
    raw += b" " * (-(_HEADER_LEN_BYTES + len(raw)) % 8)
    return raw


def save_checkpoint(tmap: TensorMap, path) -> None:
    """Write the map to ``path``; same map always yields identical bytes."""
    raw_header = _encode_header(tmap)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw_header)))
        fh.write(raw_header)
        for _, tensor in tmap.items():
            fh.write(tensor.tobytes())


def _reject_duplicates(pairs):
    obj = {}
    for key, value in pairs:
        if key in obj:
            raise CheckpointError(f"duplicate tensor name {key!r} in header")
        obj[key] = value
    return obj


def load_checkpoint(path) -> TensorMap:
    """Read a checkpoint written by :func:`save_checkpoint` (or compatible tooling)."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER_LEN_BYTES:
        raise CheckpointError("malformed header: file shorter than the 8-byte length prefix")
    (header_len,) = struct.unpack("<Q", blob[:_HEADER_LEN_BYTES])
    if header_len == 0:
        raise CheckpointError("malformed header: zero-length header")
    end = _HEADER_LEN_BYTES + header_len
    if end > len(blob):
        raise CheckpointError("truncated buffer: header extends past end of file")
    try:
        header = json.loads(blob[_HEADER_LEN_BYTES:end].decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except CheckpointError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise CheckpointError("malformed header: top-level JSON value is not an object")

    metadata = header.pop(_METADATA_KEY, {})
    if not isinstance(metadata, dict) or any(
        not isinstance(k, str) or not isinstance(v, str) for k, v in metadata.items()
    ):
        raise CheckpointError("malformed header: __metadata__ must be a string map")

    data = blob[end:]
    tensors: dict[str, np.ndarray] = {}
    expected_offset = 0
    for name in sorted(header):
        info = header[name]
        if not name:
            raise CheckpointError("malformed header: empty tensor name")
        if not isinstance(info, dict) or set(info) != {"dtype", "shape", "data_offsets"}:
            raise CheckpointError(f"malformed header: bad entry for {name!r}")
        if info["dtype"] != "F32":
            raise CheckpointError(f"unsupported dtype {info['dtype']!r} for tensor {name!r}")
        shape = info["shape"]
        if not isinstance(shape, list) or any(not isinstance(s, int) or s <= 0 for s in shape):
            raise CheckpointError(f"malformed header: bad shape for {name!r}: {shape}")
        offsets = info["data_offsets"]
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or any(not isinstance(o, int) or o < 0 for o in offsets)
        ):
            raise CheckpointError(f"malformed header: bad data_offsets for {name!r}")
        begin, stop = offsets
        nbytes = int(math.prod(shape)) * 4
        if stop - begin != nbytes:
            raise CheckpointError(
                f"malformed header: {name!r} length {stop - begin} != shape product {nbytes}"
            )
        if begin != expected_offset:
            raise CheckpointError(
                f"malformed header: offsets for {name!r} are not contiguous in name order"
            )
        if stop > len(data):
            raise CheckpointError(f"truncated buffer: tensor {name!r} extends past end of file")
        tensors[name] = np.frombuffer(data, dtype=F32, count=nbytes // 4, offset=begin).reshape(shape)
        expected_offset = stop
    if expected_offset != len(data):
        raise CheckpointError(
            f"truncated buffer: {len(data) - expected_offset} trailing bytes after last tensor"
        )
    return TensorMap(tensors, metadata=metadata)
