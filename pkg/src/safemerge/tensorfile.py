"""Reading, writing, and alignment checking of tensor checkpoint files.

File layout: bytes 0-7 hold an unsigned 64-bit little-endian header length N,
bytes 8..8+N hold a UTF-8 JSON object mapping tensor name ->
{"dtype": "F32"|"F16"|"BF16", "shape": [...], "data_offsets": [begin, end]},
with an optional "__metadata__" string map. Offsets are relative to the start
of the data region (byte 8+N); tensor data is little-endian, row-major.

Sharded checkpoints are described by an index file:
JSON {"weight_map": {tensor-name: shard-filename}}.

All consumers work in float32; F16 and BF16 are widened losslessly on read and
narrowed with round-to-nearest-even on write.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, TensorFormatError, ValidationError

DTYPE_SIZES = {"F32": 4, "F16": 2, "BF16": 2}
DTYPE_POLICIES = ("preserve", "F32", "F16", "BF16")


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: str
    shape: tuple
    data_offsets: tuple

    @property
    def nbytes(self):
        return self.data_offsets[1] - self.data_offsets[0]

    @property
    def numel(self):
        return int(math.prod(self.shape))


def widen_to_f32(raw: bytes, dtype: str, shape) -> np.ndarray:
    """Decode little-endian tensor bytes to a float32 array (lossless)."""
    if dtype == "F32":
        arr = np.frombuffer(raw, dtype="<f4")
    elif dtype == "F16":
        arr = np.frombuffer(raw, dtype="<f2").astype(np.float32)
    elif dtype == "BF16":
        bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << np.uint32(16)
        arr = bits.view(np.float32)
    else:
        raise TensorFormatError(f"unsupported dtype {dtype!r}")
    return arr.reshape(shape).copy()


def narrow_from_f32(arr: np.ndarray, dtype: str) -> bytes:
    """Encode a float32 array as little-endian bytes of the target dtype.

    Narrowing uses round-to-nearest-even (numpy's cast for F16, explicit
    bias rounding for BF16).
    """
    flat = np.ascontiguousarray(arr, dtype="<f4").ravel()
    if dtype == "F32":
        return flat.tobytes()
    if dtype == "F16":
        return flat.astype("<f2").tobytes()
    if dtype == "BF16":
        bits = flat.view(np.uint32)
        bias = np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))
        out = ((bits + bias) >> np.uint32(16)).astype(np.uint16)
        nan = np.isnan(flat)
        if nan.any():
            # keep sign, force a quiet NaN payload
            out[nan] = ((bits[nan] >> np.uint32(16)) | np.uint32(0x0040)).astype(np.uint16)
        return out.astype("<u2").tobytes()
    raise TensorFormatError(f"unsupported dtype {dtype!r}")


class _FileSource:
    """Lazy byte source: reads a tensor's slice of a shard on demand."""

    def __init__(self, path, offset, length):
        self.path = path
        self.offset = offset
        self.length = length

    def get(self) -> bytes:
        with open(self.path, "rb") as fh:
            fh.seek(self.offset)
            data = fh.read(self.length)
        if len(data) != self.length:
            raise TensorFormatError(f"truncated file {self.path}")
        return data


class _BytesSource:
    def __init__(self, data: bytes):
        self.data = data

    def get(self) -> bytes:
        return self.data


class Checkpoint:
    """Immutable named tensor collection with deterministic iteration order."""

    def __init__(self, entries, metadata=None):
        # entries: name -> (TensorMeta, source with .get() -> bytes)
        self._entries = dict(entries)
        self.metadata = dict(metadata) if metadata else {}
        for name, (meta, _) in self._entries.items():
            if not name:
                raise ValidationError("tensor name must be non-empty", field="name")
            if meta.numel * DTYPE_SIZES[meta.dtype] != meta.nbytes:
                raise TensorFormatError(
                    f"tensor {name!r}: shape {list(meta.shape)} does not match "
                    f"byte range length {meta.nbytes}"
                )

    def names(self):
        return sorted(self._entries)

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def meta(self, name) -> TensorMeta:
        try:
            return self._entries[name][0]
        except KeyError:
            raise KeyError(f"unknown tensor name {name!r}") from None

    def raw_bytes(self, name) -> bytes:
        meta = self.meta(name)
        return self._entries[name][1].get()

    def read(self, name) -> np.ndarray:
        """Tensor values widened to float32 (lossless for F16/BF16)."""
        meta = self.meta(name)
        return widen_to_f32(self.raw_bytes(name), meta.dtype, meta.shape)

    def dtypes(self):
        return {n: self.meta(n).dtype for n in self.names()}

    @classmethod
    def from_arrays(cls, arrays, dtypes="F32", metadata=None):
        """Build an in-memory checkpoint from float arrays.

        dtypes is either one dtype token for all tensors or a name -> dtype map.
        """
        entries = {}
        offset = 0
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype=np.float32)
            dt = dtypes if isinstance(dtypes, str) else dtypes[name]
            if dt not in DTYPE_SIZES:
                raise TensorFormatError(f"unsupported dtype {dt!r}")
            raw = narrow_from_f32(arr, dt)
            meta = TensorMeta(name, dt, tuple(arr.shape), (offset, offset + len(raw)))
            entries[name] = (meta, _BytesSource(raw))
            offset += len(raw)
        return cls(entries, metadata=metadata)


@dataclass
class AlignmentReport:
    common: list = field(default_factory=list)
    missing_in_a: list = field(default_factory=list)
    missing_in_b: list = field(default_factory=list)
    shape_mismatches: list = field(default_factory=list)
    dtype_mismatches: list = field(default_factory=list)

    def is_clean(self):
        return not (
            self.missing_in_a
            or self.missing_in_b
            or self.shape_mismatches
            or self.dtype_mismatches
        )

    def summary(self):
        parts = []
        if self.missing_in_a:
            parts.append(f"missing in a: {self.missing_in_a}")
        if self.missing_in_b:
            parts.append(f"missing in b: {self.missing_in_b}")
        if self.shape_mismatches:
            parts.append(f"shape mismatches: {self.shape_mismatches}")
        if self.dtype_mismatches:
            parts.append(f"dtype mismatches: {self.dtype_mismatches}")
        return "; ".join(parts) or "aligned"


def validate_alignment(a: Checkpoint, b: Checkpoint, names=None) -> AlignmentReport:
    """Partition the union of tensor names into alignment categories.

    When `names` is given, only those names are considered (include/exclude
    filtering happens upstream).
    """
    names_a = set(a.names()) if names is None else set(a.names()) & set(names)
    names_b = set(b.names()) if names is None else set(b.names()) & set(names)
    report = AlignmentReport()
    report.missing_in_b = sorted(names_a - names_b)
    report.missing_in_a = sorted(names_b - names_a)
    for name in sorted(names_a & names_b):
        ma, mb = a.meta(name), b.meta(name)
        if ma.shape != mb.shape:
            report.shape_mismatches.append((name, list(ma.shape), list(mb.shape)))
        elif ma.dtype != mb.dtype:
            report.dtype_mismatches.append((name, ma.dtype, mb.dtype))
        else:
            report.common.append(name)
    return report


def require_alignment(a, b, names=None, context="merge"):
    report = validate_alignment(a, b, names=names)
    if not report.is_clean():
        raise AlignmentError(f"{context}: checkpoints not aligned ({report.summary()})", report)
    return report


def _parse_header(blob: bytes, path):
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFormatError(f"malformed header JSON in {path}: {exc}") from None
    if not isinstance(header, dict):
        raise TensorFormatError(f"malformed header in {path}: not a JSON object")
    return header


def _open_single(path) -> Checkpoint:
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8:
            raise TensorFormatError(f"malformed header in {path}: file too short")
        n = int.from_bytes(head, "little")
        if n == 0 or 8 + n > size:
            raise TensorFormatError(f"malformed header in {path}: bad header length {n}")
        header = _parse_header(fh.read(n), path)

    data_start = 8 + n
    data_len = size - data_start
    metadata = header.pop("__metadata__", None)
    if metadata is not None and not (
        isinstance(metadata, dict)
        and all(isinstance(k, str) and isinstance(v, str) for k, v in metadata.items())
    ):
        raise TensorFormatError(f"malformed __metadata__ in {path}: must map strings to strings")

    entries = {}
    spans = []
    for name, spec in header.items():
        if not isinstance(spec, dict):
            raise TensorFormatError(f"malformed header entry for {name!r} in {path}")
        dtype = spec.get("dtype")
        if dtype not in DTYPE_SIZES:
            raise TensorFormatError(f"unsupported dtype {dtype!r} for tensor {name!r} in {path}")
        shape = spec.get("shape")
        if not isinstance(shape, list) or any(not isinstance(d, int) or d < 0 for d in shape):
            raise TensorFormatError(f"bad shape for tensor {name!r} in {path}")
        offs = spec.get("data_offsets")
        if (
            not isinstance(offs, list)
            or len(offs) != 2
            or any(not isinstance(o, int) for o in offs)
            or not 0 <= offs[0] <= offs[1]
        ):
            raise TensorFormatError(f"bad data_offsets for tensor {name!r} in {path}")
        begin, end = offs
        if end > data_len:
            raise TensorFormatError(
                f"truncated file {path}: tensor {name!r} ends at {end} "
                f"but data region holds {data_len} bytes"
            )
        if math.prod(shape) * DTYPE_SIZES[dtype] != end - begin:
            raise TensorFormatError(
                f"tensor {name!r} in {path}: shape {shape} does not match byte range"
            )
        meta = TensorMeta(name, dtype, tuple(shape), (begin, end))
        entries[name] = (meta, _FileSource(path, data_start + begin, end - begin))
        spans.append((begin, end, name))

    spans.sort()
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if e0 > b1:
            raise TensorFormatError(
                f"overlapping byte ranges in {path}: {n0!r} [{b0},{e0}) and {n1!r} [{b1},{e1})"
            )
    return Checkpoint(entries, metadata=metadata)


def _open_sharded(index_path) -> Checkpoint:
    with open(index_path, "rb") as fh:
        try:
            index = json.load(fh)
        except json.JSONDecodeError as exc:
            raise TensorFormatError(f"malformed shard index {index_path}: {exc}") from None
    weight_map = index.get("weight_map")
    if not isinstance(weight_map, dict):
        raise TensorFormatError(f"shard index {index_path} lacks a weight_map object")
    base_dir = os.path.dirname(os.path.abspath(index_path))
    shards = {}
    for shard_name in sorted(set(weight_map.values())):
        shards[shard_name] = _open_single(os.path.join(base_dir, shard_name))
    entries = {}
    metadata = {}
    for shard in shards.values():
        metadata.update(shard.metadata)
    for name, shard_name in weight_map.items():
        shard = shards[shard_name]
        if name not in shard:
            raise TensorFormatError(f"tensor {name!r} not found in shard {shard_name}")
        entries[name] = (shard.meta(name), _BytesSource(shard.raw_bytes(name)))
    return Checkpoint(entries, metadata=metadata or None)


def open_checkpoint(path) -> Checkpoint:
    """Open a single tensor file, or a sharded checkpoint via its .json index."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if path.endswith(".json"):
        return _open_sharded(path)
    return _open_single(path)


def write_checkpoint(path, ckpt: Checkpoint, dtype_policy="preserve"):
    """Serialize a checkpoint deterministically.

    Names are laid out in lexicographic order and the header JSON is canonical
    (sorted keys, no insignificant whitespace), so the same tensor map always
    produces byte-identical files. dtype_policy is "preserve" (keep each
    tensor's stored dtype) or one of "F32"/"F16"/"BF16" to force narrowing.
    """
    if dtype_policy not in DTYPE_POLICIES:
        raise ValidationError(f"unknown dtype policy {dtype_policy!r}", field="dtype_policy")
    names = ckpt.names()
    header = {}
    payloads = []
    offset = 0
    for name in names:
        meta = ckpt.meta(name)
        out_dtype = meta.dtype if dtype_policy == "preserve" else dtype_policy
        if out_dtype == meta.dtype:
            raw = ckpt.raw_bytes(name)
        else:
            raw = narrow_from_f32(ckpt.read(name), out_dtype)
        header[name] = {
            "dtype": out_dtype,
            "shape": list(meta.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        payloads.append(raw)
        offset += len(raw)
    if ckpt.metadata:
        header["__metadata__"] = dict(sorted(ckpt.metadata.items()))
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)
