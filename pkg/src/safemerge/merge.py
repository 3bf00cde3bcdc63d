"""Checkpoint merging: linear interpolation, task arithmetic, TIES, DARE,
plus layer freeze masks that pin chosen layers to a base model byte-exactly.

All arithmetic runs in float32 regardless of stored dtype; outputs default to
preserving each tensor's dtype from the first operand so merged checkpoints
are drop-in replacements.
"""

from __future__ import annotations

import fnmatch
import hashlib
import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .rng import uniform_stream
from .tensorfile import Checkpoint, TensorMeta, _BytesSource, require_alignment

DEFAULT_LAYER_PATTERN = r"layers.([0-9]+)."

MERGE_METHODS = ("linear", "task_arithmetic", "ties", "dare")


def classify_tensor_layer(name: str, layer_pattern: str = DEFAULT_LAYER_PATTERN):
    """Layer index captured from a tensor name, or None for non-layer tensors."""
    try:
        pattern = re.compile(layer_pattern)
    except re.error as exc:
        raise ValidationError(f"invalid layer pattern: {exc}", field="layer_pattern") from None
    if pattern.groups != 1:
        raise ValidationError(
            "layer pattern must have exactly one capture group", field="layer_pattern"
        )
    m = pattern.search(name)
    if m is None:
        return None
    return int(m.group(1))


def filter_names(names, include=None, exclude=None):
    """Apply include/exclude glob lists; empty include means everything."""
    selected = list(names)
    if include:
        selected = [n for n in selected if any(fnmatch.fnmatchcase(n, g) for g in include)]
    if exclude:
        selected = [n for n in selected if not any(fnmatch.fnmatchcase(n, g) for g in exclude)]
    return selected


@dataclass
class LayerMask:
    """Freeze set: layer indices plus extra name globs pinned to the base model."""

    frozen_layers: set = field(default_factory=set)
    layer_pattern: str = DEFAULT_LAYER_PATTERN
    also_freeze: list = field(default_factory=list)

    def is_frozen(self, name: str) -> bool:
        idx = classify_tensor_layer(name, self.layer_pattern)
        if idx is not None and idx in self.frozen_layers:
            return True
        return any(fnmatch.fnmatchcase(name, g) for g in self.also_freeze)


@dataclass
class MergeRecipe:
    method: str
    alpha: float = None
    scale_lambda: float = 1.0
    density: float = None
    drop_p: float = None
    seed: int = 0
    layer_mask: LayerMask = None
    include: list = field(default_factory=list)
    exclude: list = field(default_factory=list)

    def validate(self):
        if self.method not in MERGE_METHODS:
            raise ValidationError(f"unknown method {self.method!r}", field="method")
        if self.method == "linear":
            if self.alpha is None or not 0.0 <= self.alpha <= 1.0:
                raise ValidationError(
                    f"alpha must lie in [0, 1], got {self.alpha}", field="alpha"
                )
        else:
            if not self.scale_lambda > 0:
                raise ValidationError(
                    f"lambda must be > 0, got {self.scale_lambda}", field="lambda"
                )
        if self.method == "ties":
            if self.density is None or not 0.0 < self.density <= 1.0:
                raise ValidationError(
                    f"density must lie in (0, 1], got {self.density}", field="density"
                )
        if self.method == "dare":
            if self.drop_p is None or not 0.0 <= self.drop_p < 1.0:
                raise ValidationError(
                    f"drop_p must lie in [0, 1), got {self.drop_p}", field="drop_p"
                )
            if not 0 <= int(self.seed) < 2**64:
                raise ValidationError("seed must be an unsigned 64-bit int", field="seed")
        return self


@dataclass
class TaskVector:
    """Per-tensor deltas (fine-tuned minus base) pinned to a base fingerprint."""

    deltas: dict
    base_fingerprint: str


def checkpoint_fingerprint(ckpt: Checkpoint) -> str:
    """Hash of tensor metas (names, dtypes, shapes); identifies a base layout."""
    payload = json.dumps(
        [[n, ckpt.meta(n).dtype, list(ckpt.meta(n).shape)] for n in ckpt.names()],
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def _output_dtypes(source: Checkpoint, names, policy):
    if policy == "preserve":
        return {n: source.meta(n).dtype for n in names}
    return {n: policy for n in names}


def linear_merge(a, b, alpha, include=None, exclude=None, output_dtype="preserve"):
    """alpha * a + (1 - alpha) * b, elementwise in float32."""
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}", field="alpha")
    names = filter_names(set(a.names()) | set(b.names()), include, exclude)
    require_alignment(a, b, names=names, context="linear_merge")
    wa = np.float32(alpha)
    wb = np.float32(1.0 - alpha)
    out = {n: wa * a.read(n) + wb * b.read(n) for n in sorted(names)}
    return Checkpoint.from_arrays(out, dtypes=_output_dtypes(a, names, output_dtype))


def task_vector(fine_tuned, base, include=None, exclude=None) -> TaskVector:
    names = filter_names(set(fine_tuned.names()) | set(base.names()), include, exclude)
    require_alignment(fine_tuned, base, names=names, context="task_vector")
    deltas = {n: fine_tuned.read(n) - base.read(n) for n in sorted(names)}
    return TaskVector(deltas, checkpoint_fingerprint(base))


def _check_vectors(base, vectors):
    fp = checkpoint_fingerprint(base)
    for i, vec in enumerate(vectors):
        if vec.base_fingerprint != fp:
            raise ValidationError(
                f"task vector {i} was built against a different base checkpoint",
                field="base_fingerprint",
            )
        for name, delta in vec.deltas.items():
            if name not in base or tuple(delta.shape) != base.meta(name).shape:
                raise ValidationError(
                    f"task vector {i}: delta {name!r} does not match base",
                    field="deltas",
                )


def apply_task_vectors(base, vectors, scale_lambda=1.0, output_dtype="preserve"):
    """base + lambda * sum(deltas), elementwise in float32."""
    _check_vectors(base, vectors)
    lam = np.float32(scale_lambda)
    out = {}
    for name in base.names():
        acc = None
        for vec in vectors:
            if name in vec.deltas:
                d = vec.deltas[name]
                acc = d.copy() if acc is None else acc + d
        val = base.read(name)
        if acc is not None:
            val = val + lam * acc
        out[name] = val
    return Checkpoint.from_arrays(
        out, dtypes=_output_dtypes(base, base.names(), output_dtype), metadata=base.metadata
    )


def ties_trim(delta: np.ndarray, density: float) -> np.ndarray:
    """Keep the ceil(density * n) largest-magnitude elements, zero the rest.

    Magnitude ties keep the lower flat index first (stable sort).
    """
    flat = delta.ravel()
    n = flat.size
    if n == 0:
        return delta.copy()
    k = math.ceil(density * n)
    order = np.argsort(-np.abs(flat), kind="stable")
    trimmed = np.zeros_like(flat)
    keep = order[:k]
    trimmed[keep] = flat[keep]
    return trimmed.reshape(delta.shape)


def ties_merge(base, vectors, density, scale_lambda=1.0, output_dtype="preserve"):
    """Trim / elect-sign / disjoint-mean merge of task vectors onto base.

    Per tensor, per element: trim each vector to its top-magnitude fraction,
    elect the sign of the trimmed sum, and average the kept values agreeing
    with that sign. A zero trimmed sum (including all-dropped elements) yields
    a zero merged delta.
    """
    if not vectors:
        raise ValidationError("ties_merge needs at least one task vector", field="vectors")
    if not 0.0 < density <= 1.0:
        raise ValidationError(f"density must lie in (0, 1], got {density}", field="density")
    _check_vectors(base, vectors)
    key_sets = [set(v.deltas) for v in vectors]
    if any(ks != key_sets[0] for ks in key_sets[1:]):
        raise ValidationError("task vectors cover different tensor sets", field="deltas")

    lam = np.float32(scale_lambda)
    out = {}
    for name in base.names():
        val = base.read(name)
        if name not in key_sets[0]:
            out[name] = val
            continue
        trimmed = [ties_trim(v.deltas[name], density).ravel() for v in vectors]
        n = val.size
        total = np.zeros(n, dtype=np.float32)
        for t in trimmed:
            total = total + t
        elected = np.sign(total)
        acc = np.zeros(n, dtype=np.float32)
        cnt = np.zeros(n, dtype=np.float32)
        for t in trimmed:
            agree = (np.sign(t) == elected) & (elected != 0) & (t != 0)
            acc[agree] += t[agree]
            cnt[agree] += np.float32(1.0)
        merged = np.zeros(n, dtype=np.float32)
        nz = cnt > 0
        merged[nz] = acc[nz] / cnt[nz]
        out[name] = val + lam * merged.reshape(val.shape)
    return Checkpoint.from_arrays(
        out, dtypes=_output_dtypes(base, base.names(), output_dtype), metadata=base.metadata
    )


def dare_sparsify(vector: TaskVector, drop_p: float, seed: int) -> TaskVector:
    """Randomly drop delta entries with probability drop_p, rescale survivors
    by 1/(1 - drop_p).

    The drop pattern is a pure function of (seed, tensor name, element index),
    so the same inputs always give identical output regardless of tensor order
    or parallelism.
    """
    if not 0.0 <= drop_p < 1.0:
        raise ValidationError(f"drop_p must lie in [0, 1), got {drop_p}", field="drop_p")
    scale = np.float32(1.0 / (1.0 - drop_p))
    out = {}
    for name in sorted(vector.deltas):
        delta = vector.deltas[name]
        flat = delta.ravel()
        u = uniform_stream(int(seed), name, flat.size)
        kept = np.where(u < drop_p, np.float32(0.0), flat * scale)
        out[name] = kept.reshape(delta.shape).astype(np.float32)
    return TaskVector(out, vector.base_fingerprint)


def dare_merge(base, vectors, drop_p, seed, scale_lambda=1.0, output_dtype="preserve"):
    """DARE: sparsify each task vector, then apply via task arithmetic."""
    sparsified = [dare_sparsify(v, drop_p, seed) for v in vectors]
    return apply_task_vectors(base, sparsified, scale_lambda, output_dtype=output_dtype)


def apply_layer_mask(merged, base, mask: LayerMask, output_dtype="preserve"):
    """Copy frozen tensors byte-exactly from base; pass the rest through."""
    require_alignment(merged, base, context="apply_layer_mask")
    entries = {}
    offset = 0
    for name in merged.names():
        src = base if mask.is_frozen(name) else merged
        raw = src.raw_bytes(name)
        meta = src.meta(name)
        m = TensorMeta(name, meta.dtype, meta.shape, (offset, offset + len(raw)))
        entries[name] = (m, _BytesSource(raw))
        offset += len(raw)
    return Checkpoint(entries, metadata=merged.metadata)
