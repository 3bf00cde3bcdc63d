"""Layer-wise cosine-similarity drift between two models.

Two sources: final-position hidden-state dumps produced by an external
inference run, or the weight tensors themselves. Either way the output is one
mean cosine similarity per layer index, plus a threshold-based flagging of
candidate safety layers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .merge import DEFAULT_LAYER_PATTERN, classify_tensor_layer
from .tensorfile import Checkpoint, open_checkpoint, require_alignment, write_checkpoint

DEFAULT_SAFETY_RANGE = (6, 14)


def cosine_similarity(u, v) -> float:
    """u.v / (|u| |v|), accumulated in float64."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValidationError(
            f"dimension mismatch: {u.size} vs {v.size}", field="vectors"
        )
    nu = float(u @ u)
    nv = float(v @ v)
    if math.sqrt(nu) < 1e-12 or math.sqrt(nv) < 1e-12:
        raise ValidationError("near-zero norm vector in cosine similarity", field="vectors")
    # single sqrt of the product so identical inputs give exactly 1.0
    return float(u @ v) / math.sqrt(nu * nv)


@dataclass
class ActivationDump:
    """Final-position hidden states, one vector per (prompt, layer)."""

    prompts: list
    layers: int
    vectors: dict  # (prompt_id, layer_index) -> float32 vector

    def validate(self):
        dims = {v.shape[-1] for v in self.vectors.values()}
        if len(dims) > 1:
            raise ValidationError(f"inconsistent hidden dimensions: {sorted(dims)}")
        expected = {(p, l) for p in self.prompts for l in range(self.layers)}
        got = set(self.vectors)
        if got != expected:
            missing = sorted(expected - got)[:5]
            extra = sorted(got - expected)[:5]
            raise ValidationError(
                f"dump incomplete: missing {missing}, unexpected {extra}"
            )
        return self


def save_activation_dump(path, dump: ActivationDump):
    arrays = {}
    for (p, l), vec in dump.vectors.items():
        arrays[f"p{dump.prompts.index(p)}/l{l}"] = np.asarray(vec, dtype=np.float32)
    meta = {"prompts": json.dumps(list(dump.prompts)), "layers": str(dump.layers)}
    write_checkpoint(path, Checkpoint.from_arrays(arrays, dtypes="F32", metadata=meta))


def load_activation_dump(path) -> ActivationDump:
    ckpt = open_checkpoint(path)
    meta = ckpt.metadata
    if "prompts" not in meta or "layers" not in meta:
        raise ValidationError(f"{path} is not an activation dump (missing metadata)")
    prompts = json.loads(meta["prompts"])
    layers = int(meta["layers"])
    vectors = {}
    for name in ckpt.names():
        try:
            p_part, l_part = name.split("/")
            p_idx = int(p_part.removeprefix("p"))
            l_idx = int(l_part.removeprefix("l"))
        except (ValueError, AttributeError):
            raise ValidationError(f"bad dump tensor name {name!r} in {path}") from None
        vectors[(prompts[p_idx], l_idx)] = ckpt.read(name)
    return ActivationDump(prompts, layers, vectors).validate()


@dataclass
class DriftCurve:
    per_layer: dict  # layer index -> mean cosine similarity
    n_prompts: int
    source: str  # "activations" | "weights"
    stage_label: str = ""
    other: float = None  # weight-space bucket for tensors with no layer index

    def to_dict(self):
        return {
            "source": self.source,
            "stage_label": self.stage_label,
            "n_prompts": self.n_prompts,
            "per_layer": {str(k): self.per_layer[k] for k in sorted(self.per_layer)},
            "other": self.other,
        }


def activation_drift_curve(a: ActivationDump, b: ActivationDump, stage_label="") -> DriftCurve:
    """Mean over prompts of per-layer cosine similarity between two dumps."""
    if list(a.prompts) != list(b.prompts):
        raise ValidationError("dumps have different prompt lists", field="prompts")
    if a.layers != b.layers:
        raise ValidationError(
            f"dumps have different layer counts: {a.layers} vs {b.layers}", field="layers"
        )
    per_layer = {}
    for layer in range(a.layers):
        total = 0.0
        for prompt in a.prompts:
            try:
                total += cosine_similarity(a.vectors[(prompt, layer)], b.vectors[(prompt, layer)])
            except KeyError:
                raise ValidationError(
                    f"missing hidden state for (prompt={prompt!r}, layer={layer})"
                ) from None
            except ValidationError as exc:
                raise ValidationError(
                    f"(prompt={prompt!r}, layer={layer}): {exc}"
                ) from None
        per_layer[layer] = total / len(a.prompts)
    return DriftCurve(per_layer, n_prompts=len(a.prompts), source="activations",
                      stage_label=stage_label)


def weight_drift_curve(a, b, layer_pattern=DEFAULT_LAYER_PATTERN, stage_label="") -> DriftCurve:
    """One cosine similarity per layer over the concatenated flattened weights.

    Tensors carrying no layer index go into a separate "other" bucket rather
    than being dropped; concatenation order is lexicographic by name so the
    result is deterministic.
    """
    require_alignment(a, b, context="weight_drift_curve")
    groups = {}
    other_names = []
    for name in a.names():
        idx = classify_tensor_layer(name, layer_pattern)
        if idx is None:
            other_names.append(name)
        else:
            groups.setdefault(idx, []).append(name)
    per_layer = {}
    for idx in sorted(groups):
        ua = np.concatenate([a.read(n).ravel() for n in groups[idx]])
        ub = np.concatenate([b.read(n).ravel() for n in groups[idx]])
        per_layer[idx] = cosine_similarity(ua, ub)
    other = None
    if other_names:
        ua = np.concatenate([a.read(n).ravel() for n in other_names])
        ub = np.concatenate([b.read(n).ravel() for n in other_names])
        other = cosine_similarity(ua, ub)
    return DriftCurve(per_layer, n_prompts=0, source="weights",
                      stage_label=stage_label, other=other)


@dataclass
class SafetyLayerReport:
    flagged: list
    threshold: float
    expected_range: tuple
    overlap_fraction: float

    def to_dict(self):
        return {
            "flagged": list(self.flagged),
            "threshold": self.threshold,
            "expected_range": list(self.expected_range),
            "overlap_fraction": self.overlap_fraction,
        }


def flag_safety_layers(curve: DriftCurve, threshold,
                       expected_range=DEFAULT_SAFETY_RANGE) -> SafetyLayerReport:
    """Layers whose drift falls below threshold, scored against an expected
    safety-layer interval (inclusive)."""
    if not -1.0 < threshold < 1.0:
        raise ValidationError(
            f"threshold must lie in (-1, 1), got {threshold}", field="threshold"
        )
    flagged = sorted(l for l, v in curve.per_layer.items() if v < threshold)
    lo, hi = expected_range
    span = hi - lo + 1
    overlap = 0.0
    if span > 0:
        overlap = sum(1 for l in flagged if lo <= l <= hi) / span
    return SafetyLayerReport(flagged, float(threshold), (lo, hi), overlap)
