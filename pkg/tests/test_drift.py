import math

import numpy as np
import pytest

from safemerge.drift import (
    ActivationDump,
    activation_drift_curve,
    cosine_similarity,
    flag_safety_layers,
    load_activation_dump,
    save_activation_dump,
    weight_drift_curve,
    DriftCurve,
)
from safemerge.errors import AlignmentError, ValidationError
from safemerge.merge import LayerMask, apply_layer_mask, linear_merge
from safemerge.tensorfile import Checkpoint


def make_dump(rng, prompts, layers, dim=8):
    vectors = {(p, l): rng.standard_normal(dim).astype(np.float32)
               for p in prompts for l in range(layers)}
    return ActivationDump(list(prompts), layers, vectors).validate()


def layered_ckpt(rng, n_layers=4, dim=6):
    arrays = {}
    for i in range(n_layers):
        arrays[f"model.layers.{i}.attn.weight"] = rng.standard_normal((dim, dim)).astype(np.float32)
        arrays[f"model.layers.{i}.mlp.weight"] = rng.standard_normal(dim).astype(np.float32)
    arrays["lm_head.weight"] = rng.standard_normal(dim).astype(np.float32)
    return Checkpoint.from_arrays(arrays)


class TestCosine:
    def test_identical_is_exactly_one(self):
        assert cosine_similarity([3.0, 4.0], [3.0, 4.0]) == 1.0

    def test_orthogonal(self):
        assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_45_degrees(self):
        assert cosine_similarity([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1 / math.sqrt(2), abs=1e-4)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        u, v = rng.standard_normal(32), rng.standard_normal(32)
        for c in (1e-6, 0.5, 3.0, 1e6):
            assert cosine_similarity(c * u, v) == pytest.approx(
                cosine_similarity(u, v), abs=1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError, match="dimension"):
            cosine_similarity([1.0], [1.0, 2.0])

    def test_near_zero_norm_is_loud(self):
        with pytest.raises(ValidationError, match="near-zero"):
            cosine_similarity([0.0, 0.0], [1.0, 0.0])


class TestActivationDrift:
    def test_self_comparison_is_one(self):
        dump = make_dump(np.random.default_rng(1), ["p0", "p1"], layers=3)
        curve = activation_drift_curve(dump, dump)
        assert all(v == 1.0 for v in curve.per_layer.values())
        assert curve.source == "activations"
        assert curve.n_prompts == 2

    def test_mean_of_two_prompts(self):
        # prompt q0: identical vectors (cos 1); prompt q1: orthogonal (cos 0)
        a = ActivationDump(["q0", "q1"], 1, {
            ("q0", 0): np.array([1.0, 0.0], np.float32),
            ("q1", 0): np.array([1.0, 0.0], np.float32),
        }).validate()
        b = ActivationDump(["q0", "q1"], 1, {
            ("q0", 0): np.array([1.0, 0.0], np.float32),
            ("q1", 0): np.array([0.0, 1.0], np.float32),
        }).validate()
        curve = activation_drift_curve(a, b)
        assert curve.per_layer[0] == pytest.approx(0.5)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(2)
        prompts = [f"p{i}" for i in range(8)]
        a = make_dump(rng, prompts, layers=4)
        b = make_dump(rng, prompts, layers=4)
        curve = activation_drift_curve(a, b)
        for layer in range(4):
            total = 0.0
            for p in prompts:
                u = a.vectors[(p, layer)].astype(np.float64)
                v = b.vectors[(p, layer)].astype(np.float64)
                total += float(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v))
            assert curve.per_layer[layer] == pytest.approx(total / 8, abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        prompts = ["p0", "p1", "p2"]
        a = make_dump(rng, prompts, layers=2)
        b = make_dump(rng, prompts, layers=2)
        ab = activation_drift_curve(a, b).per_layer
        ba = activation_drift_curve(b, a).per_layer
        for layer in ab:
            assert ab[layer] == pytest.approx(ba[layer], abs=1e-12)

    def test_prompt_mismatch(self):
        rng = np.random.default_rng(4)
        a = make_dump(rng, ["p0"], layers=2)
        b = make_dump(rng, ["p1"], layers=2)
        with pytest.raises(ValidationError, match="prompt"):
            activation_drift_curve(a, b)

    def test_error_carries_prompt_and_layer(self):
        a = ActivationDump(["p0"], 1, {("p0", 0): np.array([1.0], np.float32)}).validate()
        b = ActivationDump(["p0"], 1, {("p0", 0): np.array([0.0], np.float32)}).validate()
        with pytest.raises(ValidationError, match=r"prompt='p0', layer=0"):
            activation_drift_curve(a, b)

    def test_dump_file_roundtrip(self, tmp_path):
        dump = make_dump(np.random.default_rng(5), ["a", "b"], layers=3, dim=4)
        path = tmp_path / "dump.st"
        save_activation_dump(path, dump)
        loaded = load_activation_dump(path)
        assert loaded.prompts == dump.prompts
        assert loaded.layers == dump.layers
        for key in dump.vectors:
            np.testing.assert_array_equal(loaded.vectors[key], dump.vectors[key])


class TestWeightDrift:
    def test_identical_checkpoints(self):
        ckpt = layered_ckpt(np.random.default_rng(6))
        curve = weight_drift_curve(ckpt, ckpt)
        assert all(v == 1.0 for v in curve.per_layer.values())
        assert curve.other == 1.0
        assert curve.source == "weights"

    def test_negated_checkpoint(self):
        ckpt = layered_ckpt(np.random.default_rng(7))
        neg = Checkpoint.from_arrays({n: -ckpt.read(n) for n in ckpt.names()})
        curve = weight_drift_curve(ckpt, neg)
        assert all(v == pytest.approx(-1.0) for v in curve.per_layer.values())

    def test_frozen_layer_certificate(self):
        rng = np.random.default_rng(8)
        base = layered_ckpt(rng)
        other = layered_ckpt(rng)
        merged = linear_merge(other, base, 0.5)
        masked = apply_layer_mask(merged, base, LayerMask(frozen_layers={1, 2}))
        curve = weight_drift_curve(masked, base)
        assert curve.per_layer[1] == 1.0
        assert curve.per_layer[2] == 1.0
        assert curve.per_layer[0] < 1.0
        assert curve.per_layer[3] < 1.0

    def test_misaligned(self):
        a = layered_ckpt(np.random.default_rng(9), n_layers=2)
        b = layered_ckpt(np.random.default_rng(9), n_layers=3)
        with pytest.raises(AlignmentError):
            weight_drift_curve(a, b)


class TestFlagging:
    def test_all_one_curve_flags_nothing(self):
        curve = DriftCurve({l: 1.0 for l in range(16)}, 0, "weights")
        report = flag_safety_layers(curve, 0.5)
        assert report.flagged == []
        assert report.overlap_fraction == 0.0

    def test_constructed_safety_band(self):
        per_layer = {l: (0.4 if 6 <= l <= 14 else 0.9) for l in range(32)}
        report = flag_safety_layers(DriftCurve(per_layer, 0, "weights"), 0.5)
        assert report.flagged == list(range(6, 15))
        assert report.overlap_fraction == 1.0

    def test_vacuous_threshold(self):
        rng = np.random.default_rng(10)
        per_layer = {l: float(rng.uniform(-0.9, 1.0)) for l in range(8)}
        report = flag_safety_layers(DriftCurve(per_layer, 0, "weights"), -0.99)
        assert report.flagged == []

    def test_threshold_out_of_range(self):
        curve = DriftCurve({0: 0.5}, 0, "weights")
        with pytest.raises(ValidationError, match="threshold"):
            flag_safety_layers(curve, 1.0)

    def test_curve_json_shape(self):
        curve = DriftCurve({1: 0.5, 0: 0.9}, 3, "activations", stage_label="mid")
        d = curve.to_dict()
        assert list(d["per_layer"]) == ["0", "1"]
        assert d["stage_label"] == "mid"
        assert d["other"] is None
