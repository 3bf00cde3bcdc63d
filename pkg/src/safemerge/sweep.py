"""Merge-recipe execution and alpha-grid sweeps with best-ratio selection.

A recipe file drives one merge; a sweep plan drives a grid of linear merges,
scores each point from per-alpha eval inputs, and picks the alpha maximizing
the cumulative score (ties broken toward larger alpha, i.e. more safety
weight).
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

from . import __version__
from .errors import ValidationError
from .merge import (
    LayerMask,
    MergeRecipe,
    apply_layer_mask,
    dare_merge,
    linear_merge,
    task_vector,
    ties_merge,
    apply_task_vectors,
)
from .metrics import MetricsReport, build_report, load_keywords, load_records
from .tensorfile import open_checkpoint, write_checkpoint


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def load_recipe(path):
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"malformed recipe JSON: {exc}") from None
    return obj


def recipe_from_dict(obj) -> MergeRecipe:
    mask = None
    if obj.get("frozen_layers") or obj.get("also_freeze"):
        mask = LayerMask(
            frozen_layers=set(obj.get("frozen_layers", [])),
            layer_pattern=obj.get("layer_pattern", LayerMask().layer_pattern),
            also_freeze=list(obj.get("also_freeze", [])),
        )
    recipe = MergeRecipe(
        method=obj.get("method"),
        alpha=obj.get("alpha"),
        scale_lambda=obj.get("lambda", 1.0),
        density=obj.get("density"),
        drop_p=obj.get("drop_p"),
        seed=obj.get("seed", 0),
        layer_mask=mask,
        include=list(obj.get("include", [])),
        exclude=list(obj.get("exclude", [])),
    )
    return recipe.validate()


def _execute(recipe: MergeRecipe, inputs, output_dtype="preserve"):
    if recipe.method == "linear":
        for key in ("a", "b"):
            if key not in inputs:
                raise ValidationError(f"linear recipe needs inputs.{key}", field="inputs")
        a = open_checkpoint(inputs["a"])
        b = open_checkpoint(inputs["b"])
        merged = linear_merge(a, b, recipe.alpha, recipe.include, recipe.exclude,
                              output_dtype=output_dtype)
        mask_base = a
    else:
        if "base" not in inputs or not inputs.get("finetuned"):
            raise ValidationError(
                f"{recipe.method} recipe needs inputs.base and inputs.finetuned",
                field="inputs",
            )
        base = open_checkpoint(inputs["base"])
        vectors = [
            task_vector(open_checkpoint(p), base, recipe.include, recipe.exclude)
            for p in inputs["finetuned"]
        ]
        if recipe.method == "task_arithmetic":
            merged = apply_task_vectors(base, vectors, recipe.scale_lambda,
                                        output_dtype=output_dtype)
        elif recipe.method == "ties":
            merged = ties_merge(base, vectors, recipe.density, recipe.scale_lambda,
                                output_dtype=output_dtype)
        else:
            merged = dare_merge(base, vectors, recipe.drop_p, recipe.seed,
                                recipe.scale_lambda, output_dtype=output_dtype)
        mask_base = base
    if recipe.layer_mask is not None:
        if "mask_base" in inputs:
            mask_base = open_checkpoint(inputs["mask_base"])
        merged = apply_layer_mask(merged, mask_base, recipe.layer_mask)
    return merged


def run_merge(recipe_path) -> str:
    """Execute one recipe file; writes the merged checkpoint plus a
    provenance sidecar and returns the output path."""
    obj = load_recipe(recipe_path)
    recipe = recipe_from_dict(obj)
    inputs = obj.get("inputs") or {}
    output = obj.get("output")
    if not output:
        raise ValidationError("recipe lacks an output path", field="output")
    merged = _execute(recipe, inputs, output_dtype=obj.get("output_dtype", "preserve"))
    write_checkpoint(output, merged)
    provenance = {
        "tool": "safemerge",
        "version": __version__,
        "recipe_sha256": hashlib.sha256(canonical_json(obj).encode()).hexdigest(),
        "inputs": {
            key: {"path": str(p), "sha256": _sha256_file(p)}
            for key, p in _flatten_inputs(inputs)
        },
        "output_sha256": _sha256_file(output),
    }
    with open(output + ".provenance.json", "w", encoding="utf-8") as fh:
        json.dump(provenance, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return output


def _flatten_inputs(inputs):
    for key, value in sorted(inputs.items()):
        if isinstance(value, list):
            for i, p in enumerate(value):
                yield f"{key}[{i}]", p
        else:
            yield key, value


def metrics_from_path(path, keywords=None) -> MetricsReport:
    """Load eval input: JSONL of records, or a JSON object of pre-aggregated
    {asr_text, asr_multimodal, accuracy[, refusal_rate]} values."""
    with open(path, encoding="utf-8") as fh:
        head = fh.read(1)
    if head == "{":
        with open(path, encoding="utf-8") as fh:
            first_line = fh.readline()
            rest = fh.readline()
        if not rest.strip():
            try:
                obj = json.loads(first_line)
            except json.JSONDecodeError:
                obj = None
            if isinstance(obj, dict) and ("asr_text" in obj or "accuracy" in obj):
                return MetricsReport.from_aggregates(
                    asr_text=obj.get("asr_text"),
                    asr_multimodal=obj.get("asr_multimodal"),
                    accuracy=obj.get("accuracy"),
                    refusal=obj.get("refusal_rate"),
                )
    return build_report(load_records(path), keywords=keywords)


@dataclass
class SweepPlan:
    alpha_grid: list
    eval_inputs: dict  # alpha -> eval input path
    output_dir: str
    recipe_base: dict = None
    keywords_path: str = None

    def validate(self):
        if not self.alpha_grid:
            raise ValidationError("alpha_grid is empty", field="alpha_grid")
        if any(not 0.0 <= a <= 1.0 for a in self.alpha_grid):
            raise ValidationError("alpha_grid values must lie in [0, 1]", field="alpha_grid")
        if sorted(set(self.alpha_grid)) != list(self.alpha_grid):
            raise ValidationError(
                "alpha_grid must be strictly increasing with unique values",
                field="alpha_grid",
            )
        for alpha in self.alpha_grid:
            if self._eval_input(alpha) is None:
                raise ValidationError(f"no eval input for alpha={alpha}", field="eval_inputs")
        return self

    def _eval_input(self, alpha):
        key = self.eval_inputs.get(str(alpha))
        if key is None:
            key = self.eval_inputs.get(f"{alpha:g}")
        return key

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"malformed sweep plan JSON: {exc}") from None
        try:
            plan = cls(
                alpha_grid=[float(a) for a in obj["alpha_grid"]],
                eval_inputs={str(k): v for k, v in obj.get("eval_inputs", {}).items()},
                output_dir=obj["output_dir"],
                recipe_base=obj.get("recipe_base"),
                keywords_path=obj.get("keywords"),
            )
        except KeyError as exc:
            raise ValidationError(f"sweep plan missing field {exc.args[0]!r}") from None
        return plan.validate()


@dataclass
class SweepReport:
    rows: list  # (alpha, MetricsReport)
    best_alpha: float
    score_used: str = "cumulative"

    def to_dict(self):
        return {
            "score_used": self.score_used,
            "best_alpha": self.best_alpha,
            "rows": [
                {"alpha": alpha, **report.to_dict()} for alpha, report in self.rows
            ],
        }


def select_best_alpha(rows):
    """Argmax of cumulative score; equal scores resolve to the larger alpha."""
    scored = [(alpha, rep) for alpha, rep in rows if rep.cumulative is not None]
    if not scored:
        raise ValidationError("no sweep row carries a cumulative score")
    return max(scored, key=lambda pair: (pair[1].cumulative, pair[0]))[0]


def run_ratio_sweep(plan: SweepPlan) -> SweepReport:
    """Merge (when checkpoints are given) and score every grid point, then
    pick the best ratio. A per-alpha failure aborts with that alpha named;
    rows completed so far are still written out."""
    os.makedirs(plan.output_dir, exist_ok=True)
    keywords = load_keywords(plan.keywords_path) if plan.keywords_path else None
    rows = []
    try:
        for alpha in plan.alpha_grid:
            try:
                if plan.recipe_base and plan.recipe_base.get("inputs"):
                    recipe_obj = dict(plan.recipe_base)
                    recipe_obj.setdefault("method", "linear")
                    recipe_obj["alpha"] = alpha
                    recipe = recipe_from_dict(recipe_obj)
                    merged = _execute(recipe, recipe_obj["inputs"])
                    out_path = os.path.join(plan.output_dir, f"merged_alpha_{alpha:g}.safetensors")
                    write_checkpoint(out_path, merged)
                report = metrics_from_path(plan._eval_input(alpha), keywords=keywords)
                if report.cumulative is None:
                    raise ValidationError(
                        "eval input yields no cumulative score "
                        "(needs both ASRs and accuracy)"
                    )
                rows.append((alpha, report))
            except ValidationError as exc:
                raise ValidationError(f"alpha={alpha:g}: {exc}", field=exc.field) from exc
            except OSError as exc:
                raise OSError(f"alpha={alpha:g}: {exc}") from exc
    finally:
        if rows:
            _write_sweep_outputs(plan.output_dir, rows, partial=len(rows) < len(plan.alpha_grid))
    report = SweepReport(rows=rows, best_alpha=select_best_alpha(rows))
    _write_sweep_outputs(plan.output_dir, rows, best_alpha=report.best_alpha)
    return report


def _write_sweep_outputs(output_dir, rows, best_alpha=None, partial=False):
    payload = {
        "score_used": "cumulative",
        "best_alpha": best_alpha,
        "partial": partial,
        "rows": [{"alpha": a, **rep.to_dict()} for a, rep in rows],
    }
    with open(os.path.join(output_dir, "sweep_report.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(output_dir, "sweep_report.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "asr_text", "asr_multimodal", "refusal_rate",
                         "accuracy", "complement_asr", "cumulative"])
        for alpha, rep in rows:
            writer.writerow([alpha, rep.asr_text, rep.asr_multimodal, rep.refusal_rate,
                             rep.accuracy, rep.complement_asr, rep.cumulative])
