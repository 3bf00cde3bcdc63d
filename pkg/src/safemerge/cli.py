"""Command-line surface: merge recipes, alpha sweeps, drift analysis, metric
computation, and report collection.

Exit codes: 0 success, 2 validation error, 3 alignment error, 4 external
service error, 5 I/O error. Failures also emit one machine-readable JSON
object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import os
import sys

from . import __version__
from .errors import (
    EXIT_ALIGNMENT,
    EXIT_EXTERNAL,
    EXIT_IO,
    EXIT_OK,
    EXIT_VALIDATION,
    AlignmentError,
    JudgeError,
    ValidationError,
)
from .drift import (
    activation_drift_curve,
    flag_safety_layers,
    load_activation_dump,
    weight_drift_curve,
)
from .judge import JudgeConfig, label_records
from .merge import DEFAULT_LAYER_PATTERN
from .metrics import load_keywords, load_records, build_report
from .sweep import SweepPlan, metrics_from_path, run_merge, run_ratio_sweep
from .tensorfile import open_checkpoint


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _cmd_merge(args):
    output = run_merge(args.recipe)
    print(output)
    return EXIT_OK


def _cmd_sweep(args):
    plan = SweepPlan.from_file(args.plan)
    report = run_ratio_sweep(plan)
    print(json.dumps({"best_alpha": report.best_alpha,
                      "rows": len(report.rows),
                      "output_dir": plan.output_dir}))
    return EXIT_OK


def _cmd_drift(args):
    if args.dumps:
        curve = activation_drift_curve(
            load_activation_dump(args.a), load_activation_dump(args.b),
            stage_label=args.stage_label,
        )
    else:
        curve = weight_drift_curve(
            open_checkpoint(args.a), open_checkpoint(args.b),
            layer_pattern=args.pattern, stage_label=args.stage_label,
        )
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "drift_curve.json"), curve.to_dict())
    report = flag_safety_layers(curve, args.threshold)
    _write_json(os.path.join(out_dir, "safety_layers.json"), report.to_dict())
    print(json.dumps({"flagged": report.flagged,
                      "overlap_fraction": report.overlap_fraction}))
    return EXIT_OK


def _cmd_eval(args):
    keywords = load_keywords(args.keywords) if args.keywords else None
    out_path = args.out or "metrics_report.json"
    with open(args.records, encoding="utf-8") as fh:
        head = fh.read(1)
    if head == "{" and _is_aggregate_file(args.records):
        report = metrics_from_path(args.records, keywords=keywords)
    else:
        records = load_records(args.records)
        if args.judge:
            cfg = JudgeConfig.from_file(args.judge)
            cache = args.cache or out_path + ".judge_cache.jsonl"
            records = label_records(records, cfg, cache_path=cache)
        report = build_report(records, keywords=keywords)
    _write_json(out_path, report.to_dict())
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def _is_aggregate_file(path):
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        rest = fh.readline()
    if rest.strip():
        return False
    try:
        obj = json.loads(first)
    except json.JSONDecodeError:
        return False
    return isinstance(obj, dict) and ("asr_text" in obj or "accuracy" in obj)


def _cmd_report(args):
    rows = []
    for path in sorted(glob.glob(os.path.join(args.in_dir, "*.json"))):
        with open(path, encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError:
                continue
        if isinstance(obj, dict) and "cumulative" in obj:
            rows.append({"file": os.path.basename(path), **obj})
    if args.format == "json":
        print(json.dumps({"reports": rows}, sort_keys=True, indent=2))
    else:
        fields = ["file", "asr_text", "asr_multimodal", "refusal_rate",
                  "accuracy", "complement_asr", "cumulative"]
        writer = csv.writer(sys.stdout)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([row.get(f) for f in fields])
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="safemerge",
        description="Checkpoint merging and safety-drift analysis toolkit.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("merge", help="run one merge recipe")
    p.add_argument("recipe", help="recipe JSON path")
    p.set_defaults(func=_cmd_merge)

    p = sub.add_parser("sweep", help="alpha-grid sweep with best-ratio selection")
    p.add_argument("plan", help="sweep plan JSON path")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("drift", help="layer-wise cosine drift between two models")
    p.add_argument("--a", required=True, help="first checkpoint or dump")
    p.add_argument("--b", required=True, help="second checkpoint or dump")
    p.add_argument("--dumps", action="store_true",
                   help="inputs are activation dumps, not weight checkpoints")
    p.add_argument("--pattern", default=DEFAULT_LAYER_PATTERN,
                   help="layer-index capture pattern for tensor names")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="flag layers whose similarity falls below this")
    p.add_argument("--stage-label", default="", help="free-form stage tag for the curve")
    p.add_argument("--out", help="output directory (default: cwd)")
    p.set_defaults(func=_cmd_drift)

    p = sub.add_parser("eval", help="compute metrics from eval records")
    p.add_argument("--records", required=True, help="JSONL records or pre-aggregated JSON")
    p.add_argument("--keywords", help="refusal keyword list, one per line")
    p.add_argument("--judge", help="judge config JSON for unlabeled records")
    p.add_argument("--cache", help="judge verdict cache path")
    p.add_argument("--out", help="metrics report output path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="collect metric reports into one table")
    p.add_argument("--in", dest="in_dir", required=True, help="directory of report JSONs")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=_cmd_report)

    return parser


def _fail(exc, code):
    payload = {"error": type(exc).__name__, "message": str(exc)}
    field = getattr(exc, "field", None)
    if field:
        payload["field"] = field
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AlignmentError as exc:
        return _fail(exc, EXIT_ALIGNMENT)
    except ValidationError as exc:
        return _fail(exc, EXIT_VALIDATION)
    except JudgeError as exc:
        return _fail(exc, EXIT_EXTERNAL)
    except OSError as exc:
        return _fail(exc, EXIT_IO)


if __name__ == "__main__":
    sys.exit(main())
