"""Single executable surface over the pipeline.

Exit codes: 0 success, 1 usage error, 2 data error, 3 scorer/detector protocol error.
Config files (TOML or JSON) mirror the pipeline/sampling/augment/match settings; flags
win over config values. Unknown config keys are rejected.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

import mitodet
from mitodet import trainmath
from mitodet.augment import AugmentConfig, StainProfile, augment_pipeline, fit_stain_profile
from mitodet.ensemble import EnsembleConfig, ScorerHandle
from mitodet.errors import DataError, MitodetError, ProtocolError
from mitodet.evaluation import MatchConfig, evaluate_run
from mitodet.ingest import (
    class_counts,
    import_coco,
    load_image,
    load_manifest,
    save_image,
    save_manifest,
    validate_manifest,
)
from mitodet.pipeline import (
    BlobDetectorParams,
    DetectorSpec,
    PipelineConfig,
    SyntheticSpec,
    classify_stage,
    read_stage1_dir,
    run_pipeline,
    save_synthetic,
)
from mitodet.postprocess import detections_from_jsonl
from mitodet.sampler import SamplingSpec, plan_samples, plans_to_jsonl

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the CLI contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Config file handling
# ---------------------------------------------------------------------------

_ALLOWED_KEYS = {
    "": {"pipeline", "sampling", "augment", "match", "ensemble"},
    "pipeline": {"tile_size", "overlap", "nms_iou", "seed", "detector"},
    "pipeline.detector": {"kind", "intensity_threshold", "min_area", "max_area", "box_size", "argv"},
    "ensemble": {"patch_size", "decision_threshold", "batch_size", "scorers"},
    "ensemble.scorers": {"name", "kind", "argv"},
    "sampling": {"count", "ratio", "patch_size", "jitter", "seed"},
    "augment": {"defocus_p", "defocus_radii", "stain_p", "std_hyper"},
    "match": {"radius_px", "radius_microns", "strategy"},
}


def _check_keys(doc: dict, section: str) -> None:
    allowed = _ALLOWED_KEYS[section]
    for key in doc:
        if key not in allowed:
            raise DataError(f"unknown config key {key!r} in section [{section or 'top level'}]")


def load_config_file(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise DataError(f"config file not found: {p}")
    raw = p.read_bytes()
    if p.suffix.lower() == ".json":
        try:
            doc = json.loads(raw.decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"bad JSON config {p}: {exc}") from exc
    else:
        try:
            doc = tomllib.loads(raw.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise DataError(f"bad TOML config {p}: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError(f"config root must be a table/object: {p}")
    _check_keys(doc, "")
    for section in ("pipeline", "sampling", "augment", "match", "ensemble"):
        sub = doc.get(section)
        if sub is None:
            continue
        if not isinstance(sub, dict):
            raise DataError(f"config section [{section}] must be a table")
        _check_keys(sub, section)
    det = doc.get("pipeline", {}).get("detector")
    if det is not None:
        _check_keys(det, "pipeline.detector")
    for scorer in doc.get("ensemble", {}).get("scorers", []):
        _check_keys(scorer, "ensemble.scorers")
    return doc


def build_pipeline_config(doc: dict, overrides: dict | None = None) -> PipelineConfig:
    pipe = dict(doc.get("pipeline", {}))
    ens = dict(doc.get("ensemble", {}))
    overrides = overrides or {}
    for key in ("tile_size", "overlap", "nms_iou", "seed"):
        if overrides.get(key) is not None:
            pipe[key] = overrides[key]
    if overrides.get("decision_threshold") is not None:
        ens["decision_threshold"] = overrides["decision_threshold"]

    det_doc = pipe.pop("detector", {})
    kind = det_doc.get("kind", "blob")
    try:
        if kind == "blob":
            blob = BlobDetectorParams(
                **{k: int(v) for k, v in det_doc.items() if k != "kind"}
            )
            detector = DetectorSpec(kind="blob", blob=blob)
        else:
            detector = DetectorSpec(kind=kind, argv=tuple(det_doc.get("argv", ())))

        scorer_docs = ens.pop("scorers", None)
        if scorer_docs:
            scorers = tuple(
                ScorerHandle(
                    name=str(s.get("name", f"scorer{i}")),
                    kind=str(s.get("kind", "mock-intensity")),
                    argv=tuple(s.get("argv", ())),
                )
                for i, s in enumerate(scorer_docs)
            )
        else:
            scorers = (ScorerHandle("mock"),)
        ensemble_cfg = EnsembleConfig(scorers=scorers, **ens)
        return PipelineConfig(detector=detector, ensemble=ensemble_cfg, **pipe)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad pipeline config: {exc}") from exc


def build_match_config(doc: dict, overrides: dict | None = None) -> MatchConfig:
    match = dict(doc.get("match", {}))
    overrides = overrides or {}
    for key in ("radius_px", "radius_microns", "strategy"):
        if overrides.get(key) is not None:
            match[key] = overrides[key]
    if "radius_px" in match and "radius_microns" not in match:
        match["radius_microns"] = None
    try:
        return MatchConfig(**match)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad match config: {exc}") from exc


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_import_coco(args) -> int:
    cmap = {}
    for part in args.category_map.split(","):
        cat, _, label = part.partition(":")
        cmap[int(cat)] = label.strip()
    manifest = import_coco(Path(args.coco).read_text(encoding="utf-8"), cmap, name=args.name)
    save_manifest(manifest, args.out)
    counts = class_counts(manifest)
    print(
        f"imported {len(manifest.images)} images, {counts.total_annotations} annotations "
        f"({counts.mitotic} mitotic, {counts.imposter} imposter) -> {args.out}"
    )
    return 0


def cmd_validate(args) -> int:
    manifest = load_manifest(args.manifest)
    errors = validate_manifest(manifest)
    if errors:
        for e in errors:
            print(e, file=sys.stderr)
        return 2
    if args.check_images:
        root = Path(args.manifest).parent
        for rec in manifest.images:
            load_image(rec, root)
    counts = class_counts(manifest)
    print(
        f"OK: {len(manifest.images)} images, {counts.total_annotations} annotations "
        f"({counts.mitotic} mitotic, {counts.imposter} imposter)"
    )
    return 0


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec(
        width=args.width,
        height=args.height,
        n_mitoses=args.n_mitoses,
        n_imposters=args.n_imposters,
        seed=args.seed,
        min_separation=args.min_separation,
    )
    image_path, manifest_path = save_synthetic(spec, args.out_dir)
    print(f"wrote {image_path} and {manifest_path}")
    return 0


def cmd_sample_plan(args) -> int:
    manifest = load_manifest(args.manifest)
    ratio = tuple(float(v) for v in args.ratio.split(","))
    if len(ratio) != 3:
        raise DataError("--ratio needs three comma-separated weights")
    spec = SamplingSpec(
        count=args.count,
        ratio=ratio,
        patch_size=args.patch_size,
        jitter=args.jitter,
        seed=args.seed,
    )
    plans = plan_samples(manifest, spec)
    Path(args.out).write_text(plans_to_jsonl(plans), encoding="utf-8")
    print(f"wrote {len(plans)} plans -> {args.out}")
    return 0


def cmd_fit_stain_profile(args) -> int:
    manifest = load_manifest(args.manifest)
    root = Path(args.manifest).parent
    profile = fit_stain_profile(load_image(rec, root) for rec in manifest.images)
    Path(args.out).write_text(profile.to_json(), encoding="utf-8")
    print(f"fitted stain profile over {profile.n_images} images -> {args.out}")
    return 0


def cmd_augment_preview(args) -> int:
    from PIL import Image

    try:
        with Image.open(args.image) as im:
            patch = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"cannot read {args.image}: {exc}") from exc
    if patch.shape[0] != patch.shape[1]:
        side = min(patch.shape[:2])
        patch = patch[:side, :side]
    profile = None
    if args.profile:
        profile = StainProfile.from_json(Path(args.profile).read_text(encoding="utf-8"))
    config = AugmentConfig(
        defocus_p=args.defocus_p,
        stain_p=args.stain_p if profile is not None else 0.0,
        std_hyper=args.std_hyper,
    )
    out = augment_pipeline(patch, config, profile, _rng(args.seed))
    save_image(out, args.out)
    print(f"wrote {args.out}")
    return 0


def _load_run_inputs(args):
    doc = load_config_file(args.config) if args.config else {}
    overrides = {
        "tile_size": getattr(args, "tile_size", None),
        "overlap": getattr(args, "overlap", None),
        "nms_iou": getattr(args, "nms_iou", None),
        "seed": getattr(args, "seed", None),
        "decision_threshold": getattr(args, "decision_threshold", None),
        "radius_px": getattr(args, "radius_px", None),
        "radius_microns": getattr(args, "radius_microns", None),
    }
    cfg = build_pipeline_config(doc, overrides)
    match_cfg = build_match_config(doc, overrides)
    manifest = load_manifest(args.manifest)
    root = Path(args.manifest).parent
    return manifest, root, cfg, match_cfg


def cmd_run(args) -> int:
    manifest, root, cfg, match_cfg = _load_run_inputs(args)
    result = run_pipeline(manifest, cfg, args.out, root=root, jobs=args.jobs, match_cfg=match_cfg)
    print(f"wrote {len(result.predictions)} predictions -> {Path(args.out) / 'predictions.jsonl'}")
    if result.report is not None:
        p = result.report.pooled
        print(f"pooled precision={p.precision:.4f} recall={p.recall:.4f} f1={p.f1:.4f}")
    return 0


def cmd_detect(args) -> int:
    from mitodet.postprocess import detections_to_jsonl
    from mitodet.pipeline import detect_image

    manifest, root, cfg, _ = _load_run_inputs(args)
    out = Path(args.out)
    (out / "stage1").mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(
        json.dumps(cfg.to_config_doc(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    total = 0
    all_lines = []
    for rec in manifest.images:
        raster = load_image(rec, root)
        dets = detect_image(raster, cfg, jobs=args.jobs)
        text = detections_to_jsonl((rec.id, d) for d in dets)
        (out / "stage1" / f"{rec.id}.jsonl").write_text(text, encoding="utf-8")
        all_lines.append(text)
        total += len(dets)
    (out / "detections.jsonl").write_text("".join(all_lines), encoding="utf-8")
    print(f"wrote {total} stage-1 detections -> {out / 'detections.jsonl'}")
    return 0


def cmd_classify(args) -> int:
    manifest, root, cfg, match_cfg = _load_run_inputs(args)
    stage1_path = Path(args.stage1)
    if stage1_path.is_dir():
        stage1 = read_stage1_dir(stage1_path)
    else:
        stage1 = detections_from_jsonl(stage1_path.read_text(encoding="utf-8"))
    result = classify_stage(manifest, stage1, cfg, args.out, root=root, match_cfg=match_cfg)
    print(f"kept {len(result.predictions)} of {len(stage1)} detections -> {Path(args.out) / 'predictions.jsonl'}")
    return 0


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    preds = detections_from_jsonl(Path(args.preds).read_text(encoding="utf-8"))
    overrides = {
        "radius_px": args.radius_px,
        "radius_microns": args.radius_microns,
        "strategy": args.strategy,
    }
    cfg = build_match_config({}, overrides)
    report = evaluate_run(preds, manifest, cfg)
    Path(args.out).write_text(report.to_json(), encoding="utf-8")
    p = report.pooled
    print(f"pooled precision={p.precision:.4f} recall={p.recall:.4f} f1={p.f1:.4f} -> {args.out}")
    return 0


def cmd_schedule_dump(args) -> int:
    spec = trainmath.CosineWarmupSpec(
        base_lr=args.base_lr, warmup_epochs=args.warmup, total_epochs=args.epochs
    )
    lines = ["epoch,lr"] + [f"{e},{lr!r}" for e, lr in trainmath.schedule_table(spec)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.epochs} rows -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# Parser assembly and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="mitodet", description=__doc__)
    parser.add_argument(
        "--version",
        action="version",
        version=f"mitodet {mitodet.__version__} (protocol {mitodet.PROTOCOL_VERSION})",
    )
    parser.add_argument("--json-errors", action="store_true", help="emit machine-readable errors on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("import-coco", help="convert a COCO-style annotation file to a manifest")
    p.add_argument("--coco", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="imported")
    p.add_argument("--category-map", default="1:mitotic,2:imposter")
    p.set_defaults(func=cmd_import_coco)

    p = sub.add_parser("validate", help="parse and validate a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--check-images", action="store_true")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic slide + manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--width", type=int, default=1024)
    p.add_argument("--height", type=int, default=1024)
    p.add_argument("--n-mitoses", type=int, default=10)
    p.add_argument("--n-imposters", type=int, default=5)
    p.add_argument("--min-separation", type=int, default=192)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("sample-plan", help="plan training patches (JSON-lines audit trail)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--ratio", default="5,1,4")
    p.add_argument("--patch-size", type=int, default=512)
    p.add_argument("--jitter", type=int, default=None)
    p.set_defaults(func=cmd_sample_plan)

    p = sub.add_parser("fit-stain-profile", help="fit LAB stain statistics over manifest images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_stain_profile)

    p = sub.add_parser("augment-preview", help="apply the augmentation pipeline to one image")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--profile")
    p.add_argument("--defocus-p", type=float, default=0.3)
    p.add_argument("--stain-p", type=float, default=0.3)
    p.add_argument("--std-hyper", type=float, default=-0.7)
    p.set_defaults(func=cmd_augment_preview)

    def add_run_flags(p):
        p.add_argument("--manifest", required=True)
        p.add_argument("--config")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                       help="worker cap for tile parallelism; 1 gives the serial reference run")
        p.add_argument("--tile-size", type=int)
        p.add_argument("--overlap", type=int)
        p.add_argument("--nms-iou", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--decision-threshold", type=float)
        p.add_argument("--radius-px", type=float)
        p.add_argument("--radius-microns", type=float)

    p = sub.add_parser("detect", help="stage 1 only: tile, detect, stitch")
    add_run_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("classify", help="stage 2 only: classify persisted stage-1 output")
    add_run_flags(p)
    p.add_argument("--stage1", required=True, help="stage-1 JSONL file or directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("run", help="full pipeline: detect, classify, evaluate")
    add_run_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="score predictions against a manifest")
    p.add_argument("--preds", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default="report.json")
    p.add_argument("--radius-px", type=float)
    p.add_argument("--radius-microns", type=float)
    p.add_argument("--strategy", choices=["greedy", "hungarian"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("schedule-dump", help="emit the cosine-warmup lr table as CSV")
    p.add_argument("--base-lr", type=float, default=1e-4)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--out")
    p.set_defaults(func=cmd_schedule_dump)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except MitodetError as exc:
        code = 3 if isinstance(exc, ProtocolError) else 2
        if args.json_errors:
            print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        else:
            print(f"mitodet: error: {exc}", file=sys.stderr)
        return code
    except OSError as exc:
        if args.json_errors:
            print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        else:
            print(f"mitodet: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
