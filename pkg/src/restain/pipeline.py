"""Stage orchestration over a shared output directory.

Every stage writes `<output_dir>/<stage>/manifest.jsonl`: a header line
carrying the stage name, config hash, and seed, then data rows with
sorted keys. Stages locate their inputs through predecessor manifests,
so re-running with the same config and seed is byte-identical, and a
missing predecessor fails fast with the stage name.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import PipelineConfig, config_hash
from .dataset import build_ground_truth, cut_patches, write_patch_store
from .errors import DependencyError, FormatError
from .evaluate import (
    CoreMetrics,
    OraclePredictor,
    QualScore,
    core_metrics,
    group_metrics,
    qualitative_summary,
    report_dict,
    stitch_predict,
    write_core_csv,
)
from .protocol import ExternalPredictor
from .maskops import AnnotationSet, clean_epithelium_mask, load_geojson, rasterize, save_geojson
from .raster import (
    LABEL_PALETTE,
    LabelMask,
    RasterImage,
    read_label_mask,
    read_pyramid,
    write_label_mask,
    write_pyramid,
)
from .register import ShiftVector, apply_shift, register_pair
from .stains import StainMatrix, dab_mask
from .synth import generate
from .tma import CorePair, CoreRegion, extract_cores, extract_pair_rasters, pair_cores

STAGE_ORDER = (
    "synth",
    "extract-tma",
    "register",
    "build-gt",
    "build-patches",
    "infer-stitch",
    "evaluate",
    "qual-summary",
)


def _stage_dir(cfg: PipelineConfig, stage: str) -> Path:
    return Path(cfg.output_dir) / stage


def _write_manifest(cfg: PipelineConfig, stage: str, rows: list[dict]) -> None:
    d = _stage_dir(cfg, stage)
    d.mkdir(parents=True, exist_ok=True)
    header = {"stage": stage, "config_hash": config_hash(cfg), "seed": cfg.seed}
    lines = [json.dumps(header, sort_keys=True)]
    lines.extend(json.dumps(row, sort_keys=True) for row in rows)
    (d / "manifest.jsonl").write_text("\n".join(lines) + "\n")


def _read_manifest(cfg: PipelineConfig, stage: str) -> tuple[dict, list[dict]] | None:
    path = _stage_dir(cfg, stage) / "manifest.jsonl"
    if not path.is_file():
        return None
    lines = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    if not lines:
        return None
    return lines[0], lines[1:]


def _require(cfg: PipelineConfig, *stages: str) -> None:
    for stage in stages:
        if _read_manifest(cfg, stage) is None:
            raise DependencyError(
                f"stage {stage!r} has not written a manifest under "
                f"{_stage_dir(cfg, stage)}; run it first"
            )


def _map(fn, items, threads: int):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _slide_paths(cfg: PipelineConfig) -> tuple[Path, Path, Path]:
    synth_dir = _stage_dir(cfg, "synth")
    he = Path(cfg.he_slide) if cfg.he_slide else synth_dir / "he"
    ck = Path(cfg.ck_slide) if cfg.ck_slide else synth_dir / "ck"
    ann = Path(cfg.annotations) if cfg.annotations else synth_dir / "annotations.geojson"
    return he, ck, ann


def _core_to_json(core: CoreRegion) -> dict:
    return {
        "id": core.id,
        "bbox": list(core.bbox),
        "centroid": [core.centroid[0], core.centroid[1]],
        "area_px": core.area_px,
        "equiv_diameter_px": core.equiv_diameter_px,
        "detect_factor": core.detect_factor,
    }


def _core_from_json(row: dict) -> CoreRegion:
    return CoreRegion(
        id=int(row["id"]),
        bbox=tuple(row["bbox"]),
        centroid=tuple(row["centroid"]),
        area_px=int(row["area_px"]),
        equiv_diameter_px=float(row["equiv_diameter_px"]),
        detect_factor=int(row["detect_factor"]),
    )


# --------------------------------------------------------------------------- #
# Stages
# --------------------------------------------------------------------------- #

def stage_synth(cfg: PipelineConfig) -> None:
    result = generate(cfg.synth)
    out = _stage_dir(cfg, "synth")
    out.mkdir(parents=True, exist_ok=True)
    write_pyramid(result.he, out / "he")
    write_pyramid(result.ck, out / "ck")
    write_label_mask(result.truth, out / "truth.png")
    save_geojson(result.ann, out / "annotations.geojson")
    rows = [
        {"core": i, "bbox": list(bbox), "case_id": f"core{i}"}
        for i, bbox in enumerate(result.core_bboxes)
    ]
    _write_manifest(cfg, "synth", rows)


def stage_extract(cfg: PipelineConfig) -> None:
    he_path, ck_path, _ = _slide_paths(cfg)
    he_pyr = read_pyramid(he_path)
    ck_pyr = read_pyramid(ck_path)
    he_cores = extract_cores(he_pyr, cfg.extractor)
    ck_cores = extract_cores(ck_pyr, cfg.extractor)
    pairs, un_he, un_ck = pair_cores(he_cores, ck_cores)

    rows = []
    for i, pair in enumerate(pairs):
        rows.append(
            {
                "kind": "pair",
                "pair_id": i,
                "he": _core_to_json(pair.he),
                "ck": _core_to_json(pair.ck),
                "excluded": False,
                "reason": "",
            }
        )
    for slide, cores in (("he", un_he), ("ck", un_ck)):
        for core in cores:
            rows.append(
                {
                    "kind": "unmatched",
                    "slide": slide,
                    "core": _core_to_json(core),
                    "excluded": True,
                    "reason": "no counterpart within pairing distance",
                }
            )
    _write_manifest(cfg, "extract-tma", rows)


def _load_pairs(cfg: PipelineConfig, stage: str) -> list[tuple[dict, CorePair]]:
    manifest = _read_manifest(cfg, stage)
    assert manifest is not None
    _, rows = manifest
    out = []
    for row in rows:
        if row.get("kind") != "pair":
            continue
        pair = CorePair(he=_core_from_json(row["he"]), ck=_core_from_json(row["ck"]))
        out.append((row, pair))
    return out


def stage_register(cfg: PipelineConfig) -> None:
    _require(cfg, "extract-tma")
    he_path, ck_path, _ = _slide_paths(cfg)
    he_pyr = read_pyramid(he_path)
    ck_pyr = read_pyramid(ck_path)

    def work(item):
        row, pair = item
        pair = extract_pair_rasters(he_pyr, ck_pyr, pair, cfg.extract_level_factor)
        shift = register_pair(pair.he_img, pair.ck_img, cfg.registration_factor)
        out = dict(row)
        out.update(
            {
                "dx": shift.dx,
                "dy": shift.dy,
                "confidence": round(shift.confidence, 9),
                "window": list(pair.window),
            }
        )
        return out

    rows = _map(work, _load_pairs(cfg, "extract-tma"), cfg.threads)
    _write_manifest(cfg, "register", rows)


def _registered_pairs(cfg: PipelineConfig):
    """Rebuild (row, pair with rasters, shift) for every registered pair."""
    he_path, ck_path, _ = _slide_paths(cfg)
    he_pyr = read_pyramid(he_path)
    ck_pyr = read_pyramid(ck_path)
    manifest = _read_manifest(cfg, "register")
    assert manifest is not None
    _, rows = manifest
    out = []
    for row in rows:
        if row.get("kind") != "pair":
            continue
        pair = CorePair(he=_core_from_json(row["he"]), ck=_core_from_json(row["ck"]))
        pair = extract_pair_rasters(he_pyr, ck_pyr, pair, cfg.extract_level_factor)
        shift = ShiftVector(int(row["dx"]), int(row["dy"]), float(row["confidence"]))
        out.append((row, pair, shift))
    return out


def _load_annotations(cfg: PipelineConfig) -> AnnotationSet:
    _, _, ann_path = _slide_paths(cfg)
    if cfg.annotations and not Path(cfg.annotations).is_file():
        raise FormatError(f"annotation file not found: {cfg.annotations}")
    if ann_path.is_file():
        return load_geojson(ann_path)
    return AnnotationSet()


def stage_build_gt(cfg: PipelineConfig) -> None:
    _require(cfg, "register")
    ann = _load_annotations(cfg)
    matrix = StainMatrix.hdab()
    out = _stage_dir(cfg, "build-gt")
    out.mkdir(parents=True, exist_ok=True)
    factor = cfg.extract_level_factor

    def work(item):
        row, pair, shift = item
        ck_aligned = apply_shift(pair.ck_img, shift.negated())
        dab = dab_mask(ck_aligned, matrix, cfg.deconv)
        cleaned = clean_epithelium_mask(dab, cfg.morphology)
        wx, wy, _, _ = row["window"]
        width, height = pair.he_img.width, pair.he_img.height
        mpp = pair.he_img.mpp
        benign = rasterize(ann, "benign", width, height, factor, mpp, origin=(wx, wy))
        insitu = rasterize(ann, "insitu", width, height, factor, mpp, origin=(wx, wy))
        excl = rasterize(ann, "exclude", width, height, factor, mpp, origin=(wx, wy))
        gt, flagged = build_ground_truth(cleaned, benign, insitu, excl)
        name = f"gt_{row['pair_id']}.png"
        write_label_mask(gt, out / name)
        return {
            "pair_id": row["pair_id"],
            "gt": name,
            "excluded_flag": flagged,
            "window": row["window"],
            "dx": row["dx"],
            "dy": row["dy"],
        }

    rows = _map(work, _registered_pairs(cfg), cfg.threads)
    _write_manifest(cfg, "build-gt", rows)


def stage_build_patches(cfg: PipelineConfig) -> None:
    _require(cfg, "register", "build-gt")
    out = _stage_dir(cfg, "build-patches")
    gt_dir = _stage_dir(cfg, "build-gt")
    manifest = _read_manifest(cfg, "build-gt")
    assert manifest is not None
    _, gt_rows = manifest
    gt_by_id = {row["pair_id"]: row for row in gt_rows}

    records = []
    counts = []
    for row, pair, shift in _registered_pairs(cfg):
        gt_row = gt_by_id.get(row["pair_id"])
        if gt_row is None:
            continue
        if gt_row["excluded_flag"]:
            counts.append({"pair_id": row["pair_id"], "patches": 0, "excluded": True})
            continue
        gt = read_label_mask(gt_dir / gt_row["gt"])
        ck_aligned = apply_shift(pair.ck_img, shift.negated())
        recs = cut_patches(
            pair.he_img,
            ck_aligned,
            gt,
            cfg.grid,
            slide_id="pairset",
            core_id=int(row["pair_id"]),
            level_factor=cfg.extract_level_factor,
            reg_factor=cfg.registration_factor,
            tissue=cfg.tissue,
        )
        records.extend(recs)
        counts.append({"pair_id": row["pair_id"], "patches": len(recs), "excluded": False})

    write_patch_store(records, out)
    _write_manifest(cfg, "build-patches", counts)


def stage_infer(cfg: PipelineConfig) -> None:
    _require(cfg, "register")
    external = None
    if cfg.predictor_exe:
        external = ExternalPredictor(cfg.predictor_exe)
    else:
        _require(cfg, "build-gt")
    gt_dir = _stage_dir(cfg, "build-gt")
    gt_manifest = _read_manifest(cfg, "build-gt")
    gt_by_id = (
        {row["pair_id"]: row for row in gt_manifest[1]} if gt_manifest else {}
    )
    out = _stage_dir(cfg, "infer-stitch")
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for row, pair, _shift in _registered_pairs(cfg):
        if external is not None:
            predictor = external
        else:
            gt_row = gt_by_id.get(row["pair_id"])
            if gt_row is None:
                continue
            predictor = OraclePredictor(read_label_mask(gt_dir / gt_row["gt"]))
        pred = stitch_predict(
            pair.he_img, predictor, cfg.stitch_patch_size, cfg.stitch_overlap
        )
        name = f"pred_{row['pair_id']}.png"
        write_label_mask(pred, out / name)
        rows.append({"pair_id": row["pair_id"], "pred": name, "window": row["window"]})
    _write_manifest(cfg, "infer-stitch", rows)


def write_overlay(he: RasterImage, pred: LabelMask, path: Path) -> None:
    """Blend the palette over predicted foreground for quick inspection."""
    from PIL import Image

    colors = np.zeros((4, 3), dtype=np.float64)
    for code, rgb in LABEL_PALETTE.items():
        colors[code] = rgb
    blend = he.data.astype(np.float64).copy()
    fg = pred.data > 0
    blend[fg] = 0.5 * blend[fg] + 0.5 * colors[pred.data[fg]]
    Image.fromarray(np.floor(blend + 0.5).astype(np.uint8)).save(path)


def stage_evaluate(cfg: PipelineConfig, overlay: bool = False) -> None:
    _require(cfg, "build-gt", "infer-stitch")
    gt_dir = _stage_dir(cfg, "build-gt")
    infer_dir = _stage_dir(cfg, "infer-stitch")
    gt_rows = _read_manifest(cfg, "build-gt")[1]
    infer_rows = _read_manifest(cfg, "infer-stitch")[1]
    preds = {row["pair_id"]: row for row in infer_rows}
    out = _stage_dir(cfg, "evaluate")
    out.mkdir(parents=True, exist_ok=True)

    metrics: list[CoreMetrics] = []
    rows = []
    excluded = 0
    for gt_row in gt_rows:
        pid = gt_row["pair_id"]
        pred_row = preds.get(pid)
        if pred_row is None:
            continue
        if gt_row["excluded_flag"]:
            excluded += 1
            rows.append({"pair_id": pid, "scored": False, "reason": "flagged exclusion"})
            continue
        gt = read_label_mask(gt_dir / gt_row["gt"])
        pred = read_label_mask(infer_dir / pred_row["pred"])
        metrics.append(core_metrics(gt, pred, core_id=pid, case_id=f"core{pid}"))
        rows.append({"pair_id": pid, "scored": True, "reason": ""})
        if overlay:
            he_pyr = read_pyramid(_slide_paths(cfg)[0])
            wx, wy, ww, wh = gt_row["window"]
            f = cfg.extract_level_factor
            level = he_pyr.level_for_factor(f)
            he_crop = RasterImage(
                level.data[wy // f : (wy + wh) // f, wx // f : (wx + ww) // f].copy(),
                level.mpp,
            )
            write_overlay(he_crop, pred, out / f"overlay_{pid}.png")

    report = report_dict(metrics)
    report["excluded_cores"] = excluded
    if cfg.metadata:
        meta_raw = json.loads(Path(cfg.metadata).read_text())
        metadata = {k: (v[0], v[1]) for k, v in meta_raw.items()}
        groups = group_metrics(metrics, metadata)
        report["groups"] = {
            axis: {
                key: {"n": row.n, "dice_mean": row.dice[0], "dice_sd": row.dice[1]}
                for key, row in axis_rows.items()
            }
            for axis, axis_rows in groups.items()
        }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_core_csv(metrics, out / "cores.csv")
    _write_manifest(cfg, "evaluate", rows)


def stage_qual_summary(cfg: PipelineConfig, scores_path: str | Path) -> None:
    try:
        raw = json.loads(Path(scores_path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read scores file {scores_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"scores file {scores_path} is not valid JSON: {exc}") from exc
    scores = [
        QualScore(
            case_id=item["case_id"],
            scores={k: int(v) for k, v in item["scores"].items()},
            gt_present=item.get("gt_present"),
        )
        for item in raw
    ]
    summary = qualitative_summary(scores)
    out = _stage_dir(cfg, "qual-summary")
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "rows": [
            {
                "class": row.class_name,
                "variant": row.variant,
                "n": row.n,
                "mean": None if row.n == 0 else round(row.mean, 6),
                "sd": None if row.n == 0 else round(row.sd, 6),
                "histogram": {str(k): v for k, v in row.histogram.items()},
            }
            for row in summary
        ]
    }
    (out / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write_manifest(cfg, "qual-summary", [{"cases": len(scores)}])


def run(
    subcommand: str,
    cfg: PipelineConfig,
    scores: str | None = None,
    overlay: bool = False,
) -> None:
    if subcommand == "synth":
        stage_synth(cfg)
    elif subcommand == "extract-tma":
        stage_extract(cfg)
    elif subcommand == "register":
        stage_register(cfg)
    elif subcommand == "build-gt":
        stage_build_gt(cfg)
    elif subcommand == "build-patches":
        stage_build_patches(cfg)
    elif subcommand == "infer-stitch":
        stage_infer(cfg)
    elif subcommand == "evaluate":
        stage_evaluate(cfg, overlay=overlay)
    elif subcommand == "qual-summary":
        if scores is None:
            raise FormatError("qual-summary needs a scores file (--scores)")
        stage_qual_summary(cfg, scores)
    else:
        raise ValueError(f"unknown subcommand {subcommand!r}")
