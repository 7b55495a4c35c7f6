"""Batch verification: manifest in, mu/F1 reports (and heatmaps) out.

The run walks a JSON Lines manifest where each line describes one face
crop::

    {"image_id": "...", "path": "img.png", "landmarks": [[x, y] * 68],
     "aus": ["AU04", ...], "dataset": "..."}

and for every entry runs forward -> classify -> explain each measured AU
-> box -> mu. Per-entry problems are counted and logged, never fatal;
results are aggregated in manifest order so reports are byte-identical
for any worker count.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import geometry, heatmap, metrics
from .errors import AuVerifyError, LandmarkError
from .geometry import AuBoxConfig, BoundingBox, LandmarkSet, normalize_au, validate_landmarks
from .lrp import PRESETS, RelevanceMap, explain, get_preset
from .model import ModelSpec, classify, forward, load_model
from .tensor import Tensor

logger = logging.getLogger("auverify")

# ITU-R 601 luminance weights for RGB -> gray conversion
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

REPORT_CSV_HEADER = "dataset,au,variant,mean_mu,mean_mu_w,n,n_undefined"
RECORD_CSV_HEADER = "image_id,au,mu,mu_w,inside,total,box_area_fraction"
F1_CSV_HEADER = "dataset,au,tp,fp,fn,tn,f1"


@dataclass(frozen=True)
class ManifestEntry:
    """One dataset frame: image location, landmarks, and true AU labels."""

    image_id: str
    path: Path
    landmarks: LandmarkSet
    ground_truth_aus: frozenset[str]
    dataset: str


@dataclass(frozen=True)
class SkipEvent:
    line_no: int
    image_id: str | None
    reason: str


@dataclass
class RunConfig:
    model_path: Path
    manifest_path: Path
    out_dir: Path
    box_config_path: Path | None = None
    preset: str = "composite"
    variants: tuple[str, ...] = (metrics.VARIANT_STANDARD,)
    topk_fraction: float = 0.25
    threshold: float = 0.5
    emit_heatmaps: bool = False
    colormap: str = heatmap.DEFAULT_COLORMAP
    jobs: int = 1
    include_all_positives: bool = False

    def validate(self) -> None:
        for label, p in (("model", self.model_path),
                         ("manifest", self.manifest_path)):
            if not Path(p).is_file():
                raise AuVerifyError(f"{label} file not found: {p}")
        if self.box_config_path is not None and not Path(self.box_config_path).is_file():
            raise AuVerifyError(f"box config file not found: {self.box_config_path}")
        if not 0.0 < self.threshold < 1.0:
            raise AuVerifyError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not 0.0 < self.topk_fraction <= 1.0:
            raise AuVerifyError(
                f"top-k fraction must lie in (0, 1], got {self.topk_fraction}")
        if self.jobs < 1:
            raise AuVerifyError(f"jobs must be >= 1, got {self.jobs}")
        if self.preset not in PRESETS:
            raise AuVerifyError(
                f"unknown preset {self.preset!r}; available: {sorted(PRESETS)}")
        bad = [v for v in self.variants
               if v != metrics.VARIANT_STANDARD and not v.startswith("top")]
        if bad:
            raise AuVerifyError(f"unknown mu variants: {bad}")

    def describe(self) -> dict:
        return {
            "model": str(self.model_path),
            "manifest": str(self.manifest_path),
            "box_config": None if self.box_config_path is None else str(self.box_config_path),
            "preset": self.preset,
            "variants": list(self.variants),
            "topk_fraction": self.topk_fraction,
            "threshold": self.threshold,
            "emit_heatmaps": self.emit_heatmaps,
            "colormap": self.colormap,
            "jobs": self.jobs,
            "include_all_positives": self.include_all_positives,
        }


@dataclass
class EntryResult:
    """Everything one worker produced for one manifest entry."""

    entry: ManifestEntry
    predicted: frozenset[str] = frozenset()
    records: list[metrics.MuRecord] = field(default_factory=list)
    heatmaps: list[tuple[str, np.ndarray, BoundingBox]] = field(default_factory=list)
    notices: list[str] = field(default_factory=list)
    error: str | None = None


@dataclass
class Report:
    rows: list[metrics.AggregateRow]
    f1_rows: list[dict]
    records: dict[str, list[metrics.MuRecord]]    # variant -> records, manifest order
    notices: list[str]
    manifest_lines: int
    processed: int
    skipped: int
    failed: int
    config: dict
    wall_time_s: float


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def ingest_manifest(path, image_dims, on_skip=None):
    """Yield validated ManifestEntry objects from a JSONL file.

    Malformed lines are skipped, reported through ``on_skip`` with their
    1-based line number, and never abort the stream. Images are opened
    later, by the workers.
    """
    manifest_path = Path(path)
    base = manifest_path.parent
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            image_id = None
            try:
                doc = json.loads(line)
                image_id = str(doc.get("image_id"))
                landmarks = validate_landmarks(doc["landmarks"], image_dims)
                aus = frozenset(normalize_au(a) for a in doc["aus"])
                img_path = Path(doc["path"])
                if not img_path.is_absolute():
                    img_path = base / img_path
                entry = ManifestEntry(
                    image_id=str(doc["image_id"]), path=img_path, landmarks=landmarks,
                    ground_truth_aus=aus, dataset=str(doc["dataset"]))
            except (KeyError, ValueError, TypeError, LandmarkError, AuVerifyError) as exc:
                event = SkipEvent(line_no=line_no,
                                  image_id=image_id, reason=f"line {line_no}: {exc}")
                logger.warning("manifest skip: %s", event.reason)
                if on_skip is not None:
                    on_skip(event)
                continue
            yield entry


def count_manifest_lines(path) -> int:
    with open(path, "r", encoding="utf-8") as fh:
        return sum(1 for line in fh if line.strip())


def load_image(path, input_shape) -> Tensor:
    """Decode an image into the model's C x H x W layout, values in [0, 1].

    8-bit values are divided by 255; channel count is adapted to the
    model (RGB collapsed by luminance, grayscale replicated).
    """
    channels, height, width = input_shape
    with Image.open(path) as img:
        img = img.convert("RGB") if img.mode not in ("L", "RGB") else img
        arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.shape[0] != height or arr.shape[1] != width:
        raise AuVerifyError(
            f"image is {arr.shape[0]}x{arr.shape[1]}, model expects {height}x{width}")
    if arr.ndim == 2:
        chw = arr[None, :, :]
    else:
        chw = arr.transpose(2, 0, 1)
    if chw.shape[0] != channels:
        if channels == 1:
            w = np.asarray(LUMA_WEIGHTS, dtype=np.float64)
            chw = np.tensordot(w, chw, axes=(0, 0))[None, :, :]
        elif channels == 3 and chw.shape[0] == 1:
            chw = np.repeat(chw, 3, axis=0)
        else:
            raise AuVerifyError(
                f"cannot adapt {chw.shape[0]}-channel image to {channels} channels")
    return Tensor(chw.astype(np.float32))


# ---------------------------------------------------------------------------
# per-entry work
# ---------------------------------------------------------------------------

def _variant_records(rmap: RelevanceMap, image_id: str, au: str, mask,
                     area_fraction: float, config: RunConfig):
    for variant in config.variants:
        if variant == metrics.VARIANT_STANDARD:
            yield metrics.make_mu_record(image_id, au, rmap, mask, area_fraction)
        else:
            filtered = metrics.top_k_filter(rmap, config.topk_fraction)
            yield metrics.make_mu_record(
                image_id, au, filtered, mask, area_fraction,
                variant=metrics.topk_variant_name(config.topk_fraction))


def process_entry(model: ModelSpec, boxes: AuBoxConfig, config: RunConfig,
                  entry: ManifestEntry) -> EntryResult:
    """Forward, classify, and measure every qualifying AU of one frame."""
    result = EntryResult(entry=entry)
    image_dims = model.input_shape[1:]
    try:
        image = load_image(entry.path, model.input_shape)
        trace = forward(model, image)
        predicted = classify(trace, threshold=config.threshold)
    except (AuVerifyError, OSError) as exc:
        result.error = f"{entry.image_id}: {exc}"
        logger.warning("entry failed: %s", result.error)
        return result
    result.predicted = frozenset(predicted)
    if config.include_all_positives:
        measured = set(entry.ground_truth_aus) & set(model.output_labels)
    else:
        measured = metrics.filter_correct(predicted, entry.ground_truth_aus)
    preset = get_preset(config.preset)
    for au in sorted(measured):
        try:
            box = geometry.au_bounding_box(entry.landmarks, au, boxes, image_dims)
            mask = geometry.box_mask(box, image_dims)
            rmap = explain(model, trace, au, preset)
        except AuVerifyError as exc:
            result.notices.append(f"{entry.image_id}/{au}: {exc}")
            logger.warning("measurement skipped: %s", result.notices[-1])
            continue
        result.records.extend(_variant_records(
            rmap, entry.image_id, au, mask, box.area_fraction(image_dims), config))
        if config.emit_heatmaps:
            grid = heatmap.normalize_symmetric(rmap.pixel_values)
            overlay = _overlay_from_input(image)
            img = heatmap.render(grid, colormap=config.colormap, overlay=overlay)
            img = heatmap.draw_box(img, box)
            result.heatmaps.append((au, img, box))
    return result


def _overlay_from_input(image: Tensor) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.shape[0] == 1:
        return arr[0]
    if arr.shape[0] == 3:
        return arr.transpose(1, 2, 0)
    return arr.mean(axis=0)


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def run_verification(config: RunConfig) -> Report:
    """Execute the three verification steps over a whole manifest.

    The model is shared read-only across a bounded worker pool; results
    are collected in manifest order, so the report does not depend on
    the parallelism degree.
    """
    started = time.perf_counter()
    config.validate()
    model = load_model(config.model_path)
    boxes = (AuBoxConfig.default() if config.box_config_path is None
             else AuBoxConfig.load(config.box_config_path))
    image_dims = model.input_shape[1:]

    skips: list[SkipEvent] = []
    entries = list(ingest_manifest(config.manifest_path, image_dims,
                                   on_skip=skips.append))
    manifest_lines = count_manifest_lines(config.manifest_path)
    if not entries:
        raise AuVerifyError(
            f"manifest {config.manifest_path} has no usable entries "
            f"({len(skips)} skipped)")

    if config.jobs == 1:
        results = [process_entry(model, boxes, config, e) for e in entries]
    else:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(
                lambda e: process_entry(model, boxes, config, e), entries))

    processed = [r for r in results if r.error is None]
    failed = [r for r in results if r.error is not None]

    if config.emit_heatmaps:
        _write_heatmaps(results, config)

    # per-dataset aggregation, manifest order within each dataset
    rows: list[metrics.AggregateRow] = []
    notices: list[str] = []
    for dataset in sorted({r.entry.dataset for r in processed}):
        ds_records = [rec for r in processed if r.entry.dataset == dataset
                      for rec in r.records]
        ds_rows, ds_notices = metrics.aggregate(ds_records, dataset)
        rows.extend(ds_rows)
        notices.extend(ds_notices)
    for r in results:
        notices.extend(r.notices)
        if r.error is not None:
            notices.append(f"entry failed: {r.error}")
    for s in skips:
        notices.append(f"manifest skip: {s.reason}")

    f1_rows = _f1_rows(processed, model.output_labels)

    by_variant: dict[str, list[metrics.MuRecord]] = {}
    for r in processed:
        for rec in r.records:
            by_variant.setdefault(rec.variant, []).append(rec)

    return Report(
        rows=rows,
        f1_rows=f1_rows,
        records=by_variant,
        notices=notices,
        manifest_lines=manifest_lines,
        processed=len(processed),
        skipped=len(skips),
        failed=len(failed),
        config=config.describe(),
        wall_time_s=time.perf_counter() - started,
    )


def _f1_rows(processed: list[EntryResult], labels: list[str]) -> list[dict]:
    rows = []
    for dataset in sorted({r.entry.dataset for r in processed}):
        group = [r for r in processed if r.entry.dataset == dataset]
        preds = [r.predicted for r in group]
        truths = [r.entry.ground_truth_aus for r in group]
        for au in labels:
            tp, fp, fn = metrics.confusion_counts(preds, truths, au)
            tn = len(group) - tp - fp - fn
            rows.append({
                "dataset": dataset, "au": au, "tp": tp, "fp": fp, "fn": fn,
                "tn": tn, "f1": metrics.f1_score(preds, truths, au),
            })
    return rows


def _write_heatmaps(results: list[EntryResult], config: RunConfig) -> None:
    out = Path(config.out_dir) / "heatmaps"
    out.mkdir(parents=True, exist_ok=True)
    for r in results:
        for au, img, _ in r.heatmaps:
            name = heatmap.heatmap_filename(r.entry.image_id, au, config.preset)
            heatmap.save_png(img, out / name)


# ---------------------------------------------------------------------------
# report serialization
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    return "" if value is None else f"{value:.6f}"


def _round6(value):
    return None if value is None else round(value, 6)


def emit_report(report: Report, out_dir) -> list[Path]:
    """Write report.csv/json, f1.csv/json, per-variant record CSVs, summary.

    All numeric report fields are fixed to six decimals, so identical
    runs produce identical bytes; summary.json additionally carries the
    wall time and is the one file that varies between runs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    report_csv = out / "report.csv"
    lines = [REPORT_CSV_HEADER]
    for row in report.rows:
        lines.append(",".join([
            row.dataset, row.au, row.variant, _fmt(row.mean_mu),
            _fmt(row.mean_mu_w), str(row.n), str(row.n_undefined)]))
    report_csv.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(report_csv)

    report_json = out / "report.json"
    doc = {"rows": [{
        "dataset": row.dataset, "au": row.au, "variant": row.variant,
        "mean_mu": _round6(row.mean_mu), "mean_mu_w": _round6(row.mean_mu_w),
        "n": row.n, "n_undefined": row.n_undefined} for row in report.rows]}
    report_json.write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(report_json)

    for variant, records in sorted(report.records.items()):
        rec_csv = out / f"records_{variant}.csv"
        lines = [RECORD_CSV_HEADER]
        for rec in records:
            lines.append(",".join([
                rec.image_id, rec.au, _fmt(rec.mu), _fmt(rec.mu_w),
                _fmt(rec.inside), _fmt(rec.total),
                _fmt(rec.box_area_fraction)]))
        rec_csv.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(rec_csv)

    f1_csv = out / "f1.csv"
    lines = [F1_CSV_HEADER]
    for row in report.f1_rows:
        lines.append(",".join([
            row["dataset"], row["au"], str(row["tp"]), str(row["fp"]),
            str(row["fn"]), str(row["tn"]), _fmt(row["f1"])]))
    f1_csv.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(f1_csv)

    f1_json = out / "f1.json"
    doc = {"rows": [dict(row, f1=_round6(row["f1"])) for row in report.f1_rows]}
    f1_json.write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(f1_json)

    summary = out / "summary.json"
    counts = {
        "manifest_lines": report.manifest_lines,
        "processed": report.processed,
        "skipped": report.skipped,
        "failed": report.failed,
        "mu_records": sum(len(v) for v in report.records.values()),
        "undefined_mu": sum(1 for v in report.records.values()
                            for rec in v if not rec.defined),
    }
    if counts["processed"] + counts["skipped"] + counts["failed"] != counts["manifest_lines"]:
        raise AuVerifyError(  # pragma: no cover - accounting invariant
            f"entry accounting broken: {counts}")
    summary.write_text(json.dumps({
        "config": report.config,
        "counts": counts,
        "notices": report.notices,
        "wall_time_s": round(report.wall_time_s, 3),
    }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(summary)
    return written
