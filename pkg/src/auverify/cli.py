"""Command-line entry points.

Exit codes: 0 clean run, 1 fatal error, 2 finished but some manifest
entries were skipped or failed.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import geometry, heatmap, metrics
from .errors import AuVerifyError
from .lrp import PRESETS, explain, get_preset, save_relevance_map
from .model import classify, forward, infer_shapes, load_model
from .pipeline import (RunConfig, emit_report, ingest_manifest, load_image,
                       run_verification)

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_SKIPS = 2

_in_file = click.Path(exists=True, dir_okay=False, path_type=Path)
_out_dir = click.Path(file_okay=False, path_type=Path)


@click.group()
@click.option("--verbose", is_flag=True, help="Log per-entry warnings to stderr.")
def main(verbose: bool) -> None:
    """Verify facial Action Unit classifiers with pixel-level explanations."""
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING if verbose else logging.ERROR,
        format="%(levelname)s %(message)s")


def _fatal(exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(EXIT_FATAL)


@main.command()
@click.option("--model", "model_path", required=True, type=_in_file)
@click.option("--manifest", "manifest_path", required=True, type=_in_file)
@click.option("--boxes", "box_config_path", type=_in_file, default=None,
              help="AU box config JSON (default: built-in pain-AU regions).")
@click.option("--preset", default="composite", show_default=True,
              type=click.Choice(sorted(PRESETS)))
@click.option("--threshold", default=0.5, show_default=True, type=float)
@click.option("--variant", "variants", multiple=True,
              type=click.Choice([metrics.VARIANT_STANDARD, "top25"]),
              default=(metrics.VARIANT_STANDARD,), show_default=True,
              help="Mu variant(s) to record; repeatable.")
@click.option("--out", "out_dir", required=True, type=_out_dir)
@click.option("--heatmaps", "emit_heatmaps", is_flag=True,
              help="Also render one heatmap PNG per measured AU.")
@click.option("--jobs", default=1, show_default=True, type=int)
@click.option("--include-all-positives", is_flag=True,
              help="Measure every ground-truth AU, not only true positives.")
def verify(model_path, manifest_path, box_config_path, preset, threshold,
           variants, out_dir, emit_heatmaps, jobs, include_all_positives):
    """Run the full pipeline: classify, explain, and quantify a manifest."""
    config = RunConfig(
        model_path=model_path, manifest_path=manifest_path, out_dir=out_dir,
        box_config_path=box_config_path, preset=preset,
        variants=tuple(dict.fromkeys(variants)), threshold=threshold,
        emit_heatmaps=emit_heatmaps, jobs=jobs,
        include_all_positives=include_all_positives)
    try:
        report = run_verification(config)
        files = emit_report(report, out_dir)
    except AuVerifyError as exc:
        _fatal(exc)
    click.echo(f"processed {report.processed}/{report.manifest_lines} entries "
               f"({report.skipped} skipped, {report.failed} failed)")
    for row in report.rows:
        click.echo(f"  {row.dataset} {row.au} [{row.variant}] "
                   f"mu={row.mean_mu:.4f} mu_w={row.mean_mu_w:.4f} n={row.n}")
    click.echo("wrote " + ", ".join(str(f) for f in files))
    sys.exit(EXIT_SKIPS if report.skipped or report.failed else EXIT_OK)


@main.command("explain")
@click.option("--model", "model_path", required=True, type=_in_file)
@click.option("--image", "image_path", required=True, type=_in_file)
@click.option("--landmarks", "landmarks_path", required=True, type=_in_file,
              help="JSON file with 68 [x, y] points (bare array or "
                   '{"landmarks": [...]}).')
@click.option("--au", "aus", multiple=True,
              help="AU(s) to explain; default: every AU above threshold.")
@click.option("--preset", default="composite", show_default=True,
              type=click.Choice(sorted(PRESETS)))
@click.option("--boxes", "box_config_path", type=_in_file, default=None)
@click.option("--threshold", default=0.5, show_default=True, type=float)
@click.option("--colormap", default=heatmap.DEFAULT_COLORMAP, show_default=True,
              type=click.Choice(heatmap.COLORMAPS))
@click.option("--out", "out_dir", default=Path("."), show_default=True, type=_out_dir)
def explain_cmd(model_path, image_path, landmarks_path, aus, preset,
                box_config_path, threshold, colormap, out_dir):
    """Explain one image: heatmap PNG, relevance sidecars, and mu per AU."""
    try:
        model = load_model(model_path)
        image_dims = model.input_shape[1:]
        doc = json.loads(Path(landmarks_path).read_text(encoding="utf-8"))
        points = doc["landmarks"] if isinstance(doc, dict) else doc
        landmarks = geometry.validate_landmarks(points, image_dims)
        boxes = (geometry.AuBoxConfig.default() if box_config_path is None
                 else geometry.AuBoxConfig.load(box_config_path))
        image = load_image(image_path, model.input_shape)
        trace = forward(model, image)
        predicted = classify(trace, threshold=threshold)
        targets = ([geometry.normalize_au(a) for a in aus]
                   if aus else sorted(predicted))
        if not targets:
            click.echo("no AU above threshold and none requested; nothing to explain")
            sys.exit(EXIT_OK)
        rules = get_preset(preset)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = Path(image_path).stem
        click.echo("predicted: " + (", ".join(sorted(predicted)) or "(none)"))
        for au in targets:
            rmap = explain(model, trace, au, rules)
            box = geometry.au_bounding_box(landmarks, au, boxes, image_dims)
            mask = geometry.box_mask(box, image_dims)
            mu_value, inside, total = metrics.mu(rmap, mask)
            grid = heatmap.normalize_symmetric(rmap.pixel_values)
            img = heatmap.draw_box(heatmap.render(grid, colormap=colormap), box)
            png = out / heatmap.heatmap_filename(stem, au, preset)
            heatmap.save_png(img, png)
            base = out / f"{stem}_{au}_{preset}"
            save_relevance_map(rmap, base, rules, source_image=str(image_path))
            if mu_value is None:
                click.echo(f"  {au}: mu undefined (no positive relevance)")
            else:
                mu_w = metrics.mu_weighted(
                    mu_value, box.area_fraction(image_dims))
                click.echo(f"  {au}: mu={mu_value:.4f} mu_w={mu_w:.4f} "
                           f"inside={inside:.4f} total={total:.4f} -> {png}")
    except AuVerifyError as exc:
        _fatal(exc)
    sys.exit(EXIT_OK)


@main.command("inspect-model")
@click.option("--model", "model_path", required=True, type=_in_file)
def inspect_model(model_path):
    """Validate a model file and print its topology."""
    try:
        model = load_model(model_path)
        shapes = infer_shapes(model)
    except AuVerifyError as exc:
        _fatal(exc)
    click.echo(f"name: {model.name}")
    click.echo(f"input: {model.input_shape}")
    click.echo(f"labels: {', '.join(model.output_labels)}")
    click.echo("layers:")
    for i, (layer, shape) in enumerate(zip(model.layers, shapes)):
        params = sum(t.size for t in (
            layer.weights, layer.bias, layer.gamma, layer.beta,
            layer.running_mean, layer.running_var, layer.proj_weights,
            layer.proj_bias) if t is not None)
        detail = f"  [{i:2d}] {layer.kind:<14} -> {shape}"
        if params:
            detail += f"  ({params} params)"
        if layer.kind == "residual_add" and layer.skip_source is not None:
            detail += f"  (skip from layer {layer.skip_source})"
        click.echo(detail)
    if model.golden is None:
        click.echo("golden: none embedded")
    else:
        click.echo(f"golden: verified ({len(model.golden.probabilities)} outputs "
                   "within 1e-4)")
    sys.exit(EXIT_OK)


@main.command("f1")
@click.option("--model", "model_path", required=True, type=_in_file)
@click.option("--manifest", "manifest_path", required=True, type=_in_file)
@click.option("--threshold", default=0.5, show_default=True, type=float)
@click.option("--out", "out_dir", default=None, type=_out_dir,
              help="Also write f1.csv / f1.json here.")
def f1_cmd(model_path, manifest_path, threshold, out_dir):
    """Classification quality only: per-AU F1 over a manifest."""
    try:
        model = load_model(model_path)
        image_dims = model.input_shape[1:]
        skips = []
        preds, truths, datasets = [], [], []
        for entry in ingest_manifest(manifest_path, image_dims,
                                     on_skip=skips.append):
            try:
                trace = forward(model, load_image(entry.path, model.input_shape))
            except (AuVerifyError, OSError) as exc:
                skips.append(f"{entry.image_id}: {exc}")
                continue
            preds.append(classify(trace, threshold=threshold))
            truths.append(entry.ground_truth_aus)
            datasets.append(entry.dataset)
        if not preds:
            raise AuVerifyError(f"no usable entries in {manifest_path}")
        rows = []
        for dataset in sorted(set(datasets)):
            idx = [i for i, d in enumerate(datasets) if d == dataset]
            p = [preds[i] for i in idx]
            t = [truths[i] for i in idx]
            for au in model.output_labels:
                tp, fp, fn = metrics.confusion_counts(p, t, au)
                rows.append({"dataset": dataset, "au": au, "tp": tp, "fp": fp,
                             "fn": fn, "tn": len(idx) - tp - fp - fn,
                             "f1": metrics.f1_score(p, t, au)})
        for row in rows:
            click.echo(f"{row['dataset']} {row['au']}: f1={row['f1']:.4f} "
                       f"(tp={row['tp']} fp={row['fp']} fn={row['fn']})")
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            lines = ["dataset,au,tp,fp,fn,tn,f1"]
            lines += [",".join([r["dataset"], r["au"], str(r["tp"]), str(r["fp"]),
                                str(r["fn"]), str(r["tn"]), f"{r['f1']:.6f}"])
                      for r in rows]
            (out / "f1.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
            doc = {"rows": [dict(r, f1=round(r["f1"], 6)) for r in rows]}
            (out / "f1.json").write_text(
                json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
            click.echo(f"wrote {out / 'f1.csv'}, {out / 'f1.json'}")
    except AuVerifyError as exc:
        _fatal(exc)
    sys.exit(EXIT_SKIPS if skips else EXIT_OK)


if __name__ == "__main__":  # pragma: no cover
    main()
