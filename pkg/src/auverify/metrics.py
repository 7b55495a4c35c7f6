"""Heatmap localization metrics and classification scores.

The localization ratio mu is the share of an image's positive pixel
relevance that falls inside the Action Unit's bounding box (negative
relevance is ignored on both sides). mu_w divides mu by the box's share
of the image area, so 1.0 marks the uniform-spread baseline. The top-k
variant keeps only the strongest fraction of positive pixels before
measuring.

A map with no positive relevance has an undefined mu; such records are
kept in the stream with mu = None, excluded from means, and counted
separately so they cannot silently bias aggregates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import AuVerifyError
from .lrp import RelevanceMap
from .tensor import Tensor

VARIANT_STANDARD = "standard"


def topk_variant_name(fraction: float) -> str:
    return f"top{round(fraction * 100):g}"


def positive_sums(pixel_values, mask) -> tuple[float, float]:
    """(inside, total) sums of positive pixel relevance."""
    grid = np.asarray(pixel_values, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if grid.shape != m.shape:
        raise AuVerifyError(
            f"mask shape {m.shape} does not match relevance grid {grid.shape}")
    pos = np.maximum(grid, 0.0)
    return float((pos * m).sum()), float(pos.sum())


def mu(relevance: RelevanceMap, mask) -> tuple[float | None, float, float]:
    """(mu, inside, total); mu is None when the map has no positive relevance."""
    inside, total = positive_sums(relevance.pixel_values, mask)
    if total == 0.0:
        return None, inside, total
    return inside / total, inside, total


def mu_weighted(mu_value: float, box_area_fraction: float) -> float:
    """mu normalized by the box's share of the image area."""
    if not 0.0 < box_area_fraction <= 1.0:
        raise AuVerifyError(
            f"box area fraction must be in (0, 1], got {box_area_fraction}")
    return mu_value / box_area_fraction


def top_k_filter(relevance: RelevanceMap, fraction: float) -> RelevanceMap:
    """Keep the top fraction of positive pixels by value; zero the rest.

    The cutoff count is ceil(fraction * number of positive pixels); ties
    at the cutoff break toward the lowest flat index. Negative pixels are
    always zeroed. Channel values at dropped pixels are zeroed too, so
    the channel-sum invariant keeps holding on the filtered map.
    """
    if not 0.0 < fraction <= 1.0:
        raise AuVerifyError(f"top-k fraction must be in (0, 1], got {fraction}")
    grid = relevance.pixel_values.data.astype(np.float64)
    flat = grid.reshape(-1)
    positive = np.nonzero(flat > 0.0)[0]
    keep = np.zeros(flat.shape, dtype=bool)
    if positive.size:
        k = math.ceil(fraction * positive.size)
        # stable sort by descending value; equal values keep ascending index
        order = positive[np.argsort(-flat[positive], kind="stable")]
        keep[order[:k]] = True
    keep2d = keep.reshape(grid.shape)
    values = relevance.values.data * keep2d[None, :, :]
    pixels = np.where(keep2d, grid, 0.0)
    return replace(relevance,
                   values=Tensor(values),
                   pixel_values=Tensor(pixels.astype(np.float32)))


@dataclass(frozen=True)
class MuRecord:
    """One mu measurement for one (image, AU) pair."""

    image_id: str
    au: str
    variant: str
    mu: float | None                 # None when undefined (no positive relevance)
    mu_w: float | None
    inside: float
    total: float
    box_area_fraction: float

    @property
    def defined(self) -> bool:
        return self.mu is not None


def make_mu_record(image_id: str, au: str, relevance: RelevanceMap, mask,
                   box_area_fraction: float,
                   variant: str = VARIANT_STANDARD) -> MuRecord:
    mu_value, inside, total = mu(relevance, mask)
    mu_w = None if mu_value is None else mu_weighted(mu_value, box_area_fraction)
    return MuRecord(image_id=image_id, au=au, variant=variant, mu=mu_value,
                    mu_w=mu_w, inside=inside, total=total,
                    box_area_fraction=box_area_fraction)


def filter_correct(predicted: set[str], truth: set[str]) -> set[str]:
    """AUs measured for a frame: true positives only."""
    return set(predicted) & set(truth)


@dataclass(frozen=True)
class AggregateRow:
    dataset: str
    au: str
    variant: str
    mean_mu: float
    mean_mu_w: float
    n: int
    n_undefined: int


def aggregate(records, dataset_id: str) -> tuple[list[AggregateRow], list[str]]:
    """Arithmetic means per (AU, variant), plus notices for dropped groups.

    Groups whose every record is undefined are omitted (a row with n = 0
    would have no mean); each omission produces a notice string. Sums use
    math.fsum, so the result is independent of record order.
    """
    groups: dict[tuple[str, str], list[MuRecord]] = {}
    for rec in records:
        groups.setdefault((rec.au, rec.variant), []).append(rec)
    rows: list[AggregateRow] = []
    notices: list[str] = []
    for (au, variant) in sorted(groups):
        recs = groups[(au, variant)]
        defined = [r for r in recs if r.defined]
        n_undef = len(recs) - len(defined)
        if not defined:
            notices.append(
                f"{dataset_id}/{au}/{variant}: no defined mu records "
                f"({n_undef} undefined); row omitted")
            continue
        n = len(defined)
        rows.append(AggregateRow(
            dataset=dataset_id, au=au, variant=variant,
            mean_mu=math.fsum(r.mu for r in defined) / n,
            mean_mu_w=math.fsum(r.mu_w for r in defined) / n,
            n=n, n_undefined=n_undef))
    return rows, notices


def confusion_counts(predictions, truths, au: str) -> tuple[int, int, int]:
    """(TP, FP, FN) for one AU over parallel per-image label sets."""
    if len(predictions) != len(truths):
        raise AuVerifyError(
            f"predictions ({len(predictions)}) and truths ({len(truths)}) differ in length")
    tp = fp = fn = 0
    for pred, true in zip(predictions, truths):
        p, t = au in pred, au in true
        tp += p and t
        fp += p and not t
        fn += t and not p
    return tp, fp, fn


def f1_score(predictions, truths, au: str) -> float:
    """2*TP / (2*TP + FP + FN); zero when the denominator is zero."""
    tp, fp, fn = confusion_counts(predictions, truths, au)
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom
