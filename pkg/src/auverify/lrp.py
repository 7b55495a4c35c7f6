"""Layer-wise relevance propagation from an output unit back to input pixels.

The basic redistribution sends each upper unit's relevance down in
proportion to the signed contributions x_j * w_jk that formed its
pre-activation. The other rules are variations on that split:

* ``epsilon`` adds a sign-matched stabilizer to the denominator and
  absorbs a corresponding share of relevance,
* ``alphabeta`` redistributes positive and negative contributions
  separately with weights alpha and beta (alpha - beta = 1),
* ``zbounds`` is the box-constrained rule for the pixel layer, with the
  input domain bounds (defaults [0, 1]) entering the numerator,
* ``flat`` spreads relevance uniformly over each receptive field.

Conventions, fixed here and documented in the README: biases are
absorbed into denominators but receive no outgoing relevance (so strict
conservation holds only for bias-free layers); relevance is injected as
the raw logit of the target unit, not its post-sigmoid probability; all
propagation runs in float64 and is rounded to float32 only at the final
RelevanceMap.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import AuVerifyError, LayerConfigError
from .model import ActivationTrace, ModelSpec, fold_batchnorm, forward
from .tensor import Tensor

# Implicit denominator stabilizer of the basic rule; distinct from (and
# additive with) the user-facing epsilon parameter. Guarantees finite
# output for degenerate denominators.
STABILIZER = 1e-9


def _signed_stab(z: np.ndarray, eps: float) -> np.ndarray:
    """z plus a sign-matched offset; sign(0) counts as positive."""
    return z + eps * np.where(z >= 0.0, 1.0, -1.0)


# ---------------------------------------------------------------------------
# rules and presets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BasicRule:
    name = "basic"

    def describe(self) -> dict:
        return {"rule": "basic"}


@dataclass(frozen=True)
class EpsilonRule:
    epsilon: float = 0.25
    name = "epsilon"

    def __post_init__(self):
        if self.epsilon < 0:
            raise LayerConfigError(f"epsilon must be >= 0, got {self.epsilon}")

    def describe(self) -> dict:
        return {"rule": "epsilon", "epsilon": self.epsilon}


@dataclass(frozen=True)
class AlphaBetaRule:
    alpha: float = 1.0
    beta: float = 0.0
    name = "alphabeta"

    def __post_init__(self):
        if abs(self.alpha - self.beta - 1.0) > 1e-12:
            raise LayerConfigError(
                f"alpha - beta must equal 1, got alpha={self.alpha} beta={self.beta}")
        if self.alpha < 1.0:
            raise LayerConfigError(f"alpha must be >= 1, got {self.alpha}")

    def describe(self) -> dict:
        return {"rule": "alphabeta", "alpha": self.alpha, "beta": self.beta}


@dataclass(frozen=True)
class ZBoundsRule:
    low: float = 0.0
    high: float = 1.0
    name = "zbounds"

    def __post_init__(self):
        if not (self.low <= 0.0 <= self.high):
            raise LayerConfigError(
                f"bounds must satisfy low <= 0 <= high, got [{self.low}, {self.high}]")

    def describe(self) -> dict:
        return {"rule": "zbounds", "low": self.low, "high": self.high}


@dataclass(frozen=True)
class FlatRule:
    name = "flat"

    def describe(self) -> dict:
        return {"rule": "flat"}


Rule = BasicRule | EpsilonRule | AlphaBetaRule | ZBoundsRule | FlatRule


@dataclass(frozen=True)
class RulePreset:
    """Per-layer-category rule assignment.

    ``input_layer_rule`` applies to the first weighted layer (the one
    touching pixels), ``conv_rule`` to every other convolution and
    ``dense_rule`` to every other dense layer.
    """

    input_layer_rule: Rule
    conv_rule: Rule
    dense_rule: Rule
    name: str = "custom"

    def rule_for(self, kind: str, is_input_layer: bool) -> Rule:
        if is_input_layer:
            return self.input_layer_rule
        return self.conv_rule if kind == "conv2d" else self.dense_rule

    def describe(self) -> dict:
        return {
            "name": self.name,
            "input_layer": self.input_layer_rule.describe(),
            "conv": self.conv_rule.describe(),
            "dense": self.dense_rule.describe(),
        }


# The composite default mirrors the usual pixel/feature/classifier split:
# bounded rule on pixels, positive-only alpha-beta on feature convs,
# epsilon on dense classifier layers. Parameters are configurable; these
# are the shipped defaults.
PRESETS: dict[str, RulePreset] = {
    "composite": RulePreset(ZBoundsRule(0.0, 1.0), AlphaBetaRule(1.0, 0.0),
                            EpsilonRule(0.25), name="composite"),
    "basic": RulePreset(BasicRule(), BasicRule(), BasicRule(), name="basic"),
    "epsilon": RulePreset(EpsilonRule(0.25), EpsilonRule(0.25), EpsilonRule(0.25),
                          name="epsilon"),
    "alphabeta": RulePreset(AlphaBetaRule(1.0, 0.0), AlphaBetaRule(1.0, 0.0),
                            AlphaBetaRule(1.0, 0.0), name="alphabeta"),
}


def get_preset(name: str) -> RulePreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise LayerConfigError(
            f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# batched linear redistribution core
#
# Rows of ``p`` are independent upper-unit groups (one row per spatial
# position for convolutions, a single row for dense layers); columns of
# ``w2`` are upper units. Everything is float64.
# ---------------------------------------------------------------------------

def _redistribute(p: np.ndarray, w2: np.ndarray, bias: np.ndarray | None,
                  r: np.ndarray, rule: Rule,
                  p_low: np.ndarray | None = None,
                  p_high: np.ndarray | None = None) -> np.ndarray:
    if isinstance(rule, BasicRule) or isinstance(rule, EpsilonRule):
        eps = STABILIZER + (rule.epsilon if isinstance(rule, EpsilonRule) else 0.0)
        z = p @ w2
        if bias is not None:
            z = z + bias
        s = r / _signed_stab(z, eps)
        return p * (s @ w2.T)

    if isinstance(rule, AlphaBetaRule):
        p_pos, p_neg = np.maximum(p, 0.0), np.minimum(p, 0.0)
        w_pos, w_neg = np.maximum(w2, 0.0), np.minimum(w2, 0.0)
        z_pos = p_pos @ w_pos + p_neg @ w_neg
        z_neg = p_pos @ w_neg + p_neg @ w_pos
        if bias is not None:
            z_pos = z_pos + np.maximum(bias, 0.0)
            z_neg = z_neg + np.minimum(bias, 0.0)
        s_pos = rule.alpha * r / _signed_stab(z_pos, STABILIZER)
        s_neg = rule.beta * r / _signed_stab(z_neg, STABILIZER)
        out = p_pos * (s_pos @ w_pos.T) + p_neg * (s_pos @ w_neg.T)
        out -= p_pos * (s_neg @ w_neg.T) + p_neg * (s_neg @ w_pos.T)
        return out

    if isinstance(rule, ZBoundsRule):
        # Bounds apply to real input positions only; callers pass the
        # bound planes (zero over padding). Denominator is bias-free.
        if p_low is None:
            p_low = np.full_like(p, rule.low)
        if p_high is None:
            p_high = np.full_like(p, rule.high)
        w_pos, w_neg = np.maximum(w2, 0.0), np.minimum(w2, 0.0)
        z = p @ w2 - p_low @ w_pos - p_high @ w_neg
        s = r / _signed_stab(z, STABILIZER)
        return p * (s @ w2.T) - p_low * (s @ w_pos.T) - p_high * (s @ w_neg.T)

    if isinstance(rule, FlatRule):
        n = p.shape[1]
        return np.repeat((r.sum(axis=1) / n)[:, None], n, axis=1)

    raise LayerConfigError(f"unknown rule {rule!r}")


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# per-layer operations (public, array in / array out)
# ---------------------------------------------------------------------------

def lrp_linear_basic(x, w, r_upper, bias=None) -> np.ndarray:
    """Eq-style proportional split: R_j = sum_k x_j w_jk / z_k * R_k."""
    out = _redistribute(_f64(x)[None, :], _f64(w),
                        None if bias is None else _f64(bias),
                        _f64(r_upper)[None, :], BasicRule())
    return out[0]


def lrp_linear_epsilon(x, w, r_upper, epsilon: float, bias=None) -> np.ndarray:
    out = _redistribute(_f64(x)[None, :], _f64(w),
                        None if bias is None else _f64(bias),
                        _f64(r_upper)[None, :], EpsilonRule(epsilon))
    return out[0]


def lrp_linear_alphabeta(x, w, r_upper, alpha: float, beta: float, bias=None) -> np.ndarray:
    out = _redistribute(_f64(x)[None, :], _f64(w),
                        None if bias is None else _f64(bias),
                        _f64(r_upper)[None, :], AlphaBetaRule(alpha, beta))
    return out[0]


def lrp_input_zb(x, w, r_upper, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    """Box-constrained rule for the pixel layer (bias-free denominator)."""
    out = _redistribute(_f64(x)[None, :], _f64(w), None,
                        _f64(r_upper)[None, :], ZBoundsRule(low, high))
    return out[0]


def lrp_linear_flat(x, w, r_upper) -> np.ndarray:
    out = _redistribute(_f64(x)[None, :], _f64(w), None,
                        _f64(r_upper)[None, :], FlatRule())
    return out[0]


def lrp_conv(x, kernels, bias, stride: int, padding: int, r_upper,
             rule: Rule) -> np.ndarray:
    """Apply a linear rule through a convolution.

    Each output position is treated as a linear unit over its receptive
    field, exactly as if the convolution were unrolled to an explicit
    sparse dense layer.
    """
    x64 = _f64(x)
    k64 = _f64(kernels)
    o, c, kh, kw = k64.shape
    _, out_h, out_w = T.conv2d_output_shape(x64.shape, k64.shape, stride, padding)
    padded = T.pad_chw(x64, padding)
    patches = T.im2col(padded, kh, kw, stride, out_h, out_w)
    w2 = k64.reshape(o, -1).T
    r = _f64(r_upper).reshape(o, out_h * out_w).T
    b = None if bias is None else _f64(bias)

    p_low = p_high = None
    if isinstance(rule, ZBoundsRule):
        low_plane = T.pad_chw(np.full(x64.shape, rule.low), padding)
        high_plane = T.pad_chw(np.full(x64.shape, rule.high), padding)
        p_low = T.im2col(low_plane, kh, kw, stride, out_h, out_w)
        p_high = T.im2col(high_plane, kh, kw, stride, out_h, out_w)

    r_patches = _redistribute(patches, w2, b, r, rule, p_low, p_high)
    img = T.col2im(r_patches, padded.shape, kh, kw, stride, out_h, out_w)
    if padding:
        img = img[:, padding:padding + x64.shape[1], padding:padding + x64.shape[2]]
    return img


def lrp_relu(r_upper) -> np.ndarray:
    """Relevance passes through activations unchanged."""
    return _f64(r_upper)


def lrp_flatten(r_upper, input_shape) -> np.ndarray:
    return _f64(r_upper).reshape(input_shape)


def lrp_maxpool(r_upper, argmax: np.ndarray, input_shape) -> np.ndarray:
    """Winner-takes-all: each window's relevance goes to its recorded argmax."""
    c, h, w = input_shape
    r = _f64(r_upper).reshape(c, -1)
    out = np.zeros((c, h * w), dtype=np.float64)
    idx = argmax.reshape(c, -1)
    chan = np.repeat(np.arange(c)[:, None], idx.shape[1], axis=1)
    np.add.at(out, (chan.ravel(), idx.ravel()), r.ravel())
    return out.reshape(c, h, w)


def lrp_global_avgpool(x, r_upper) -> np.ndarray:
    """Per-channel relevance split proportionally to activations."""
    x64 = _f64(x)
    sums = _signed_stab(x64.sum(axis=(1, 2)), STABILIZER)
    return x64 / sums[:, None, None] * _f64(r_upper)[:, None, None]


def lrp_residual_add(x_main, x_skip, r_upper) -> tuple[np.ndarray, np.ndarray]:
    """Split relevance at a sum junction proportionally to the two addends."""
    xm, xs, r = _f64(x_main), _f64(x_skip), _f64(r_upper)
    denom = _signed_stab(xm + xs, STABILIZER)
    return xm / denom * r, xs / denom * r


# ---------------------------------------------------------------------------
# end-to-end decomposition
# ---------------------------------------------------------------------------

@dataclass
class RelevanceMap:
    """Signed per-pixel relevance for one (image, target AU) pair."""

    target_au: str
    values: Tensor            # C x H x W
    pixel_values: Tensor      # H x W, channel-summed
    output_relevance: float

    @classmethod
    def from_values(cls, target_au: str, values: np.ndarray,
                    output_relevance: float) -> "RelevanceMap":
        v64 = _f64(values)
        return cls(target_au=target_au,
                   values=Tensor(v64.astype(np.float32)),
                   pixel_values=Tensor(v64.sum(axis=0).astype(np.float32)),
                   output_relevance=float(output_relevance))


def init_relevance(trace: ActivationTrace, target_au: str) -> Tensor:
    """Initial relevance vector: the target unit's logit, zeros elsewhere."""
    from .errors import UnknownActionUnitError
    if target_au not in trace.labels:
        raise UnknownActionUnitError(
            f"unknown Action Unit {target_au!r}; trace labels are {trace.labels}")
    idx = trace.labels.index(target_au)
    r = np.zeros(trace.logits.shape, dtype=np.float32)
    r[idx] = trace.logits.ravel()[idx]
    return Tensor(r)


def _check_trace(model: ModelSpec, trace: ActivationTrace):
    if len(trace.layers) != len(model.layers):
        raise AuVerifyError(
            f"trace has {len(trace.layers)} layer records but the model has "
            f"{len(model.layers)} layers; was it produced by this model?")
    if trace.input.shape != tuple(model.input_shape):
        raise AuVerifyError(
            f"trace input shape {trace.input.shape} does not match model "
            f"input_shape {tuple(model.input_shape)}")
    if trace.labels != list(model.output_labels):
        raise AuVerifyError("trace labels do not match model output labels")


def _propagate(model: ModelSpec, trace: ActivationTrace, target_au: str,
               preset: RulePreset):
    """Backward relevance walk over a batchnorm-free model.

    Returns (input relevance [C,H,W] float64, steps), where steps is a
    list of (layer boundary index, live relevance total) covering every
    transition; boundary i is the input of layer i, so boundary 0 is the
    pixel layer. Live totals include relevance parked for residual skips.
    """
    n = len(model.layers)
    weighted = [i for i, l in enumerate(model.layers) if l.kind in ("conv2d", "dense")]
    first_weighted = weighted[0] if weighted else -1

    r = _f64(init_relevance(trace, target_au).data)
    pending: dict[int, np.ndarray] = {}

    def live_total(current: np.ndarray) -> float:
        return float(current.sum() + sum(p.sum() for p in pending.values()))

    steps = [(n, live_total(r))]
    for i in range(n - 1, -1, -1):
        layer = model.layers[i]
        act = trace.layers[i]
        if i in pending:
            r = r + pending.pop(i)
        x = _f64(act.input.data)
        if layer.kind in ("relu", "sigmoid"):
            r = lrp_relu(r)
        elif layer.kind == "flatten":
            r = lrp_flatten(r, act.input.shape)
        elif layer.kind == "dense":
            rule = preset.rule_for("dense", i == first_weighted)
            r = _redistribute(x[None, :], _f64(layer.weights.data),
                              _f64(layer.bias.data), r[None, :], rule)[0]
        elif layer.kind == "conv2d":
            rule = preset.rule_for("conv2d", i == first_weighted)
            r = lrp_conv(x, layer.weights.data, layer.bias.data,
                         layer.stride, layer.padding, r, rule)
        elif layer.kind == "maxpool":
            r = lrp_maxpool(r, act.pool_argmax, act.input.shape)
        elif layer.kind == "global_avgpool":
            r = lrp_global_avgpool(x, r)
        elif layer.kind == "residual_add":
            r, r_skip = lrp_residual_add(x, _f64(act.skip_value.data), r)
            src = layer.skip_source
            if layer.proj_weights is not None:
                proj_bias = (layer.proj_bias.data if layer.proj_bias is not None
                             else np.zeros(layer.proj_weights.shape[0]))
                r_skip = lrp_conv(trace.layers[src].output.data,
                                  layer.proj_weights.data, proj_bias,
                                  layer.proj_stride or 1, 0, r_skip,
                                  preset.rule_for("conv2d", False))
            pending[src] = pending.get(src, 0) + r_skip
        else:  # pragma: no cover - batchnorm folded out, kinds validated
            raise AuVerifyError(f"cannot propagate through layer kind {layer.kind!r}")
        # Deposits keyed by skip_source merge when the walk reaches that
        # layer's output, i.e. the start of iteration i == skip_source.
        steps.append((i, live_total(r)))

    if pending:  # pragma: no cover - every skip source precedes its junction
        raise AuVerifyError(f"unconsumed skip relevance for layers {sorted(pending)}")
    return r, steps


def _canonical(model: ModelSpec, trace: ActivationTrace):
    """Fold batchnorm out of the model (re-deriving the trace) if present."""
    _check_trace(model, trace)
    if model.has_batchnorm():
        folded = fold_batchnorm(model)
        return folded, forward(folded, trace.input)
    return model, trace


def explain(model: ModelSpec, trace: ActivationTrace, target_au: str,
            preset: RulePreset) -> RelevanceMap:
    """Full decomposition of one output unit down to the input pixels."""
    fmodel, ftrace = _canonical(model, trace)
    idx = fmodel.label_index(target_au)
    logit = float(trace.logits.ravel()[idx])
    values, _ = _propagate(fmodel, ftrace, target_au, preset)
    return RelevanceMap.from_values(target_au, values, logit)


def relevance_flow(model: ModelSpec, trace: ActivationTrace, target_au: str,
                   preset: RulePreset) -> list[tuple[int, float]]:
    """Live relevance total at every layer boundary, top to bottom.

    Boundary n is the injected output relevance and boundary 0 the pixel
    layer; under the basic rule with zero biases and non-degenerate
    denominators the totals are conserved.
    """
    fmodel, ftrace = _canonical(model, trace)
    _, steps = _propagate(fmodel, ftrace, target_au, preset)
    return steps


# ---------------------------------------------------------------------------
# sidecar export
# ---------------------------------------------------------------------------

def save_relevance_map(rmap: RelevanceMap, base_path, preset: RulePreset,
                       source_image: str | None = None) -> tuple[str, str]:
    """Write ``<base>.rel`` (binary pixel grid) and ``<base>.json`` descriptor.

    Binary layout: two little-endian uint32 (H, W), then H*W little-endian
    float32 channel-summed pixel values, row-major.
    """
    base = str(base_path)
    h, w = rmap.pixel_values.shape
    rel_path, json_path = base + ".rel", base + ".json"
    with open(rel_path, "wb") as fh:
        fh.write(struct.pack("<II", h, w))
        fh.write(rmap.pixel_values.to_bytes())
    descriptor = {
        "target_au": rmap.target_au,
        "preset": preset.describe(),
        "output_relevance": rmap.output_relevance,
        "injected": "logit",
        "source_image": source_image,
        "height": h,
        "width": w,
    }
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(descriptor, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return rel_path, json_path


def load_relevance_pixels(rel_path) -> np.ndarray:
    """Read back the binary pixel grid written by save_relevance_map."""
    with open(rel_path, "rb") as fh:
        h, w = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(4 * h * w), dtype="<f4")
    if data.size != h * w:
        raise AuVerifyError(f"relevance sidecar truncated: {rel_path}")
    return data.reshape(h, w).copy()
