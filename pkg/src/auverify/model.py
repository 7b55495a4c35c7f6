"""Portable network format, validation, and a fully traced forward pass.

The on-disk format (version 1) is a single UTF-8 JSON document:

.. code-block:: text

    {
      "format_version": 1,
      "name": "...",
      "input_shape": [C, H, W],
      "output_labels": ["AU04", ...],
      "layers": [ {"kind": "...", ...}, ... ],
      "golden": {"input": <tensor>, "probabilities": [...]}   # optional
    }

Weight tensors are objects ``{"shape": [...], "data_b64": "<base64>"}``
holding little-endian float32 values in row-major order. Convolution
kernels use OIHW order; dense weights use (in, out) order. The optional
``golden`` field carries one test input with the probabilities recorded
by whatever produced the file; it is re-checked at load time.
"""

from __future__ import annotations

import base64
import json
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ModelFormatError, ShapeMismatchError
from .tensor import Tensor

FORMAT_VERSION = 1
GOLDEN_TOLERANCE = 1e-4

LAYER_KINDS = frozenset({
    "conv2d", "dense", "relu", "sigmoid", "maxpool",
    "global_avgpool", "batchnorm", "residual_add", "flatten",
})


@dataclass
class LayerSpec:
    """One layer of the network; only the fields its kind requires are set."""

    kind: str
    stride: int | None = None
    padding: int | None = None
    window: int | None = None
    skip_source: int | None = None
    weights: Tensor | None = None
    bias: Tensor | None = None
    gamma: Tensor | None = None
    beta: Tensor | None = None
    running_mean: Tensor | None = None
    running_var: Tensor | None = None
    epsilon: float | None = None
    proj_weights: Tensor | None = None
    proj_bias: Tensor | None = None
    proj_stride: int | None = None


@dataclass
class GoldenPair:
    input: Tensor
    probabilities: list[float]


@dataclass
class ModelSpec:
    """Validated, immutable-after-load network description."""

    name: str
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    output_labels: list[str]
    golden: GoldenPair | None = None

    def label_index(self, au: str) -> int:
        from .errors import UnknownActionUnitError
        try:
            return self.output_labels.index(au)
        except ValueError:
            raise UnknownActionUnitError(
                f"unknown Action Unit {au!r}; model labels are {self.output_labels}"
            ) from None

    def has_batchnorm(self) -> bool:
        return any(l.kind == "batchnorm" for l in self.layers)


@dataclass
class LayerActivation:
    """Recorded (input, output) of one layer from a forward pass.

    For residual_add layers, ``skip_value`` holds the second addend
    (after projection, when one is declared).
    """

    input: Tensor
    output: Tensor
    pool_argmax: np.ndarray | None = None
    skip_value: Tensor | None = None


@dataclass
class ActivationTrace:
    """Per-layer activations of one forward pass, plus the classifier head."""

    layers: list[LayerActivation]
    logits: Tensor
    probabilities: Tensor
    labels: list[str]

    @property
    def input(self) -> Tensor:
        return self.layers[0].input


# ---------------------------------------------------------------------------
# shape chaining / validation
# ---------------------------------------------------------------------------

def _require(layer: LayerSpec, index: int, names: list[str]):
    for name in names:
        if getattr(layer, name) is None:
            raise ModelFormatError(
                f"layer {index} ({layer.kind}) is missing required field {name!r}"
            )


def _forbid_params(layer: LayerSpec, index: int):
    carried = [
        name for name in ("stride", "padding", "window", "skip_source", "weights",
                          "bias", "gamma", "beta", "running_mean", "running_var")
        if getattr(layer, name) is not None
    ]
    if carried:
        raise ModelFormatError(
            f"layer {index} ({layer.kind}) carries parameters it does not use: {carried}"
        )


def layer_output_shape(layer: LayerSpec, input_shape: tuple, index: int,
                       earlier_shapes: list[tuple]) -> tuple:
    """Inferred output shape of one layer given its input shape.

    ``earlier_shapes[i]`` is the output shape of layer ``i``; residual-add
    layers use it to resolve their skip source.
    """
    kind = layer.kind
    if kind == "conv2d":
        _require(layer, index, ["weights", "bias", "stride", "padding"])
        if len(input_shape) != 3:
            raise ModelFormatError(
                f"layer {index} (conv2d) needs a CHW input, got shape {input_shape}"
            )
        return T.conv2d_output_shape(input_shape, layer.weights.shape,
                                     layer.stride, layer.padding)
    if kind == "dense":
        _require(layer, index, ["weights", "bias"])
        n_in, n_out = layer.weights.shape
        flat = int(np.prod(input_shape))
        if len(input_shape) != 1 or input_shape[0] != n_in:
            raise ModelFormatError(
                f"layer {index} (dense) expects a flat input of {n_in}, "
                f"got shape {input_shape} (flatten first if needed, total {flat})"
            )
        if layer.bias.shape != (n_out,):
            raise ModelFormatError(
                f"layer {index} (dense) bias shape {layer.bias.shape} "
                f"does not match weights {layer.weights.shape}"
            )
        return (n_out,)
    if kind == "maxpool":
        _require(layer, index, ["window", "stride"])
        return T.maxpool_output_shape(input_shape, layer.window, layer.stride)
    if kind == "global_avgpool":
        if len(input_shape) != 3:
            raise ModelFormatError(
                f"layer {index} (global_avgpool) needs a CHW input, got {input_shape}"
            )
        return (input_shape[0],)
    if kind == "flatten":
        return (int(np.prod(input_shape)),)
    if kind in ("relu", "sigmoid"):
        return tuple(input_shape)
    if kind == "batchnorm":
        _require(layer, index, ["gamma", "beta", "running_mean", "running_var"])
        if layer.epsilon is None:
            raise ModelFormatError(f"layer {index} (batchnorm) is missing epsilon")
        c = input_shape[0]
        for name in ("gamma", "beta", "running_mean", "running_var"):
            t = getattr(layer, name)
            if t.shape != (c,):
                raise ModelFormatError(
                    f"layer {index} (batchnorm) {name} shape {t.shape} does not "
                    f"match channel count {c} of input {input_shape}"
                )
        return tuple(input_shape)
    if kind == "residual_add":
        _require(layer, index, ["skip_source"])
        src = layer.skip_source
        if not 0 <= src < index:
            raise ModelFormatError(
                f"layer {index} (residual_add) skip_source {src} must point at an earlier layer"
            )
        skip_shape = earlier_shapes[src]
        if layer.proj_weights is not None:
            stride = layer.proj_stride or 1
            skip_shape = T.conv2d_output_shape(
                skip_shape, layer.proj_weights.shape, stride, 0)
        if tuple(skip_shape) != tuple(input_shape):
            raise ModelFormatError(
                f"layer {index} (residual_add) skip shape {tuple(skip_shape)} does not "
                f"match main-path shape {tuple(input_shape)}"
            )
        return tuple(input_shape)
    raise ModelFormatError(f"layer {index} has unknown kind {layer.kind!r}")


def infer_shapes(model: ModelSpec) -> list[tuple]:
    """Output shape of every layer, chained from the model input shape."""
    shapes: list[tuple] = []
    current = tuple(model.input_shape)
    for i, layer in enumerate(model.layers):
        current = layer_output_shape(layer, current, i, shapes)
        shapes.append(current)
    return shapes


def validate_model(model: ModelSpec, check_golden: bool = True) -> list[tuple]:
    """Enforce all ModelSpec invariants; returns the chained shapes."""
    if len(model.input_shape) != 3:
        raise ModelFormatError(f"input_shape must be [C, H, W], got {model.input_shape}")
    if not model.output_labels:
        raise ModelFormatError("output_labels must not be empty")
    if len(set(model.output_labels)) != len(model.output_labels):
        raise ModelFormatError(f"output_labels contain duplicates: {model.output_labels}")
    if not model.layers:
        raise ModelFormatError("model has no layers")
    shapes = infer_shapes(model)
    last = model.layers[-1]
    if last.kind != "sigmoid":
        raise ModelFormatError(f"final layer must be sigmoid, got {last.kind!r}")
    n_out = len(model.output_labels)
    if shapes[-1] != (n_out,):
        raise ModelFormatError(
            f"final layer produces shape {shapes[-1]} but there are {n_out} output labels"
        )
    # Batchnorm must sit directly on a conv/dense output so it can be folded
    # into a well-defined linear layer before relevance decomposition.
    for i, layer in enumerate(model.layers):
        if layer.kind == "batchnorm":
            if i == 0 or model.layers[i - 1].kind not in ("conv2d", "dense"):
                raise ModelFormatError(
                    f"layer {i} (batchnorm) must directly follow a conv2d or dense layer"
                )
    if check_golden and model.golden is not None:
        trace = forward(model, model.golden.input)
        got = trace.probabilities.ravel()
        want = np.asarray(model.golden.probabilities, dtype=np.float64)
        if got.shape != want.shape:
            raise ModelFormatError(
                f"golden probabilities have length {want.size}, model outputs {got.size}"
            )
        err = float(np.max(np.abs(got.astype(np.float64) - want)))
        if err > GOLDEN_TOLERANCE:
            raise ModelFormatError(
                f"golden self-check failed: max probability error {err:.3g} "
                f"exceeds {GOLDEN_TOLERANCE}"
            )
    return shapes


# ---------------------------------------------------------------------------
# (de)serialization
# ---------------------------------------------------------------------------

_WEIGHT_FIELDS = ("weights", "bias", "gamma", "beta", "running_mean",
                  "running_var", "proj_weights", "proj_bias")
_INT_FIELDS = ("stride", "padding", "window", "skip_source", "proj_stride")


def decode_tensor(obj) -> Tensor:
    if not isinstance(obj, dict) or "shape" not in obj or "data_b64" not in obj:
        raise ModelFormatError(f"weight tensors must be {{shape, data_b64}} objects, got {obj!r}")
    try:
        raw = base64.b64decode(obj["data_b64"], validate=True)
    except Exception as exc:
        raise ModelFormatError(f"invalid base64 weight data: {exc}") from exc
    return Tensor.from_bytes(raw, obj["shape"])


def encode_tensor(t: Tensor) -> dict:
    return {"shape": list(t.shape),
            "data_b64": base64.b64encode(t.to_bytes()).decode("ascii")}


def _layer_from_json(obj: dict, index: int) -> LayerSpec:
    if "kind" not in obj:
        raise ModelFormatError(f"layer {index} has no kind")
    kind = obj["kind"]
    if kind not in LAYER_KINDS:
        raise ModelFormatError(f"layer {index} has unknown kind {kind!r}")
    layer = LayerSpec(kind=kind)
    for name in _INT_FIELDS:
        if name in obj:
            setattr(layer, name, int(obj[name]))
    if "epsilon" in obj:
        layer.epsilon = float(obj["epsilon"])
    for name in _WEIGHT_FIELDS:
        if name in obj:
            try:
                setattr(layer, name, decode_tensor(obj[name]))
            except ShapeMismatchError as exc:
                raise ModelFormatError(f"layer {index} ({kind}): {exc}") from exc
    return layer


def _layer_to_json(layer: LayerSpec) -> dict:
    obj: dict = {"kind": layer.kind}
    for name in _INT_FIELDS:
        v = getattr(layer, name)
        if v is not None:
            obj[name] = int(v)
    if layer.epsilon is not None:
        obj["epsilon"] = layer.epsilon
    for name in _WEIGHT_FIELDS:
        t = getattr(layer, name)
        if t is not None:
            obj[name] = encode_tensor(t)
    return obj


def model_from_json(doc: dict, check_golden: bool = True) -> ModelSpec:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported format_version {version!r} (this engine reads version {FORMAT_VERSION})"
        )
    for key in ("name", "input_shape", "output_labels", "layers"):
        if key not in doc:
            raise ModelFormatError(f"model document is missing {key!r}")
    layers = [_layer_from_json(o, i) for i, o in enumerate(doc["layers"])]
    golden = None
    if "golden" in doc and doc["golden"] is not None:
        g = doc["golden"]
        if "input" not in g or "probabilities" not in g:
            raise ModelFormatError("golden field must hold {input, probabilities}")
        golden = GoldenPair(input=decode_tensor(g["input"]),
                            probabilities=[float(p) for p in g["probabilities"]])
    model = ModelSpec(
        name=str(doc["name"]),
        input_shape=tuple(int(d) for d in doc["input_shape"]),
        layers=layers,
        output_labels=[str(s) for s in doc["output_labels"]],
        golden=golden,
    )
    validate_model(model, check_golden=check_golden)
    return model


def model_to_json(model: ModelSpec) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "name": model.name,
        "input_shape": list(model.input_shape),
        "output_labels": list(model.output_labels),
        "layers": [_layer_to_json(l) for l in model.layers],
    }
    if model.golden is not None:
        doc["golden"] = {
            "input": encode_tensor(model.golden.input),
            "probabilities": list(model.golden.probabilities),
        }
    return doc


def load_model(path, check_golden: bool = True) -> ModelSpec:
    """Parse and fully validate a portable model file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model file {path} is not valid JSON: {exc}") from exc
    return model_from_json(doc, check_golden=check_golden)


def save_model(model: ModelSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_json(model), fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def _batchnorm_forward(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    """Inference-mode batchnorm over the channel axis (CHW or flat input)."""
    gamma = layer.gamma.data.astype(np.float64)
    beta = layer.beta.data.astype(np.float64)
    mean = layer.running_mean.data.astype(np.float64)
    var = layer.running_var.data.astype(np.float64)
    scale = gamma / np.sqrt(var + layer.epsilon)
    shift = beta - mean * scale
    if x.ndim == 3:
        scale = scale[:, None, None]
        shift = shift[:, None, None]
    return (x.astype(np.float64) * scale + shift).astype(np.float32)


def forward(model: ModelSpec, input: Tensor) -> ActivationTrace:
    """Run the network, recording every layer's input and output.

    Input values are expected in [0, 1]; out-of-range values produce a
    warning but the pass proceeds, so mis-normalized inputs can still be
    inspected.
    """
    x = input if isinstance(input, Tensor) else Tensor(input)
    if x.shape != tuple(model.input_shape):
        raise ShapeMismatchError(
            f"input shape {x.shape} does not match model input_shape {tuple(model.input_shape)}"
        )
    lo, hi = float(x.data.min()), float(x.data.max())
    if lo < 0.0 or hi > 1.0:
        warnings.warn(
            f"input values outside [0, 1] (min={lo:.4g}, max={hi:.4g}); "
            "proceeding anyway", stacklevel=2)

    records: list[LayerActivation] = []
    outputs: list[Tensor] = []
    current = x
    logits: Tensor | None = None
    for i, layer in enumerate(model.layers):
        inp = current
        argmax = None
        skip_value = None
        if layer.kind == "conv2d":
            out = T.conv2d_forward(inp, layer.weights, layer.bias,
                                   layer.stride, layer.padding)
        elif layer.kind == "dense":
            out = T.dense_forward(inp, layer.weights, layer.bias)
        elif layer.kind == "relu":
            out = T.relu(inp)
        elif layer.kind == "sigmoid":
            logits = inp
            out = T.sigmoid(inp)
        elif layer.kind == "maxpool":
            out, argmax = T.maxpool2d(inp, layer.window, layer.stride)
        elif layer.kind == "global_avgpool":
            out = T.global_avgpool(inp)
        elif layer.kind == "flatten":
            out = inp.reshape(-1)
        elif layer.kind == "batchnorm":
            out = Tensor(_batchnorm_forward(layer, inp.data))
        elif layer.kind == "residual_add":
            skip = outputs[layer.skip_source]
            if layer.proj_weights is not None:
                skip = T.conv2d_forward(
                    skip, layer.proj_weights,
                    layer.proj_bias if layer.proj_bias is not None
                    else Tensor.zeros((layer.proj_weights.shape[0],)),
                    layer.proj_stride or 1, 0)
            skip_value = skip
            out = Tensor(inp.data + skip.data)
        else:  # pragma: no cover - validate_model rejects unknown kinds
            raise ModelFormatError(f"layer {i} has unknown kind {layer.kind!r}")
        records.append(LayerActivation(input=inp, output=out, pool_argmax=argmax,
                                       skip_value=skip_value))
        outputs.append(out)
        current = out

    if logits is None:  # pragma: no cover - final-sigmoid invariant
        raise ModelFormatError("model has no sigmoid head")
    return ActivationTrace(layers=records, logits=logits,
                           probabilities=current, labels=list(model.output_labels))


def classify(trace: ActivationTrace, threshold: float = 0.5) -> set[str]:
    """Action Units whose probability is >= threshold (boundary inclusive)."""
    probs = trace.probabilities.ravel()
    return {au for au, p in zip(trace.labels, probs) if float(p) >= threshold}


# ---------------------------------------------------------------------------
# batchnorm folding
# ---------------------------------------------------------------------------

def fold_batchnorm(model: ModelSpec) -> ModelSpec:
    """Fold every batchnorm into its preceding conv/dense layer.

    The returned model computes the same function (up to float rounding)
    with purely linear weighted layers, which is what the relevance
    decomposition rules are defined over. Residual skip indices are
    remapped; a skip tapped between a conv and its batchnorm cannot be
    folded and raises.
    """
    if not model.has_batchnorm():
        return model

    folded_into = {}          # old batchnorm index -> old index of its host layer
    for i, layer in enumerate(model.layers):
        if layer.kind == "batchnorm":
            folded_into[i] = i - 1

    for i, layer in enumerate(model.layers):
        if layer.kind == "residual_add":
            src = layer.skip_source
            if src + 1 in folded_into:
                raise ModelFormatError(
                    f"layer {i} (residual_add) taps layer {src} between a "
                    "conv/dense and its batchnorm; this skip cannot survive folding"
                )

    new_layers: list[LayerSpec] = []
    index_map = {}            # old index -> new index of the layer producing the same output
    for i, layer in enumerate(model.layers):
        if layer.kind == "batchnorm":
            host = new_layers[-1]
            scale = (layer.gamma.data.astype(np.float64)
                     / np.sqrt(layer.running_var.data.astype(np.float64) + layer.epsilon))
            shift = (layer.beta.data.astype(np.float64)
                     - layer.running_mean.data.astype(np.float64) * scale)
            w = host.weights.data.astype(np.float64)
            b = host.bias.data.astype(np.float64)
            if host.kind == "conv2d":
                w = w * scale[:, None, None, None]
            else:
                w = w * scale[None, :]
            b = b * scale + shift
            new_layers[-1] = replace(host, weights=Tensor(w.astype(np.float32)),
                                     bias=Tensor(b.astype(np.float32)))
            index_map[i] = len(new_layers) - 1
            continue
        layer = replace(layer)
        if layer.kind == "residual_add":
            layer.skip_source = index_map[layer.skip_source]
        new_layers.append(layer)
        index_map[i] = len(new_layers) - 1

    folded = ModelSpec(name=model.name, input_shape=model.input_shape,
                       layers=new_layers, output_labels=list(model.output_labels),
                       golden=model.golden)
    validate_model(folded, check_golden=False)
    return folded
