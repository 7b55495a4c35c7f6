"""Minimal dense tensor type and the forward kernels the engine is built on.

Values are stored as 32-bit floats in row-major order; dot products
accumulate in 64-bit to keep downstream conservation checks tight.
All kernels are pure functions and never mutate their inputs.
"""

from __future__ import annotations

import numpy as np

from .errors import LayerConfigError, ShapeMismatchError

MAX_RANK = 4


class Tensor:
    """Dense N-dimensional float32 array, rank 1 to 4.

    Rank conventions used across the package: vectors (dense
    activations), matrices (dense weights, ``(in, out)`` order),
    CHW images, and OIHW convolution kernels.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not 1 <= arr.ndim <= MAX_RANK:
            raise ShapeMismatchError(
                f"tensor rank must be between 1 and {MAX_RANK}, got shape {arr.shape}"
            )
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def ravel(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.data.reshape(-1)

    def reshape(self, shape) -> "Tensor":
        return Tensor(self.data.reshape(shape))

    def tolist(self):
        return self.data.tolist()

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __getitem__(self, idx):
        return self.data[idx]

    def __len__(self):
        return self.data.shape[0]

    def __array__(self, dtype=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls(np.zeros(shape, dtype=np.float32))

    @classmethod
    def full(cls, shape, value) -> "Tensor":
        return cls(np.full(shape, value, dtype=np.float32))

    def to_bytes(self) -> bytes:
        """Row-major little-endian float32 bytes (the on-disk weight encoding)."""
        return self.data.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes, shape) -> "Tensor":
        shape = tuple(int(s) for s in shape)
        expected = 4 * int(np.prod(shape))
        if len(raw) != expected:
            raise ShapeMismatchError(
                f"weight byte count {len(raw)} does not match shape {shape} "
                f"(expected {expected} bytes)"
            )
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
        return cls(arr)


def _as_array(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float32)


# ---------------------------------------------------------------------------
# shape inference
#
# Output shapes are pure functions of input shape and layer config; model
# validation chains these without touching any weights.
# ---------------------------------------------------------------------------

def conv2d_output_shape(input_shape, kernel_shape, stride: int, padding: int):
    c, h, w = input_shape
    o, kc, kh, kw = kernel_shape
    if kc != c:
        raise ShapeMismatchError(
            f"conv input has {c} channels but kernel shape {tuple(kernel_shape)} expects {kc}"
        )
    if stride < 1:
        raise LayerConfigError(f"conv stride must be positive, got {stride}")
    if padding < 0:
        raise LayerConfigError(f"conv padding must be non-negative, got {padding}")
    num_h = h + 2 * padding - kh
    num_w = w + 2 * padding - kw
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise LayerConfigError(
            f"conv output dims are not integral for input {tuple(input_shape)}, "
            f"kernel {tuple(kernel_shape)}, stride {stride}, padding {padding}"
        )
    return (o, num_h // stride + 1, num_w // stride + 1)


def maxpool_output_shape(input_shape, window: int, stride: int):
    c, h, w = input_shape
    if window < 1 or stride < 1:
        raise LayerConfigError(
            f"maxpool window/stride must be positive, got window={window} stride={stride}"
        )
    num_h = h - window
    num_w = w - window
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise LayerConfigError(
            f"maxpool output dims are not integral for input {tuple(input_shape)}, "
            f"window {window}, stride {stride}"
        )
    return (c, num_h // stride + 1, num_w // stride + 1)


# ---------------------------------------------------------------------------
# forward kernels
# ---------------------------------------------------------------------------

def dense_forward(input: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """out[k] = sum_j input[j] * weights[j, k] + bias[k]."""
    x = _as_array(input)
    w = _as_array(weights)
    b = _as_array(bias)
    if x.ndim != 1 or w.ndim != 2 or x.shape[0] != w.shape[0]:
        raise ShapeMismatchError(
            f"dense input shape {x.shape} does not match weight shape {w.shape}"
        )
    if b.shape != (w.shape[1],):
        raise ShapeMismatchError(
            f"dense bias shape {b.shape} does not match weight shape {w.shape}"
        )
    out = x.astype(np.float64) @ w.astype(np.float64) + b.astype(np.float64)
    return Tensor(out.astype(np.float32))


def im2col(x_padded: np.ndarray, kh: int, kw: int, stride: int,
           out_h: int, out_w: int) -> np.ndarray:
    """Patch matrix [out_h*out_w, C*kh*kw] from an already padded CHW array."""
    c = x_padded.shape[0]
    cols = np.empty((c, kh, kw, out_h, out_w), dtype=x_padded.dtype)
    for i in range(kh):
        i_max = i + stride * out_h
        for j in range(kw):
            j_max = j + stride * out_w
            cols[:, i, j, :, :] = x_padded[:, i:i_max:stride, j:j_max:stride]
    return cols.reshape(c * kh * kw, out_h * out_w).T


def col2im(patches: np.ndarray, padded_shape, kh: int, kw: int, stride: int,
           out_h: int, out_w: int) -> np.ndarray:
    """Scatter-add patch rows back into a padded CHW array (inverse of im2col)."""
    c, ph, pw = padded_shape
    cols = patches.T.reshape(c, kh, kw, out_h, out_w)
    img = np.zeros(padded_shape, dtype=patches.dtype)
    for i in range(kh):
        i_max = i + stride * out_h
        for j in range(kw):
            j_max = j + stride * out_w
            img[:, i:i_max:stride, j:j_max:stride] += cols[:, i, j, :, :]
    return img


def pad_chw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(input: Tensor, kernels: Tensor, bias: Tensor,
                   stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding; kernels are OIHW."""
    x = _as_array(input)
    k = _as_array(kernels)
    b = _as_array(bias)
    if x.ndim != 3 or k.ndim != 4:
        raise ShapeMismatchError(
            f"conv expects CHW input and OIHW kernels, got {x.shape} and {k.shape}"
        )
    o, _, kh, kw = k.shape
    if b.shape != (o,):
        raise ShapeMismatchError(
            f"conv bias shape {b.shape} does not match kernel shape {k.shape}"
        )
    _, out_h, out_w = conv2d_output_shape(x.shape, k.shape, stride, padding)
    patches = im2col(pad_chw(x, padding).astype(np.float64), kh, kw, stride, out_h, out_w)
    w2 = k.reshape(o, -1).T.astype(np.float64)
    out = patches @ w2 + b.astype(np.float64)          # [out_h*out_w, O]
    out = out.T.reshape(o, out_h, out_w)
    return Tensor(out.astype(np.float32))


def relu(input: Tensor) -> Tensor:
    return Tensor(np.maximum(_as_array(input), 0.0))


def sigmoid(input: Tensor) -> Tensor:
    x = _as_array(input).astype(np.float64)
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-x))
    return Tensor(out.astype(np.float32))


def maxpool2d(input: Tensor, window: int, stride: int) -> tuple[Tensor, np.ndarray]:
    """Per-window maximum over a CHW tensor.

    Returns the pooled tensor and an int64 array of the same pooled shape
    holding, per window, the flat (h*W + w) index of the winning input
    position within its channel. Ties break toward the lowest flat index,
    which keeps relevance redistribution deterministic.
    """
    x = _as_array(input)
    if x.ndim != 3:
        raise ShapeMismatchError(f"maxpool expects a CHW tensor, got shape {x.shape}")
    c, h, w = x.shape
    _, out_h, out_w = maxpool_output_shape(x.shape, window, stride)
    out = np.empty((c, out_h, out_w), dtype=np.float32)
    argmax = np.empty((c, out_h, out_w), dtype=np.int64)
    for i in range(out_h):
        for j in range(out_w):
            win = x[:, i * stride:i * stride + window, j * stride:j * stride + window]
            flat = win.reshape(c, -1)
            local = flat.argmax(axis=1)                # first max = lowest flat index
            out[:, i, j] = flat[np.arange(c), local]
            rows = i * stride + local // window
            cols = j * stride + local % window
            argmax[:, i, j] = rows * w + cols
    return Tensor(out), argmax


def global_avgpool(input: Tensor) -> Tensor:
    """Per-channel mean over a CHW tensor."""
    x = _as_array(input)
    if x.ndim != 3:
        raise ShapeMismatchError(f"global_avgpool expects a CHW tensor, got shape {x.shape}")
    return Tensor(x.astype(np.float64).mean(axis=(1, 2)).astype(np.float32))
