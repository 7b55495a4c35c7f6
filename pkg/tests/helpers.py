"""Shared test utilities: independent oracles and model builders.

The oracles recompute the engine's math along a structurally different
path (explicit contribution matrices, plain per-unit loops), so
agreement with them is a genuine check rather than a tautology.
"""

from __future__ import annotations

import numpy as np

from auverify.model import LayerSpec, ModelSpec, forward, validate_model
from auverify.tensor import Tensor

STAB = 1e-9


def sstab(z, eps=STAB):
    """Sign-matched stabilizer, sign(0) counted positive (engine convention)."""
    z = np.asarray(z, dtype=np.float64)
    return z + eps * np.where(z >= 0.0, 1.0, -1.0)


# ---------------------------------------------------------------------------
# linear-rule oracle: explicit contribution matrix, one upper unit at a time
# ---------------------------------------------------------------------------

def linear_lrp_oracle(x, w, bias, r, rule: str = "basic", *, epsilon=0.0,
                      alpha=1.0, beta=0.0, low=0.0, high=1.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    n, m = w.shape
    b = np.zeros(m) if bias is None else np.asarray(bias, dtype=np.float64)
    contrib = x[:, None] * w
    out = np.zeros(n)
    for k in range(m):
        zk = contrib[:, k]
        if rule in ("basic", "epsilon"):
            eps = STAB + (epsilon if rule == "epsilon" else 0.0)
            out += zk * (r[k] / sstab(zk.sum() + b[k], eps))
        elif rule == "alphabeta":
            zp, zn = np.clip(zk, 0.0, None), np.clip(zk, None, 0.0)
            dp = zp.sum() + max(b[k], 0.0)
            dn = zn.sum() + min(b[k], 0.0)
            out += alpha * zp * (r[k] / sstab(dp)) - beta * zn * (r[k] / sstab(dn))
        elif rule == "zb":
            zb = zk - low * np.clip(w[:, k], 0.0, None) - high * np.clip(w[:, k], None, 0.0)
            out += zb * (r[k] / sstab(zb.sum()))
        elif rule == "flat":
            out += np.full(n, r[k] / n)
        else:
            raise ValueError(rule)
    return out


# ---------------------------------------------------------------------------
# convolution unrolled to an explicit dense matrix over the unpadded input
# ---------------------------------------------------------------------------

def conv_unrolled_matrix(input_shape, kernels, stride: int, padding: int):
    """Dense (C*H*W, O*H'*W') matrix whose matmul equals the convolution.

    Taps that land in zero padding are dropped: they multiply zeros on
    the forward pass and receive no relevance on the backward one.
    """
    c, h, w = input_shape
    o, kc, kh, kw = kernels.shape
    assert kc == c
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    big = np.zeros((c * h * w, o * out_h * out_w), dtype=np.float64)
    for oc in range(o):
        for oy in range(out_h):
            for ox in range(out_w):
                col = (oc * out_h + oy) * out_w + ox
                for ic in range(c):
                    for ky in range(kh):
                        for kx in range(kw):
                            iy = oy * stride + ky - padding
                            ix = ox * stride + kx - padding
                            if 0 <= iy < h and 0 <= ix < w:
                                big[(ic * h + iy) * w + ix, col] = kernels[oc, ic, ky, kx]
    return big, (out_h, out_w)


def conv_lrp_oracle(x, kernels, bias, stride, padding, r_upper, rule="basic",
                    **params) -> np.ndarray:
    """lrp_conv reference: unroll to a dense layer, apply the linear oracle."""
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    r = np.asarray(r_upper, dtype=np.float64)
    o = kernels.shape[0]
    if rule == "flat":
        return conv_flat_oracle(x.shape, kernels.shape, stride, padding, r)
    big, (out_h, out_w) = conv_unrolled_matrix(x.shape, kernels, stride, padding)
    b = None
    if bias is not None:
        b = np.repeat(np.asarray(bias, dtype=np.float64), out_h * out_w)
    low = linear_lrp_oracle(x.ravel(), big, b, r.ravel(), rule, **params)
    return low.reshape(x.shape)


def conv_flat_oracle(input_shape, kernel_shape, stride, padding, r) -> np.ndarray:
    """Flat rule: each output unit spreads evenly over its C*kh*kw taps;
    shares landing in padding are dropped."""
    c, h, w = input_shape
    o, kc, kh, kw = kernel_shape
    out = np.zeros((c, h, w), dtype=np.float64)
    n_taps = kc * kh * kw
    _, out_h, out_w = r.shape
    for oc in range(o):
        for oy in range(out_h):
            for ox in range(out_w):
                share = r[oc, oy, ox] / n_taps
                for ic in range(kc):
                    for ky in range(kh):
                        for kx in range(kw):
                            iy = oy * stride + ky - padding
                            ix = ox * stride + kx - padding
                            if 0 <= iy < h and 0 <= ix < w:
                                out[ic, iy, ix] += share
    return out


# ---------------------------------------------------------------------------
# mu oracle: naive double loop over pixels
# ---------------------------------------------------------------------------

def mu_double_loop(pixel_values, box):
    """(mu or None, inside, total) summing positive pixels one by one."""
    grid = np.asarray(pixel_values, dtype=np.float64)
    h, w = grid.shape
    inside = total = 0.0
    for y in range(h):
        for x in range(w):
            v = float(grid[y, x])
            if v > 0.0:
                total += v
                if box.x_min <= x <= box.x_max and box.y_min <= y <= box.y_max:
                    inside += v
    return (inside / total if total > 0.0 else None), inside, total


# ---------------------------------------------------------------------------
# model builders
# ---------------------------------------------------------------------------

def wt(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float32))


def dense_layer(weights, bias) -> LayerSpec:
    return LayerSpec(kind="dense", weights=wt(weights), bias=wt(bias))


def conv_layer(kernels, bias, stride=1, padding=0) -> LayerSpec:
    return LayerSpec(kind="conv2d", weights=wt(kernels), bias=wt(bias),
                     stride=stride, padding=padding)


def make_model(input_shape, layers, labels, name="test-model",
               golden=None) -> ModelSpec:
    model = ModelSpec(name=name, input_shape=tuple(input_shape), layers=layers,
                      output_labels=list(labels), golden=golden)
    validate_model(model)
    return model


def dense_sigmoid_model(weights, bias, labels) -> ModelSpec:
    """Smallest legal model: flatten, one dense layer, sigmoid head."""
    w = np.asarray(weights, dtype=np.float32)
    return make_model((1, 1, w.shape[0]),
                      [LayerSpec(kind="flatten"), dense_layer(w, bias),
                       LayerSpec(kind="sigmoid")], labels)


# ---------------------------------------------------------------------------
# random zero-bias models for conservation testing
# ---------------------------------------------------------------------------

def _rand_weights(rng, shape, positive_bias=0.8):
    mag = rng.uniform(0.2, 1.0, size=shape)
    sign = np.where(rng.random(shape) < positive_bias, 1.0, -1.0)
    return (mag * sign).astype(np.float32)


def random_zero_bias_model(rng, n_labels=2, max_attempts=300):
    """Small random model (2-6 weighted/pool/residual layers, zero biases)
    with a matching in-range input, resampled until every division the
    backward pass performs is comfortably far from zero.

    Returns (model, input_tensor). Determinism: the rng drives everything.
    """
    floors = {"conv2d": 1e-2, "dense": 1e-2, "global_avgpool": 1e-3,
              "residual_add": 1e-2}
    for _ in range(max_attempts):
        c = int(rng.integers(1, 4))
        size = int(rng.integers(4, 9))
        budget = int(rng.integers(2, 7))
        layers: list[LayerSpec] = []
        cur_c, cur_h = c, size
        heavy = 0
        # spatial stage: conv first (residuals need an earlier layer to tap)
        while heavy < budget - 1 and cur_h >= 2:
            choice = rng.random()
            if not layers or choice < 0.45:
                out_c = int(rng.integers(1, 4))
                k = int(rng.integers(1, min(3, cur_h) + 1))
                pad = int(rng.integers(0, 2)) if k > 1 else 0
                layers.append(conv_layer(
                    _rand_weights(rng, (out_c, cur_c, k, k)), np.zeros(out_c),
                    stride=1, padding=pad))
                cur_c, cur_h = out_c, cur_h + 2 * pad - k + 1
                heavy += 1
            elif choice < 0.65 and heavy < budget - 2:
                # residual block: shape-preserving conv + add back
                src = len(layers) - 1
                k = 3 if cur_h >= 3 else 1
                layers.append(conv_layer(
                    _rand_weights(rng, (cur_c, cur_c, k, k)), np.zeros(cur_c),
                    padding=(k - 1) // 2))
                layers.append(LayerSpec(kind="residual_add", skip_source=src))
                heavy += 2
            elif choice < 0.8 and cur_h >= 3:
                layers.append(LayerSpec(kind="maxpool", window=2,
                                        stride=2 if cur_h % 2 == 0 else 1))
                cur_h = (cur_h - 2) // layers[-1].stride + 1
                heavy += 1
            else:
                layers.append(LayerSpec(kind="relu"))
            if heavy >= budget - 1:
                break
        if rng.random() < 0.5:
            layers.append(LayerSpec(kind="global_avgpool"))
            flat = cur_c
        else:
            layers.append(LayerSpec(kind="flatten"))
            flat = cur_c * cur_h * cur_h
        layers.append(dense_layer(_rand_weights(rng, (flat, n_labels)),
                                  np.zeros(n_labels)))
        layers.append(LayerSpec(kind="sigmoid"))
        model = ModelSpec(name="random-conservation",
                          input_shape=(c, size, size), layers=layers,
                          output_labels=[f"AU{i + 1:02d}" for i in range(n_labels)])
        try:
            validate_model(model)
        except Exception:
            continue
        image = Tensor(rng.uniform(0.05, 1.0, size=(c, size, size)).astype(np.float32))
        trace = forward(model, image)
        ok = all(
            float(np.min(np.abs(np.asarray(act.output)))) >= floors[spec.kind]
            for spec, act in zip(model.layers, trace.layers)
            if spec.kind in floors)
        if ok and float(np.min(np.abs(np.asarray(trace.logits)))) >= 0.1:
            return model, image
    raise RuntimeError("could not sample a non-degenerate model")
