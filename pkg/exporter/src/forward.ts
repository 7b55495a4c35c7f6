/**
 * Reference forward pass in the source framework's conventions:
 * channels-last (HWC) activations, HWIO conv kernels, (in, out) dense
 * weights, dense inputs flattened in HWC order.
 *
 * The exporter runs this on the original checkpoint tensors to produce
 * the golden probabilities embedded in the exported file. The
 * verification engine then recomputes the same probabilities from the
 * converted (CHW/OIHW) tensors with its own independent implementation,
 * so any conversion or layout mistake breaks the golden handshake.
 *
 * All accumulation happens in float64.
 */

export interface HwcTensor {
  h: number;
  w: number;
  c: number;
  /** data[(y * w + x) * c + ch] */
  data: Float64Array;
}

export type SourceLayer =
  | {
      kind: "conv2d";
      kh: number;
      kw: number;
      ci: number;
      co: number;
      stride: number;
      padding: number;
      /** HWIO: kernel[((ky * kw + kx) * ci + i) * co + o] */
      kernel: Float32Array;
      bias: Float32Array;
    }
  | { kind: "relu" }
  | { kind: "sigmoid" }
  | { kind: "maxpool"; window: number; stride: number }
  | { kind: "global_avgpool" }
  | { kind: "flatten" }
  | {
      kind: "dense";
      nIn: number;
      nOut: number;
      /** (in, out): kernel[i * nOut + o] */
      kernel: Float32Array;
      bias: Float32Array;
    }
  | {
      kind: "batchnorm";
      gamma: Float32Array;
      beta: Float32Array;
      mean: Float32Array;
      variance: Float32Array;
      epsilon: number;
    };

export function hwc(h: number, w: number, c: number): HwcTensor {
  return { h, w, c, data: new Float64Array(h * w * c) };
}

export function conv2dHwc(
  x: HwcTensor,
  layer: Extract<SourceLayer, { kind: "conv2d" }>,
): HwcTensor {
  const { kh, kw, ci, co, stride, padding } = layer;
  const oh = (x.h + 2 * padding - kh) / stride + 1;
  const ow = (x.w + 2 * padding - kw) / stride + 1;
  const out = hwc(oh, ow, co);
  for (let oy = 0; oy < oh; oy++) {
    for (let ox = 0; ox < ow; ox++) {
      for (let o = 0; o < co; o++) {
        let acc = layer.bias[o];
        for (let ky = 0; ky < kh; ky++) {
          const y = oy * stride - padding + ky;
          if (y < 0 || y >= x.h) continue;
          for (let kx = 0; kx < kw; kx++) {
            const xx = ox * stride - padding + kx;
            if (xx < 0 || xx >= x.w) continue;
            const xBase = (y * x.w + xx) * ci;
            const kBase = ((ky * kw + kx) * ci) * co + o;
            for (let i = 0; i < ci; i++) {
              acc += x.data[xBase + i] * layer.kernel[kBase + i * co];
            }
          }
        }
        out.data[(oy * ow + ox) * co + o] = acc;
      }
    }
  }
  return out;
}

export function maxpoolHwc(
  x: HwcTensor,
  window: number,
  stride: number,
): HwcTensor {
  const oh = (x.h - window) / stride + 1;
  const ow = (x.w - window) / stride + 1;
  const out = hwc(oh, ow, x.c);
  for (let oy = 0; oy < oh; oy++) {
    for (let ox = 0; ox < ow; ox++) {
      for (let ch = 0; ch < x.c; ch++) {
        let best = -Infinity;
        for (let ky = 0; ky < window; ky++) {
          for (let kx = 0; kx < window; kx++) {
            const v =
              x.data[((oy * stride + ky) * x.w + (ox * stride + kx)) * x.c + ch];
            if (v > best) best = v;
          }
        }
        out.data[(oy * ow + ox) * x.c + ch] = best;
      }
    }
  }
  return out;
}

export function globalAvgPoolHwc(x: HwcTensor): Float64Array {
  const out = new Float64Array(x.c);
  for (let i = 0; i < x.h * x.w; i++) {
    for (let ch = 0; ch < x.c; ch++) {
      out[ch] += x.data[i * x.c + ch];
    }
  }
  const area = x.h * x.w;
  for (let ch = 0; ch < x.c; ch++) {
    out[ch] /= area;
  }
  return out;
}

export function batchnormHwc(
  x: HwcTensor,
  layer: Extract<SourceLayer, { kind: "batchnorm" }>,
): HwcTensor {
  const out = hwc(x.h, x.w, x.c);
  for (let i = 0; i < x.h * x.w; i++) {
    for (let ch = 0; ch < x.c; ch++) {
      const v = x.data[i * x.c + ch];
      out.data[i * x.c + ch] =
        ((v - layer.mean[ch]) / Math.sqrt(layer.variance[ch] + layer.epsilon)) *
          layer.gamma[ch] +
        layer.beta[ch];
    }
  }
  return out;
}

export function batchnormVec(
  x: Float64Array,
  layer: Extract<SourceLayer, { kind: "batchnorm" }>,
): Float64Array {
  const out = new Float64Array(x.length);
  for (let i = 0; i < x.length; i++) {
    out[i] =
      ((x[i] - layer.mean[i]) / Math.sqrt(layer.variance[i] + layer.epsilon)) *
        layer.gamma[i] +
      layer.beta[i];
  }
  return out;
}

export function dense(
  x: Float64Array,
  layer: Extract<SourceLayer, { kind: "dense" }>,
): Float64Array {
  const out = new Float64Array(layer.nOut);
  for (let o = 0; o < layer.nOut; o++) {
    let acc: number = layer.bias[o];
    for (let i = 0; i < layer.nIn; i++) {
      acc += x[i] * layer.kernel[i * layer.nOut + o];
    }
    out[o] = acc;
  }
  return out;
}

export function sigmoidVec(x: Float64Array): Float64Array {
  return x.map((v) => 1 / (1 + Math.exp(-v)));
}

function reluInPlace(data: Float64Array): void {
  for (let i = 0; i < data.length; i++) {
    if (data[i] < 0) data[i] = 0;
  }
}

/**
 * Run the whole stack on a channels-last input and return the final
 * per-label probabilities. The layer list must already be validated
 * (shapes chained, final layer sigmoid).
 */
export function runSourceForward(
  layers: SourceLayer[],
  input: HwcTensor,
): number[] {
  let spatial: HwcTensor | null = input;
  let vector: Float64Array | null = null;
  for (const layer of layers) {
    switch (layer.kind) {
      case "conv2d":
        spatial = conv2dHwc(require3d(spatial, layer.kind), layer);
        break;
      case "maxpool":
        spatial = maxpoolHwc(require3d(spatial, layer.kind), layer.window, layer.stride);
        break;
      case "global_avgpool":
        vector = globalAvgPoolHwc(require3d(spatial, layer.kind));
        spatial = null;
        break;
      case "flatten":
        if (spatial !== null) {
          vector = spatial.data;
          spatial = null;
        }
        break;
      case "dense":
        vector = dense(require1d(vector, layer.kind), layer);
        break;
      case "relu":
        if (spatial !== null) reluInPlace(spatial.data);
        else reluInPlace(require1d(vector, layer.kind));
        break;
      case "sigmoid":
        if (spatial !== null) {
          spatial = { ...spatial, data: sigmoidVec(spatial.data) };
        } else {
          vector = sigmoidVec(require1d(vector, layer.kind));
        }
        break;
      case "batchnorm":
        if (spatial !== null) spatial = batchnormHwc(spatial, layer);
        else vector = batchnormVec(require1d(vector, layer.kind), layer);
        break;
    }
  }
  return [...require1d(vector, "output")];
}

function require3d(x: HwcTensor | null, kind: string): HwcTensor {
  if (x === null) {
    throw new Error(`${kind} needs a spatial input but the stack is flat`);
  }
  return x;
}

function require1d(x: Float64Array | null, kind: string): Float64Array {
  if (x === null) {
    throw new Error(`${kind} needs a flat input but the stack is spatial`);
  }
  return x;
}
