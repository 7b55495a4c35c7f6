/**
 * Checkpoint -> portable model conversion.
 *
 * The caller supplies two things: a checkpoint (named tensors in the
 * source framework's channels-last conventions) and an architecture
 * descriptor, a JSON document stating the layer sequence and which
 * checkpoint tensor feeds each layer. The exporter deliberately does not
 * introspect the checkpoint's own graph: checkpoint topology formats
 * vary, an explicit mapping is reviewable and stable.
 *
 * Descriptor shape:
 *
 *   {
 *     "name": "...",
 *     "input_shape": [H, W, C],            // channels-last, like the source
 *     "output_labels": ["AU04", ...],
 *     "layers": [
 *       {"kind": "conv2d", "kernel": "conv1/kernel", "bias": "conv1/bias",
 *        "stride": 1, "padding": "same"},
 *       {"kind": "relu"},
 *       {"kind": "maxpool", "window": 2, "stride": 2},
 *       {"kind": "flatten"},
 *       {"kind": "dense", "kernel": "head/kernel", "bias": "head/bias"},
 *       {"kind": "sigmoid"}
 *     ]
 *   }
 *
 * Conversions performed:
 *   - conv kernels HWIO -> OIHW;
 *   - dense weights stay (in, out), but a dense fed by flattening a
 *     spatial map gets its input rows re-ordered from HWC to CHW
 *     flattening order;
 *   - the golden input is generated channels-last, run through the
 *     source-semantics forward pass, and stored channels-first.
 *
 * `padding: "same"` is translated only where it maps exactly onto the
 * symmetric integer padding of the portable format (stride 1, odd square
 * kernel); everything else must state integer padding explicitly.
 */

import { Checkpoint, CheckpointTensor } from "./checkpoint.js";
import {
  encodeTensor,
  FORMAT_VERSION,
  LayerJson,
  ModelJson,
  TensorJson,
} from "./format.js";
import { HwcTensor, runSourceForward, SourceLayer } from "./forward.js";
import { mulberry32, uniformArray } from "./rng.js";

export class ExportError extends Error {}

export interface ArchLayerJson {
  kind: string;
  kernel?: string;
  bias?: string;
  gamma?: string;
  beta?: string;
  mean?: string;
  variance?: string;
  stride?: number;
  padding?: number | string;
  window?: number;
  epsilon?: number;
}

export interface ArchJson {
  name: string;
  /** channels-last [H, W, C] */
  input_shape: number[];
  output_labels: string[];
  layers: ArchLayerJson[];
}

export interface ExportOptions {
  /** Zero every additive term (conv/dense bias, batchnorm beta and
   *  running mean) so relevance conservation holds strictly. */
  zeroBias?: boolean;
  /** Seed for the embedded golden input (default 0). */
  goldenSeed?: number;
}

export const SUPPORTED_KINDS = new Set([
  "conv2d",
  "relu",
  "sigmoid",
  "maxpool",
  "global_avgpool",
  "flatten",
  "dense",
  "batchnorm",
]);

const DEFAULT_BN_EPSILON = 1e-3;

export function readArchJson(doc: unknown, context: string): ArchJson {
  if (typeof doc !== "object" || doc === null) {
    throw new ExportError(`${context}: descriptor must be a JSON object`);
  }
  const d = doc as Record<string, unknown>;
  if (typeof d.name !== "string" || d.name.length === 0) {
    throw new ExportError(`${context}: missing model "name"`);
  }
  if (
    !Array.isArray(d.input_shape) ||
    d.input_shape.length !== 3 ||
    !d.input_shape.every((v) => Number.isInteger(v) && (v as number) > 0)
  ) {
    throw new ExportError(
      `${context}: "input_shape" must be three positive integers [H, W, C]`,
    );
  }
  if (
    !Array.isArray(d.output_labels) ||
    d.output_labels.length === 0 ||
    !d.output_labels.every((v) => typeof v === "string")
  ) {
    throw new ExportError(
      `${context}: "output_labels" must be a non-empty string array`,
    );
  }
  if (!Array.isArray(d.layers) || d.layers.length === 0) {
    throw new ExportError(`${context}: "layers" must be a non-empty array`);
  }
  for (const [i, layer] of d.layers.entries()) {
    if (
      typeof layer !== "object" ||
      layer === null ||
      typeof (layer as Record<string, unknown>).kind !== "string"
    ) {
      throw new ExportError(`${context}: layer ${i} is missing a "kind"`);
    }
  }
  return d as unknown as ArchJson;
}

function positiveInt(
  value: number | undefined,
  fallback: number,
  where: string,
  field: string,
): number {
  const v = value ?? fallback;
  if (!Number.isInteger(v) || v < 1) {
    throw new ExportError(`${where}: ${field} must be a positive integer, got ${v}`);
  }
  return v;
}

function resolvePadding(
  padding: number | string | undefined,
  kh: number,
  kw: number,
  stride: number,
  where: string,
): number {
  if (padding === undefined || padding === "valid") {
    return 0;
  }
  if (padding === "same") {
    if (stride !== 1 || kh !== kw || kh % 2 === 0) {
      throw new ExportError(
        `${where}: "same" padding only maps onto the portable format's ` +
          `symmetric integer padding for stride-1 odd square kernels ` +
          `(got ${kh}x${kw} stride ${stride}); state integer padding explicitly`,
      );
    }
    return (kh - 1) / 2;
  }
  if (typeof padding === "number" && Number.isInteger(padding) && padding >= 0) {
    return padding;
  }
  throw new ExportError(`${where}: invalid padding ${JSON.stringify(padding)}`);
}

function convOutput(size: number, k: number, stride: number, padding: number, where: string): number {
  const span = size + 2 * padding - k;
  if (span < 0) {
    throw new ExportError(
      `${where}: kernel ${k} does not fit input extent ${size} with padding ${padding}`,
    );
  }
  if (span % stride !== 0) {
    throw new ExportError(
      `${where}: output extent is not integral ` +
        `((${size} + 2*${padding} - ${k}) is not a multiple of stride ${stride})`,
    );
  }
  return span / stride + 1;
}

function fetchTensor(
  checkpoint: Checkpoint,
  name: string | undefined,
  where: string,
  role: string,
): CheckpointTensor {
  if (name === undefined) {
    throw new ExportError(`${where}: descriptor does not name a ${role} tensor`);
  }
  if (!checkpoint.has(name)) {
    throw new ExportError(`${where}: checkpoint has no tensor named "${name}"`);
  }
  return checkpoint.get(name);
}

function expectShape(
  t: CheckpointTensor,
  shape: number[],
  where: string,
  role: string,
): void {
  if (t.shape.length !== shape.length || t.shape.some((v, i) => v !== shape[i])) {
    throw new ExportError(
      `${where}: ${role} tensor "${t.name}" has shape [${t.shape}], expected [${shape}]`,
    );
  }
}

/** kernel[ky][kx][i][o] -> kernel[o][i][ky][kx] */
export function hwioToOihw(
  kh: number,
  kw: number,
  ci: number,
  co: number,
  src: Float32Array,
): Float32Array {
  const dst = new Float32Array(src.length);
  for (let ky = 0; ky < kh; ky++) {
    for (let kx = 0; kx < kw; kx++) {
      for (let i = 0; i < ci; i++) {
        const srcBase = ((ky * kw + kx) * ci + i) * co;
        for (let o = 0; o < co; o++) {
          dst[((o * ci + i) * kh + ky) * kw + kx] = src[srcBase + o];
        }
      }
    }
  }
  return dst;
}

/**
 * Re-order dense input rows from HWC flattening (source) to CHW
 * flattening (portable format): source row (y*W + x)*C + ch feeds the
 * same unit as portable row ch*(H*W) + y*W + x.
 */
export function permuteDenseRows(
  h: number,
  w: number,
  c: number,
  nOut: number,
  src: Float32Array,
): Float32Array {
  const dst = new Float32Array(src.length);
  for (let ch = 0; ch < c; ch++) {
    for (let y = 0; y < h; y++) {
      for (let x = 0; x < w; x++) {
        const srcRow = (y * w + x) * c + ch;
        const dstRow = ch * (h * w) + y * w + x;
        for (let o = 0; o < nOut; o++) {
          dst[dstRow * nOut + o] = src[srcRow * nOut + o];
        }
      }
    }
  }
  return dst;
}

/** values[(y*w + x)*c + ch] -> values[(ch*h + y)*w + x] */
export function hwcToChw(
  h: number,
  w: number,
  c: number,
  src: Float32Array,
): Float32Array {
  const dst = new Float32Array(src.length);
  for (let ch = 0; ch < c; ch++) {
    for (let y = 0; y < h; y++) {
      for (let x = 0; x < w; x++) {
        dst[(ch * h + y) * w + x] = src[(y * w + x) * c + ch];
      }
    }
  }
  return dst;
}

function f32Tensor(shape: number[], data: Float32Array): TensorJson {
  return encodeTensor(shape, data);
}

interface ChainState {
  spatial: boolean;
  h: number;
  w: number;
  c: number;
  flat: number;
  /** set after flattening a spatial map, consumed by the next dense */
  pendingPermute: { h: number; w: number; c: number } | null;
}

/** Convert named checkpoint tensors into a portable model document. */
export function exportModel(
  checkpoint: Checkpoint,
  arch: ArchJson,
  opts: ExportOptions = {},
): ModelJson {
  const zero = opts.zeroBias === true;
  const labels = arch.output_labels;
  if (new Set(labels).size !== labels.length) {
    throw new ExportError(`output_labels contain duplicates: ${labels.join(", ")}`);
  }
  const [h0, w0, c0] = arch.input_shape;
  const state: ChainState = {
    spatial: true,
    h: h0,
    w: w0,
    c: c0,
    flat: -1,
    pendingPermute: null,
  };
  const source: SourceLayer[] = [];
  const portable: LayerJson[] = [];
  let prevKind = "input";

  const zeroed = (t: Float32Array): Float32Array =>
    zero ? new Float32Array(t.length) : t;

  for (const [index, spec] of arch.layers.entries()) {
    const where = `layer ${index} (${spec.kind})`;
    if (!SUPPORTED_KINDS.has(spec.kind)) {
      throw new ExportError(
        `${where} is not supported by this exporter; supported kinds are ` +
          [...SUPPORTED_KINDS].sort().join(", "),
      );
    }
    switch (spec.kind) {
      case "conv2d": {
        if (!state.spatial) {
          throw new ExportError(`${where}: needs a spatial input but the chain is already flat`);
        }
        const kernel = fetchTensor(checkpoint, spec.kernel, where, "kernel");
        if (kernel.shape.length !== 4) {
          throw new ExportError(
            `${where}: kernel "${kernel.name}" must be 4-d HWIO, got shape [${kernel.shape}]`,
          );
        }
        const [kh, kw, ci, co] = kernel.shape;
        if (ci !== state.c) {
          throw new ExportError(
            `${where}: kernel "${kernel.name}" expects ${ci} input channels ` +
              `but the chain provides ${state.c}`,
          );
        }
        const stride = positiveInt(spec.stride, 1, where, "stride");
        const padding = resolvePadding(spec.padding, kh, kw, stride, where);
        const oh = convOutput(state.h, kh, stride, padding, where);
        const ow = convOutput(state.w, kw, stride, padding, where);
        let bias: Float32Array;
        if (spec.bias !== undefined) {
          const t = fetchTensor(checkpoint, spec.bias, where, "bias");
          expectShape(t, [co], where, "bias");
          bias = zeroed(t.data);
        } else {
          bias = new Float32Array(co);
        }
        source.push({
          kind: "conv2d",
          kh,
          kw,
          ci,
          co,
          stride,
          padding,
          kernel: kernel.data,
          bias,
        });
        portable.push({
          kind: "conv2d",
          stride,
          padding,
          weights: f32Tensor([co, ci, kh, kw], hwioToOihw(kh, kw, ci, co, kernel.data)),
          bias: f32Tensor([co], bias),
        });
        state.h = oh;
        state.w = ow;
        state.c = co;
        break;
      }
      case "maxpool": {
        if (!state.spatial) {
          throw new ExportError(`${where}: needs a spatial input but the chain is already flat`);
        }
        const window = positiveInt(spec.window, 0, where, "window");
        const stride = positiveInt(spec.stride, window, where, "stride");
        for (const [extent, axis] of [
          [state.h, "height"],
          [state.w, "width"],
        ] as const) {
          if (extent < window || (extent - window) % stride !== 0) {
            throw new ExportError(
              `${where}: output ${axis} is not integral ` +
                `(extent ${extent}, window ${window}, stride ${stride})`,
            );
          }
        }
        source.push({ kind: "maxpool", window, stride });
        portable.push({ kind: "maxpool", window, stride });
        state.h = (state.h - window) / stride + 1;
        state.w = (state.w - window) / stride + 1;
        break;
      }
      case "global_avgpool": {
        if (!state.spatial) {
          throw new ExportError(`${where}: needs a spatial input but the chain is already flat`);
        }
        source.push({ kind: "global_avgpool" });
        portable.push({ kind: "global_avgpool" });
        state.spatial = false;
        state.flat = state.c;
        state.pendingPermute = null;
        break;
      }
      case "flatten": {
        if (state.spatial) {
          state.flat = state.h * state.w * state.c;
          state.pendingPermute =
            state.h * state.w > 1
              ? { h: state.h, w: state.w, c: state.c }
              : null;
          state.spatial = false;
        }
        source.push({ kind: "flatten" });
        portable.push({ kind: "flatten" });
        break;
      }
      case "dense": {
        if (state.spatial) {
          throw new ExportError(
            `${where}: needs a flat input; insert "flatten" or "global_avgpool" first`,
          );
        }
        const kernel = fetchTensor(checkpoint, spec.kernel, where, "kernel");
        if (kernel.shape.length !== 2) {
          throw new ExportError(
            `${where}: kernel "${kernel.name}" must be 2-d (in, out), got shape [${kernel.shape}]`,
          );
        }
        const [nIn, nOut] = kernel.shape;
        if (nIn !== state.flat) {
          throw new ExportError(
            `${where}: kernel "${kernel.name}" expects ${nIn} inputs ` +
              `but the chain provides ${state.flat}`,
          );
        }
        let bias: Float32Array;
        if (spec.bias !== undefined) {
          const t = fetchTensor(checkpoint, spec.bias, where, "bias");
          expectShape(t, [nOut], where, "bias");
          bias = zeroed(t.data);
        } else {
          bias = new Float32Array(nOut);
        }
        source.push({ kind: "dense", nIn, nOut, kernel: kernel.data, bias });
        const converted = state.pendingPermute
          ? permuteDenseRows(
              state.pendingPermute.h,
              state.pendingPermute.w,
              state.pendingPermute.c,
              nOut,
              kernel.data,
            )
          : kernel.data;
        state.pendingPermute = null;
        portable.push({
          kind: "dense",
          weights: f32Tensor([nIn, nOut], converted),
          bias: f32Tensor([nOut], bias),
        });
        state.flat = nOut;
        break;
      }
      case "batchnorm": {
        if (prevKind !== "conv2d" && prevKind !== "dense") {
          throw new ExportError(
            `${where}: the portable format only allows batchnorm directly ` +
              `after conv2d or dense, found it after ${prevKind}`,
          );
        }
        const n = state.spatial ? state.c : state.flat;
        const mean = fetchTensor(checkpoint, spec.mean, where, "mean");
        const variance = fetchTensor(checkpoint, spec.variance, where, "variance");
        expectShape(mean, [n], where, "mean");
        expectShape(variance, [n], where, "variance");
        let gamma: Float32Array;
        if (spec.gamma !== undefined) {
          const t = fetchTensor(checkpoint, spec.gamma, where, "gamma");
          expectShape(t, [n], where, "gamma");
          gamma = t.data;
        } else {
          gamma = new Float32Array(n).fill(1);
        }
        let beta: Float32Array;
        if (spec.beta !== undefined) {
          const t = fetchTensor(checkpoint, spec.beta, where, "beta");
          expectShape(t, [n], where, "beta");
          beta = zeroed(t.data);
        } else {
          beta = new Float32Array(n);
        }
        const epsilon = spec.epsilon ?? DEFAULT_BN_EPSILON;
        if (!(typeof epsilon === "number" && epsilon > 0)) {
          throw new ExportError(`${where}: epsilon must be a positive number, got ${epsilon}`);
        }
        const meanOut = zeroed(mean.data);
        source.push({
          kind: "batchnorm",
          gamma,
          beta,
          mean: meanOut,
          variance: variance.data,
          epsilon,
        });
        portable.push({
          kind: "batchnorm",
          epsilon,
          gamma: f32Tensor([n], gamma),
          beta: f32Tensor([n], beta),
          running_mean: f32Tensor([n], meanOut),
          running_var: f32Tensor([n], variance.data),
        });
        break;
      }
      case "relu":
      case "sigmoid": {
        source.push({ kind: spec.kind });
        portable.push({ kind: spec.kind });
        break;
      }
    }
    prevKind = spec.kind;
  }

  if (prevKind !== "sigmoid") {
    throw new ExportError(
      `the final layer must be sigmoid (per-label probabilities), got ${prevKind}`,
    );
  }
  if (state.spatial || state.flat !== labels.length) {
    const got = state.spatial ? `${state.h}x${state.w}x${state.c} spatial map` : `${state.flat} units`;
    throw new ExportError(
      `the chain ends with ${got} but there are ${labels.length} output labels`,
    );
  }

  const seed = opts.goldenSeed ?? 0;
  const goldenHwc = uniformArray(mulberry32(seed >>> 0), h0 * w0 * c0, 0, 1);
  const input: HwcTensor = {
    h: h0,
    w: w0,
    c: c0,
    data: Float64Array.from(goldenHwc),
  };
  const probabilities = runSourceForward(source, input);

  return {
    format_version: FORMAT_VERSION,
    name: arch.name,
    input_shape: [c0, h0, w0],
    output_labels: [...labels],
    layers: portable,
    golden: {
      input: f32Tensor([c0, h0, w0], hwcToChw(h0, w0, c0, goldenHwc)),
      probabilities,
    },
  };
}
