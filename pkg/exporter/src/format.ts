/**
 * Portable CNN model format, version 1.
 *
 * This is the JSON document the verification engine loads:
 *
 *   {
 *     "format_version": 1,
 *     "name": "...",
 *     "input_shape": [C, H, W],
 *     "output_labels": ["AU04", ...],
 *     "layers": [{"kind": "...", ...}, ...],
 *     "golden": {"input": <tensor>, "probabilities": [...]}
 *   }
 *
 * Weight tensors are {"shape": [...], "data_b64": "..."} objects holding
 * row-major float32 values in little-endian byte order. Conv kernels are
 * OIHW, dense weights are (in, out).
 */

export const FORMAT_VERSION = 1;

export interface TensorJson {
  shape: number[];
  data_b64: string;
}

export interface LayerJson {
  kind: string;
  stride?: number;
  padding?: number;
  window?: number;
  epsilon?: number;
  weights?: TensorJson;
  bias?: TensorJson;
  gamma?: TensorJson;
  beta?: TensorJson;
  running_mean?: TensorJson;
  running_var?: TensorJson;
}

export interface GoldenJson {
  input: TensorJson;
  probabilities: number[];
}

export interface ModelJson {
  format_version: typeof FORMAT_VERSION;
  name: string;
  input_shape: number[];
  output_labels: string[];
  layers: LayerJson[];
  golden: GoldenJson;
}

export function elementCount(shape: readonly number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

/** Encode float32 values as row-major little-endian base64. */
export function encodeTensor(
  shape: readonly number[],
  values: ArrayLike<number>,
): TensorJson {
  const n = elementCount(shape);
  if (values.length !== n) {
    throw new Error(
      `tensor data has ${values.length} values but shape [${shape}] needs ${n}`,
    );
  }
  const buf = Buffer.alloc(4 * n);
  for (let i = 0; i < n; i++) {
    buf.writeFloatLE(values[i], 4 * i);
  }
  return { shape: [...shape], data_b64: buf.toString("base64") };
}

export function decodeTensor(t: TensorJson): {
  shape: number[];
  data: Float32Array;
} {
  const n = elementCount(t.shape);
  const buf = Buffer.from(t.data_b64, "base64");
  if (buf.length !== 4 * n) {
    throw new Error(
      `tensor payload is ${buf.length} bytes but shape [${t.shape}] needs ${4 * n}`,
    );
  }
  const data = new Float32Array(n);
  for (let i = 0; i < n; i++) {
    data[i] = buf.readFloatLE(4 * i);
  }
  return { shape: [...t.shape], data };
}

/**
 * Serialize a model document. Key order is fixed by construction and
 * float formatting is the shortest round-trip decimal, so the same model
 * always produces the same bytes.
 */
export function writeModelJson(model: ModelJson): string {
  return JSON.stringify(model, null, 1) + "\n";
}
