/**
 * Checkpoint reading.
 *
 * The exporter consumes the layers-model artifact layout used by the
 * TensorFlow.js ecosystem: a JSON manifest file whose `weightsManifest`
 * lists named tensors (name, shape, dtype) in groups, each group backed
 * by one or more binary shard files of concatenated row-major float32
 * values. Shard paths are resolved relative to the manifest file.
 *
 * Only the named tensors are read; the exporter never introspects the
 * checkpoint's own topology description (the architecture comes from an
 * explicit descriptor instead).
 */

import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";

export interface CheckpointTensor {
  name: string;
  shape: number[];
  data: Float32Array;
}

export class CheckpointError extends Error {}

export class Checkpoint {
  private readonly tensors = new Map<string, CheckpointTensor>();

  constructor(tensors: Iterable<CheckpointTensor>) {
    for (const t of tensors) {
      if (this.tensors.has(t.name)) {
        throw new CheckpointError(`duplicate tensor name "${t.name}"`);
      }
      this.tensors.set(t.name, t);
    }
  }

  has(name: string): boolean {
    return this.tensors.has(name);
  }

  get(name: string): CheckpointTensor {
    const t = this.tensors.get(name);
    if (t === undefined) {
      throw new CheckpointError(
        `checkpoint has no tensor named "${name}" ` +
          `(available: ${this.names().join(", ")})`,
      );
    }
    return t;
  }

  names(): string[] {
    return [...this.tensors.keys()];
  }
}

interface WeightSpec {
  name: string;
  shape: number[];
  dtype: string;
}

interface ManifestGroup {
  paths: string[];
  weights: WeightSpec[];
}

function asManifest(doc: unknown, path: string): ManifestGroup[] {
  if (
    typeof doc !== "object" ||
    doc === null ||
    !Array.isArray((doc as Record<string, unknown>).weightsManifest)
  ) {
    throw new CheckpointError(`${path}: missing "weightsManifest" array`);
  }
  return (doc as { weightsManifest: ManifestGroup[] }).weightsManifest;
}

/** Load every tensor referenced by a checkpoint manifest file. */
export function loadCheckpoint(manifestPath: string): Checkpoint {
  const doc: unknown = JSON.parse(readFileSync(manifestPath, "utf-8"));
  const groups = asManifest(doc, manifestPath);
  const dir = dirname(manifestPath);
  const tensors: CheckpointTensor[] = [];
  for (const group of groups) {
    const blob = Buffer.concat(
      group.paths.map((p) => readFileSync(join(dir, p))),
    );
    let offset = 0;
    for (const spec of group.weights) {
      if (spec.dtype !== "float32") {
        throw new CheckpointError(
          `tensor "${spec.name}" has dtype ${spec.dtype}; ` +
            `only float32 checkpoints are supported`,
        );
      }
      const n = spec.shape.reduce((a, b) => a * b, 1);
      if (offset + 4 * n > blob.length) {
        throw new CheckpointError(
          `weight shard truncated: "${spec.name}" needs ${4 * n} bytes ` +
            `at offset ${offset} but the shard group holds ${blob.length}`,
        );
      }
      const data = new Float32Array(n);
      for (let i = 0; i < n; i++) {
        data[i] = blob.readFloatLE(offset + 4 * i);
      }
      offset += 4 * n;
      tensors.push({ name: spec.name, shape: [...spec.shape], data });
    }
    if (offset !== blob.length) {
      throw new CheckpointError(
        `weight shard group has ${blob.length - offset} trailing bytes ` +
          `beyond the tensors it declares`,
      );
    }
  }
  return new Checkpoint(tensors);
}
