/**
 * Deterministic toy fixture generation.
 *
 * Produces a small random CNN in the portable format so the verification
 * engine's CI can exercise model loading, the forward pass, and the
 * golden handshake without any training framework installed. The
 * generator goes through the same conversion path as real exports (the
 * weights are laid out channels-last and converted), biases are always
 * zero so relevance conservation holds strictly, and everything derives
 * from a single 32-bit seed via an integer-only PRNG: the same seed
 * always yields byte-identical files.
 */

import { writeFileSync } from "node:fs";

import { Checkpoint, CheckpointTensor } from "./checkpoint.js";
import { ArchJson, exportModel } from "./export.js";
import { ModelJson, writeModelJson } from "./format.js";
import { mulberry32, uniformArray } from "./rng.js";

/**
 * Fixture topology on a 1-channel 8x8 input:
 *
 *   conv 4@3x3 s1 p1 -> relu -> maxpool 2/2 -> conv 8@3x3 s1 p1 -> relu
 *   -> flatten -> dense 128->2 -> sigmoid
 *
 * The flatten/dense head (rather than global pooling) is deliberate: it
 * makes the fixture cover the HWC -> CHW dense-row re-ordering, the one
 * conversion a pooled head would never exercise.
 */
export function toyArch(name: string): ArchJson {
  return {
    name,
    input_shape: [8, 8, 1],
    output_labels: ["AU04", "AU09"],
    layers: [
      { kind: "conv2d", kernel: "conv1/kernel", stride: 1, padding: 1 },
      { kind: "relu" },
      { kind: "maxpool", window: 2, stride: 2 },
      { kind: "conv2d", kernel: "conv2/kernel", stride: 1, padding: 1 },
      { kind: "relu" },
      { kind: "flatten" },
      { kind: "dense", kernel: "dense/kernel" },
      { kind: "sigmoid" },
    ],
  };
}

export function toyCheckpointTensors(seed: number): CheckpointTensor[] {
  const rng = mulberry32(seed >>> 0);
  return [
    {
      name: "conv1/kernel",
      shape: [3, 3, 1, 4],
      data: uniformArray(rng, 3 * 3 * 1 * 4, -0.5, 0.5),
    },
    {
      name: "conv2/kernel",
      shape: [3, 3, 4, 8],
      data: uniformArray(rng, 3 * 3 * 4 * 8, -0.35, 0.35),
    },
    {
      name: "dense/kernel",
      shape: [128, 2],
      data: uniformArray(rng, 128 * 2, -0.1, 0.1),
    },
  ];
}

export function makeToyFixtureModel(seed: number): ModelJson {
  const checkpoint = new Checkpoint(toyCheckpointTensors(seed));
  return exportModel(checkpoint, toyArch(`toy-fixture-s${seed}`), {
    zeroBias: true,
    // decorrelate the golden input stream from the weight stream
    goldenSeed: (seed ^ 0x6a09e667) >>> 0,
  });
}

export function makeToyFixtureJson(seed: number): string {
  return writeModelJson(makeToyFixtureModel(seed));
}

/** Write the fixture for `seed` to `outPath` (byte-deterministic). */
export function makeToyFixture(seed: number, outPath: string): void {
  writeFileSync(outPath, makeToyFixtureJson(seed));
}
