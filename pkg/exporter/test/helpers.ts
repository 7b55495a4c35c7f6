/** Shared test utilities: tmp dirs, checkpoint writing, a minimal PNG
 *  encoder, and spawning the two CLIs under test. */

import { spawnSync } from "node:child_process";
import { mkdtempSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { deflateSync } from "node:zlib";

import type { CheckpointTensor } from "../src/checkpoint.js";

export const CLI_JS = new URL("../dist/cli.js", import.meta.url).pathname;

export function tmpDir(prefix: string): string {
  return mkdtempSync(join(tmpdir(), prefix));
}

/** Write a checkpoint as a manifest JSON plus one binary shard. */
export function writeCheckpoint(
  dir: string,
  tensors: CheckpointTensor[],
  shardName = "weights.bin",
): string {
  const blob = Buffer.concat(
    tensors.map((t) => {
      const buf = Buffer.alloc(4 * t.data.length);
      for (let i = 0; i < t.data.length; i++) {
        buf.writeFloatLE(t.data[i], 4 * i);
      }
      return buf;
    }),
  );
  writeFileSync(join(dir, shardName), blob);
  const manifest = {
    format: "layers-model",
    weightsManifest: [
      {
        paths: [shardName],
        weights: tensors.map((t) => ({
          name: t.name,
          shape: t.shape,
          dtype: "float32",
        })),
      },
    ],
  };
  const path = join(dir, "checkpoint.json");
  writeFileSync(path, JSON.stringify(manifest, null, 1));
  return path;
}

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    table[n] = c;
  }
  return table;
})();

function crc32(data: Buffer): number {
  let c = 0xffffffff;
  for (const byte of data) {
    c = CRC_TABLE[(c ^ byte) & 0xff] ^ (c >>> 8);
  }
  return (c ^ 0xffffffff) >>> 0;
}

function pngChunk(type: string, data: Buffer): Buffer {
  const head = Buffer.alloc(8);
  head.writeUInt32BE(data.length, 0);
  head.write(type, 4, "ascii");
  const crc = Buffer.alloc(4);
  crc.writeUInt32BE(crc32(Buffer.concat([head.subarray(4), data])), 0);
  return Buffer.concat([head, data, crc]);
}

/** Encode an 8-bit grayscale PNG (color type 0, no interlacing). */
export function writeGrayPng(
  path: string,
  width: number,
  height: number,
  pixels: Uint8Array,
): void {
  if (pixels.length !== width * height) {
    throw new Error(`need ${width * height} pixels, got ${pixels.length}`);
  }
  const ihdr = Buffer.alloc(13);
  ihdr.writeUInt32BE(width, 0);
  ihdr.writeUInt32BE(height, 4);
  ihdr[8] = 8; // bit depth
  ihdr[9] = 0; // grayscale
  const raw = Buffer.alloc(height * (width + 1));
  for (let y = 0; y < height; y++) {
    raw[y * (width + 1)] = 0; // filter: none
    for (let x = 0; x < width; x++) {
      raw[y * (width + 1) + 1 + x] = pixels[y * width + x];
    }
  }
  const png = Buffer.concat([
    Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]),
    pngChunk("IHDR", ihdr),
    pngChunk("IDAT", deflateSync(raw)),
    pngChunk("IEND", Buffer.alloc(0)),
  ]);
  writeFileSync(path, png);
}

/** 68 in-bounds landmark points for a `size` x `size` image. */
export function writeLandmarks(path: string, size: number): void {
  const points: number[][] = [];
  for (let i = 0; i < 68; i++) {
    points.push([i % size, Math.floor(i / size) % size]);
  }
  writeFileSync(path, JSON.stringify({ landmarks: points }));
}

export interface RunResult {
  status: number;
  stdout: string;
  stderr: string;
}

function run(command: string, args: string[]): RunResult {
  const res = spawnSync(command, args, { encoding: "utf-8" });
  if (res.error) {
    throw res.error;
  }
  return { status: res.status ?? -1, stdout: res.stdout, stderr: res.stderr };
}

/** Run this package's CLI out of dist/. */
export function runExporter(...args: string[]): RunResult {
  return run(process.execPath, [CLI_JS, ...args]);
}

/** Run the verification engine's CLI (the consumer of exported files). */
export function runAuverify(...args: string[]): RunResult {
  return run("auverify", args);
}
