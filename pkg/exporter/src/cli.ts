#!/usr/bin/env node
/**
 * Command-line entry point.
 *
 *   auexport export --checkpoint <file> --arch <json> --out <file>
 *                   [--zero-bias] [--golden-seed N]
 *   auexport make-toy-fixture --out <file> [--seed N]
 *
 * Exit codes: 0 success, 1 conversion or IO failure, 2 usage error.
 */

import { readFileSync, writeFileSync } from "node:fs";
import { pathToFileURL } from "node:url";
import { parseArgs } from "node:util";

import { CheckpointError, loadCheckpoint } from "./checkpoint.js";
import { ExportError, exportModel, readArchJson } from "./export.js";
import { writeModelJson } from "./format.js";
import { makeToyFixtureJson } from "./toyFixture.js";

const USAGE = `usage:
  auexport export --checkpoint <file> --arch <json> --out <file> [--zero-bias] [--golden-seed N]
  auexport make-toy-fixture --out <file> [--seed N]

commands:
  export            convert a channels-last checkpoint (weights manifest +
                    binary shards) into the portable model format, embedding
                    a golden input/probability pair
  make-toy-fixture  generate a deterministic random toy model (zero biases)

options:
  --checkpoint      checkpoint manifest JSON (its weightsManifest names every tensor)
  --arch            architecture descriptor JSON (layer sequence + tensor names)
  --out             output model file
  --zero-bias       zero all additive terms for strict-conservation fixtures
  --golden-seed N   seed for the embedded golden input (default 0)
  --seed N          toy fixture seed (default 0)
`;

function fail(message: string, code: number): number {
  process.stderr.write(`error: ${message}\n`);
  return code;
}

function parseSeed(raw: string, flag: string): number {
  const v = Number(raw);
  if (!Number.isInteger(v) || v < 0 || v > 0xffffffff) {
    throw new ExportError(`${flag} must be an integer in [0, 2^32), got ${raw}`);
  }
  return v;
}

function runExport(argv: string[]): number {
  const { values } = parseArgs({
    args: argv,
    options: {
      checkpoint: { type: "string" },
      arch: { type: "string" },
      out: { type: "string" },
      "zero-bias": { type: "boolean", default: false },
      "golden-seed": { type: "string", default: "0" },
    },
  });
  for (const flag of ["checkpoint", "arch", "out"] as const) {
    if (values[flag] === undefined) {
      process.stderr.write(USAGE);
      return fail(`export requires --${flag}`, 2);
    }
  }
  const checkpoint = loadCheckpoint(values.checkpoint!);
  const archDoc: unknown = JSON.parse(readFileSync(values.arch!, "utf-8"));
  const arch = readArchJson(archDoc, values.arch!);
  const model = exportModel(checkpoint, arch, {
    zeroBias: values["zero-bias"],
    goldenSeed: parseSeed(values["golden-seed"]!, "--golden-seed"),
  });
  writeFileSync(values.out!, writeModelJson(model));
  const probs = model.golden.probabilities.map((p) => p.toFixed(6)).join(" ");
  process.stdout.write(
    `wrote ${values.out}: ${model.layers.length} layers, ` +
      `labels ${model.output_labels.join(" ")}\n` +
      `golden probabilities: ${probs}\n`,
  );
  return 0;
}

function runMakeToyFixture(argv: string[]): number {
  const { values } = parseArgs({
    args: argv,
    options: {
      out: { type: "string" },
      seed: { type: "string", default: "0" },
    },
  });
  if (values.out === undefined) {
    process.stderr.write(USAGE);
    return fail("make-toy-fixture requires --out", 2);
  }
  const seed = parseSeed(values.seed!, "--seed");
  writeFileSync(values.out, makeToyFixtureJson(seed));
  process.stdout.write(`wrote ${values.out} (seed ${seed})\n`);
  return 0;
}

export function main(argv: string[]): number {
  const [command, ...rest] = argv;
  if (command === undefined || command === "--help" || command === "-h") {
    process.stdout.write(USAGE);
    return command === undefined ? 2 : 0;
  }
  try {
    if (command === "export") return runExport(rest);
    if (command === "make-toy-fixture") return runMakeToyFixture(rest);
    process.stderr.write(USAGE);
    return fail(`unknown command "${command}"`, 2);
  } catch (err) {
    const code = (err as { code?: string }).code;
    if (typeof code === "string" && code.startsWith("ERR_PARSE_ARGS")) {
      process.stderr.write(USAGE);
      return fail((err as Error).message, 2);
    }
    if (
      err instanceof ExportError ||
      err instanceof CheckpointError ||
      err instanceof SyntaxError ||
      (err instanceof Error && code !== undefined)
    ) {
      return fail((err as Error).message, 1);
    }
    throw err;
  }
}

if (process.argv[1] !== undefined && import.meta.url === pathToFileURL(process.argv[1]).href) {
  process.exitCode = main(process.argv.slice(2));
}
