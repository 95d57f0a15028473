/**
 * Thin bridge to the primary pipeline's CLI.  The extractor consumes
 * the primary only through its public surfaces: `tokenize` supplies
 * the refined chemical tokens used as merge targets, and `cap` turns
 * PSMILES into plain SMILES for the structure model.
 */

import { spawnSync } from "node:child_process";

export function runPrimaryLines(bin: string, args: string[], lines: string[]): string[] {
  const result = spawnSync(bin, args, {
    input: lines.join("\n") + "\n",
    encoding: "utf-8",
    maxBuffer: 64 * 1024 * 1024,
  });
  if (result.error) {
    throw new Error(`failed to run ${bin} ${args.join(" ")}: ${result.error.message}`);
  }
  if (result.status !== 0) {
    throw new Error(
      `${bin} ${args.join(" ")} exited with ${result.status}: ${result.stderr.trim()}`
    );
  }
  const out = result.stdout.split("\n").filter((l) => l.length > 0);
  if (out.length !== lines.length) {
    throw new Error(`${bin} returned ${out.length} lines for ${lines.length} inputs`);
  }
  return out;
}

export function capAll(bin: string, psmiles: string[]): string[] {
  return runPrimaryLines(bin, ["cap"], psmiles);
}

export function tokenizeAll(bin: string, psmiles: string[]): string[][] {
  return runPrimaryLines(bin, ["tokenize"], psmiles).map((line) => line.split("\t"));
}
