#!/usr/bin/env node
/** Command-line entry: extract embeddings from a JSONL polymer dataset. */

import yargs from "yargs";
import { hideBin } from "yargs/helpers";

import { extractStructureEmbeddings, extractTextEmbeddings, ExtractJob } from "./extract.js";

async function main() {
  const argv = await yargs(hideBin(process.argv))
    .scriptName("polyfuse-extract")
    .option("input", { type: "string", demandOption: true, describe: "JSONL dataset path" })
    .option("output", { type: "string", demandOption: true, describe: "PLYE output path" })
    .option("modality", {
      choices: ["text", "structure"] as const,
      demandOption: true,
    })
    .option("model", {
      type: "string",
      default: "mock",
      describe: "model identifier, or 'mock' for the deterministic offline backend",
    })
    .option("tokens-out", { type: "string", describe: "PLYT output path (text modality)" })
    .option("dim", { type: "number", describe: "override the embedding width" })
    .option("batch-size", { type: "number", default: 8 })
    .option("seed", { type: "number", default: 42, describe: "mock backend seed" })
    .option("polyfuse-bin", { type: "string", default: "polyfuse" })
    .strict()
    .help()
    .parse();

  const job: ExtractJob = {
    input: argv.input,
    modality: argv.modality,
    model: argv.model,
    output: argv.output,
    tokensOutput: argv["tokens-out"],
    dim: argv.dim,
    batchSize: argv["batch-size"],
    seed: argv.seed,
    polyfuseBin: argv["polyfuse-bin"],
  };
  const result =
    job.modality === "text"
      ? await extractTextEmbeddings(job)
      : await extractStructureEmbeddings(job);
  console.error(
    `wrote ${result.written} records to ${job.output}` +
      (result.skipped.length ? `; skipped ${result.skipped.length}` : "")
  );
}

main().catch((err) => {
  console.error(`error: ${err.message}`);
  process.exit(1);
});
