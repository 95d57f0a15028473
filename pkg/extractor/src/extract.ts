/**
 * Extraction jobs: run a text or structure embedding backend over a
 * JSON-lines polymer dataset and emit PLYE/PLYT files for the primary
 * pipeline.
 *
 * Text modality: each polymer is embedded as the prompt
 * "Polymer Smile: {PSMILES}." (fixed template).  Raw subword vectors
 * are merged onto the primary tokenizer's chemical tokens by
 * byte-weighted mean; the prompt prefix/suffix groups are dropped, the
 * merged rows become the PLYT record, and the PLYE vector is the mean
 * pool of exactly those rows, so pooled and token-level files stay
 * consistent to f32 rounding by construction.
 */

import { promises as fs } from "node:fs";

import {
  EmbeddingMeta,
  MODALITY_STRUCTURE,
  MODALITY_TEXT,
  PooledRecord,
  TokenRecord,
  writePooled,
  writeTokens,
} from "./format.js";
import { buildMergeMap, meanPool, mergeVectors, toF32 } from "./merge.js";
import { makeStructureBackend, makeTextBackend } from "./backends.js";
import { capAll, tokenizeAll } from "./primary.js";

export const PROMPT_TEMPLATE = "Polymer Smile: {PSMILES}.";
export const TEXT_DIM = 4096;
export const STRUCTURE_DIM = 1536;

export interface DatasetRecord {
  id: string;
  psmiles: string;
}

export interface ExtractJob {
  input: string;
  modality: "text" | "structure";
  model: string;
  output: string;
  tokensOutput?: string;
  dim?: number;
  batchSize: number;
  seed: number;
  polyfuseBin: string;
}

export async function readDataset(path: string): Promise<DatasetRecord[]> {
  const text = await fs.readFile(path, "utf-8");
  const records: DatasetRecord[] = [];
  const seen = new Set<string>();
  for (const line of text.split("\n")) {
    if (!line.trim()) continue;
    const obj = JSON.parse(line);
    if (typeof obj.id !== "string" || typeof obj.psmiles !== "string") {
      throw new Error(`${path}: record missing id/psmiles: ${line.slice(0, 60)}`);
    }
    if (seen.has(obj.id)) throw new Error(`${path}: duplicate id ${obj.id}`);
    seen.add(obj.id);
    records.push({ id: obj.id, psmiles: obj.psmiles });
  }
  return records;
}

function promptFor(psmiles: string): string {
  return PROMPT_TEMPLATE.replace("{PSMILES}", psmiles);
}

export async function extractTextEmbeddings(job: ExtractJob): Promise<{
  written: number;
  skipped: string[];
}> {
  const dim = job.dim ?? TEXT_DIM;
  const backend = makeTextBackend(job.model, dim, job.seed);
  const records = await readDataset(job.input);
  const chemTokens = tokenizeAll(job.polyfuseBin, records.map((r) => r.psmiles));
  const [prefix, suffix] = PROMPT_TEMPLATE.split("{PSMILES}");

  const pooled: PooledRecord[] = [];
  const tokenRecords: TokenRecord[] = [];
  const skipped: string[] = [];
  for (let i = 0; i < records.length; i++) {
    const rec = records[i];
    const prompt = promptFor(rec.psmiles);
    let raw;
    try {
      raw = await backend.embedTokens(prompt, rec.id);
      if (raw.tokens.join("") !== prompt) {
        throw new Error("backend tokens do not reconstruct the prompt");
      }
    } catch (err) {
      console.error(`skipping ${rec.id}: ${(err as Error).message}`);
      skipped.push(rec.id);
      continue;
    }
    const targets = [prefix, ...chemTokens[i], suffix].filter((t) => t.length > 0);
    const groups = buildMergeMap(raw.tokens, targets);
    const merged = mergeVectors(raw.vectors, groups);
    // Keep only the polymer's chemical tokens.
    const start = prefix.length > 0 ? 1 : 0;
    const rows = merged
      .slice(start, start + chemTokens[i].length)
      .map(toF32);
    tokenRecords.push({ id: rec.id, tokens: chemTokens[i], vectors: rows });
    pooled.push({ id: rec.id, vector: toF32(meanPool(rows)) });
  }

  const meta: EmbeddingMeta = {
    modality: MODALITY_TEXT,
    dim,
    sourceTag: `${backend.name}`,
  };
  await writePooled(job.output, meta, pooled);
  if (job.tokensOutput) {
    await writeTokens(job.tokensOutput, meta, tokenRecords);
  }
  return { written: pooled.length, skipped };
}

export async function extractStructureEmbeddings(job: ExtractJob): Promise<{
  written: number;
  skipped: string[];
}> {
  const dim = job.dim ?? STRUCTURE_DIM;
  const backend = makeStructureBackend(job.model, dim, job.seed);
  const records = await readDataset(job.input);
  const caped = capAll(job.polyfuseBin, records.map((r) => r.psmiles));

  const pooled: PooledRecord[] = [];
  const skipped: string[] = [];
  for (let i = 0; i < records.length; i++) {
    try {
      const vector = await backend.embed(caped[i], records[i].id);
      pooled.push({ id: records[i].id, vector: toF32(vector) });
    } catch (err) {
      console.error(`skipping ${records[i].id}: ${(err as Error).message}`);
      skipped.push(records[i].id);
    }
  }
  const meta: EmbeddingMeta = {
    modality: MODALITY_STRUCTURE,
    dim,
    sourceTag: `${backend.name}`,
  };
  await writePooled(job.output, meta, pooled);
  return { written: pooled.length, skipped };
}
