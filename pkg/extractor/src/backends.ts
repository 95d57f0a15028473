/**
 * Embedding backends.  The "mock" backend is a deterministic offline
 * stand-in keyed by (record id, modality, seed) through the normative
 * counter stream; it chunks the prompt into fixed-width pieces so the
 * subword-merge path is exercised exactly as with a real tokenizer.
 * Any other model id is loaded through @huggingface/transformers at
 * runtime (an optional install; see the README).
 */

import { MODALITY_STRUCTURE, MODALITY_TEXT } from "./format.js";
import { Stream, deriveKey } from "./rng.js";

export interface TokenEmbedding {
  tokens: string[]; // raw subword tokens, concatenating to the prompt
  vectors: Float64Array[]; // one row per raw token
}

export interface TextBackend {
  readonly name: string;
  readonly dim: number;
  embedTokens(prompt: string, recordId: string): Promise<TokenEmbedding>;
}

export interface StructureBackend {
  readonly name: string;
  readonly dim: number;
  embed(capedSmiles: string, recordId: string): Promise<Float64Array>;
}

const MOCK_CHUNK = 3;

function chunked(text: string, width: number): string[] {
  const out: string[] = [];
  for (let i = 0; i < text.length; i += width) {
    out.push(text.slice(i, i + width));
  }
  return out;
}

export class MockTextBackend implements TextBackend {
  readonly name = "mock";

  constructor(readonly dim: number, private seed: number) {}

  async embedTokens(prompt: string, recordId: string): Promise<TokenEmbedding> {
    const tokens = chunked(prompt, MOCK_CHUNK);
    const stream = new Stream(
      deriveKey("mock-extract", "text", recordId, MODALITY_TEXT, this.seed)
    );
    const flat = stream.normal(tokens.length * this.dim);
    const vectors = tokens.map((_t, i) =>
      Float64Array.from(flat.subarray(i * this.dim, (i + 1) * this.dim))
    );
    return { tokens, vectors };
  }
}

export class MockStructureBackend implements StructureBackend {
  readonly name = "mock";

  constructor(readonly dim: number, private seed: number) {}

  async embed(capedSmiles: string, recordId: string): Promise<Float64Array> {
    // Keyed by the caped structure string so identical structures map
    // to identical vectors, mirroring a real conformer model.
    const stream = new Stream(
      deriveKey("mock-extract", "structure", recordId, capedSmiles, MODALITY_STRUCTURE, this.seed)
    );
    return Float64Array.from(stream.normal(this.dim));
  }
}

interface HfModule {
  AutoTokenizer: any;
  AutoModel: any;
}

async function loadTransformers(): Promise<HfModule> {
  try {
    // Optional dependency: resolved at runtime only.
    return (await import("@huggingface/transformers" as string)) as unknown as HfModule;
  } catch (err) {
    throw new Error(
      "the real-model backend needs the optional '@huggingface/transformers' package " +
        "(npm install @huggingface/transformers) plus locally available weights; " +
        `import failed: ${(err as Error).message}`
    );
  }
}

/**
 * Final-hidden-state extraction through transformers.js.  Tokens are
 * decoded one id at a time so their concatenation reproduces the
 * prompt; records whose round-trip fails are skipped by the caller.
 */
export class HfTextBackend implements TextBackend {
  private ready: Promise<{ tokenizer: any; model: any }> | null = null;

  constructor(readonly name: string, readonly dim: number) {}

  private load() {
    if (!this.ready) {
      this.ready = (async () => {
        const hf = await loadTransformers();
        const tokenizer = await hf.AutoTokenizer.from_pretrained(this.name);
        const model = await hf.AutoModel.from_pretrained(this.name);
        return { tokenizer, model };
      })();
    }
    return this.ready;
  }

  async embedTokens(prompt: string, _recordId: string): Promise<TokenEmbedding> {
    const { tokenizer, model } = await this.load();
    const encoded = await tokenizer(prompt, { add_special_tokens: false });
    const output = await model(encoded);
    const hidden = output.last_hidden_state; // [1, n_tokens, dim]
    const [, nTokens, dim] = hidden.dims;
    if (dim !== this.dim) {
      throw new Error(`model width ${dim} does not match expected dim ${this.dim}`);
    }
    const ids: number[] = Array.from(encoded.input_ids.data, (v: any) => Number(v));
    const tokens = ids.map((id) => tokenizer.decode([id]));
    const data: Float32Array = hidden.data;
    const vectors = tokens.map((_t, i) =>
      Float64Array.from(data.subarray(i * dim, (i + 1) * dim))
    );
    return { tokens, vectors };
  }
}

export function makeTextBackend(model: string, dim: number, seed: number): TextBackend {
  return model === "mock" ? new MockTextBackend(dim, seed) : new HfTextBackend(model, dim);
}

export function makeStructureBackend(
  model: string,
  dim: number,
  seed: number
): StructureBackend {
  if (model === "mock") return new MockStructureBackend(dim, seed);
  throw new Error(
    `no structure backend named ${JSON.stringify(model)} is bundled; ` +
      "run the upstream 3D-structure model separately and convert its output, " +
      "or use --model mock for testing"
  );
}
