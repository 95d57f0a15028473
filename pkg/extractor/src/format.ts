/**
 * PLYE (pooled) and PLYT (token-level) embedding file writers/readers.
 *
 * Little-endian layout, version 1:
 *   header: magic 4B | version u16 | modality u8 | reserved u8
 *           | dim u32 | count u64 | tag_len u16 | source_tag UTF-8
 *   PLYE record: id_len u16 | id | dim x f32
 *   PLYT record: id_len u16 | id | n_tokens u16
 *                | (tok_len u16 | token)* | n_tokens x dim x f32
 *
 * Writes are atomic (temp file + rename) and byte-deterministic.
 */

import { promises as fs } from "node:fs";
import path from "node:path";
import process from "node:process";

export const FORMAT_VERSION = 1;
export const MODALITY_TEXT = 1;
export const MODALITY_STRUCTURE = 2;

export interface EmbeddingMeta {
  modality: number;
  dim: number;
  sourceTag: string;
}

export interface PooledRecord {
  id: string;
  vector: Float32Array;
}

export interface TokenRecord {
  id: string;
  tokens: string[];
  vectors: Float32Array[]; // one per token
}

const encoder = new TextEncoder();

class ByteSink {
  private chunks: Uint8Array[] = [];

  bytes(data: Uint8Array) {
    this.chunks.push(data);
  }

  u16(value: number) {
    const b = new Uint8Array(2);
    new DataView(b.buffer).setUint16(0, value, true);
    this.bytes(b);
  }

  u32(value: number) {
    const b = new Uint8Array(4);
    new DataView(b.buffer).setUint32(0, value, true);
    this.bytes(b);
  }

  u64(value: number) {
    const b = new Uint8Array(8);
    new DataView(b.buffer).setBigUint64(0, BigInt(value), true);
    this.bytes(b);
  }

  str(text: string) {
    const raw = encoder.encode(text);
    if (raw.length > 0xffff) throw new Error(`string too long: ${raw.length} bytes`);
    this.u16(raw.length);
    this.bytes(raw);
  }

  f32Array(values: Float32Array) {
    for (const v of values) {
      if (!Number.isFinite(v)) throw new Error("non-finite value in embedding payload");
    }
    const b = new Uint8Array(values.length * 4);
    const view = new DataView(b.buffer);
    values.forEach((v, i) => view.setFloat32(i * 4, v, true));
    this.bytes(b);
  }

  concat(): Uint8Array {
    const total = this.chunks.reduce((acc, c) => acc + c.length, 0);
    const out = new Uint8Array(total);
    let off = 0;
    for (const c of this.chunks) {
      out.set(c, off);
      off += c.length;
    }
    return out;
  }
}

function header(sink: ByteSink, magic: string, meta: EmbeddingMeta, count: number) {
  sink.bytes(encoder.encode(magic));
  sink.u16(FORMAT_VERSION);
  sink.bytes(new Uint8Array([meta.modality, 0]));
  sink.u32(meta.dim);
  sink.u64(count);
  sink.str(meta.sourceTag);
}

async function atomicWrite(filePath: string, data: Uint8Array) {
  const tmp = path.join(
    path.dirname(filePath),
    `.${path.basename(filePath)}.tmp-${process.pid}`
  );
  await fs.writeFile(tmp, data);
  await fs.rename(tmp, filePath);
}

export async function writePooled(
  filePath: string,
  meta: EmbeddingMeta,
  records: PooledRecord[]
): Promise<void> {
  const sink = new ByteSink();
  header(sink, "PLYE", meta, records.length);
  for (const rec of records) {
    if (rec.vector.length !== meta.dim) {
      throw new Error(`record ${rec.id}: vector length ${rec.vector.length} != dim ${meta.dim}`);
    }
    sink.str(rec.id);
    sink.f32Array(rec.vector);
  }
  await atomicWrite(filePath, sink.concat());
}

export async function writeTokens(
  filePath: string,
  meta: EmbeddingMeta,
  records: TokenRecord[]
): Promise<void> {
  const sink = new ByteSink();
  header(sink, "PLYT", meta, records.length);
  for (const rec of records) {
    if (rec.tokens.length < 1) throw new Error(`record ${rec.id}: no tokens`);
    if (rec.tokens.length !== rec.vectors.length) {
      throw new Error(`record ${rec.id}: token/vector count mismatch`);
    }
    sink.str(rec.id);
    sink.u16(rec.tokens.length);
    for (const tok of rec.tokens) sink.str(tok);
    for (const vec of rec.vectors) {
      if (vec.length !== meta.dim) {
        throw new Error(`record ${rec.id}: vector length ${vec.length} != dim ${meta.dim}`);
      }
      sink.f32Array(vec);
    }
  }
  await atomicWrite(filePath, sink.concat());
}

class ByteSource {
  private view: DataView;
  private pos = 0;

  constructor(private data: Uint8Array, private label: string) {
    this.view = new DataView(data.buffer, data.byteOffset, data.byteLength);
  }

  private need(n: number, what: string) {
    if (this.pos + n > this.data.length) {
      throw new Error(`${this.label}: truncated while reading ${what}`);
    }
  }

  u16(what: string): number {
    this.need(2, what);
    const v = this.view.getUint16(this.pos, true);
    this.pos += 2;
    return v;
  }

  u32(what: string): number {
    this.need(4, what);
    const v = this.view.getUint32(this.pos, true);
    this.pos += 4;
    return v;
  }

  u64(what: string): number {
    this.need(8, what);
    const v = this.view.getBigUint64(this.pos, true);
    this.pos += 8;
    return Number(v);
  }

  raw(n: number, what: string): Uint8Array {
    this.need(n, what);
    const out = this.data.subarray(this.pos, this.pos + n);
    this.pos += n;
    return out;
  }

  str(what: string): string {
    return new TextDecoder().decode(this.raw(this.u16(what + " length"), what));
  }

  f32Array(n: number, what: string): Float32Array {
    const raw = this.raw(n * 4, what);
    const out = new Float32Array(n);
    const view = new DataView(raw.buffer, raw.byteOffset, raw.byteLength);
    for (let i = 0; i < n; i++) out[i] = view.getFloat32(i * 4, true);
    return out;
  }

  done() {
    if (this.pos !== this.data.length) {
      throw new Error(`${this.label}: trailing bytes after last record`);
    }
  }
}

function readHeader(src: ByteSource, expectedMagic: string, label: string) {
  const magic = new TextDecoder().decode(src.raw(4, "magic"));
  if (magic !== expectedMagic) {
    throw new Error(`${label}: bad magic ${JSON.stringify(magic)}`);
  }
  const version = src.u16("version");
  if (version !== FORMAT_VERSION) throw new Error(`${label}: unsupported version ${version}`);
  const [modality] = src.raw(2, "modality");
  const dim = src.u32("dim");
  const count = src.u64("count");
  const sourceTag = src.str("source tag");
  return { meta: { modality, dim, sourceTag } as EmbeddingMeta, count };
}

export async function readPooled(filePath: string) {
  const src = new ByteSource(await fs.readFile(filePath), filePath);
  const { meta, count } = readHeader(src, "PLYE", filePath);
  const records: PooledRecord[] = [];
  for (let i = 0; i < count; i++) {
    const id = src.str("record id");
    records.push({ id, vector: src.f32Array(meta.dim, `vector of ${id}`) });
  }
  src.done();
  return { meta, records };
}

export async function readTokens(filePath: string) {
  const src = new ByteSource(await fs.readFile(filePath), filePath);
  const { meta, count } = readHeader(src, "PLYT", filePath);
  const records: TokenRecord[] = [];
  for (let i = 0; i < count; i++) {
    const id = src.str("record id");
    const nTokens = src.u16("token count");
    const tokens: string[] = [];
    for (let t = 0; t < nTokens; t++) tokens.push(src.str("token"));
    const vectors: Float32Array[] = [];
    for (let t = 0; t < nTokens; t++) {
      vectors.push(src.f32Array(meta.dim, `vectors of ${id}`));
    }
    records.push({ id, tokens, vectors });
  }
  src.done();
  return { meta, records };
}
