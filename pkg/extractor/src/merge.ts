/**
 * Alignment of raw subword tokens onto refined target tokens by byte
 * spans, with fractional membership when a raw token straddles a
 * target boundary.  Vector merging takes the weighted mean of member
 * rows, matching the primary pipeline's embedding-merge convention.
 */

export type Group = Array<{ index: number; weight: number }>;

export function buildMergeMap(rawTokens: string[], targetTokens: string[]): Group[] {
  const rawCat = rawTokens.join("");
  const tgtCat = targetTokens.join("");
  if (rawCat !== tgtCat) {
    let offset = 0;
    const limit = Math.min(rawCat.length, tgtCat.length);
    while (offset < limit && rawCat[offset] === tgtCat[offset]) offset++;
    throw new Error(`merge alignment impossible: texts differ at offset ${offset}`);
  }
  const groups: Group[] = [];
  let cursor = 0;
  let ri = 0;
  let rawStart = 0;
  for (const target of targetTokens) {
    const end = cursor + target.length;
    const group: Group = [];
    while (cursor < end) {
      const rawEnd = rawStart + rawTokens[ri].length;
      const covered = Math.min(end, rawEnd) - cursor;
      group.push({ index: ri, weight: covered / rawTokens[ri].length });
      cursor += covered;
      if (cursor >= rawEnd) {
        rawStart = rawEnd;
        ri += 1;
      }
    }
    groups.push(group);
  }
  return groups;
}

/** Weighted mean of member vectors per group, accumulated in f64. */
export function mergeVectors(vectors: Float64Array[], groups: Group[]): Float64Array[] {
  if (vectors.length === 0) throw new Error("no vectors to merge");
  const dim = vectors[0].length;
  return groups.map((group) => {
    const out = new Float64Array(dim);
    let total = 0;
    for (const { index, weight } of group) {
      const row = vectors[index];
      for (let d = 0; d < dim; d++) out[d] += weight * row[d];
      total += weight;
    }
    for (let d = 0; d < dim; d++) out[d] /= total;
    return out;
  });
}

/** Arithmetic mean over f32 rows, accumulated in f64. */
export function meanPool(rows: Float32Array[]): Float64Array {
  const dim = rows[0].length;
  const out = new Float64Array(dim);
  for (const row of rows) {
    for (let d = 0; d < dim; d++) out[d] += row[d];
  }
  for (let d = 0; d < dim; d++) out[d] /= rows.length;
  return out;
}

export function toF32(v: Float64Array): Float32Array {
  return Float32Array.from(v);
}
