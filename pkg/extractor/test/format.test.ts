import { mkdtempSync, readFileSync } from "node:fs";
import { tmpdir } from "node:os";
import path from "node:path";

import { describe, expect, it } from "vitest";

import {
  MODALITY_STRUCTURE,
  MODALITY_TEXT,
  readPooled,
  readTokens,
  writePooled,
  writeTokens,
} from "../src/format.js";

const dir = mkdtempSync(path.join(tmpdir(), "plye-"));

describe("PLYE/PLYT format", () => {
  it("writes a 22-byte header for an empty pooled file with empty tag", async () => {
    const out = path.join(dir, "empty.plye");
    await writePooled(out, { modality: MODALITY_TEXT, dim: 4, sourceTag: "" }, []);
    expect(readFileSync(out).length).toBe(22);
  });

  it("round-trips pooled records exactly", async () => {
    const out = path.join(dir, "m.plye");
    const meta = { modality: MODALITY_STRUCTURE, dim: 3, sourceTag: "mock" };
    const records = [
      { id: "a", vector: Float32Array.from([1.5, -2.25, 0.125]) },
      { id: "b", vector: Float32Array.from([0, 3.5, -1]) },
    ];
    await writePooled(out, meta, records);
    const back = await readPooled(out);
    expect(back.meta).toEqual(meta);
    expect(back.records.map((r) => r.id)).toEqual(["a", "b"]);
    expect(Array.from(back.records[0].vector)).toEqual([1.5, -2.25, 0.125]);
  });

  it("round-trips token records exactly", async () => {
    const out = path.join(dir, "t.plyt");
    const meta = { modality: MODALITY_TEXT, dim: 2, sourceTag: "" };
    const records = [
      {
        id: "p",
        tokens: ["[*]", "C"],
        vectors: [Float32Array.from([1, 2]), Float32Array.from([3, 4])],
      },
    ];
    await writeTokens(out, meta, records);
    const back = await readTokens(out);
    expect(back.records[0].tokens).toEqual(["[*]", "C"]);
    expect(Array.from(back.records[0].vectors[1])).toEqual([3, 4]);
  });

  it("is byte-deterministic", async () => {
    const meta = { modality: MODALITY_TEXT, dim: 2, sourceTag: "x" };
    const records = [{ id: "a", vector: Float32Array.from([1, 2]) }];
    const one = path.join(dir, "one.plye");
    const two = path.join(dir, "two.plye");
    await writePooled(one, meta, records);
    await writePooled(two, meta, records);
    expect(readFileSync(one)).toEqual(readFileSync(two));
  });

  it("rejects non-finite payloads and bad shapes", async () => {
    const out = path.join(dir, "bad.plye");
    await expect(
      writePooled(out, { modality: MODALITY_TEXT, dim: 2, sourceTag: "" }, [
        { id: "a", vector: Float32Array.from([1, NaN]) },
      ])
    ).rejects.toThrow(/non-finite/);
    await expect(
      writePooled(out, { modality: MODALITY_TEXT, dim: 3, sourceTag: "" }, [
        { id: "a", vector: Float32Array.from([1, 2]) },
      ])
    ).rejects.toThrow(/length/);
  });
});
