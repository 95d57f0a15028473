/**
 * Deterministic counter-based random stream (SplitMix64 finalizer over
 * key + counter * golden ratio).  The u64 stream is normative and must
 * match the primary pipeline's implementation bit for bit; float
 * outputs (uniform, Box-Muller normal) are correct to f64 rounding.
 */

const MASK = (1n << 64n) - 1n;
const GOLDEN = 0x9e3779b97f4a7c15n;
const FNV_OFFSET = 0xcbf29ce484222325n;
const FNV_PRIME = 0x00000100000001b3n;

export function splitmix64(z: bigint): bigint {
  z &= MASK;
  z = ((z ^ (z >> 30n)) * 0xbf58476d1ce4e5b9n) & MASK;
  z = ((z ^ (z >> 27n)) * 0x94d049bb133111ebn) & MASK;
  return z ^ (z >> 31n);
}

export type KeyPart = string | number | bigint | Uint8Array;

/** FNV-1a over length-tagged part encodings, SplitMix64-finalized. */
export function deriveKey(...parts: KeyPart[]): bigint {
  let h = FNV_OFFSET;
  for (const part of parts) {
    let data: Uint8Array;
    if (typeof part === "string") {
      data = new TextEncoder().encode(part);
    } else if (part instanceof Uint8Array) {
      data = part;
    } else {
      const v = (typeof part === "number" ? BigInt(Math.trunc(part)) : part) & MASK;
      data = new Uint8Array(8);
      new DataView(data.buffer).setBigUint64(0, v, true);
    }
    const tagged = new Uint8Array(4 + data.length);
    new DataView(tagged.buffer).setUint32(0, data.length, true);
    tagged.set(data, 4);
    for (const b of tagged) {
      h = ((h ^ BigInt(b)) * FNV_PRIME) & MASK;
    }
  }
  return splitmix64(h);
}

export class Stream {
  key: bigint;
  counter: bigint;

  constructor(key: bigint, counter = 0n) {
    this.key = key & MASK;
    this.counter = counter;
  }

  nextU64(n: number): BigUint64Array {
    const out = new BigUint64Array(n);
    for (let i = 0; i < n; i++) {
      this.counter += 1n;
      out[i] = splitmix64((this.key + this.counter * GOLDEN) & MASK);
    }
    return out;
  }

  /** Doubles in [0, 1): top 53 bits scaled by 2^-53. */
  uniform(n: number): Float64Array {
    const raw = this.nextU64(n);
    const out = new Float64Array(n);
    for (let i = 0; i < n; i++) {
      out[i] = Number(raw[i] >> 11n) * 2 ** -53;
    }
    return out;
  }

  /** Standard normals via Box-Muller on consecutive u64 pairs. */
  normal(n: number): Float64Array {
    const m = Math.ceil(n / 2);
    const raw = this.nextU64(2 * m);
    const out = new Float64Array(2 * m);
    for (let i = 0; i < m; i++) {
      const u1 = (Number(raw[2 * i] >> 11n) + 1) * 2 ** -53;
      const u2 = Number(raw[2 * i + 1] >> 11n) * 2 ** -53;
      const r = Math.sqrt(-2 * Math.log(u1));
      const theta = 2 * Math.PI * u2;
      out[2 * i] = r * Math.cos(theta);
      out[2 * i + 1] = r * Math.sin(theta);
    }
    return out.subarray(0, n);
  }
}
