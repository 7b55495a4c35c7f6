/**
 * Deterministic pseudo-random numbers for fixture generation.
 *
 * mulberry32 runs entirely on 32-bit integer operations (Math.imul,
 * unsigned shifts), so the stream is bit-identical on every platform and
 * JS engine. That is what makes generated fixtures byte-reproducible.
 */

/** A generator of uniform floats in [0, 1) from a 32-bit seed. */
export function mulberry32(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state + 0x6d2b79f5) >>> 0;
    let t = state;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

/** n uniform draws from [lo, hi), quantized to exact float32 values. */
export function uniformArray(
  rng: () => number,
  n: number,
  lo: number,
  hi: number,
): Float32Array {
  const out = new Float32Array(n);
  for (let i = 0; i < n; i++) {
    out[i] = lo + (hi - lo) * rng();
  }
  return out;
}
