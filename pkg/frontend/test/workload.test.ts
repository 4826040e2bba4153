import { describe, expect, it } from "vitest";

import { countMismatches, deepEqual, makeWorkload } from "../src/workload.js";

const SHAPE = { ranks: 4, tokens: 8, experts: 16, topk: 3, hidden: 5 };

describe("makeWorkload", () => {
  it("routes every token to distinct in-range experts", () => {
    const wl = makeWorkload(SHAPE);
    expect(wl.routing).toHaveLength(SHAPE.ranks);
    for (const rank of wl.routing) {
      expect(rank).toHaveLength(SHAPE.tokens);
      for (const picks of rank) {
        expect(picks).toHaveLength(SHAPE.topk);
        expect(new Set(picks).size).toBe(SHAPE.topk);
        for (const e of picks) {
          expect(e).toBeGreaterThanOrEqual(0);
          expect(e).toBeLessThan(SHAPE.experts);
        }
      }
    }
  });

  it("emits integer token payloads within f32-exact range", () => {
    const wl = makeWorkload(SHAPE);
    for (const rank of wl.tokens) {
      for (const row of rank) {
        expect(row).toHaveLength(SHAPE.hidden);
        for (const v of row) {
          expect(Number.isInteger(v)).toBe(true);
          expect(Math.abs(v)).toBeLessThanOrEqual(512);
        }
      }
    }
  });

  it("weights each expert 1/K", () => {
    const wl = makeWorkload(SHAPE);
    for (const rank of wl.weights) {
      for (const row of rank) {
        for (const w of row) expect(w).toBe(1 / SHAPE.topk);
      }
    }
  });

  it("is deterministic", () => {
    expect(makeWorkload(SHAPE)).toEqual(makeWorkload(SHAPE));
  });

  it("rejects topk wider than the expert pool", () => {
    expect(() => makeWorkload({ ...SHAPE, topk: 17 })).toThrow(/topk/);
  });
});

describe("deepEqual / countMismatches", () => {
  it("matches identical nests", () => {
    expect(deepEqual([[1, 2], [3]], [[1, 2], [3]])).toBe(true);
    expect(countMismatches([[1, 2], [3]], [[1, 2], [3]])).toBe(0);
  });

  it("counts scalar differences", () => {
    expect(deepEqual([1, 2, 3], [1, 5, 3])).toBe(false);
    expect(countMismatches([[1, 2], [3, 4]], [[1, 9], [8, 4]])).toBe(2);
  });

  it("flags shape differences", () => {
    expect(deepEqual([1, 2], [1, 2, 3])).toBe(false);
    expect(countMismatches([1], [1, 2, 3])).toBe(3);
  });
});
