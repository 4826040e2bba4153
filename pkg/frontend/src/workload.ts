/**
 * Deterministic workload builders for driving the service.
 *
 * Values are chosen so a dispatch/combine round trip with identity experts
 * is exact in f32: token components are small integers and top-k weights are
 * 1/K with K a power of two, so every partial sum the engines form is
 * representable.
 */

import type { NDArray } from "./client.js";

export interface Workload {
  /** [rank][token][k] expert ids, distinct within each token. */
  routing: number[][][];
  /** [rank][token][hidden] integer-valued f32 payloads. */
  tokens: number[][][];
  /** [rank][token][k] weights, each 1/K. */
  weights: number[][][];
}

export interface WorkloadShape {
  ranks: number;
  tokens: number;
  experts: number;
  topk: number;
  hidden: number;
}

export function makeWorkload(shape: WorkloadShape): Workload {
  const { ranks, tokens, experts, topk, hidden } = shape;
  if (topk > experts) throw new Error(`topk ${topk} > experts ${experts}`);
  const routing: number[][][] = [];
  const payload: number[][][] = [];
  const weights: number[][][] = [];
  for (let r = 0; r < ranks; r++) {
    const rRouting: number[][] = [];
    const rTokens: number[][] = [];
    const rWeights: number[][] = [];
    for (let t = 0; t < tokens; t++) {
      // consecutive ids from a moving base: distinct for any topk <= experts
      const base = (r * tokens + t) % experts;
      rRouting.push(
        Array.from({ length: topk }, (_, k) => (base + k) % experts),
      );
      rTokens.push(
        Array.from(
          { length: hidden },
          (_, h) => ((r * 131 + t * 17 + h * 3) % 1024) - 512,
        ),
      );
      rWeights.push(Array.from({ length: topk }, () => 1 / topk));
    }
    routing.push(rRouting);
    payload.push(rTokens);
    weights.push(rWeights);
  }
  return { routing, tokens: payload, weights };
}

export function deepEqual(a: NDArray, b: NDArray): boolean {
  if (Array.isArray(a) && Array.isArray(b)) {
    if (a.length !== b.length) return false;
    return a.every((v, i) => deepEqual(v, b[i]));
  }
  return a === b;
}

/** Count scalar positions where the two arrays differ. */
export function countMismatches(a: NDArray, b: NDArray): number {
  if (Array.isArray(a) && Array.isArray(b)) {
    if (a.length !== b.length) return Math.max(a.length, b.length);
    return a.reduce<number>((n, v, i) => n + countMismatches(v, b[i]), 0);
  }
  return a === b ? 0 : 1;
}
