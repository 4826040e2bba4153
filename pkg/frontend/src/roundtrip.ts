/**
 * Round-trip example: drive a live epsim server end to end.
 *
 * 1. Run an 8-rank low-latency dispatch/combine with identity experts and
 *    check every rank gets its tokens back bit-exactly.
 * 2. Fetch a stats CSV from the service and check it is byte-identical to
 *    what the native `epsim run` CLI prints for the same job and seed.
 *
 * `npm run roundtrip` executes both against a freshly spawned `epsim serve`
 * and prints PASS or FAIL.
 */

import { execFile } from "node:child_process";
import { pathToFileURL } from "node:url";
import { promisify } from "node:util";

import {
  EpClient,
  type JobConfig,
  type Mode,
  type NDArray,
} from "./client.js";
import { startServer } from "./server.js";
import { countMismatches, makeWorkload } from "./workload.js";

const execFileP = promisify(execFile);

export interface RoundtripOptions {
  mode?: Mode;
  ranks?: number;
  ranksPerNode?: number;
  experts?: number;
  tokens?: number;
  hidden?: number;
  topk?: number;
}

export interface RoundtripReport {
  pass: boolean;
  ranks: number;
  mismatches: number;
  recvTokens: number[];
}

/**
 * Dispatch integer tokens, apply identity experts by echoing the received
 * rows back, combine with 1/K weights, and count scalar mismatches against
 * the original tokens (zero when exact).
 */
export async function identityRoundtrip(
  client: EpClient,
  opts: RoundtripOptions = {},
): Promise<RoundtripReport> {
  const mode = opts.mode ?? "ll";
  const shape = {
    ranks: opts.ranks ?? 8,
    tokens: opts.tokens ?? 16,
    experts: opts.experts ?? 32,
    topk: opts.topk ?? 2,
    hidden: opts.hidden ?? 32,
  };
  const config: JobConfig = {
    mode,
    ranks: shape.ranks,
    ranks_per_node: opts.ranksPerNode ?? shape.ranks,
    experts: shape.experts,
    tokens: shape.tokens,
    hidden: shape.hidden,
    topk: shape.topk,
  };
  const wl = makeWorkload(shape);

  const session = await client.createSession(config);
  try {
    const handle = await session.createHandle(wl.routing);
    const dispatched = await handle.dispatch(wl.tokens, {
      weights: mode === "ht" ? wl.weights : undefined,
    });
    if (dispatched.recv === null || dispatched.recv_tokens === null) {
      throw new Error("dispatch returned no rows");
    }
    // identity experts: received rows go back unchanged
    const combined = await handle.combine(dispatched.recv, wl.weights);
    if (combined.tokens === null) throw new Error("combine returned no rows");
    let mismatches = 0;
    for (let r = 0; r < shape.ranks; r++) {
      mismatches += countMismatches(
        combined.tokens[r],
        wl.tokens[r] as NDArray,
      );
    }
    await handle.destroy();
    return {
      pass: mismatches === 0,
      ranks: shape.ranks,
      mismatches,
      recvTokens: dispatched.recv_tokens,
    };
  } finally {
    await session.close();
  }
}

export interface CsvCheck {
  match: boolean;
  serviceCsv: string;
  nativeCsv: string;
}

function jobArgs(job: JobConfig, iters: number, seed: number): string[] {
  const args = ["run", "--iters", String(iters), "--seed", String(seed)];
  if (job.mode) args.push("--mode", job.mode);
  if (job.layout) args.push("--layout", job.layout);
  if (job.ranks !== undefined) args.push("--ranks", String(job.ranks));
  if (job.ranks_per_node != null)
    args.push("--ranks-per-node", String(job.ranks_per_node));
  if (job.experts !== undefined) args.push("--experts", String(job.experts));
  if (job.tokens !== undefined) args.push("--tokens", String(job.tokens));
  if (job.hidden !== undefined) args.push("--hidden", String(job.hidden));
  if (job.topk !== undefined) args.push("--topk", String(job.topk));
  if (job.dtype) args.push("--dtype", job.dtype);
  if (job.scales) args.push("--scales");
  return args;
}

/**
 * Fetch the stats CSV for a job over HTTP and compare it byte for byte with
 * the native CLI's stdout for the same job and seed.
 */
export async function csvMatchesNative(
  client: EpClient,
  job: JobConfig,
  iters = 2,
  seed = 42,
): Promise<CsvCheck> {
  const [viaService, viaCli] = await Promise.all([
    client.run({ config: job, iters, seed }),
    execFileP("epsim", jobArgs(job, iters, seed)),
  ]);
  return {
    match: viaService.csv === viaCli.stdout,
    serviceCsv: viaService.csv,
    nativeCsv: viaCli.stdout,
  };
}

export async function main(): Promise<number> {
  const server = await startServer();
  try {
    const client = new EpClient(server.url);
    const health = await client.health();
    console.log(`server up (version ${health.version})`);

    const rt = await identityRoundtrip(client, { ranks: 8, ranksPerNode: 4 });
    console.log(
      `identity roundtrip: ${rt.ranks} ranks, ` +
        `${rt.recvTokens.reduce((a, b) => a + b, 0)} expert rows, ` +
        `${rt.mismatches} mismatches`,
    );

    const job: JobConfig = {
      mode: "ll",
      ranks: 8,
      ranks_per_node: 4,
      experts: 32,
      tokens: 16,
      hidden: 32,
      topk: 2,
    };
    const csv = await csvMatchesNative(client, job);
    console.log(
      `stats csv: service ${csv.serviceCsv.length} bytes, ` +
        `native ${csv.nativeCsv.length} bytes, ` +
        (csv.match ? "identical" : "DIFFERENT"),
    );

    const ok = rt.pass && csv.match;
    console.log(ok ? "PASS" : "FAIL");
    return ok ? 0 : 1;
  } finally {
    await server.stop();
  }
}

const invokedDirectly =
  process.argv[1] !== undefined &&
  import.meta.url === pathToFileURL(process.argv[1]).href;

if (invokedDirectly) {
  main().then(
    (code) => process.exit(code),
    (err) => {
      console.error(err);
      process.exit(1);
    },
  );
}
