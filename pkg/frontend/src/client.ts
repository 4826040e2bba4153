/**
 * Typed client for the epsim HTTP service.
 *
 * Wire field names match the service's JSON (snake_case); tensors travel as
 * nested number arrays in numpy `tolist()` form.
 */

export type Mode = "ll" | "ht";
export type Layout = "optimized" | "legacy";
export type DtypeName = "f32" | "bf16" | "f16" | "fp8";
export type ExpertName = "identity" | "scale" | "affine";

/** Nested float arrays, arbitrary depth. */
export type NDArray = number | NDArray[];

/** Per-op fabric counters; keys vary slightly between the two engines. */
export type StatsDict = Record<string, number | string>;

export interface JobConfig {
  mode?: Mode;
  layout?: Layout;
  ranks?: number;
  ranks_per_node?: number | null;
  experts?: number;
  tokens?: number;
  hidden?: number;
  topk?: number;
  dtype?: DtypeName;
  scales?: boolean;
}

export interface RunRequest {
  config?: JobConfig;
  iters?: number;
  seed?: number;
  expert?: ExpertName;
  send_only?: boolean;
  trace?: boolean;
}

export interface RunResponse {
  ok: boolean;
  columns: string[];
  rows: (string | number)[][];
  csv: string;
  failures: string[];
  trace_lines: string[] | null;
}

export interface VerifyRequest {
  modes?: Mode[];
  ranks?: number[];
  node_counts?: number[];
  experts?: number[];
  tokens?: number[];
  topks?: number[];
  layouts?: Layout[];
  staged?: boolean[];
  delay_seeds?: number[];
  hidden?: number;
  stop_on_first?: boolean;
}

export interface VerifyResponse {
  ok: boolean;
  cases: number;
  failures: string[];
}

export interface FootprintRequest {
  experts?: number;
  ranks?: number;
  topk?: number;
  hidden?: number;
  tokens?: number;
  ranks_per_node?: number | null;
  dtype?: DtypeName;
  scales?: boolean;
  measured?: boolean;
}

export interface LayoutBytes {
  dispatch_bytes: number;
  combine_bytes: number;
  coordination_bytes: number;
  total: number;
  total_with_coordination: number;
}

export interface FootprintResponse {
  formula_ratio: number;
  geometry_ratio: number;
  legacy: LayoutBytes;
  optimized: LayoutBytes;
  measured: { legacy: number; optimized: number; ratio: number } | null;
}

export interface SessionInfo {
  session_id: string;
  ranks: number;
  mode: string;
  layout: string;
  buffer_bytes: number;
}

export interface HandleInfo {
  handle_id: string;
  /** Expert-side row counts per rank; known at creation for ht only. */
  recv_tokens: number[] | null;
}

export interface DispatchResult {
  staged: boolean;
  /** Per rank: ll `[slot][row][hidden]`, ht `[row][hidden]`. */
  recv: NDArray[] | null;
  counts: NDArray[] | null;
  recv_tokens: number[] | null;
  stats: StatsDict[] | null;
}

export interface CombineResult {
  staged: boolean;
  /** Per rank: `[token][hidden]`. */
  tokens: NDArray[] | null;
  stats: StatsDict[] | null;
}

export interface CompleteResult {
  op: "dispatch" | "combine";
  recv: NDArray[] | null;
  counts: NDArray[] | null;
  recv_tokens: number[] | null;
  tokens: NDArray[] | null;
  stats: StatsDict[] | null;
}

export interface HandleStats {
  state: string;
  dispatch: (StatsDict | null)[];
  combine: (StatsDict | null)[];
}

/** Error payload from the service, carrying the library's error code. */
export class EpServiceError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    readonly detail: string,
  ) {
    super(`${code}: ${detail}`);
    this.name = "EpServiceError";
  }
}

export class EpClient {
  private readonly base: string;

  constructor(baseUrl: string) {
    this.base = baseUrl.replace(/\/+$/, "");
  }

  async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const res = await fetch(this.base + path, {
      method,
      headers:
        body === undefined ? undefined : { "content-type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const text = await res.text();
    let payload: unknown = null;
    try {
      payload = text ? JSON.parse(text) : null;
    } catch {
      payload = null;
    }
    if (!res.ok) {
      const err = payload as { code?: string; detail?: unknown } | null;
      const detail = err?.detail ?? text;
      throw new EpServiceError(
        res.status,
        err?.code ?? `http ${res.status}`,
        typeof detail === "string" ? detail : JSON.stringify(detail),
      );
    }
    return payload as T;
  }

  health(): Promise<{ status: string; version: string }> {
    return this.request("GET", "/healthz");
  }

  run(req: RunRequest = {}): Promise<RunResponse> {
    return this.request("POST", "/v1/run", req);
  }

  verify(req: VerifyRequest = {}): Promise<VerifyResponse> {
    return this.request("POST", "/v1/verify", req);
  }

  footprint(req: FootprintRequest = {}): Promise<FootprintResponse> {
    return this.request("POST", "/v1/footprint", req);
  }

  async createSession(config: JobConfig = {}, seed = 0): Promise<EpSession> {
    const info = await this.request<SessionInfo>("POST", "/v1/sessions", {
      config,
      seed,
    });
    return new EpSession(this, info);
  }
}

/**
 * One server-side session: a fabric plus one group per simulated rank.
 * Every call steps all ranks in lockstep, so tensor arguments are rank-major
 * (`tokens[rank][token][hidden]`, `routing[rank][token][k]`, ...).
 */
export class EpSession {
  constructor(
    private readonly client: EpClient,
    readonly info: SessionInfo,
  ) {}

  get id(): string {
    return this.info.session_id;
  }

  async createHandle(routing: number[][][]): Promise<EpHandle> {
    const info = await this.client.request<HandleInfo>(
      "POST",
      `/v1/sessions/${this.id}/handles`,
      { routing },
    );
    return new EpHandle(this.client, this.id, info);
  }

  /** Refuses while the session still owns handles. */
  close(): Promise<{ closed: string }> {
    return this.client.request("DELETE", `/v1/sessions/${this.id}`);
  }
}

export class EpHandle {
  constructor(
    private readonly client: EpClient,
    readonly sessionId: string,
    readonly info: HandleInfo,
  ) {}

  get id(): string {
    return this.info.handle_id;
  }

  private path(tail: string): string {
    return `/v1/sessions/${this.sessionId}/handles/${this.id}${tail}`;
  }

  dispatch(
    tokens: number[][][],
    opts: { weights?: number[][][]; sendOnly?: boolean } = {},
  ): Promise<DispatchResult> {
    return this.client.request("POST", this.path("/dispatch"), {
      tokens,
      weights: opts.weights ?? null,
      send_only: opts.sendOnly ?? false,
    });
  }

  combine(
    expertRows: NDArray[],
    weights: number[][][],
    opts: { sendOnly?: boolean } = {},
  ): Promise<CombineResult> {
    return this.client.request("POST", this.path("/combine"), {
      expert_rows: expertRows,
      weights,
      send_only: opts.sendOnly ?? false,
    });
  }

  complete(): Promise<CompleteResult> {
    return this.client.request("POST", this.path("/complete"));
  }

  recvTokens(): Promise<{ recv_tokens: number[] }> {
    return this.client.request("GET", this.path("/recv_tokens"));
  }

  stats(): Promise<HandleStats> {
    return this.client.request("GET", this.path("/stats"));
  }

  destroy(): Promise<{ destroyed: string }> {
    return this.client.request("DELETE", this.path(""));
  }
}
