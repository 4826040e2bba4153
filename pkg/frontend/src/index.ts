export {
  EpClient,
  EpHandle,
  EpServiceError,
  EpSession,
} from "./client.js";
export type {
  CombineResult,
  CompleteResult,
  DispatchResult,
  DtypeName,
  ExpertName,
  FootprintRequest,
  FootprintResponse,
  HandleInfo,
  HandleStats,
  JobConfig,
  Layout,
  LayoutBytes,
  Mode,
  NDArray,
  RunRequest,
  RunResponse,
  SessionInfo,
  StatsDict,
  VerifyRequest,
  VerifyResponse,
} from "./client.js";
export { startServer, type ServerHandle } from "./server.js";
export {
  csvMatchesNative,
  identityRoundtrip,
  type CsvCheck,
  type RoundtripOptions,
  type RoundtripReport,
} from "./roundtrip.js";
export {
  countMismatches,
  deepEqual,
  makeWorkload,
  type Workload,
  type WorkloadShape,
} from "./workload.js";
