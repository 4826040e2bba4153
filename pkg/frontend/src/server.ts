/** Launch `epsim serve` as a child process and wait until it answers. */

import { spawn, type ChildProcess } from "node:child_process";
import { setTimeout as sleep } from "node:timers/promises";

export interface ServerHandle {
  url: string;
  stop(): Promise<void>;
}

function randomPort(): number {
  return 20000 + Math.floor(Math.random() * 20000);
}

export async function startServer(
  port: number = randomPort(),
  timeoutMs = 60_000,
): Promise<ServerHandle> {
  const url = `http://127.0.0.1:${port}`;
  const child: ChildProcess = spawn(
    "epsim",
    ["serve", "--host", "127.0.0.1", "--port", String(port)],
    { stdio: ["ignore", "ignore", "pipe"] },
  );
  let stderr = "";
  child.stderr?.on("data", (chunk) => {
    stderr += String(chunk);
  });
  let exited = false;
  child.on("exit", () => {
    exited = true;
  });

  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    if (exited) {
      throw new Error(`epsim serve exited during startup:\n${stderr}`);
    }
    try {
      const res = await fetch(`${url}/healthz`);
      if (res.ok) break;
    } catch {
      // not listening yet
    }
    await sleep(100);
  }
  if (Date.now() >= deadline) {
    child.kill("SIGKILL");
    throw new Error(`epsim serve did not come up within ${timeoutMs}ms`);
  }

  return {
    url,
    stop: async () => {
      if (exited) return;
      const gone = new Promise<void>((resolve) => {
        child.on("exit", () => resolve());
      });
      child.kill("SIGTERM");
      const result = await Promise.race([
        gone.then(() => "exited" as const),
        sleep(5_000).then(() => "timeout" as const),
      ]);
      if (result === "timeout") {
        child.kill("SIGKILL");
        await gone;
      }
    },
  };
}
