import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    // integration tests spawn a real `epsim serve` process
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
