import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "node",
    include: ["tests/**/*.test.ts"],
    // e2e spawns a paced simulation host and waits for it to finish
    testTimeout: 60_000,
    hookTimeout: 60_000,
  },
});
