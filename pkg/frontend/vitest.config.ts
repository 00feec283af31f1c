import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    environment: "node",
    // the acceptance test boots the real inference server (slow torch import)
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
