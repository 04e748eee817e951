import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    // every test spawns real daemons and does network round trips
    testTimeout: 60000,
    hookTimeout: 60000,
    pool: "forks",
  },
});
