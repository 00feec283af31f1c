import { readFileSync } from "node:fs";
import { describe, expect, it } from "vitest";
import { b64ToBytes } from "../src/png.js";
import { PSNR_CAP, psnr } from "../src/psnr.js";

interface Case {
  name: string;
  a_b64: string;
  b_b64: string;
  psnr: number;
}

const cases: Case[] = JSON.parse(
  readFileSync(new URL("./fixtures/psnr_cases.json", import.meta.url), "utf8"));

describe("psnr", () => {
  it("matches the service metric on reference pairs", () => {
    // the on-screen number must agree with the service to 0.01 dB; the
    // implementations are identical so the real gap is float noise
    for (const c of cases) {
      const got = psnr(b64ToBytes(c.a_b64), b64ToBytes(c.b_b64));
      expect(Math.abs(got - c.psnr), c.name).toBeLessThan(1e-9);
      expect(Math.abs(got - c.psnr), c.name).toBeLessThan(0.01);
    }
  });

  it("caps identical images", () => {
    const a = new Uint8Array([0, 128, 255, 7]);
    expect(psnr(a, a.slice())).toBe(PSNR_CAP);
  });

  it("rejects mismatched or empty buffers", () => {
    expect(() => psnr(new Uint8Array(3), new Uint8Array(4))).toThrow();
    expect(() => psnr(new Uint8Array(0), new Uint8Array(0))).toThrow();
  });
});
