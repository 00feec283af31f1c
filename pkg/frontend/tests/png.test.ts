import { readFileSync } from "node:fs";
import { describe, expect, it } from "vitest";
import { b64ToBytes, decodeB64Png, decodePng } from "../src/png.js";

interface Fixture {
  png_b64: string;
  rgb_b64: string;
  width: number;
  height: number;
}

const fixtures: Record<string, Fixture> = JSON.parse(
  readFileSync(new URL("./fixtures/png_frames.json", import.meta.url), "utf8"));

describe("png decoder", () => {
  it("has frames to check against", () => {
    expect(Object.keys(fixtures).length).toBeGreaterThanOrEqual(3);
  });

  it("decodes service-encoded frames to the exact pixel bytes", async () => {
    for (const [name, f] of Object.entries(fixtures)) {
      const img = await decodeB64Png(f.png_b64);
      expect(img.width, name).toBe(f.width);
      expect(img.height, name).toBe(f.height);
      const want = b64ToBytes(f.rgb_b64);
      expect(img.rgb.length, name).toBe(want.length);
      expect(Buffer.from(img.rgb).equals(Buffer.from(want)), name).toBe(true);
    }
  });

  it("rejects non-PNG bytes", async () => {
    await expect(decodePng(new Uint8Array([1, 2, 3, 4])))
      .rejects.toThrow(/png/);
  });

  it("rejects truncated streams", async () => {
    const whole = b64ToBytes(fixtures.oracle.png_b64);
    const cut = whole.slice(0, Math.floor(whole.length / 2));
    await expect(decodePng(cut)).rejects.toThrow();
  });
});
