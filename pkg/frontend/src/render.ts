/** Canvas drawing. Frames render into a canvas sized exactly to the image
 * and are upscaled by CSS with image-rendering: pixelated, so every display
 * pixel is a nearest-neighbor copy of a frame pixel. */

import type { RawImage } from "./png.js";

export function rgbToRgba(rgb: Uint8Array): Uint8ClampedArray<ArrayBuffer> {
  const n = rgb.length / 3;
  const out = new Uint8ClampedArray(new ArrayBuffer(n * 4));
  for (let i = 0, j = 0; i < rgb.length; i += 3, j += 4) {
    out[j] = rgb[i];
    out[j + 1] = rgb[i + 1];
    out[j + 2] = rgb[i + 2];
    out[j + 3] = 255;
  }
  return out;
}

export function drawFrame(canvas: HTMLCanvasElement, img: RawImage): void {
  if (canvas.width !== img.width) canvas.width = img.width;
  if (canvas.height !== img.height) canvas.height = img.height;
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("canvas 2d context unavailable");
  ctx.putImageData(
    new ImageData(rgbToRgba(img.rgb), img.width, img.height), 0, 0);
}
