/** Peak signal-to-noise ratio between equal-shape byte images, matching the
 * backend metric: 10 log10(255^2 / MSE), capped at 99 dB for identical
 * inputs. Squared differences are summed in doubles, so the MSE is exact and
 * the value agrees with the server far inside the 0.01 dB display budget. */

export const PSNR_CAP = 99;

export function psnr(a: Uint8Array, b: Uint8Array): number {
  if (a.length !== b.length) {
    throw new Error(`psnr: length mismatch ${a.length} vs ${b.length}`);
  }
  if (a.length === 0) throw new Error("psnr: empty input");
  let sum = 0;
  for (let i = 0; i < a.length; i++) {
    const d = a[i] - b[i];
    sum += d * d;
  }
  if (sum === 0) return PSNR_CAP;
  const mse = sum / a.length;
  return Math.min(10 * Math.log10((255 * 255) / mse), PSNR_CAP);
}
