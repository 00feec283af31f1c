/** Minimal PNG reader for the server's frame payloads: 8-bit RGB or RGBA,
 * non-interlaced. Inflation uses the platform DecompressionStream, so the
 * module works in browsers and in Node without dependencies, and decoding is
 * exact; the pixels drawn are bit-for-bit what the server encoded. */

export interface RawImage {
  width: number;
  height: number;
  /** Tightly packed RGB, row-major. */
  rgb: Uint8Array;
}

const SIGNATURE = [137, 80, 78, 71, 13, 10, 26, 10];

export function b64ToBytes(b64: string): Uint8Array {
  const bin = atob(b64);
  const out = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
  return out;
}

interface Chunk {
  type: string;
  data: Uint8Array;
}

function* chunks(bytes: Uint8Array): Generator<Chunk> {
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  let off = SIGNATURE.length;
  while (off + 8 <= bytes.length) {
    const len = view.getUint32(off);
    const type = String.fromCharCode(...bytes.subarray(off + 4, off + 8));
    yield { type, data: bytes.subarray(off + 8, off + 8 + len) };
    off += 12 + len; // length + type + data + crc
    if (type === "IEND") return;
  }
  throw new Error("png: truncated chunk stream");
}

async function inflate(data: Uint8Array): Promise<Uint8Array> {
  // IDAT is zlib-wrapped deflate
  const stream = new Blob([data as BlobPart]).stream()
    .pipeThrough(new DecompressionStream("deflate"));
  return new Uint8Array(await new Response(stream).arrayBuffer());
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  return pb <= pc ? b : c;
}

/** Undo per-scanline filtering in place; returns packed pixel rows. */
function defilter(raw: Uint8Array, width: number, height: number,
                  bpp: number): Uint8Array {
  const stride = width * bpp;
  const out = new Uint8Array(stride * height);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (stride + 1)];
    const row = raw.subarray(y * (stride + 1) + 1, (y + 1) * (stride + 1));
    const cur = y * stride;
    const prev = cur - stride;
    for (let x = 0; x < stride; x++) {
      const left = x >= bpp ? out[cur + x - bpp] : 0;
      const up = y > 0 ? out[prev + x] : 0;
      const upLeft = y > 0 && x >= bpp ? out[prev + x - bpp] : 0;
      let v = row[x];
      switch (filter) {
        case 0: break;
        case 1: v += left; break;
        case 2: v += up; break;
        case 3: v += (left + up) >> 1; break;
        case 4: v += paeth(left, up, upLeft); break;
        default: throw new Error(`png: unknown filter ${filter}`);
      }
      out[cur + x] = v & 0xff;
    }
  }
  return out;
}

export async function decodePng(bytes: Uint8Array): Promise<RawImage> {
  if (bytes.length < 8 || SIGNATURE.some((v, i) => bytes[i] !== v)) {
    throw new Error("png: bad signature");
  }
  let width = 0;
  let height = 0;
  let colorType = -1;
  const idat: Uint8Array[] = [];
  for (const c of chunks(bytes)) {
    if (c.type === "IHDR") {
      const v = new DataView(c.data.buffer, c.data.byteOffset);
      width = v.getUint32(0);
      height = v.getUint32(4);
      const bitDepth = c.data[8];
      colorType = c.data[9];
      const interlace = c.data[12];
      if (bitDepth !== 8) throw new Error(`png: bit depth ${bitDepth}`);
      if (colorType !== 2 && colorType !== 6) {
        throw new Error(`png: color type ${colorType}, want RGB or RGBA`);
      }
      if (interlace !== 0) throw new Error("png: interlaced");
    } else if (c.type === "IDAT") {
      idat.push(c.data);
    }
  }
  if (!width || !height || !idat.length) throw new Error("png: no image data");
  const zdata = new Uint8Array(idat.reduce((n, d) => n + d.length, 0));
  let off = 0;
  for (const d of idat) {
    zdata.set(d, off);
    off += d.length;
  }
  const bpp = colorType === 6 ? 4 : 3;
  const raw = await inflate(zdata);
  if (raw.length !== height * (width * bpp + 1)) {
    throw new Error("png: wrong decompressed size");
  }
  const pixels = defilter(raw, width, height, bpp);
  if (bpp === 3) return { width, height, rgb: pixels };
  const rgb = new Uint8Array(width * height * 3);
  for (let i = 0, j = 0; i < pixels.length; i += 4, j += 3) {
    rgb[j] = pixels[i];
    rgb[j + 1] = pixels[i + 1];
    rgb[j + 2] = pixels[i + 2];
  }
  return { width, height, rgb };
}

export async function decodeB64Png(b64: string): Promise<RawImage> {
  return decodePng(b64ToBytes(b64));
}
