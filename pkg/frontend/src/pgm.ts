/** Parser for binary PGM (P5, maxval 255) payloads served by the backend. */

export interface PgmImage {
  width: number;
  height: number;
  /** row-major, one byte per pixel */
  pixels: Uint8ClampedArray;
}

export function parsePgm(bytes: Uint8Array): PgmImage {
  if (bytes.length < 2 || bytes[0] !== 0x50 || bytes[1] !== 0x35) {
    throw new Error("not a binary PGM (P5) payload");
  }
  const tokens: string[] = [];
  let i = 2;
  while (tokens.length < 3) {
    while (i < bytes.length && isSpace(bytes[i]!)) i++;
    if (i < bytes.length && bytes[i] === 0x23) {
      // '#' comment runs to end of line
      while (i < bytes.length && bytes[i] !== 0x0a) i++;
      continue;
    }
    const start = i;
    while (i < bytes.length && !isSpace(bytes[i]!)) i++;
    if (i === start) throw new Error("malformed PGM header");
    tokens.push(String.fromCharCode(...bytes.subarray(start, i)));
  }
  i++; // single whitespace after maxval
  const width = parseInt(tokens[0]!, 10);
  const height = parseInt(tokens[1]!, 10);
  const maxval = parseInt(tokens[2]!, 10);
  if (!Number.isFinite(width) || !Number.isFinite(height) || width <= 0 || height <= 0) {
    throw new Error("malformed PGM dimensions");
  }
  if (maxval !== 255) throw new Error(`unsupported PGM maxval ${maxval}`);
  const need = width * height;
  if (bytes.length - i < need) throw new Error("truncated PGM payload");
  return { width, height, pixels: new Uint8ClampedArray(bytes.subarray(i, i + need)) };
}

function isSpace(b: number): boolean {
  return b === 0x20 || b === 0x09 || b === 0x0a || b === 0x0d;
}

/** Expand a grayscale PGM into RGBA for a canvas ImageData buffer. */
export function pgmToRgba(img: PgmImage): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(new ArrayBuffer(img.width * img.height * 4));
  for (let p = 0; p < img.pixels.length; p++) {
    const v = img.pixels[p]!;
    out[p * 4] = v;
    out[p * 4 + 1] = v;
    out[p * 4 + 2] = v;
    out[p * 4 + 3] = 255;
  }
  return out;
}
