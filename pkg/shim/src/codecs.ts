/**
 * Binary payload codecs for the provider wire protocol: lossless 8-bit RGB
 * PNG for images and 32-bit float PFM (grayscale, little-endian,
 * bottom-to-top rows) for depth maps.
 */

import { PNG } from "pngjs";

export interface RgbImage {
  width: number;
  height: number;
  /** row-major RGB triples in [0, 1], length = width * height * 3 */
  data: Float64Array;
}

export function decodePngBase64(b64: string): RgbImage {
  const png = PNG.sync.read(Buffer.from(b64, "base64"));
  const out = new Float64Array(png.width * png.height * 3);
  for (let i = 0; i < png.width * png.height; i++) {
    out[3 * i] = png.data[4 * i] / 255;
    out[3 * i + 1] = png.data[4 * i + 1] / 255;
    out[3 * i + 2] = png.data[4 * i + 2] / 255;
  }
  return { width: png.width, height: png.height, data: out };
}

export function encodePngBase64(img: RgbImage): string {
  const png = new PNG({ width: img.width, height: img.height });
  for (let i = 0; i < img.width * img.height; i++) {
    for (let c = 0; c < 3; c++) {
      const v = Math.min(1, Math.max(0, img.data[3 * i + c]));
      png.data[4 * i + c] = Math.round(v * 255);
    }
    png.data[4 * i + 3] = 255;
  }
  return PNG.sync.write(png, { colorType: 2 }).toString("base64");
}

/** Decode a mask PNG (any bit depth); a pixel is set when its value > 50%. */
export function decodeMaskBase64(b64: string): {
  width: number;
  height: number;
  data: Uint8Array;
} {
  const png = PNG.sync.read(Buffer.from(b64, "base64"));
  const out = new Uint8Array(png.width * png.height);
  for (let i = 0; i < out.length; i++) {
    out[i] = png.data[4 * i] > 127 ? 1 : 0;
  }
  return { width: png.width, height: png.height, data: out };
}

/** Grayscale PFM: "Pf\n{w} {h}\n-1.0\n" + little-endian f32, rows bottom-up. */
export function encodePfmBase64(
  width: number,
  height: number,
  values: Float32Array,
): string {
  const header = Buffer.from(`Pf\n${width} ${height}\n-1.0\n`, "ascii");
  const body = Buffer.allocUnsafe(width * height * 4);
  for (let row = 0; row < height; row++) {
    const src = (height - 1 - row) * width; // bottom-up
    for (let col = 0; col < width; col++) {
      body.writeFloatLE(values[src + col], (row * width + col) * 4);
    }
  }
  return Buffer.concat([header, body]).toString("base64");
}
