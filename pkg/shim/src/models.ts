/**
 * Built-in procedural model backends.
 *
 * Model choice is configuration, not contract: the registry maps model
 * identifiers to deterministic implementations of generation, masked
 * inpainting, monocular depth, and image embedding.  Identifiers that do
 * not resolve make the service refuse to start.
 */

import { RgbImage } from "./codecs";

/** mulberry32: small deterministic PRNG, seeded per request. */
export function rng(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a |= 0;
    a = (a + 0x6d2b79f5) | 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

export function hashString(text: string): number {
  let h = 2166136261 >>> 0;
  for (let i = 0; i < text.length; i++) {
    h ^= text.charCodeAt(i);
    h = Math.imul(h, 16777619);
  }
  return h >>> 0;
}

/** Smooth seeded color field: a coarse random lattice, bilinearly upsampled. */
function colorField(width: number, height: number, seed: number, cells = 6): RgbImage {
  const rand = rng(seed);
  const lattice = new Float64Array((cells + 1) * (cells + 1) * 3);
  for (let i = 0; i < lattice.length; i++) lattice[i] = 0.1 + 0.8 * rand();
  const data = new Float64Array(width * height * 3);
  for (let y = 0; y < height; y++) {
    const gy = (y / Math.max(height - 1, 1)) * cells;
    const y0 = Math.min(Math.floor(gy), cells - 1);
    const fy = gy - y0;
    for (let x = 0; x < width; x++) {
      const gx = (x / Math.max(width - 1, 1)) * cells;
      const x0 = Math.min(Math.floor(gx), cells - 1);
      const fx = gx - x0;
      for (let c = 0; c < 3; c++) {
        const v00 = lattice[(y0 * (cells + 1) + x0) * 3 + c];
        const v01 = lattice[(y0 * (cells + 1) + x0 + 1) * 3 + c];
        const v10 = lattice[((y0 + 1) * (cells + 1) + x0) * 3 + c];
        const v11 = lattice[((y0 + 1) * (cells + 1) + x0 + 1) * 3 + c];
        data[(y * width + x) * 3 + c] =
          (v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy;
      }
    }
  }
  return { width, height, data };
}

export interface Generator {
  generate(prompt: string, width: number, height: number, seed: number): RgbImage;
}

export interface Inpainter {
  inpaint(
    prompt: string,
    image: RgbImage,
    mask: Uint8Array,
    numCandidates: number,
    seed: number,
  ): RgbImage[];
}

export interface DepthEstimator {
  estimate(image: RgbImage): Float32Array;
}

export interface Embedder {
  embed(image: RgbImage): number[];
}

const generators: Record<string, Generator> = {
  "builtin:field": {
    generate: (prompt, width, height, seed) =>
      colorField(width, height, (hashString(prompt) ^ seed) >>> 0),
  },
};

/**
 * Harmonic fill: masked pixels relax toward the average of their
 * neighbours (boundary values fixed), then a seeded smooth perturbation
 * differentiates the candidates.  Unmasked pixels are returned untouched.
 */
const inpainters: Record<string, Inpainter> = {
  "builtin:harmonic": {
    inpaint(prompt, image, mask, numCandidates, seed) {
      const { width: w, height: h } = image;
      const base = Float64Array.from(image.data);
      // init masked pixels with the unmasked mean
      const mean = [0, 0, 0];
      let n = 0;
      for (let i = 0; i < w * h; i++) {
        if (!mask[i]) {
          n++;
          for (let c = 0; c < 3; c++) mean[c] += image.data[3 * i + c];
        }
      }
      for (let c = 0; c < 3; c++) mean[c] = n ? mean[c] / n : 0.5;
      for (let i = 0; i < w * h; i++) {
        if (mask[i]) for (let c = 0; c < 3; c++) base[3 * i + c] = mean[c];
      }
      const sweeps = 80;
      for (let s = 0; s < sweeps; s++) {
        for (let y = 0; y < h; y++) {
          for (let x = 0; x < w; x++) {
            const i = y * w + x;
            if (!mask[i]) continue;
            for (let c = 0; c < 3; c++) {
              let acc = 0;
              let cnt = 0;
              if (x > 0) (acc += base[3 * (i - 1) + c]), cnt++;
              if (x + 1 < w) (acc += base[3 * (i + 1) + c]), cnt++;
              if (y > 0) (acc += base[3 * (i - w) + c]), cnt++;
              if (y + 1 < h) (acc += base[3 * (i + w) + c]), cnt++;
              base[3 * i + c] = acc / cnt;
            }
          }
        }
      }
      const out: RgbImage[] = [];
      for (let k = 0; k < numCandidates; k++) {
        const noise = colorField(w, h, (seed * 1000003 + k) >>> 0, 4);
        const data = Float64Array.from(image.data);
        for (let i = 0; i < w * h; i++) {
          if (!mask[i]) continue; // compositing invariant: input bits kept
          for (let c = 0; c < 3; c++) {
            const v = base[3 * i + c] + 0.15 * (noise.data[3 * i + c] - 0.5);
            data[3 * i + c] = Math.min(1, Math.max(0, v));
          }
        }
        out.push({ width: w, height: h, data });
      }
      return out;
    },
  },
};

const depthEstimators: Record<string, DepthEstimator> = {
  // Raw metric-agnostic output: scale handling is the caller's alignment
  // stage.  Bright content reads as near, plus a floor-to-ceiling ramp.
  "builtin:luma": {
    estimate(image) {
      const { width: w, height: h, data } = image;
      const out = new Float32Array(w * h);
      for (let y = 0; y < h; y++) {
        for (let x = 0; x < w; x++) {
          const i = y * w + x;
          const lum = 0.299 * data[3 * i] + 0.587 * data[3 * i + 1] + 0.114 * data[3 * i + 2];
          out[i] = 1.0 + 2.5 * (1 - 0.6 * lum) + 0.5 * (y / Math.max(h - 1, 1));
        }
      }
      return out;
    },
  },
};

const embedders: Record<string, Embedder> = {
  // Mean-centred coarse luminance + channel histograms; deterministic and
  // fixed-length, which is all the protocol demands of an embedding.
  "builtin:patchhist": {
    embed(image) {
      const { width: w, height: h, data } = image;
      const grid = 8;
      const bins = 16;
      const sums = new Float64Array(grid * grid);
      const counts = new Float64Array(grid * grid);
      const hists = new Float64Array(3 * bins);
      for (let y = 0; y < h; y++) {
        const gy = Math.min(Math.floor((y * grid) / h), grid - 1);
        for (let x = 0; x < w; x++) {
          const gx = Math.min(Math.floor((x * grid) / w), grid - 1);
          const i = y * w + x;
          const lum = 0.299 * data[3 * i] + 0.587 * data[3 * i + 1] + 0.114 * data[3 * i + 2];
          sums[gy * grid + gx] += lum;
          counts[gy * grid + gx] += 1;
          for (let c = 0; c < 3; c++) {
            const b = Math.min(Math.floor(data[3 * i + c] * bins), bins - 1);
            hists[c * bins + b] += 1;
          }
        }
      }
      const coarse = Array.from(sums, (s, i) => (counts[i] ? s / counts[i] : 0));
      const m = coarse.reduce((a, b) => a + b, 0) / coarse.length;
      const out = [m, ...coarse.map((v) => v - m)];
      for (let i = 0; i < hists.length; i++) out.push(hists[i] / (w * h) - 1 / bins);
      return out;
    },
  },
};

export interface ModelSet {
  generator: Generator;
  inpainter: Inpainter;
  depth: DepthEstimator;
  embedder: Embedder;
}

export interface ModelIds {
  generation: string;
  inpainting: string;
  depth: string;
  embedding: string;
}

export const DEFAULT_MODELS: ModelIds = {
  generation: "builtin:field",
  inpainting: "builtin:harmonic",
  depth: "builtin:luma",
  embedding: "builtin:patchhist",
};

/** Resolve identifiers to implementations; throws on unknown ids so the
 * service refuses to bind with a missing model. */
export function loadModels(ids: ModelIds): ModelSet {
  const generator = generators[ids.generation];
  const inpainter = inpainters[ids.inpainting];
  const depth = depthEstimators[ids.depth];
  const embedder = embedders[ids.embedding];
  if (!generator) throw new Error(`unknown generation model ${ids.generation}`);
  if (!inpainter) throw new Error(`unknown inpainting model ${ids.inpainting}`);
  if (!depth) throw new Error(`unknown depth model ${ids.depth}`);
  if (!embedder) throw new Error(`unknown embedding model ${ids.embedding}`);
  return { generator, inpainter, depth, embedder };
}
