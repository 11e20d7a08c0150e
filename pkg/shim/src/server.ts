/**
 * HTTP server implementing the provider wire protocol.
 *
 * Endpoints mirror the client contract exactly: JSON bodies with base64
 * binary fields, candidates bit-identical to the input outside the mask,
 * structured {code, message} errors, and a health endpoint reporting
 * model readiness.  Work runs through a bounded FIFO queue sized by the
 * max-concurrent-jobs setting.
 */

import express, { Express, Request, Response } from "express";
import { z } from "zod";

import {
  decodeMaskBase64,
  decodePngBase64,
  encodePfmBase64,
  encodePngBase64,
} from "./codecs";
import { loadModels, ModelIds, ModelSet } from "./models";

export interface ShimConfig {
  models: ModelIds;
  port: number;
  maxConcurrentJobs: number;
}

const generateSchema = z.object({
  prompt: z.string(),
  width: z.number().int().positive(),
  height: z.number().int().positive(),
  seed: z.number().int().default(0),
});

const inpaintSchema = z.object({
  prompt: z.string(),
  image: z.string(),
  mask: z.string(),
  num_candidates: z.number().int().min(1).default(30),
  seed: z.number().int().default(0),
});

const imageOnlySchema = z.object({ image: z.string() });

class JobQueue {
  private active = 0;
  private waiting: Array<() => void> = [];

  constructor(private readonly limit: number) {}

  async run<T>(work: () => T): Promise<T> {
    if (this.active >= this.limit) {
      await new Promise<void>((resolve) => this.waiting.push(resolve));
    }
    this.active++;
    try {
      return work();
    } finally {
      this.active--;
      const next = this.waiting.shift();
      if (next) next();
    }
  }
}

function sendError(res: Response, status: number, code: string, message: string): void {
  res.status(status).json({ code, message });
}

export function createApp(config: ShimConfig): Express {
  // Models resolve before the app exists; unknown ids throw here and the
  // service never binds.
  const models: ModelSet = loadModels(config.models);
  const queue = new JobQueue(Math.max(1, config.maxConcurrentJobs));
  const app = express();
  app.use(express.json({ limit: "64mb" }));

  app.get("/v1/health", (_req, res) => {
    res.json({
      status: "ok",
      models: {
        generation: config.models.generation,
        inpainting: config.models.inpainting,
        depth: config.models.depth,
        embedding: config.models.embedding,
      },
    });
  });

  app.post("/v1/generate", async (req, res) => {
    const parsed = generateSchema.safeParse(req.body);
    if (!parsed.success) {
      return sendError(res, 400, "bad_request", parsed.error.message);
    }
    const { prompt, width, height, seed } = parsed.data;
    try {
      const image = await queue.run(() =>
        models.generator.generate(prompt, width, height, seed),
      );
      res.json({ image: encodePngBase64(image) });
    } catch (err) {
      sendError(res, 500, "internal", String(err));
    }
  });

  app.post("/v1/inpaint", async (req, res) => {
    const parsed = inpaintSchema.safeParse(req.body);
    if (!parsed.success) {
      return sendError(res, 400, "bad_request", parsed.error.message);
    }
    const { prompt, image, mask, num_candidates, seed } = parsed.data;
    try {
      const img = decodePngBase64(image);
      const m = decodeMaskBase64(mask);
      if (m.width !== img.width || m.height !== img.height) {
        return sendError(res, 400, "bad_request", "mask resolution must match the image");
      }
      let set = 0;
      for (let i = 0; i < m.data.length; i++) set += m.data[i];
      if (set === 0) {
        return sendError(res, 400, "empty_mask", "inpainting mask is empty");
      }
      const candidates = await queue.run(() =>
        models.inpainter.inpaint(prompt, img, m.data, num_candidates, seed),
      );
      res.json({ candidates: candidates.map(encodePngBase64) });
    } catch (err) {
      sendError(res, 500, "internal", String(err));
    }
  });

  app.post("/v1/depth", async (req, res) => {
    const parsed = imageOnlySchema.safeParse(req.body);
    if (!parsed.success) {
      return sendError(res, 400, "bad_request", parsed.error.message);
    }
    try {
      const img = decodePngBase64(parsed.data.image);
      const depth = await queue.run(() => models.depth.estimate(img));
      res.json({ depth: encodePfmBase64(img.width, img.height, depth) });
    } catch (err) {
      sendError(res, 500, "internal", String(err));
    }
  });

  app.post("/v1/embed", async (req, res) => {
    const parsed = imageOnlySchema.safeParse(req.body);
    if (!parsed.success) {
      return sendError(res, 400, "bad_request", parsed.error.message);
    }
    try {
      const img = decodePngBase64(parsed.data.image);
      const vector = await queue.run(() => models.embedder.embed(img));
      res.json({ vector });
    } catch (err) {
      sendError(res, 500, "internal", String(err));
    }
  });

  app.use((req: Request, res: Response) => {
    sendError(res, 404, "not_found", `no such endpoint ${req.path}`);
  });

  return app;
}
