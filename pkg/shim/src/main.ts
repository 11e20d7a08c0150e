/** CLI entry: parse config, resolve models, bind the server. */

import { createApp, ShimConfig } from "./server";
import { DEFAULT_MODELS } from "./models";

function parseArgs(argv: string[]): ShimConfig {
  const config: ShimConfig = {
    models: { ...DEFAULT_MODELS },
    port: Number(process.env.SHIM_PORT ?? 8601),
    maxConcurrentJobs: 2,
  };
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    if (arg === "--port") config.port = Number(argv[++i]);
    else if (arg === "--max-jobs") config.maxConcurrentJobs = Number(argv[++i]);
    else if (arg === "--generation-model") config.models.generation = argv[++i];
    else if (arg === "--inpainting-model") config.models.inpainting = argv[++i];
    else if (arg === "--depth-model") config.models.depth = argv[++i];
    else if (arg === "--embedding-model") config.models.embedding = argv[++i];
    else {
      console.error(`unknown argument ${arg}`);
      process.exit(2);
    }
  }
  return config;
}

function main(): void {
  const config = parseArgs(process.argv.slice(2));
  let app;
  try {
    app = createApp(config); // model resolution happens here
  } catch (err) {
    console.error(`refusing to start: ${err}`);
    process.exit(1);
  }
  app.listen(config.port, () => {
    console.log(
      `provider shim listening on :${config.port} ` +
        `(models: ${Object.values(config.models).join(", ")})`,
    );
  });
}

main();
