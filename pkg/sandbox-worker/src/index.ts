import { createWorkerServer } from "./server.js";

const port = Number(process.env.PORT ?? process.argv[2] ?? 8033);

createWorkerServer().listen(port, "127.0.0.1", () => {
  console.log(`sandbox worker listening on http://127.0.0.1:${port}`);
});
