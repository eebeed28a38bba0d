/**
 * HTTP surface: POST /execute runs one script, GET /health reports liveness.
 *
 * Execution failures are encoded in the ExecResponse body; only malformed
 * requests get non-200 statuses. A crashing script never takes the service
 * down.
 */

import * as http from "node:http";
import { statSync } from "node:fs";

import { execute, type ExecRequest } from "./executor.js";

const BODY_CAP_BYTES = 10 << 20;

function readBody(request: http.IncomingMessage): Promise<string> {
  return new Promise((resolve, reject) => {
    let body = "";
    request.on("data", (chunk: Buffer) => {
      body += chunk.toString("utf-8");
      if (body.length > BODY_CAP_BYTES) {
        reject(new Error("request body too large"));
        request.destroy();
      }
    });
    request.on("end", () => resolve(body));
    request.on("error", reject);
  });
}

function sendJson(response: http.ServerResponse, status: number, payload: unknown): void {
  const body = JSON.stringify(payload);
  response.writeHead(status, {
    "Content-Type": "application/json",
    "Content-Length": Buffer.byteLength(body),
  });
  response.end(body);
}

function validate(body: unknown): { request?: ExecRequest; error?: string } {
  if (typeof body !== "object" || body === null) {
    return { error: "body must be a JSON object" };
  }
  const record = body as Record<string, unknown>;
  if (typeof record.code !== "string" || !record.code.trim()) {
    return { error: "code must be a non-empty string" };
  }
  if (typeof record.workspace !== "string" || !record.workspace) {
    return { error: "workspace must be a path string" };
  }
  try {
    if (!statSync(record.workspace).isDirectory()) {
      return { error: `workspace is not a directory: ${record.workspace}` };
    }
  } catch {
    return { error: `workspace does not exist: ${record.workspace}` };
  }
  if (record.timeout !== undefined && (typeof record.timeout !== "number" || record.timeout <= 0)) {
    return { error: "timeout must be a positive number of seconds" };
  }
  if (
    record.allowed_imports_policy !== undefined &&
    record.allowed_imports_policy !== "imaging_only" &&
    record.allowed_imports_policy !== "permissive"
  ) {
    return { error: "allowed_imports_policy must be imaging_only or permissive" };
  }
  return {
    request: {
      code: record.code,
      workspace: record.workspace,
      timeout: record.timeout as number | undefined,
      memory_limit: record.memory_limit as number | undefined,
      allowed_imports_policy: record.allowed_imports_policy as ExecRequest["allowed_imports_policy"],
    },
  };
}

export function createWorkerServer(): http.Server {
  return http.createServer(async (request, response) => {
    try {
      if (request.method === "GET" && request.url === "/health") {
        sendJson(response, 200, { status: "ok" });
        return;
      }
      if (request.method === "POST" && request.url === "/execute") {
        let parsed: unknown;
        try {
          parsed = JSON.parse(await readBody(request));
        } catch (error) {
          sendJson(response, 400, { error: `invalid JSON body: ${String(error)}` });
          return;
        }
        const { request: execRequest, error } = validate(parsed);
        if (!execRequest) {
          sendJson(response, 400, { error });
          return;
        }
        sendJson(response, 200, await execute(execRequest));
        return;
      }
      sendJson(response, 404, { error: `no route for ${request.method} ${request.url}` });
    } catch (error) {
      // defensive: a failure here must not kill the process
      sendJson(response, 500, { error: String(error) });
    }
  });
}
