/**
 * Executes one agent script in a fresh Python subprocess with the episode
 * workspace as working directory.
 *
 * Produced files are detected by a before/after filesystem snapshot of the
 * workspace (size + mtime), cross-checked against paths printed on stdout;
 * anything resolving outside the workspace is excluded and flagged.
 */

import { spawn } from "node:child_process";
import { mkdtemp, readdir, rm, stat, writeFile } from "node:fs/promises";
import { tmpdir } from "node:os";
import * as path from "node:path";

import { RUNNER_SOURCE } from "./runner.js";

export type ImportPolicy = "imaging_only" | "permissive";

export interface ExecRequest {
  code: string;
  workspace: string;
  timeout?: number; // seconds
  memory_limit?: number; // bytes of virtual memory
  allowed_imports_policy?: ImportPolicy;
}

export interface ExecResponse {
  stdout: string;
  stderr: string;
  exit_status: number;
  produced_files: string[];
  wall_time: number;
}

const DEFAULT_TIMEOUT_S = 30;
const OUTPUT_CAP_BYTES = 1 << 20;
const TIMEOUT_EXIT_STATUS = 124;

const IMAGE_EXT = /\.(png|jpe?g|bmp|gif|tiff?|webp)$/i;

// Requests sharing a workspace are serialized; distinct workspaces run
// concurrently.
const workspaceQueues = new Map<string, Promise<unknown>>();

export function withWorkspaceLock<T>(key: string, task: () => Promise<T>): Promise<T> {
  const previous = workspaceQueues.get(key) ?? Promise.resolve();
  const next = previous.then(task, task);
  workspaceQueues.set(
    key,
    next.catch(() => undefined),
  );
  return next;
}

async function snapshot(root: string): Promise<Map<string, string>> {
  const entries = new Map<string, string>();
  async function walk(dir: string): Promise<void> {
    let dirents;
    try {
      dirents = await readdir(dir, { withFileTypes: true });
    } catch {
      return;
    }
    for (const dirent of dirents) {
      const full = path.join(dir, dirent.name);
      if (dirent.isDirectory()) {
        await walk(full);
      } else if (dirent.isFile()) {
        try {
          const info = await stat(full);
          entries.set(path.relative(root, full), `${info.size}:${info.mtimeMs}`);
        } catch {
          // deleted mid-walk
        }
      }
    }
  }
  await walk(root);
  return entries;
}

function shellQuote(value: string): string {
  return `'${value.replace(/'/g, `'\\''`)}'`;
}

async function runProcess(
  workspace: string,
  runnerPath: string,
  scriptPath: string,
  policy: ImportPolicy,
  timeoutS: number,
  memoryLimit?: number,
): Promise<{ stdout: string; stderr: string; exitStatus: number; timedOut: boolean }> {
  const limitPrefix = memoryLimit ? `ulimit -v ${Math.ceil(memoryLimit / 1024)}; ` : "";
  const command =
    limitPrefix +
    `exec python3 ${shellQuote(runnerPath)} ${shellQuote(scriptPath)} ${policy}`;

  return new Promise((resolve) => {
    const child = spawn("bash", ["-c", command], {
      cwd: workspace,
      detached: true,
      stdio: ["ignore", "pipe", "pipe"],
    });

    let stdout = "";
    let stderr = "";
    let timedOut = false;
    child.stdout.on("data", (chunk: Buffer) => {
      if (stdout.length < OUTPUT_CAP_BYTES) stdout += chunk.toString("utf-8");
    });
    child.stderr.on("data", (chunk: Buffer) => {
      if (stderr.length < OUTPUT_CAP_BYTES) stderr += chunk.toString("utf-8");
    });

    const killTimer = setTimeout(() => {
      timedOut = true;
      try {
        process.kill(-child.pid!, "SIGKILL");
      } catch {
        try {
          child.kill("SIGKILL");
        } catch {
          // already gone
        }
      }
    }, Math.max(1, timeoutS * 1000));

    child.on("error", (error) => {
      clearTimeout(killTimer);
      resolve({ stdout, stderr: stderr + String(error), exitStatus: -1, timedOut });
    });
    child.on("close", (code, signal) => {
      clearTimeout(killTimer);
      const exitStatus = timedOut ? TIMEOUT_EXIT_STATUS : code ?? (signal ? 128 : -1);
      resolve({ stdout, stderr, exitStatus, timedOut });
    });
  });
}

function collectProduced(
  workspace: string,
  before: Map<string, string>,
  after: Map<string, string>,
  stdout: string,
): { produced: string[]; notes: string[] } {
  const produced = new Set<string>();
  for (const [rel, fingerprint] of after) {
    if (before.get(rel) !== fingerprint) produced.add(rel);
  }

  const notes: string[] = [];
  const root = path.resolve(workspace);
  for (const rawLine of stdout.split("\n")) {
    const line = rawLine.trim();
    if (!line || !IMAGE_EXT.test(line)) continue;
    const resolved = path.resolve(root, line);
    const rel = path.relative(root, resolved);
    if (rel.startsWith("..") || path.isAbsolute(rel)) {
      notes.push(`printed path outside workspace excluded from produced_files: ${line}`);
      continue;
    }
    if (after.has(rel)) produced.add(rel);
  }
  return { produced: [...produced].sort(), notes };
}

export async function execute(request: ExecRequest): Promise<ExecResponse> {
  const workspace = path.resolve(request.workspace);
  const timeoutS = request.timeout ?? DEFAULT_TIMEOUT_S;
  const policy: ImportPolicy = request.allowed_imports_policy ?? "imaging_only";

  return withWorkspaceLock(workspace, async () => {
    const started = Date.now();
    const scratch = await mkdtemp(path.join(tmpdir(), "sandbox-worker-"));
    try {
      const runnerPath = path.join(scratch, "runner.py");
      const scriptPath = path.join(scratch, "agent_code.py");
      await writeFile(runnerPath, RUNNER_SOURCE, "utf-8");
      await writeFile(scriptPath, request.code, "utf-8");

      const before = await snapshot(workspace);
      const result = await runProcess(
        workspace,
        runnerPath,
        scriptPath,
        policy,
        timeoutS,
        request.memory_limit,
      );
      const after = await snapshot(workspace);
      const { produced, notes } = collectProduced(workspace, before, after, result.stdout);

      let stderr = result.stderr;
      if (result.timedOut) {
        stderr += (stderr.endsWith("\n") || !stderr ? "" : "\n") + `sandbox timeout after ${timeoutS}s\n`;
      }
      if (notes.length) {
        stderr += (stderr.endsWith("\n") || !stderr ? "" : "\n") + notes.join("\n") + "\n";
      }
      return {
        stdout: result.stdout,
        stderr,
        exit_status: result.exitStatus,
        produced_files: produced,
        wall_time: (Date.now() - started) / 1000,
      };
    } finally {
      await rm(scratch, { recursive: true, force: true });
    }
  });
}
