import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { spawnSync } from "node:child_process";
import { mkdtempSync, readFileSync, existsSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import * as path from "node:path";
import type { AddressInfo } from "node:net";

import { createWorkerServer } from "../src/server.js";

let server: ReturnType<typeof createWorkerServer>;
let baseUrl: string;
const scratchDirs: string[] = [];

beforeAll(async () => {
  server = createWorkerServer();
  await new Promise<void>((resolve) => server.listen(0, "127.0.0.1", resolve));
  const { port } = server.address() as AddressInfo;
  baseUrl = `http://127.0.0.1:${port}`;
});

afterAll(async () => {
  await new Promise((resolve) => server.close(resolve));
  for (const dir of scratchDirs) rmSync(dir, { recursive: true, force: true });
});

function makeWorkspace(): string {
  const dir = mkdtempSync(path.join(tmpdir(), "worker-test-"));
  scratchDirs.push(dir);
  return dir;
}

function writeFixtureImage(workspace: string, name = "source.png", size = 1024): string {
  const result = spawnSync("python3", [
    "-c",
    `from PIL import Image; Image.new('RGB', (${size}, ${size}), (90, 40, 10)).save(r'${path.join(
      workspace,
      name,
    )}')`,
  ]);
  expect(result.status).toBe(0);
  return name;
}

function pngDimensions(file: string): { width: number; height: number } {
  const buffer = readFileSync(file);
  expect(buffer.subarray(1, 4).toString("ascii")).toBe("PNG");
  return { width: buffer.readUInt32BE(16), height: buffer.readUInt32BE(20) };
}

async function postExecute(body: unknown): Promise<{ status: number; payload: any }> {
  const response = await fetch(`${baseUrl}/execute`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify(body),
  });
  return { status: response.status, payload: await response.json() };
}

describe("health", () => {
  it("reports ok", async () => {
    const response = await fetch(`${baseUrl}/health`);
    expect(response.status).toBe(200);
    expect(await response.json()).toEqual({ status: "ok" });
  });
});

describe("execute", () => {
  it("crops a 1024x1024 fixture to the requested dimensions", async () => {
    const workspace = makeWorkspace();
    const source = writeFixtureImage(workspace);
    const code = [
      "from PIL import Image",
      `img = Image.open(${JSON.stringify(source)})`,
      "crop = img.crop((100, 200, 500, 500))",
      "crop.save('crop_result.png')",
      "print('crop_result.png')",
    ].join("\n");

    const { status, payload } = await postExecute({ code, workspace, timeout: 20 });
    expect(status).toBe(200);
    expect(payload.exit_status).toBe(0);
    expect(payload.produced_files).toContain("crop_result.png");
    const dims = pngDimensions(path.join(workspace, "crop_result.png"));
    expect(dims).toEqual({ width: 400, height: 300 });
  }, 30000);

  it("kills an infinite loop within the 0.5s slack of a 2s timeout", async () => {
    const workspace = makeWorkspace();
    const { payload } = await postExecute({
      code: "while True:\n    pass\n",
      workspace,
      timeout: 2,
    });
    expect(payload.exit_status).not.toBe(0);
    expect(payload.stderr).toContain("sandbox timeout after 2s");
    expect(payload.wall_time).toBeGreaterThanOrEqual(2.0);
    expect(payload.wall_time).toBeLessThanOrEqual(2.5);
  }, 15000);

  it("excludes parent-directory writes from produced_files and flags them", async () => {
    const workspace = makeWorkspace();
    const code = [
      "with open('../escape.png', 'wb') as fh:",
      "    fh.write(b'not really a png')",
      "print('../escape.png')",
      "with open('inside.png', 'wb') as fh:",
      "    fh.write(b'x')",
      "print('inside.png')",
    ].join("\n");
    const { payload } = await postExecute({ code, workspace, timeout: 10 });
    expect(payload.produced_files).toEqual(["inside.png"]);
    expect(payload.stderr).toContain("outside workspace");
  }, 15000);

  it("returns tracebacks for crashing scripts and stays serviceable", async () => {
    const workspace = makeWorkspace();
    const crash = await postExecute({ code: "def broken(:\n", workspace, timeout: 10 });
    expect(crash.payload.exit_status).not.toBe(0);
    expect(crash.payload.stderr).toContain("SyntaxError");

    const next = await postExecute({ code: "print(1 + 1)", workspace, timeout: 10 });
    expect(next.payload.exit_status).toBe(0);
    expect(next.payload.stdout.trim()).toBe("2");
  }, 15000);

  it("denies network egress even under the permissive policy", async () => {
    const workspace = makeWorkspace();
    const code = [
      "import socket",
      "try:",
      "    socket.socket()",
      "except OSError as error:",
      "    print(f'blocked: {error}')",
    ].join("\n");
    const { payload } = await postExecute({
      code,
      workspace,
      timeout: 10,
      allowed_imports_policy: "permissive",
    });
    expect(payload.exit_status).toBe(0);
    expect(payload.stdout).toContain("blocked: network access is disabled");
  }, 15000);

  it("denies the socket import and process creation under imaging_only", async () => {
    const workspace = makeWorkspace();
    const importAttempt = await postExecute({ code: "import socket", workspace, timeout: 10 });
    expect(importAttempt.payload.exit_status).not.toBe(0);
    expect(importAttempt.payload.stderr).toContain("not allowed by the sandbox policy");

    const spawnAttempt = await postExecute({
      code: "import os\ntry:\n    os.system('true')\nexcept OSError as error:\n    print(f'blocked: {error}')",
      workspace,
      timeout: 10,
    });
    expect(spawnAttempt.payload.exit_status).toBe(0);
    expect(spawnAttempt.payload.stdout).toContain("blocked: process creation is disabled");
  }, 15000);

  it("blocks non-whitelisted imports under imaging_only but not permissive", async () => {
    const workspace = makeWorkspace();
    const code = "import urllib.request\nprint('imported')";
    const restricted = await postExecute({
      code,
      workspace,
      timeout: 10,
      allowed_imports_policy: "imaging_only",
    });
    expect(restricted.payload.exit_status).not.toBe(0);
    expect(restricted.payload.stderr).toContain("not allowed by the sandbox policy");

    const permissive = await postExecute({
      code,
      workspace,
      timeout: 10,
      allowed_imports_policy: "permissive",
    });
    expect(permissive.payload.exit_status).toBe(0);
  }, 15000);

  it("runs each request in a fresh interpreter", async () => {
    const workspace = makeWorkspace();
    await postExecute({ code: "leak = 'value'\nprint('set')", workspace, timeout: 10 });
    const second = await postExecute({
      code: "print('leak' in dir())\nprint(globals().get('leak'))",
      workspace,
      timeout: 10,
    });
    expect(second.payload.stdout).toContain("False");
    expect(second.payload.stdout).toContain("None");
  }, 15000);

  it("serializes requests sharing a workspace", async () => {
    const workspace = makeWorkspace();
    const appender = [
      "import os, time",
      "count = 0",
      "if os.path.exists('counter.txt'):",
      "    with open('counter.txt') as fh:",
      "        count = int(fh.read())",
      "time.sleep(0.2)",
      "with open('counter.txt', 'w') as fh:",
      "    fh.write(str(count + 1))",
    ].join("\n");
    const [first, second] = await Promise.all([
      postExecute({ code: appender, workspace, timeout: 10 }),
      postExecute({ code: appender, workspace, timeout: 10 }),
    ]);
    expect(first.payload.exit_status).toBe(0);
    expect(second.payload.exit_status).toBe(0);
    expect(readFileSync(path.join(workspace, "counter.txt"), "utf-8")).toBe("2");
  }, 20000);

  it("iterative crops compose because workspace files persist", async () => {
    const workspace = makeWorkspace();
    writeFixtureImage(workspace, "scene.png", 512);
    const first = await postExecute({
      code: "from PIL import Image\nImage.open('scene.png').crop((0, 0, 256, 256)).save('step1.png')\nprint('step1.png')",
      workspace,
      timeout: 20,
    });
    expect(first.payload.produced_files).toContain("step1.png");
    const second = await postExecute({
      code: "from PIL import Image\nImage.open('step1.png').crop((0, 0, 128, 128)).save('step2.png')\nprint('step2.png')",
      workspace,
      timeout: 20,
    });
    expect(second.payload.exit_status).toBe(0);
    expect(second.payload.produced_files).toContain("step2.png");
    expect(existsSync(path.join(workspace, "step1.png"))).toBe(true);
  }, 30000);
});

describe("request validation", () => {
  it("rejects a missing workspace", async () => {
    const { status, payload } = await postExecute({ code: "print(1)", workspace: "/no/such/dir" });
    expect(status).toBe(400);
    expect(payload.error).toContain("workspace");
  });

  it("rejects empty code", async () => {
    const { status } = await postExecute({ code: "  ", workspace: makeWorkspace() });
    expect(status).toBe(400);
  });

  it("rejects invalid JSON", async () => {
    const response = await fetch(`${baseUrl}/execute`, { method: "POST", body: "{nope" });
    expect(response.status).toBe(400);
  });
});
