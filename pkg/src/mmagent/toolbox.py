"""Tool backends: reverse image search, text search, web visit, code execution.

All provider traffic can be recorded into a transcript cache and replayed
byte-identically, which is what makes curation runs and tests reproducible
offline. Provider failures are returned as observation error entries, never
exceptions, so an episode always continues.
"""

from __future__ import annotations

import hashlib
import html.parser
import json
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import urlparse

import requests

from .endpoints import EndpointError
from .protocol import ErrorEntry, Observation, PageEntry, SearchHit

logger = logging.getLogger(__name__)

SUMMARIZE_PROMPT = (
    "Summarize the following web page content, keeping every concrete fact, "
    "name, number, date, and address that could answer a question. Reply with "
    "the summary only."
)


class MissingImageError(FileNotFoundError):
    """An image path does not exist; raised before any provider dispatch."""


class SandboxUnreachableError(ConnectionError):
    """The code sandbox worker cannot be reached."""


class TranscriptMiss(KeyError):
    """Replay mode was asked for a request not present in the transcript."""


class ToolUnavailableError(RuntimeError):
    """The requested tool is not configured or not enabled."""


@dataclass(frozen=True)
class SearchProviderConfig:
    endpoint: str = "https://google.serper.dev"
    api_key_env: str = "SERPER_API_KEY"
    limit: int = 5
    timeout: float = 30.0

    def __post_init__(self):
        if self.limit < 1:
            raise ValueError("result limit must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


@dataclass(frozen=True)
class PageContent:
    url: str
    raw_text: str
    summarized_text: str | None = None
    was_summarized: bool = False
    fetch_status: int = 0

    def display_text(self) -> str:
        return self.summarized_text if self.was_summarized else self.raw_text


@dataclass(frozen=True)
class CodeResult:
    stdout: str
    stderr: str = ""
    exit_status: int = 0
    produced_images: tuple[str, ...] = ()
    wall_time: float = 0.0


def canonical_args(args: dict) -> str:
    return json.dumps(args, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


class TranscriptCache:
    """Append-only JSONL of provider responses keyed by (tool, canonical args).

    In replay mode, requests are served exclusively from the transcript and
    a miss is an error; in record mode, live responses are appended.
    Concurrent readers are safe; writes are serialized.
    """

    def __init__(self, path, replay: bool = False):
        self.path = Path(path)
        self.replay = replay
        self._lock = threading.Lock()
        self._cache: dict[tuple[str, str], dict] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as handle:
                for line in handle:
                    line = line.strip()
                    if not line:
                        continue
                    record = json.loads(line)
                    self._cache[(record["tool"], record["args_canonical"])] = record["response"]

    def fetch(self, tool: str, args: dict, fetcher) -> dict:
        key = (tool, canonical_args(args))
        if key in self._cache:
            return self._cache[key]
        if self.replay:
            raise TranscriptMiss(f"no transcript entry for {tool} {key[1]}")
        response = fetcher()
        with self._lock:
            self._cache[key] = response
            with open(self.path, "a", encoding="utf-8") as handle:
                handle.write(
                    json.dumps(
                        {
                            "tool": tool,
                            "args_canonical": key[1],
                            "response": response,
                            "timestamp": time.time(),
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )
        return response


class HttpTransport:
    """Thin HTTP layer so tests can inject fakes without touching sockets."""

    def __init__(self, session=None):
        self._session = session or requests.Session()

    def post_json(self, url: str, payload: dict, headers: dict, timeout: float) -> tuple[int, dict]:
        resp = self._session.post(url, json=payload, headers=headers, timeout=timeout)
        try:
            data = resp.json()
        except ValueError:
            data = {}
        return resp.status_code, data

    def get_text(self, url: str, timeout: float) -> tuple[int, str]:
        resp = self._session.get(url, timeout=timeout)
        return resp.status_code, resp.text


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


class SearchProvider:
    """Serper-shaped search client (web search + lens) with transcript support."""

    def __init__(
        self,
        cfg: SearchProviderConfig,
        transport: HttpTransport | None = None,
        transcript: TranscriptCache | None = None,
        api_key: str | None = None,
    ):
        self.cfg = cfg
        self.transport = transport or HttpTransport()
        self.transcript = transcript
        self._api_key = api_key

    def _headers(self) -> dict:
        import os

        key = self._api_key or os.environ.get(self.cfg.api_key_env, "")
        return {"X-API-KEY": key, "Content-Type": "application/json"}

    def _call(self, tool: str, endpoint_path: str, args: dict, payload: dict) -> dict:
        def fetcher() -> dict:
            status, data = self.transport.post_json(
                f"{self.cfg.endpoint.rstrip('/')}{endpoint_path}",
                payload,
                self._headers(),
                self.cfg.timeout,
            )
            return {"status": status, "data": data}

        if self.transcript is not None:
            return self.transcript.fetch(tool, args, fetcher)
        return fetcher()

    @staticmethod
    def _hits_from(data: dict, limit: int, with_images: bool) -> list[SearchHit]:
        raw = data.get("organic") or data.get("visual_matches") or []
        hits = []
        for item in raw[:limit]:
            hits.append(
                SearchHit(
                    title=str(item.get("title", "")),
                    link=str(item.get("link", "")),
                    snippet="" if with_images else str(item.get("snippet", "")),
                    image=str(item.get("imageUrl") or item.get("thumbnail") or "")
                    if with_images
                    else "",
                )
            )
        return hits

    def text_search(self, queries: list[str]) -> Observation:
        """Web search, one provider call per query, results in query order."""
        cleaned = [q.strip() for q in queries]
        if not cleaned or any(not q for q in cleaned):
            raise ValueError("queries must be non-empty after trimming")
        entries: list = []
        for query in cleaned:
            args = {"q": query, "num": self.cfg.limit}
            try:
                response = self._call("text_search", "/search", args, args)
            except (requests.RequestException, TranscriptMiss) as exc:
                if isinstance(exc, TranscriptMiss):
                    raise
                entries.append(ErrorEntry(f"search failed for {query!r}: {exc}"))
                continue
            if response["status"] != 200:
                entries.append(ErrorEntry(f"search provider error {response['status']} for {query!r}"))
                continue
            entries.extend(self._hits_from(response["data"], self.cfg.limit, with_images=False))
        return Observation(entries=tuple(entries))

    def image_candidates(self, query: str, limit: int | None = None) -> list[dict]:
        """Image results for a text query, with resolution metadata.

        Returns [{"title", "url", "width", "height"}, ...]; provider errors
        yield an empty list (the caller treats that as no usable image).
        """
        limit = limit or self.cfg.limit
        args = {"q": query, "num": limit}
        try:
            response = self._call("image_candidates", "/images", args, args)
        except requests.RequestException:
            return []
        if response["status"] != 200:
            return []
        out = []
        for item in (response["data"].get("images") or [])[:limit]:
            out.append(
                {
                    "title": str(item.get("title", "")),
                    "url": str(item.get("imageUrl") or item.get("url") or ""),
                    "width": int(item.get("imageWidth") or item.get("width") or 0),
                    "height": int(item.get("imageHeight") or item.get("height") or 0),
                }
            )
        return out

    def image_search(self, image_paths: list[str]) -> Observation:
        """Reverse image (lens) search; image content keys the transcript."""
        paths = [Path(p) for p in image_paths]
        for path in paths:
            if not path.is_file():
                raise MissingImageError(str(path))
        entries: list = []
        for path in paths:
            args = {"image_sha256": _sha256_file(path), "num": self.cfg.limit}
            payload = {"url": path.resolve().as_uri(), "num": self.cfg.limit}
            try:
                response = self._call("image_search", "/lens", args, payload)
            except (requests.RequestException, TranscriptMiss) as exc:
                if isinstance(exc, TranscriptMiss):
                    raise
                entries.append(ErrorEntry(f"image search failed for {path.name}: {exc}"))
                continue
            if response["status"] != 200:
                entries.append(
                    ErrorEntry(f"image search provider error {response['status']} for {path.name}")
                )
                continue
            entries.extend(self._hits_from(response["data"], self.cfg.limit, with_images=True))
        return Observation(entries=tuple(entries))


class _TextExtractor(html.parser.HTMLParser):
    _SKIP = {"script", "style", "noscript"}
    _BLOCK = {"p", "div", "br", "li", "tr", "h1", "h2", "h3", "h4", "h5", "h6", "section", "article"}

    def __init__(self):
        super().__init__(convert_charrefs=True)
        self._chunks: list[str] = []
        self._skip_depth = 0

    def handle_starttag(self, tag, attrs):
        if tag in self._SKIP:
            self._skip_depth += 1
        elif tag in self._BLOCK:
            self._chunks.append("\n")

    def handle_endtag(self, tag):
        if tag in self._SKIP and self._skip_depth:
            self._skip_depth -= 1
        elif tag in self._BLOCK:
            self._chunks.append("\n")

    def handle_data(self, data):
        if not self._skip_depth:
            self._chunks.append(data)

    def text(self) -> str:
        raw = "".join(self._chunks)
        lines = [" ".join(line.split()) for line in raw.splitlines()]
        return "\n".join(line for line in lines if line)


def html_to_text(markup: str) -> str:
    extractor = _TextExtractor()
    try:
        extractor.feed(markup)
        extractor.close()
    except Exception:  # malformed markup: fall back to whatever was collected
        pass
    return extractor.text()


class WebVisitor:
    """Fetches pages, reduces them to readable text, summarizes long ones."""

    def __init__(
        self,
        transport: HttpTransport | None = None,
        summarizer=None,
        threshold: int = 4000,
        timeout: float = 30.0,
        transcript: TranscriptCache | None = None,
    ):
        self.transport = transport or HttpTransport()
        self.summarizer = summarizer
        self.threshold = threshold
        self.timeout = timeout
        self.transcript = transcript

    def _fetch(self, url: str) -> tuple[int, str]:
        def fetcher() -> dict:
            status, text = self.transport.get_text(url, self.timeout)
            return {"status": status, "text": text}

        if self.transcript is not None:
            response = self.transcript.fetch("web_visit", {"url": url}, fetcher)
        else:
            response = fetcher()
        return response["status"], response["text"]

    def fetch_page(self, url: str) -> PageContent:
        parsed = urlparse(url)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ValueError(f"not a valid http(s) url: {url!r}")
        status, markup = self._fetch(url)
        readable = html_to_text(markup)
        if status != 200:
            return PageContent(url=url, raw_text=readable, fetch_status=status)
        if len(readable) <= self.threshold:
            return PageContent(url=url, raw_text=readable, fetch_status=status)
        if self.summarizer is not None:
            try:
                result = self.summarizer.complete(
                    [
                        {"role": "system", "content": SUMMARIZE_PROMPT},
                        {"role": "user", "content": readable},
                    ]
                )
                return PageContent(
                    url=url,
                    raw_text=readable,
                    summarized_text=result.content.strip(),
                    was_summarized=True,
                    fetch_status=status,
                )
            except EndpointError as exc:
                logger.warning("summarizer unavailable for %s: %s", url, exc)
        truncated = readable[: self.threshold] + "\n[content truncated]"
        return PageContent(url=url, raw_text=readable, summarized_text=truncated, fetch_status=status)

    def web_visit(self, urls: list[str]) -> Observation:
        entries: list = []
        for url in urls:
            try:
                page = self.fetch_page(url)
            except ValueError as exc:
                entries.append(ErrorEntry(str(exc)))
                continue
            except (requests.RequestException, OSError) as exc:
                entries.append(ErrorEntry(f"fetch failed for {url}: {exc}"))
                continue
            if page.fetch_status != 200:
                entries.append(ErrorEntry(f"fetch failed for {url}: HTTP {page.fetch_status}"))
                continue
            content = page.summarized_text if page.summarized_text is not None else page.raw_text
            entries.append(PageEntry(url=url, content=content))
        return Observation(entries=tuple(entries))


def _normalize_produced(paths: list[str], workspace: Path) -> tuple[str, ...]:
    """Keep only workspace-relative paths; anything escaping is dropped."""
    workspace = workspace.resolve()
    kept = []
    for raw in paths:
        candidate = Path(raw)
        if not candidate.is_absolute():
            candidate = workspace / candidate
        try:
            relative = candidate.resolve().relative_to(workspace)
        except ValueError:
            logger.warning("dropping produced file outside workspace: %s", raw)
            continue
        kept.append(str(relative))
    return tuple(kept)


class SandboxClient:
    """HTTP client for the code-execution worker."""

    def __init__(self, address: str, timeout: float = 60.0, exec_timeout: float = 30.0, session=None):
        self.address = address.rstrip("/")
        self.timeout = timeout
        self.exec_timeout = exec_timeout
        self._session = session or requests.Session()

    def execute(self, code: str, workspace: Path) -> CodeResult:
        workspace = Path(workspace)
        if not workspace.is_dir():
            raise ValueError(f"workspace does not exist: {workspace}")
        try:
            resp = self._session.post(
                f"{self.address}/execute",
                json={
                    "code": code,
                    "workspace": str(workspace.resolve()),
                    "timeout": self.exec_timeout,
                },
                timeout=self.timeout,
            )
            resp.raise_for_status()
            data = resp.json()
        except requests.RequestException as exc:
            raise SandboxUnreachableError(f"sandbox worker at {self.address}: {exc}") from exc
        return CodeResult(
            stdout=str(data.get("stdout", "")),
            stderr=str(data.get("stderr", "")),
            exit_status=int(data.get("exit_status", -1)),
            produced_images=_normalize_produced(list(data.get("produced_files", [])), workspace),
            wall_time=float(data.get("wall_time", 0.0)),
        )


class StubSandbox:
    """Deterministic in-process stand-in for the sandbox worker.

    Every call writes one small PNG into the workspace and reports it, which
    is enough to drive episode plumbing and tests without executing code.
    """

    def __init__(self, size: tuple[int, int] = (64, 64)):
        self.size = size

    def execute(self, code: str, workspace: Path) -> CodeResult:
        from PIL import Image

        workspace = Path(workspace)
        if not workspace.is_dir():
            raise ValueError(f"workspace does not exist: {workspace}")
        index = len(list(workspace.glob("subimage_*.png"))) + 1
        name = f"subimage_{index:03d}.png"
        shade = (index * 37) % 256
        Image.new("RGB", self.size, (shade, shade, shade)).save(workspace / name)
        return CodeResult(
            stdout=name,
            exit_status=0,
            produced_images=(name,),
            wall_time=0.0,
        )


class Toolbox:
    """Registry wiring tool names to configured backends."""

    def __init__(
        self,
        search=None,
        web=None,
        sandbox=None,
        enabled: set[str] | None = None,
        transcript: TranscriptCache | None = None,
    ):
        self.search = search
        self.web = web
        self.sandbox = sandbox
        self.enabled = enabled
        self.transcript = transcript

    def _require(self, name: str, backend):
        if self.enabled is not None and name not in self.enabled:
            raise ToolUnavailableError(f"tool disabled: {name}")
        if backend is None:
            raise ToolUnavailableError(f"tool not configured: {name}")
        return backend

    def image_search(self, image_paths: list[str]) -> Observation:
        return self._require("image_search", self.search).image_search(image_paths)

    def text_search(self, queries: list[str]) -> Observation:
        return self._require("text_search", self.search).text_search(queries)

    def web_visit(self, urls: list[str]) -> Observation:
        return self._require("web_visit", self.web).web_visit(urls)

    def execute_code(self, code: str, workspace: Path) -> CodeResult:
        return self._require("code", self.sandbox).execute(code, workspace)
