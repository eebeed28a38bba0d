import json

import pytest
import requests

from mmagent.endpoints import EndpointError, ScriptedEndpoint
from mmagent.protocol import ErrorEntry, PageEntry, SearchHit
from mmagent.toolbox import (
    MissingImageError,
    SandboxClient,
    SandboxUnreachableError,
    SearchProvider,
    SearchProviderConfig,
    StubSandbox,
    Toolbox,
    ToolUnavailableError,
    TranscriptCache,
    TranscriptMiss,
    WebVisitor,
    html_to_text,
)


class FakeTransport:
    """In-memory transport; maps queries/urls to canned provider responses."""

    def __init__(self, search=None, lens=None, images=None, pages=None):
        self.search = search or {}
        self.lens = lens or {}
        self.images = images or {}
        self.pages = pages or {}
        self.post_calls = []
        self.get_calls = []

    def post_json(self, url, payload, headers, timeout):
        self.post_calls.append((url, payload))
        if url.endswith("/search"):
            return self.search.get(payload["q"], (200, {"organic": []}))
        if url.endswith("/lens"):
            return self.lens.get("default", (200, {"organic": []}))
        if url.endswith("/images"):
            return self.images.get(payload["q"], (200, {"images": []}))
        raise AssertionError(f"unexpected url {url}")

    def get_text(self, url, timeout):
        self.get_calls.append(url)
        if url in self.pages:
            return self.pages[url]
        return 404, "<html>not found</html>"


@pytest.fixture
def cfg():
    return SearchProviderConfig(endpoint="https://search.test", api_key_env="TEST_KEY", limit=3)


def test_provider_config_invariants():
    with pytest.raises(ValueError):
        SearchProviderConfig(limit=0)
    with pytest.raises(ValueError):
        SearchProviderConfig(timeout=0)


class TestTextSearch:
    def test_results_grouped_per_query_in_order(self, cfg):
        transport = FakeTransport(
            search={
                "alpha": (200, {"organic": [{"title": "A1", "link": "la1", "snippet": "sa"}]}),
                "beta": (200, {"organic": [{"title": "B1", "link": "lb1", "snippet": "sb"}]}),
            }
        )
        provider = SearchProvider(cfg, transport=transport)
        obs = provider.text_search(["alpha", "beta"])
        assert [e.title for e in obs.entries] == ["A1", "B1"]

    def test_empty_query_rejected(self, cfg):
        with pytest.raises(ValueError):
            SearchProvider(cfg, transport=FakeTransport()).text_search(["  "])

    def test_provider_429_becomes_error_entry(self, cfg):
        transport = FakeTransport(search={"q": (429, {})})
        obs = SearchProvider(cfg, transport=transport).text_search(["q"])
        assert len(obs.entries) == 1
        assert isinstance(obs.entries[0], ErrorEntry)
        assert "429" in obs.entries[0].message

    def test_limit_respected(self, cfg):
        hits = [{"title": f"t{i}", "link": f"l{i}", "snippet": ""} for i in range(10)]
        transport = FakeTransport(search={"q": (200, {"organic": hits})})
        obs = SearchProvider(cfg, transport=transport).text_search(["q"])
        assert len(obs.entries) == cfg.limit


class TestImageSearch:
    def test_lens_hits_carry_image_refs(self, cfg, tmp_path):
        image = tmp_path / "facade.png"
        image.write_bytes(b"\x89PNG fake")
        transport = FakeTransport(
            lens={
                "default": (
                    200,
                    {"organic": [{"title": "JINC SAINT Hotel", "link": "l1", "imageUrl": "img1"}]},
                )
            }
        )
        obs = SearchProvider(cfg, transport=transport).image_search([str(image)])
        assert obs.entries == (SearchHit(title="JINC SAINT Hotel", link="l1", image="img1"),)

    def test_missing_image_is_hard_error(self, cfg):
        with pytest.raises(MissingImageError):
            SearchProvider(cfg, transport=FakeTransport()).image_search(["/no/such.png"])

    def test_image_candidates_parse_resolution(self, cfg):
        transport = FakeTransport(
            images={
                "face": (
                    200,
                    {
                        "images": [
                            {"title": "big", "imageUrl": "u1", "imageWidth": 800, "imageHeight": 600},
                            {"title": "small", "imageUrl": "u2", "imageWidth": 100, "imageHeight": 80},
                        ]
                    },
                )
            }
        )
        out = SearchProvider(cfg, transport=transport).image_candidates("face")
        assert out[0] == {"title": "big", "url": "u1", "width": 800, "height": 600}


class TestTranscript:
    def test_record_then_replay_identical(self, cfg, tmp_path):
        path = tmp_path / "transcript.jsonl"
        transport = FakeTransport(
            search={"q": (200, {"organic": [{"title": "T", "link": "L", "snippet": "S"}]})}
        )
        recorder = SearchProvider(cfg, transport=transport, transcript=TranscriptCache(path))
        first = recorder.text_search(["q"])

        replayer = SearchProvider(
            cfg, transport=FakeTransport(), transcript=TranscriptCache(path, replay=True)
        )
        second = replayer.text_search(["q"])
        assert first == second

    def test_replay_miss_raises(self, cfg, tmp_path):
        path = tmp_path / "transcript.jsonl"
        path.write_text("")
        provider = SearchProvider(
            cfg, transport=FakeTransport(), transcript=TranscriptCache(path, replay=True)
        )
        with pytest.raises(TranscriptMiss):
            provider.text_search(["unseen"])

    def test_transcript_lines_have_schema(self, cfg, tmp_path):
        path = tmp_path / "transcript.jsonl"
        transport = FakeTransport(search={"q": (200, {"organic": []})})
        SearchProvider(cfg, transport=transport, transcript=TranscriptCache(path)).text_search(["q"])
        record = json.loads(path.read_text().splitlines()[0])
        assert set(record) == {"tool", "args_canonical", "response", "timestamp"}


LONG_PAGE = "<html><body>" + "".join(f"<p>fact {i} about the subject.</p>" for i in range(600)) + "</body></html>"
SHORT_PAGE = "<html><body><p>A short page.</p><script>var x=1;</script></body></html>"


class TestWebVisit:
    def test_short_page_not_summarized(self):
        transport = FakeTransport(pages={"https://site.test/short": (200, SHORT_PAGE)})
        visitor = WebVisitor(transport=transport, threshold=4000)
        page = visitor.fetch_page("https://site.test/short")
        assert page.raw_text == "A short page."
        assert not page.was_summarized

    def test_long_page_summarized_by_endpoint(self):
        transport = FakeTransport(pages={"https://site.test/long": (200, LONG_PAGE)})
        summarizer = ScriptedEndpoint({"default": "summary of the page"})
        visitor = WebVisitor(transport=transport, summarizer=summarizer, threshold=500)
        page = visitor.fetch_page("https://site.test/long")
        assert page.was_summarized
        assert page.summarized_text == "summary of the page"
        assert len(page.raw_text) > 500  # raw length kept from before reduction

    def test_summarizer_outage_falls_back_to_truncation(self):
        class DownEndpoint:
            def complete(self, messages, **kwargs):
                raise EndpointError("down")

        transport = FakeTransport(pages={"https://site.test/long": (200, LONG_PAGE)})
        visitor = WebVisitor(transport=transport, summarizer=DownEndpoint(), threshold=500)
        page = visitor.fetch_page("https://site.test/long")
        assert not page.was_summarized
        assert page.summarized_text.endswith("[content truncated]")

    def test_dead_url_does_not_affect_others(self):
        transport = FakeTransport(pages={"https://site.test/ok": (200, SHORT_PAGE)})
        visitor = WebVisitor(transport=transport)
        obs = visitor.web_visit(["https://site.test/dead", "https://site.test/ok"])
        assert isinstance(obs.entries[0], ErrorEntry)
        assert obs.entries[1] == PageEntry(url="https://site.test/ok", content="A short page.")

    def test_invalid_url_is_error_entry(self):
        obs = WebVisitor(transport=FakeTransport()).web_visit(["not a url"])
        assert isinstance(obs.entries[0], ErrorEntry)

    def test_html_to_text_strips_script_and_tags(self):
        assert html_to_text(SHORT_PAGE) == "A short page."


class FakeResponse:
    def __init__(self, status_code=200, payload=None):
        self.status_code = status_code
        self._payload = payload or {}

    def raise_for_status(self):
        if self.status_code >= 400:
            raise requests.HTTPError(f"{self.status_code}")

    def json(self):
        return self._payload


class FakeSession:
    def __init__(self, payload=None, fail=False):
        self.payload = payload or {}
        self.fail = fail
        self.calls = []

    def post(self, url, json=None, timeout=None):
        self.calls.append((url, json))
        if self.fail:
            raise requests.ConnectionError("refused")
        return FakeResponse(200, self.payload)


class TestSandboxClient:
    def test_execute_maps_response_fields(self, tmp_path):
        session = FakeSession(
            payload={
                "stdout": "crop.png\n",
                "stderr": "",
                "exit_status": 0,
                "produced_files": ["crop.png"],
                "wall_time": 0.2,
            }
        )
        client = SandboxClient("http://localhost:1234", session=session)
        result = client.execute("print('hi')", tmp_path)
        assert result.exit_status == 0
        assert result.produced_images == ("crop.png",)

    def test_paths_escaping_workspace_are_dropped(self, tmp_path):
        session = FakeSession(
            payload={
                "stdout": "",
                "stderr": "",
                "exit_status": 0,
                "produced_files": ["ok.png", "../escape.png", "/etc/passwd"],
                "wall_time": 0.1,
            }
        )
        result = SandboxClient("http://localhost:1234", session=session).execute("x", tmp_path)
        assert result.produced_images == ("ok.png",)

    def test_unreachable_worker_raises(self, tmp_path):
        client = SandboxClient("http://localhost:1", session=FakeSession(fail=True))
        with pytest.raises(SandboxUnreachableError):
            client.execute("x", tmp_path)


class TestStubSandbox:
    def test_creates_deterministic_images(self, tmp_path):
        stub = StubSandbox()
        first = stub.execute("anything", tmp_path)
        second = stub.execute("anything", tmp_path)
        assert first.produced_images == ("subimage_001.png",)
        assert second.produced_images == ("subimage_002.png",)
        assert (tmp_path / "subimage_001.png").is_file()


class TestToolboxRegistry:
    def test_disabled_tool_raises(self):
        toolbox = Toolbox(enabled=set())
        with pytest.raises(ToolUnavailableError):
            toolbox.text_search(["q"])

    def test_unconfigured_backend_raises(self):
        with pytest.raises(ToolUnavailableError):
            Toolbox().execute_code("x", "/tmp")
