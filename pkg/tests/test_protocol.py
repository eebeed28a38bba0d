import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmagent.protocol import (
    BAD_ARG_KEYS,
    BAD_JSON,
    MALFORMED_REASONS,
    MISSING_THINK,
    MULTIPLE_ACTIONS,
    NO_RESULTS_SENTINEL,
    TOOL_ARG_KEYS,
    UNKNOWN_TOOL,
    CodeEntry,
    ErrorEntry,
    FinalAnswer,
    Malformed,
    Observation,
    PageEntry,
    SearchHit,
    StopDecision,
    StopKind,
    ToolCall,
    TurnSegments,
    detect_stop,
    observation_from_dict,
    observation_to_dict,
    parse_turn,
    render_observation,
    serialize_turn,
)

# content that cannot collide with the tag grammar
_TAGS = ("<think>", "</think>", "<tool_call>", "</tool_call>", "<answer>", "</answer>", "<code>", "</code>")


def _clean(text: str) -> bool:
    return text == text.strip() and bool(text) and not any(tag in text for tag in _TAGS)


safe_text = st.text(
    alphabet=st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=60
).filter(_clean)

safe_list = st.lists(safe_text, min_size=1, max_size=3)


@st.composite
def well_formed_turns(draw):
    think = draw(safe_text)
    kind = draw(st.sampled_from(["answer", "image_search", "text_search", "web_visit", "code"]))
    if kind == "answer":
        action = FinalAnswer(draw(safe_text))
    elif kind == "code":
        action = ToolCall("code", {"code": draw(safe_text)})
    else:
        action = ToolCall(kind, {TOOL_ARG_KEYS[kind]: draw(safe_list)})
    return TurnSegments(think=think, action=action)


class TestParseTurn:
    def test_minimal_answer_turn(self):
        seg = parse_turn("<think>t</think><answer>a</answer>")
        assert seg.think == "t"
        assert seg.action == FinalAnswer("a")

    def test_image_search_tool_call(self):
        text = (
            "<think>look</think><tool_call>"
            '{"name": "image_search", "arguments": {"image_paths": ["p1.png"]}}'
            "</tool_call>"
        )
        seg = parse_turn(text)
        assert seg.action == ToolCall("image_search", {"image_paths": ["p1.png"]})

    def test_missing_think_is_malformed(self):
        seg = parse_turn("<answer>a</answer>")
        assert isinstance(seg.action, Malformed)
        assert seg.action.reason == MISSING_THINK

    def test_empty_think_is_malformed(self):
        seg = parse_turn("<think>  </think><answer>a</answer>")
        assert seg.action.reason == MISSING_THINK

    def test_think_after_action_is_malformed(self):
        seg = parse_turn("<answer>a</answer><think>t</think>")
        assert seg.action.reason == MISSING_THINK

    def test_arg_key_tool_mismatch(self):
        text = '<think>t</think><tool_call>{"name":"code","arguments":{"queries":["x"]}}</tool_call>'
        seg = parse_turn(text)
        assert seg.action.reason == BAD_ARG_KEYS

    def test_unknown_tool(self):
        text = '<think>t</think><tool_call>{"name":"grep","arguments":{"queries":["x"]}}</tool_call>'
        assert parse_turn(text).action.reason == UNKNOWN_TOOL

    def test_bad_json_payload(self):
        text = '<think>t</think><tool_call>{"name": "code",}</tool_call>'
        assert parse_turn(text).action.reason == BAD_JSON

    def test_both_tool_call_and_answer(self):
        text = (
            "<think>t</think>"
            '<tool_call>{"name":"text_search","arguments":{"queries":["q"]}}</tool_call>'
            "<answer>a</answer>"
        )
        assert parse_turn(text).action.reason == MULTIPLE_ACTIONS

    def test_code_block_normalizes_to_tool_call(self):
        seg = parse_turn("<think>t</think><code>\nprint(1)\n</code>")
        assert seg.action == ToolCall("code", {"code": "print(1)"})

    def test_answer_may_contain_angle_brackets(self):
        seg = parse_turn("<think>t</think><answer>a < b and <image 1></answer>")
        assert seg.action == FinalAnswer("a < b and <image 1>")

    def test_first_think_span_wins(self):
        seg = parse_turn("<think>first</think><think>second</think><answer>a</answer>")
        assert seg.think == "first"
        assert seg.action == FinalAnswer("a")

    @given(st.text(max_size=200))
    @settings(max_examples=300, deadline=None)
    def test_total_on_arbitrary_text(self, text):
        seg = parse_turn(text)
        assert isinstance(seg.action, (ToolCall, FinalAnswer, Malformed))
        if isinstance(seg.action, Malformed):
            assert seg.action.reason in MALFORMED_REASONS

    def test_fuzz_totality_bulk(self):
        rng = random.Random(7)
        pieces = ["<think>", "</think>", "<answer>", "</answer>", "<tool_call>", "</tool_call>",
                  "<code>", "</code>", "{", "}", '"name"', "xyz", " ", "\n", '"arguments"']
        for _ in range(2000):
            text = "".join(rng.choice(pieces) for _ in range(rng.randrange(0, 12)))
            seg = parse_turn(text)
            if isinstance(seg.action, Malformed):
                assert seg.action.reason in MALFORMED_REASONS


class TestDetectStop:
    def test_incomplete_tag_awaits_more(self):
        assert detect_stop("<think>t</think><tool_") == StopDecision(StopKind.AWAIT_MORE)

    def test_trailing_text_ignored(self):
        buffer = "<think>t</think><answer>a</answer>trailing"
        decision = detect_stop(buffer)
        assert decision.kind == StopKind.STOP_AT_ANSWER
        assert buffer[: decision.offset].endswith("</answer>")

    def test_tool_call_turn_stops_at_close(self):
        buffer = (
            "<think>t</think><tool_call>"
            '{"name": "text_search", "arguments": {"queries": ["q"]}}'
            "</tool_call><extra>"
        )
        decision = detect_stop(buffer)
        assert decision.kind == StopKind.STOP_AT_TOOL_CALL
        assert buffer[: decision.offset].endswith("</tool_call>")

    def test_code_close_counts_as_tool_call_stop(self):
        decision = detect_stop("<think>t</think><code>print(1)</code>")
        assert decision.kind == StopKind.STOP_AT_TOOL_CALL

    @given(st.text(alphabet=st.sampled_from(list("<>/abcdethinkanswer_ "))).map("".join))
    @settings(max_examples=200, deadline=None)
    def test_monotone_under_extension(self, text):
        decision = detect_stop(text)
        if decision.stopped:
            extended = detect_stop(text + "<answer>late</answer>")
            assert extended.kind == decision.kind
            assert extended.offset == decision.offset

    def test_idempotent(self):
        buffer = "<think>t</think><answer>a</answer>"
        assert detect_stop(buffer) == detect_stop(buffer)


class TestSerializeRoundTrip:
    def test_answer_turn_serialization(self):
        seg = TurnSegments(think="t", action=FinalAnswer("a"))
        assert serialize_turn(seg) == "<think>t</think><answer>a</answer>"

    def test_tool_call_shape(self):
        seg = TurnSegments(
            think="t", action=ToolCall("image_search", {"image_paths": ["a.png", "b.png"]})
        )
        text = serialize_turn(seg)
        assert text.startswith("<think>t</think><tool_call>")
        assert json.loads(text[len("<think>t</think><tool_call>") : -len("</tool_call>")]) == {
            "name": "image_search",
            "arguments": {"image_paths": ["a.png", "b.png"]},
        }

    def test_malformed_rejected(self):
        seg = TurnSegments(think="t", action=Malformed("BadJson"))
        with pytest.raises(ValueError):
            serialize_turn(seg)

    @given(well_formed_turns())
    @settings(max_examples=300, deadline=None)
    def test_round_trip_identity(self, seg):
        assert parse_turn(serialize_turn(seg)) == seg


class TestRenderObservation:
    def test_empty_uses_sentinel(self):
        text = render_observation(Observation())
        assert text == f"<observation>\n{NO_RESULTS_SENTINEL}\n</observation>"

    def test_two_search_hits_numbered(self):
        obs = Observation(
            entries=(
                SearchHit(title="JINC SAINT Hotel", link="[link 1]", image="[image 1]"),
                SearchHit(title="Yangmeiling Scenic Spot", link="[link 2]", image="[image 2]"),
            )
        )
        text = render_observation(obs)
        assert "1. JINC SAINT Hotel\nlink: [link 1]\nimage: [image 1]" in text
        assert "\n\n2. Yangmeiling Scenic Spot" in text

    def test_code_result_stdout_then_image_refs(self):
        obs = Observation(entries=(CodeEntry(stdout="crop.png", image_refs=("<sub-image 1>",)),))
        text = render_observation(obs)
        assert text == "<observation>\ncrop.png\n<sub-image 1>\n</observation>"

    def test_failed_code_shows_exit_and_stderr(self):
        obs = Observation(entries=(CodeEntry(stdout="", stderr="boom", exit_status=1),))
        text = render_observation(obs)
        assert "exit status: 1" in text and "boom" in text

    def test_byte_identical_for_identical_input(self):
        obs = Observation(
            entries=(SearchHit(title="t", link="l", snippet="s"), PageEntry(url="u", content="c"))
        )
        assert render_observation(obs) == render_observation(obs)

    def test_error_entries_render(self):
        text = render_observation(Observation.from_error("provider error 429"))
        assert "1. error: provider error 429" in text

    def test_observation_dict_round_trip(self):
        obs = Observation(
            entries=(
                SearchHit(title="t", link="l", snippet="s"),
                PageEntry(url="u", content="c"),
                CodeEntry(stdout="out", stderr="", exit_status=0, image_refs=("<sub-image 1>",)),
                ErrorEntry(message="m"),
            )
        )
        assert observation_from_dict(observation_to_dict(obs)) == obs
