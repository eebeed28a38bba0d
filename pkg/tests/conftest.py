from __future__ import annotations

from pathlib import Path

import pytest

from mmagent.orchestrator import (
    MODE_DEEP_RESEARCH,
    TERMINATION_ANSWERED,
    TERMINATION_MAX_TURNS,
    Task,
    Trajectory,
    TurnRecord,
)
from mmagent.protocol import (
    OBSERVATION_CLOSE,
    OBSERVATION_OPEN,
    CodeEntry,
    FinalAnswer,
    Observation,
    SearchHit,
    ToolCall,
    TurnSegments,
    serialize_turn,
)

FIXTURES = Path(__file__).parent / "fixtures"


def tool_turn(think, name, arguments, observation=None, produced=None):
    seg = TurnSegments(think=think, action=ToolCall(name, arguments))
    return TurnRecord(
        segments=TurnSegments(think=think, action=seg.action, raw=serialize_turn(seg)),
        observation=observation,
        produced_images=dict(produced or {}),
        prompt_tokens=20,
        completion_tokens=10,
    )


def answer_turn(think, text):
    seg = TurnSegments(think=think, action=FinalAnswer(text))
    return TurnRecord(
        segments=TurnSegments(think=think, action=seg.action, raw=serialize_turn(seg)),
        prompt_tokens=20,
        completion_tokens=10,
    )


def search_trajectory(task_id, gold="Chongqing", answer=None, question="Where was this taken?"):
    """image_search -> text_search -> answer, well-formed and Answered."""
    answer = gold if answer is None else answer
    task = Task(id=task_id, question=question, gold_answer=gold)
    hits = Observation(entries=(SearchHit(title="JINC SAINT Hotel", link="l1", image="i1"),))
    snippets = Observation(entries=(SearchHit(title="Jinke Saint Hotel", link="l2", snippet="6th Floor, Tower A, Chongqing"),))
    turns = [
        tool_turn("Identify the building with an image search.", "image_search", {"image_paths": ["<image>"]}, hits),
        tool_turn("Confirm the location with a text search.", "text_search", {"queries": ["JINC Saint Hotel location"]}, snippets),
        answer_turn(f"The searches agree the answer is {answer}.", answer),
    ]
    return Trajectory(
        task=task,
        mode=MODE_DEEP_RESEARCH,
        turns=turns,
        final_answer=answer,
        termination=TERMINATION_ANSWERED,
        episode_key=task_id,
    )


def crop_trajectory(
    task_id,
    crops=1,
    exit_status=0,
    image_prefix="subimage",
    gold="white",
    answer=None,
    crop_thinks=None,
    question="What color is the dog?",
):
    """code turns producing images, then an answer."""
    answer = gold if answer is None else answer
    task = Task(id=task_id, question=question, gold_answer=gold)
    turns = []
    for index in range(1, crops + 1):
        rel = f"{image_prefix}_{index:03d}.png"
        label = f"<sub-image {index}>"
        obs = Observation(
            entries=(CodeEntry(stdout=rel, exit_status=exit_status, image_refs=(label,)),)
        )
        think = (
            crop_thinks[index - 1]
            if crop_thinks
            else f"Crop region {index} of the image to look closer."
        )
        turns.append(
            tool_turn(think, "code", {"code": f"img.crop(({index}, 0, 10, 10))"}, obs, {label: rel})
        )
    turns.append(answer_turn(f"The crop shows the object clearly; the answer is {answer}.", answer))
    return Trajectory(
        task=task,
        mode=MODE_DEEP_RESEARCH,
        turns=turns,
        final_answer=answer,
        termination=TERMINATION_ANSWERED,
        episode_key=task_id,
    )


def truncated_trajectory(task_id, question="q"):
    """Tool call only, no terminal answer: a format defect."""
    task = Task(id=task_id, question=question, gold_answer="gold")
    turns = [
        tool_turn(
            "Keep cropping without ever answering.",
            "code",
            {"code": "img.crop((0, 0, 1, 1))"},
            Observation(entries=(CodeEntry(stdout="x.png", image_refs=("<sub-image 1>",)),)),
            {"<sub-image 1>": "x.png"},
        )
    ]
    return Trajectory(
        task=task,
        mode=MODE_DEEP_RESEARCH,
        turns=turns,
        final_answer=None,
        termination=TERMINATION_MAX_TURNS,
        episode_key=task_id,
    )


def load_trace(name: str) -> str:
    return (FIXTURES / name).read_text(encoding="utf-8")


def split_trace(text: str):
    """Split a full dialogue trace into (turn text, observation text) pairs.

    The text between observations is one model turn; the final turn has no
    observation.
    """
    pairs = []
    pos = 0
    while True:
        open_idx = text.find(OBSERVATION_OPEN, pos)
        if open_idx < 0:
            tail = text[pos:].strip()
            if tail:
                pairs.append((tail, None))
            return pairs
        close_idx = text.find(OBSERVATION_CLOSE, open_idx)
        if close_idx < 0:
            raise ValueError("unterminated observation in trace")
        close_end = close_idx + len(OBSERVATION_CLOSE)
        pairs.append((text[pos:open_idx].strip(), text[open_idx:close_end]))
        pos = close_end


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES
