"""Shared answer/consistency judging helpers.

One judge client serves curation, rollout agreement, and eval accuracy so
that "correct" means the same thing everywhere. Prompts are versioned
fixtures: changing any of them must bump PIPELINE_VERSION.
"""

from __future__ import annotations

import re

from .endpoints import EndpointError

PIPELINE_VERSION = "1"

ANSWER_JUDGE_PROMPT = (
    "You are an impartial judge. Decide whether the model answer agrees with "
    "the gold answer for the given question. Minor wording differences do not "
    "matter; factual agreement does. Reply with exactly one word: agree or disagree."
)

FINAL_CONSISTENCY_PROMPT = (
    "You are an impartial judge. Compare the reasoning text with the final "
    "answer. Decide whether the answer follows from the reasoning. Reply with "
    "exactly one word: consistent or inconsistent."
)

STEPWISE_CONSISTENCY_PROMPT = (
    "You will be shown an image produced during an agent's reasoning and the "
    "reasoning text written immediately after seeing it. Decide whether the "
    "image supports the claims made in the reasoning. Reply with exactly one "
    "word: consistent or inconsistent."
)


def normalize_answer(text: str) -> str:
    """Trim, casefold, and collapse whitespace for exact-match comparison."""
    return re.sub(r"\s+", " ", text.strip()).casefold()


def exact_match(gold: str, answer: str) -> bool:
    return normalize_answer(gold) == normalize_answer(answer)


def _verdict_token(reply: str, positive: str, negative: str) -> bool | None:
    lowered = reply.casefold()
    if negative in lowered:
        return False
    if positive in lowered:
        return True
    return None


def judge_agreement(question: str, gold: str, answer: str, judge) -> tuple[bool | None, str]:
    """Ask the judge whether answer and gold agree; (verdict, raw reply).

    Verdict None means the judge was unavailable or unparseable (pending).
    """
    user = f"Question: {question}\nGold answer: {gold}\nModel answer: {answer}"
    try:
        result = judge.complete(
            [
                {"role": "system", "content": ANSWER_JUDGE_PROMPT},
                {"role": "user", "content": user},
            ]
        )
    except EndpointError as exc:
        return None, f"judge unavailable: {exc}"
    return _verdict_token(result.content, "agree", "disagree"), result.content


def judge_consistency(system_prompt: str, user_content, judge) -> tuple[bool | None, str]:
    """Consistent/inconsistent verdict; None when unavailable or unparseable."""
    try:
        result = judge.complete(
            [
                {"role": "system", "content": system_prompt},
                {"role": "user", "content": user_content},
            ]
        )
    except EndpointError as exc:
        return None, f"judge unavailable: {exc}"
    return _verdict_token(result.content, "consistent", "inconsistent"), result.content


def answers_agree(question: str, gold: str, answer: str, judge=None) -> tuple[bool | None, str]:
    """Exact match fast path, then the judge when one is configured."""
    if exact_match(gold, answer):
        return True, "exact match"
    if judge is None:
        return False, "no judge configured; exact match failed"
    return judge_agreement(question, gold, answer, judge)
