"""Enhanced query generation by constrained random walks over a local
encyclopedia link graph.

Seed a question on one entity, then repeatedly hop to a linked entity and
rewrite the question to reference the hidden entity indirectly, keeping
the answer constant. Every model-dependent step takes an endpoint handle
so the whole generator runs against scripted fixtures.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

from .endpoints import EndpointError

logger = logging.getLogger(__name__)

ANSWER_WORD_LIMIT = 6
TOP_K_WINDOW = 5
PERVASIVE_FRACTION = 0.005
MIN_IMAGE_RESOLUTION = 512
DEPTH_RANGE = (2, 4)

STATUS_ACTIVE = "Active"
STATUS_ACCEPTED = "Accepted"
STATUS_REJECTED = "Rejected"
STATUS_PENDING = "Pending"

REJECT_SEED_FAILURE = "SeedFailure"
REJECT_ANSWER_TOO_LONG = "AnswerTooLong"
REJECT_NOT_UNIQUE = "NotUnique"
REJECT_DEAD_END = "DeadEnd"
REJECT_EXCLUSION_LEAK = "ExclusionLeak"

UNIQUENESS_CATEGORIES = (
    "concrete_unique",
    "generic",
    "platform_or_outlet",
    "abstract_concept",
    "ambiguous",
)

SEED_QA_PROMPT = (
    "Read the encyclopedia excerpt and write one factual question about the "
    "subject, answerable from the excerpt alone, together with a short answer "
    f"of at most {ANSWER_WORD_LIMIT} words. Reply with JSON only: "
    '{"question": "...", "answer": "..."}'
)

UNIQUENESS_PROMPT = (
    "Classify the given answer term into exactly one category: "
    "concrete_unique (a single concrete referent), generic (a generic term), "
    "platform_or_outlet (a platform, site, or media outlet), abstract_concept, "
    "or ambiguous. Reply with the category name only."
)

RELATION_PROMPT = (
    "From the encyclopedia text, describe the relationship between the two "
    "entities and summarize the most distinctive properties of the second "
    'entity. Reply with JSON only: {"relation": "...", "properties": "..."}'
)

REWRITE_PROMPT = (
    "Rewrite the question so it no longer names the hidden entity. Refer to "
    "it indirectly through the related entity and the stated relation, "
    "optionally adding a short descriptive clue. Keep the meaning and the "
    "answer unchanged. Reply with the rewritten question only."
)

VALIDATE_PROMPT = (
    "Given a question and its intended answer, decide whether the answer is "
    "uniquely recoverable and the question clearly interpretable. Reply with "
    "exactly one word: valid or invalid."
)

MULTIMODAL_REWRITE_PROMPT = (
    "Rewrite the question replacing the named entity with a visual referring "
    'expression about the attached picture (for example "the person in this '
    'picture"). Keep the answer unchanged. Reply with the question only.'
)

_LINK_RE = re.compile(r"\[\[([^\[\]|]+)(?:\|[^\[\]]*)?\]\]")
_BOLD_RE = re.compile(r"'''([^']+)'''")
_REDIRECT_RE = re.compile(r"^\s*#redirect\s*\[\[([^\[\]|]+)\]\]", re.IGNORECASE)
_JSON_OBJECT_RE = re.compile(r"\{.*\}", re.DOTALL)


@dataclass(frozen=True)
class Page:
    title: str
    aliases: tuple
    intro: str
    body: str


@dataclass
class KnowledgeGraph:
    pages: dict  # title -> Page
    edges: dict  # title -> {target: mention count}
    alias_to_title: dict  # alias casefold -> canonical title
    doc_freq: dict  # title -> number of pages linking to it
    pervasive: frozenset

    def neighbors(self, title: str) -> list:
        """(target, mention frequency) ranked by frequency then name."""
        out = self.edges.get(title, {})
        return sorted(out.items(), key=lambda kv: (-kv[1], kv[0]))

    def aliases_of(self, title: str) -> tuple:
        page = self.pages.get(title)
        return page.aliases if page else ()

    @property
    def node_count(self) -> int:
        return len(self.pages)

    @property
    def edge_count(self) -> int:
        return sum(len(v) for v in self.edges.values())


def _split_intro(text: str) -> str:
    for block in text.split("\n\n"):
        if block.strip():
            return block.strip()
    return ""


def build_graph(dump) -> KnowledgeGraph:
    """Build the link graph from a dump (path to JSONL or iterable of dicts).

    Each page record is {"title": ..., "text": ...} with [[...]] link markup;
    redirect pages and bold lead terms populate the alias table. Self-links
    and links to unknown pages are dropped; corrupt records are skipped.
    """
    if isinstance(dump, (str, Path)):
        records = []
        with open(dump, encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError:
                    logger.warning("skipping corrupt dump line %d", line_no)
    else:
        records = list(dump)

    raw_pages = {}
    redirects = {}
    for record in records:
        if not isinstance(record, dict) or not record.get("title") or "text" not in record:
            logger.warning("skipping corrupt page record: %r", record)
            continue
        title = str(record["title"]).strip()
        text = str(record["text"])
        redirect = _REDIRECT_RE.match(text)
        if redirect:
            redirects[title] = redirect.group(1).strip()
        else:
            raw_pages[title] = text

    def resolve(name: str) -> str | None:
        seen = set()
        while name in redirects and name not in seen:
            seen.add(name)
            name = redirects[name]
        return name if name in raw_pages else None

    pages = {}
    edges = {}
    doc_linked = {}
    for title, text in raw_pages.items():
        intro = _split_intro(text)
        aliases = tuple(
            dict.fromkeys(
                a.strip() for a in _BOLD_RE.findall(intro) if a.strip() and a.strip() != title
            )
        )
        pages[title] = Page(title=title, aliases=aliases, intro=intro, body=text)
        counts = {}
        for match in _LINK_RE.finditer(text):
            target = resolve(match.group(1).strip())
            if target is None or target == title:
                continue
            counts[target] = counts.get(target, 0) + 1
        edges[title] = counts
        for target in counts:
            doc_linked.setdefault(target, set()).add(title)

    alias_to_title = {}
    for source, target in redirects.items():
        resolved = resolve(source)
        if resolved:
            alias_to_title[source.casefold()] = resolved
    for title, page in pages.items():
        for alias in page.aliases:
            alias_to_title.setdefault(alias.casefold(), title)

    doc_freq = {title: len(sources) for title, sources in doc_linked.items()}
    pervasive_count = int(PERVASIVE_FRACTION * len(pages))
    ranked = sorted(doc_freq.items(), key=lambda kv: (-kv[1], kv[0]))
    pervasive = frozenset(title for title, _freq in ranked[:pervasive_count])

    return KnowledgeGraph(
        pages=pages,
        edges=edges,
        alias_to_title=alias_to_title,
        doc_freq=doc_freq,
        pervasive=pervasive,
    )


@dataclass
class Hop:
    source: str
    target: str
    relation: str
    properties: str


@dataclass
class WalkRecord:
    seed_entity: str
    path: list  # visited entities, path[0] == seed_entity
    question: str = ""
    answer: str = ""
    hops: list = field(default_factory=list)
    exclusion: set = field(default_factory=set)  # casefolded names + aliases
    status: str = STATUS_ACTIVE
    reject_reason: str = ""
    image_ref: str | None = None
    text_only: bool = False
    invalid_rewrites: int = 0

    @property
    def terminal_entity(self) -> str:
        return self.path[-1]

    def excluded_for_question(self, graph: KnowledgeGraph) -> set:
        """Exclusion terms that must not leak into the question text.

        The terminal entity legitimately appears (it is the indirection
        anchor, later replaced by the image reference), so it and its
        aliases are exempt.
        """
        exempt = {self.terminal_entity.casefold()}
        exempt.update(a.casefold() for a in graph.aliases_of(self.terminal_entity))
        return {term for term in self.exclusion if term not in exempt}

    def reject(self, reason: str) -> "WalkRecord":
        self.status = STATUS_REJECTED
        self.reject_reason = reason
        return self


def _new_record(graph: KnowledgeGraph, seed_entity: str) -> WalkRecord:
    exclusion = {seed_entity.casefold()}
    exclusion.update(a.casefold() for a in graph.aliases_of(seed_entity))
    exclusion.update(t.casefold() for t in graph.pervasive)
    return WalkRecord(seed_entity=seed_entity, path=[seed_entity], exclusion=exclusion)


def _parse_json_reply(reply: str) -> dict | None:
    match = _JSON_OBJECT_RE.search(reply)
    if not match:
        return None
    try:
        data = json.loads(match.group(0))
    except json.JSONDecodeError:
        return None
    return data if isinstance(data, dict) else None


def seed_question(graph: KnowledgeGraph, entity: str, qa_model) -> WalkRecord:
    """Mine the seed page's intro/core text for an initial QA pair."""
    record = _new_record(graph, entity)
    page = graph.pages.get(entity)
    if page is None or not page.intro.strip():
        return record.reject(REJECT_SEED_FAILURE)
    excerpt = page.intro if len(page.body) <= len(page.intro) else f"{page.intro}\n\n{page.body[:2000]}"
    messages = [
        {"role": "system", "content": SEED_QA_PROMPT},
        {"role": "user", "content": f"Subject: {entity}\n\n{excerpt}"},
    ]
    for attempt in range(2):
        try:
            result = qa_model.complete(messages)
        except EndpointError:
            record.status = STATUS_PENDING
            return record
        data = _parse_json_reply(result.content)
        if not data or not str(data.get("question", "")).strip() or not str(data.get("answer", "")).strip():
            return record.reject(REJECT_SEED_FAILURE)
        question = str(data["question"]).strip()
        answer = str(data["answer"]).strip()
        if len(answer.split()) <= ANSWER_WORD_LIMIT:
            record.question = question
            record.answer = answer
            return record
        if attempt == 0:
            messages = messages + [
                {"role": "assistant", "content": result.content},
                {
                    "role": "user",
                    "content": f"The answer must be at most {ANSWER_WORD_LIMIT} words. Reply with the JSON again.",
                },
            ]
    return record.reject(REJECT_ANSWER_TOO_LONG)


def uniqueness_check(answer: str, evaluator) -> tuple:
    """(passed, category); passed None while the evaluator is unavailable."""
    if not answer.strip():
        raise ValueError("answer must be non-empty")
    try:
        result = evaluator.complete(
            [
                {"role": "system", "content": UNIQUENESS_PROMPT},
                {"role": "user", "content": answer},
            ]
        )
    except EndpointError:
        return None, ""
    lowered = result.content.casefold()
    for category in UNIQUENESS_CATEGORIES:
        if category in lowered:
            return category == "concrete_unique", category
    return None, ""


def _relation_for(graph: KnowledgeGraph, source: str, target: str, extractor) -> Hop:
    page = graph.pages[source]
    sentences = [s for s in re.split(r"(?<=[.!?])\s+", page.body) if target in s]
    context = " ".join(sentences) if sentences else page.intro
    result = extractor.complete(
        [
            {"role": "system", "content": RELATION_PROMPT},
            {"role": "user", "content": f"Entities: {source} ; {target}\nText: {context}"},
        ]
    )
    data = _parse_json_reply(result.content) or {}
    return Hop(
        source=source,
        target=target,
        relation=str(data.get("relation", "")).strip() or "related to",
        properties=str(data.get("properties", "")).strip(),
    )


def walk_step(record: WalkRecord, graph: KnowledgeGraph, rng: random.Random, extractor) -> WalkRecord:
    """One constrained hop: ranked neighbors, top-K shuffle, exclusion checks."""
    if record.status != STATUS_ACTIVE:
        return record
    current = record.path[-1]
    ranked = [name for name, _freq in graph.neighbors(current)]
    if not ranked:
        return record.reject(REJECT_DEAD_END)
    window = ranked[:TOP_K_WINDOW]
    rng.shuffle(window)
    ordered = window + ranked[TOP_K_WINDOW:]
    target = next(
        (
            name
            for name in ordered
            if name.casefold() not in record.exclusion and name not in graph.pervasive
        ),
        None,
    )
    if target is None:
        return record.reject(REJECT_DEAD_END)
    hop = _relation_for(graph, current, target, extractor)
    record.path.append(target)
    record.exclusion.add(target.casefold())
    record.exclusion.update(a.casefold() for a in graph.aliases_of(target))
    record.hops.append(hop)
    return record


def _contains_term(text: str, term: str) -> bool:
    return re.search(rf"(?<!\w){re.escape(term)}(?!\w)", text, re.IGNORECASE) is not None


def rewrite_question(record: WalkRecord, graph: KnowledgeGraph, rewriter, attempts: int = 2) -> WalkRecord:
    """Replace the hidden entity's name with an indirect reference.

    On a rewrite that still leaks the hidden entity, the hop is popped
    (its target stays excluded) so the caller can resample a different
    target; the answer is never touched.
    """
    if record.status != STATUS_ACTIVE or not record.hops:
        return record
    hop = record.hops[-1]
    hidden = hop.source
    user = (
        f"Question: {record.question}\n"
        f"Hidden entity: {hidden}\n"
        f"Related entity: {hop.target}\n"
        f"Relation: {hop.relation}\n"
        f"Distinctive properties: {hop.properties}"
    )
    for _ in range(attempts):
        result = rewriter.complete(
            [
                {"role": "system", "content": REWRITE_PROMPT},
                {"role": "user", "content": user},
            ]
        )
        candidate = result.content.strip()
        leaked = _contains_term(candidate, hidden) or any(
            _contains_term(candidate, alias) for alias in graph.aliases_of(hidden)
        )
        if candidate and not leaked:
            record.question = candidate
            return record
    record.invalid_rewrites += 1
    record.hops.pop()
    record.path.pop()
    return record


def validate_record(record: WalkRecord, graph: KnowledgeGraph, checker) -> WalkRecord:
    """Rule checks (leaks, answer length) plus the model uniqueness check."""
    if record.status != STATUS_ACTIVE:
        return record
    if len(record.answer.split()) > ANSWER_WORD_LIMIT:
        return record.reject(REJECT_ANSWER_TOO_LONG)
    for term in sorted(record.excluded_for_question(graph)):
        if _contains_term(record.question, term):
            return record.reject(f"{REJECT_EXCLUSION_LEAK}:{term}")
    try:
        result = checker.complete(
            [
                {"role": "system", "content": VALIDATE_PROMPT},
                {"role": "user", "content": f"Question: {record.question}\nAnswer: {record.answer}"},
            ]
        )
    except EndpointError:
        record.status = STATUS_PENDING
        return record
    lowered = result.content.casefold()
    if "invalid" in lowered:
        return record.reject(REJECT_NOT_UNIQUE)
    if "valid" in lowered:
        record.status = STATUS_ACCEPTED
        return record
    record.status = STATUS_PENDING
    return record


@dataclass(frozen=True)
class MultimodalQuery:
    question: str
    image_ref: str
    original_entity: str
    answer: str


def reformulate_multimodal(
    record: WalkRecord,
    graph: KnowledgeGraph,
    image_provider,
    rewriter,
    min_resolution: int = MIN_IMAGE_RESOLUTION,
) -> MultimodalQuery | None:
    """Ground the terminal entity in an image and hide its name.

    Returns None (and flags the record text-only) when no usable image
    passes the resolution floor or the name cannot be removed.
    """
    if record.status != STATUS_ACCEPTED:
        raise ValueError("only accepted records can be reformulated")
    terminal = record.terminal_entity
    properties = record.hops[-1].properties if record.hops else ""
    query = f"{terminal} {properties}".strip()
    candidates = image_provider.image_candidates(query)
    chosen = next(
        (
            c
            for c in candidates
            if c.get("url")
            and int(c.get("width", 0)) >= min_resolution
            and int(c.get("height", 0)) >= min_resolution
        ),
        None,
    )
    if chosen is None:
        record.text_only = True
        return None
    user = f"Question: {record.question}\nNamed entity to replace: {terminal}"
    for _ in range(2):
        result = rewriter.complete(
            [
                {"role": "system", "content": MULTIMODAL_REWRITE_PROMPT},
                {"role": "user", "content": user},
            ]
        )
        candidate = result.content.strip()
        leaked = _contains_term(candidate, terminal) or any(
            _contains_term(candidate, alias) for alias in graph.aliases_of(terminal)
        )
        if candidate and not leaked:
            record.image_ref = chosen["url"]
            record.question = candidate
            return MultimodalQuery(
                question=candidate,
                image_ref=chosen["url"],
                original_entity=terminal,
                answer=record.answer,
            )
    record.text_only = True
    return None


@dataclass
class WalkEndpoints:
    """Endpoint handles for the model-dependent steps; unset roles reuse qa."""

    qa: object
    evaluator: object = None
    extractor: object = None
    rewriter: object = None
    checker: object = None

    def __post_init__(self):
        self.evaluator = self.evaluator or self.qa
        self.extractor = self.extractor or self.qa
        self.rewriter = self.rewriter or self.qa
        self.checker = self.checker or self.qa


def generate_walk(
    graph: KnowledgeGraph,
    seed_entity: str,
    rng: random.Random,
    endpoints: WalkEndpoints,
    depth: int | None = None,
    max_resamples: int = 3,
) -> WalkRecord:
    """Seed, hop, rewrite, validate: one complete walk."""
    if depth is None:
        depth = rng.randint(*DEPTH_RANGE)
    record = seed_question(graph, seed_entity, endpoints.qa)
    if record.status != STATUS_ACTIVE:
        return record
    passed, category = uniqueness_check(record.answer, endpoints.evaluator)
    if passed is None:
        record.status = STATUS_PENDING
        return record
    if not passed:
        return record.reject(f"{REJECT_NOT_UNIQUE}:{category}")

    resamples = 0
    while len(record.hops) < depth and record.status == STATUS_ACTIVE:
        try:
            record = walk_step(record, graph, rng, endpoints.extractor)
            if record.status != STATUS_ACTIVE:
                break
            before = len(record.hops)
            record = rewrite_question(record, graph, endpoints.rewriter)
            if len(record.hops) < before:
                resamples += 1
                if resamples > max_resamples:
                    return record.reject(REJECT_DEAD_END)
        except EndpointError:
            record.status = STATUS_PENDING
            return record
    if record.status != STATUS_ACTIVE:
        return record
    return validate_record(record, graph, endpoints.checker)


def record_to_dict(record: WalkRecord) -> dict:
    return {
        "seed_entity": record.seed_entity,
        "question": record.question,
        "answer": record.answer,
        "path": list(record.path),
        "relations": [
            {
                "source": h.source,
                "target": h.target,
                "relation": h.relation,
                "properties": h.properties,
            }
            for h in record.hops
        ],
        "status": record.status,
        "reject_reason": record.reject_reason,
        "image_ref": record.image_ref,
        "text_only": record.text_only,
    }


def save_records(records, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record_to_dict(record), sort_keys=True, ensure_ascii=False) + "\n")
