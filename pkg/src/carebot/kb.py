"""Knowledge base: question/answer entries, ingestion, indexing, staleness.

Entries come from JSONL corpus files (one object per line) or simple
markdown; the index holds per-language TF-IDF vectorizers, one vector per
question variant, and a k-means clustering for retrieval pruning once a
language has enough entries.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .text import Lang, default_stopwords, remove_stopwords, tokenize
from .vectors import Clustering, DocumentVector, VectorizerState, fit_vocabulary, kmeans, vectorize
from .nlu import CandidateResponse, retrieve_candidates


class ParseError(ValueError):
    def __init__(self, location: str, reason: str):
        super().__init__(f"{location}: {reason}")
        self.location = location
        self.reason = reason


class DuplicateIdError(ValueError):
    def __init__(self, entry_id: str):
        super().__init__(f"duplicate entry id {entry_id!r}")
        self.entry_id = entry_id


class EmptyKBError(ValueError):
    pass


_ENTRY_FIELDS = {"id", "lang", "questions", "answer", "tags", "source", "updated", "extras"}
_EXTRA_FIELDS = {"options", "buttons", "attachments"}


@dataclass(frozen=True)
class KBEntry:
    id: str
    lang: Lang
    questions: tuple[str, ...]
    answer: str
    tags: tuple[str, ...] = ()
    source: str = ""
    updated: dt.date = dt.date(1970, 1, 1)
    extras: dict = field(default_factory=dict)


def _parse_entry(obj: dict, location: str, today: dt.date) -> KBEntry:
    unknown = set(obj) - _ENTRY_FIELDS
    if unknown:
        raise ParseError(location, f"unknown fields {sorted(unknown)}")
    for required in ("id", "lang", "questions", "answer"):
        if required not in obj:
            raise ParseError(location, f"missing field {required!r}")
    try:
        lang = Lang.parse(obj["lang"])
    except ValueError as exc:
        raise ParseError(location, str(exc)) from None
    questions = tuple(str(q) for q in obj["questions"] if str(q).strip())
    if not questions:
        raise ParseError(location, "questions must be a non-empty list")
    updated = today
    if "updated" in obj:
        try:
            updated = dt.date.fromisoformat(obj["updated"])
        except (TypeError, ValueError):
            raise ParseError(location, f"bad date {obj['updated']!r}") from None
        if updated > today:
            raise ParseError(location, f"updated date {updated} is in the future")
    extras = obj.get("extras", {})
    if not isinstance(extras, dict) or set(extras) - _EXTRA_FIELDS:
        raise ParseError(location, f"extras keys must be among {sorted(_EXTRA_FIELDS)}")
    return KBEntry(
        id=str(obj["id"]),
        lang=lang,
        questions=questions,
        answer=str(obj["answer"]),
        tags=tuple(str(t) for t in obj.get("tags", [])),
        source=str(obj.get("source", "")),
        updated=updated,
        extras=extras,
    )


def ingest_source(
    document: str,
    format: str = "jsonl",
    *,
    source: str | None = None,
    lang: Lang | None = None,
    today: dt.date | None = None,
) -> list[KBEntry]:
    """Parse a corpus document into entries.

    jsonl: one entry object per non-blank line, unknown fields rejected.
    markdown: each '###' heading is a question line (variants separated by
    ' / '), the body until the next heading is the answer; `lang` is required
    and ids are slugs of the first variant.
    """
    today = today or dt.date.today()
    entries: list[KBEntry] = []
    seen: set[str] = set()
    if format == "jsonl":
        for lineno, line in enumerate(document.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}", f"invalid JSON: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise ParseError(f"line {lineno}", "expected a JSON object")
            entry = _parse_entry(obj, f"line {lineno}", today)
            if source is not None and not entry.source:
                entry = dataclasses.replace(entry, source=source)
            if entry.id in seen:
                raise DuplicateIdError(entry.id)
            seen.add(entry.id)
            entries.append(entry)
    elif format == "markdown":
        if lang is None:
            raise ValueError("markdown ingestion requires a language")
        for section_no, (heading, body) in enumerate(_markdown_sections(document), start=1):
            questions = tuple(q.strip() for q in heading.split(" / ") if q.strip())
            answer = body.strip()
            if not questions or not answer:
                raise ParseError(f"section {section_no}", "heading and body must be non-empty")
            entry_id = _slug(questions[0])
            if entry_id in seen:
                raise DuplicateIdError(entry_id)
            seen.add(entry_id)
            entries.append(
                KBEntry(
                    id=entry_id,
                    lang=lang,
                    questions=questions,
                    answer=answer,
                    source=source or "",
                    updated=today,
                )
            )
    else:
        raise ValueError(f"unknown corpus format {format!r}")
    return entries


def _markdown_sections(document: str):
    heading = None
    body: list[str] = []
    for line in document.splitlines():
        if line.startswith("### "):
            if heading is not None:
                yield heading, "\n".join(body)
            heading = line[4:].strip()
            body = []
        elif heading is not None:
            body.append(line)
    if heading is not None:
        yield heading, "\n".join(body)


def _slug(text: str) -> str:
    return re.sub(r"[^0-9a-z؀-ۿ]+", "_", text.lower()).strip("_") or "entry"


# ---------------------------------------------------------------------------
# Index
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IndexConfig:
    cluster_min: int = 32
    seed: int = 13


@dataclass
class KBIndex:
    vectorizers: dict[Lang, VectorizerState]
    entry_vectors: dict[str, DocumentVector]  # all variants combined, used for clustering
    variant_vectors: dict[str, list[DocumentVector]]  # retrieval scores use the best variant
    clusterings: dict[Lang, Clustering]
    ids_by_lang: dict[Lang, list[str]]
    built_at: dt.datetime

    def entry_ids(self, lang: Lang) -> list[str]:
        return self.ids_by_lang.get(lang, [])


class KnowledgeBase:
    """In-memory entry store; re-ingesting a source replaces its entries."""

    def __init__(self, stopwords: dict[Lang, frozenset[str]] | None = None):
        self.entries: dict[str, KBEntry] = {}
        self._stopwords = stopwords or {lang: default_stopwords(lang) for lang in Lang}

    def __len__(self) -> int:
        return len(self.entries)

    def add_entries(self, entries: Sequence[KBEntry]) -> None:
        """Insert parsed entries, replacing everything from the same sources."""
        sources = {e.source for e in entries}
        replaced = {eid for eid, e in self.entries.items() if e.source in sources}
        for entry in entries:
            existing = self.entries.get(entry.id)
            if existing is not None and entry.id not in replaced:
                raise DuplicateIdError(entry.id)
        for eid in replaced:
            del self.entries[eid]
        for entry in entries:
            self.entries[entry.id] = entry

    def ingest_file(
        self, path: str | Path, lang: Lang = Lang.EN, today: dt.date | None = None
    ) -> list[KBEntry]:
        path = Path(path)
        fmt = "markdown" if path.suffix.lower() in {".md", ".markdown"} else "jsonl"
        text = path.read_bytes().decode("utf-8", errors="replace")
        kwargs: dict = {"source": str(path), "today": today}
        if fmt == "markdown":
            kwargs["lang"] = lang
        entries = ingest_source(text, fmt, **kwargs)
        self.add_entries(entries)
        return entries

    def content_tokens(self, entry: KBEntry) -> list[list[str]]:
        """One stopword-filtered token list per question variant."""
        stop = self._stopwords[entry.lang]
        return [
            [t.normalized for t in remove_stopwords(tokenize(q, entry.lang), stop)]
            for q in entry.questions
        ]

    def rebuild_index(self, config: IndexConfig = IndexConfig()) -> KBIndex:
        """Fit per-language vectorizers and vectors; cluster large languages.

        Clustering attaches when a language holds at least config.cluster_min
        entries, with k = ceil(sqrt(entry count)).
        """
        by_lang: dict[Lang, list[KBEntry]] = {}
        for entry in self.entries.values():
            by_lang.setdefault(entry.lang, []).append(entry)
        if not by_lang:
            raise EmptyKBError("knowledge base holds no entries")
        vectorizers: dict[Lang, VectorizerState] = {}
        entry_vectors: dict[str, DocumentVector] = {}
        variant_vectors: dict[str, list[DocumentVector]] = {}
        clusterings: dict[Lang, Clustering] = {}
        ids_by_lang: dict[Lang, list[str]] = {}
        for lang, entries in sorted(by_lang.items(), key=lambda kv: kv[0].value):
            entries = sorted(entries, key=lambda e: e.id)
            ids_by_lang[lang] = [e.id for e in entries]
            variant_docs: list[list[str]] = []
            per_entry: list[list[list[str]]] = []
            for entry in entries:
                docs = self.content_tokens(entry)
                per_entry.append(docs)
                variant_docs.extend(docs)
            state = fit_vocabulary(variant_docs)
            vectorizers[lang] = state
            combined: list[DocumentVector] = []
            for entry, docs in zip(entries, per_entry):
                variant_vectors[entry.id] = [vectorize(doc, state) for doc in docs]
                all_tokens = [term for doc in docs for term in doc]
                vec = vectorize(all_tokens, state)
                entry_vectors[entry.id] = vec
                combined.append(vec)
            if len(entries) >= config.cluster_min:
                k = math.isqrt(len(entries) - 1) + 1
                clusterings[lang] = kmeans(combined, k=k, seed=config.seed)
        return KBIndex(
            vectorizers=vectorizers,
            entry_vectors=entry_vectors,
            variant_vectors=variant_vectors,
            clusterings=clusterings,
            ids_by_lang=ids_by_lang,
            built_at=dt.datetime.now(),
        )

    def query(
        self,
        text: str,
        lang: Lang,
        index: KBIndex,
        top_n: int = 5,
    ) -> list[tuple[KBEntry, float]]:
        """Text pipeline -> vectorize -> retrieve, as (entry, score) pairs."""
        tokens = remove_stopwords(tokenize(text, lang), self._stopwords[lang])
        state = index.vectorizers.get(lang)
        if state is None:
            raise EmptyKBError(f"index not built for language {lang.value!r}")
        query_vec = vectorize([t.normalized for t in tokens], state)
        candidates = retrieve_candidates(query_vec, index, lang, top_n)
        return [(self.entries[c.entry_id], c.score) for c in candidates]


def staleness_report(
    entries: Sequence[KBEntry],
    now: dt.date | None = None,
    window_days: int = 14,
) -> list[tuple[str, int]]:
    """Entries older than the window as (id, age in days), oldest first."""
    now = now or dt.date.today()
    stale = [
        (entry.id, (now - entry.updated).days)
        for entry in entries
        if (now - entry.updated).days > window_days
    ]
    stale.sort(key=lambda pair: (-pair[1], pair[0]))
    return stale
