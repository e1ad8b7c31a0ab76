"""Understanding phase: intent classification, entity recognition, candidate
retrieval and response selection.

An intent fires when the best cosine similarity between the query and any of
its trigger phrases reaches the intent's threshold (0.7 unless configured
otherwise). Entities come from gazetteers and token patterns, resolved
leftmost-longest. Retrieval scores KB entries by their best-matching question
variant, optionally pruned to the nearest k-means cluster.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

from .text import Lang, Token, default_stopwords, remove_stopwords, tokenize
from .vectors import (
    DocumentVector,
    VectorizerState,
    cosine,
    fit_vocabulary,
    forest_predict,
    nearest_centroid,
    vectorize,
)

if TYPE_CHECKING:
    from .dialog import DialogState
    from .kb import KBIndex, KnowledgeBase
    from .vectors import ForestModel

DEFAULT_THRESHOLD = 0.7


class EmptyCatalogError(ValueError):
    pass


class CatalogFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Intent:
    name: str
    triggers: dict[Lang, tuple[str, ...]]
    threshold: float = DEFAULT_THRESHOLD


@dataclass(frozen=True)
class IntentPrediction:
    intent: str | None
    score: float
    candidates: tuple[tuple[str, float], ...]

    @property
    def confident(self) -> bool:
        return self.intent is not None


@dataclass(frozen=True)
class Entity:
    type: str
    value: str
    span: tuple[int, int]  # token positions, end exclusive
    source: str  # "gazetteer" | "pattern"


@dataclass
class CandidateResponse:
    entry_id: str
    score: float
    rerank: float | None = None


def load_intent_catalog(path: str | Path) -> list[Intent]:
    """Read the intent catalog file.

    Format: {"intents": [{"name", "threshold"?, "triggers": {"en": [...], "ar": [...]}}]}
    Unknown keys and duplicate names are rejected.
    """
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "intents" not in doc:
        raise CatalogFormatError(f"{path}: expected an object with an 'intents' list")
    intents: list[Intent] = []
    seen: set[str] = set()
    for i, raw in enumerate(doc["intents"]):
        extra = set(raw) - {"name", "threshold", "triggers"}
        if extra:
            raise CatalogFormatError(f"{path}: intent #{i}: unknown fields {sorted(extra)}")
        name = raw.get("name")
        if not name or not isinstance(name, str):
            raise CatalogFormatError(f"{path}: intent #{i}: missing name")
        if name in seen:
            raise CatalogFormatError(f"{path}: duplicate intent {name!r}")
        seen.add(name)
        triggers: dict[Lang, tuple[str, ...]] = {}
        for lang_value, phrases in raw.get("triggers", {}).items():
            lang = Lang.parse(lang_value)
            triggers[lang] = tuple(str(p) for p in phrases)
        if not any(triggers.values()):
            raise CatalogFormatError(f"{path}: intent {name!r} has no trigger phrases")
        threshold = float(raw.get("threshold", DEFAULT_THRESHOLD))
        if not 0.0 < threshold <= 1.0:
            raise CatalogFormatError(f"{path}: intent {name!r}: threshold {threshold} outside (0, 1]")
        intents.append(Intent(name, triggers, threshold))
    return intents


class IntentClassifier:
    """TF-IDF trigger-phrase matcher over an intent catalog.

    A per-language vectorizer is fitted over all trigger phrases; an intent's
    score for a query is the max cosine against its phrases in that language.
    """

    def __init__(self, catalog: Sequence[Intent], stopwords: dict[Lang, frozenset[str]] | None = None):
        if not catalog:
            raise EmptyCatalogError("intent catalog is empty")
        self.catalog = list(catalog)
        self._stopwords = stopwords or {lang: default_stopwords(lang) for lang in Lang}
        self._states: dict[Lang, VectorizerState] = {}
        self._phrase_vectors: dict[Lang, dict[str, list[DocumentVector]]] = {}
        for lang in Lang:
            docs: list[list[str]] = []
            owners: list[str] = []
            for intent in self.catalog:
                for phrase in intent.triggers.get(lang, ()):
                    docs.append(self._pipeline(phrase, lang))
                    owners.append(intent.name)
            if not docs:
                continue
            state = fit_vocabulary(docs)
            self._states[lang] = state
            by_intent: dict[str, list[DocumentVector]] = {}
            for doc, owner in zip(docs, owners):
                by_intent.setdefault(owner, []).append(vectorize(doc, state))
            self._phrase_vectors[lang] = by_intent

    def _pipeline(self, phrase: str, lang: Lang) -> list[str]:
        tokens = tokenize(phrase, lang)
        return [t.normalized for t in remove_stopwords(tokens, self._stopwords[lang])]

    def vectorizer(self, lang: Lang) -> VectorizerState | None:
        return self._states.get(lang)

    def classify(self, utterance: Sequence[Token], lang: Lang) -> IntentPrediction:
        """Score every intent; the winner must reach its own threshold."""
        terms = [t.normalized for t in utterance]
        state = self._states.get(lang)
        scores: dict[str, float] = {intent.name: 0.0 for intent in self.catalog}
        if state is not None:
            query = vectorize(terms, state)
            for name, phrase_vecs in self._phrase_vectors[lang].items():
                scores[name] = max((cosine(query, pv) for pv in phrase_vecs), default=0.0)
        ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
        top_name, top_score = ranked[0]
        threshold = next(i.threshold for i in self.catalog if i.name == top_name)
        winner = top_name if top_score >= threshold else None
        return IntentPrediction(winner, top_score, tuple(ranked))


def classify_intent(
    utterance: Sequence[Token],
    catalog: Sequence[Intent],
    lang: Lang,
    stopwords: dict[Lang, frozenset[str]] | None = None,
) -> IntentPrediction:
    """One-shot convenience wrapper; prefer a shared IntentClassifier."""
    return IntentClassifier(catalog, stopwords).classify(utterance, lang)


# ---------------------------------------------------------------------------
# Entity recognition
# ---------------------------------------------------------------------------


@dataclass
class Gazetteer:
    """Alias phrases (as normalized token tuples) mapped to canonical values."""

    entries: dict[str, dict[tuple[str, ...], str]]  # type -> alias tokens -> canonical
    max_len: int

    @classmethod
    def build(cls, raw: dict[str, dict[str, list[str]]], lang_hint: Lang = Lang.AR) -> "Gazetteer":
        # Arabic normalization is a superset of the English rules for the
        # character classes aliases use, so one pass covers both languages.
        entries: dict[str, dict[tuple[str, ...], str]] = {}
        max_len = 1
        for etype, canon_map in raw.items():
            table: dict[tuple[str, ...], str] = {}
            for canonical, aliases in canon_map.items():
                for alias in [canonical, *aliases]:
                    key = tuple(t.normalized for t in tokenize(alias, lang_hint))
                    if key:
                        table[key] = canonical
                        max_len = max(max_len, len(key))
            entries[etype] = table
        return cls(entries, max_len)


def load_gazetteers(path: str | Path) -> Gazetteer:
    """Read the gazetteer file: {"type": {"canonical": ["alias", ...]}}."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise CatalogFormatError(f"{path}: expected an object of entity types")
    return Gazetteer.build(raw)


def recognize_entities(
    utterance: Sequence[Token],
    gazetteers: Gazetteer | None = None,
    patterns: dict[str, list[str]] | None = None,
) -> list[Entity]:
    """Leftmost-longest scan over normalized tokens.

    Gazetteer matches report the canonical value; single-token pattern matches
    report the surface text. Overlaps resolve to the longest match; equal
    lengths prefer gazetteers, then type name order.
    """
    if gazetteers is None:
        gazetteers = Gazetteer({}, 1)
    compiled = {
        etype: [re.compile(p) for p in pats] for etype, pats in (patterns or {}).items()
    }
    terms = [t.normalized for t in utterance]
    found: list[Entity] = []
    i = 0
    while i < len(terms):
        best: Entity | None = None
        for length in range(min(gazetteers.max_len, len(terms) - i), 0, -1):
            window = tuple(terms[i : i + length])
            hits = sorted(
                (etype, table[window])
                for etype, table in gazetteers.entries.items()
                if window in table
            )
            if hits:
                etype, canonical = hits[0]
                best = Entity(etype, canonical, (i, i + length), "gazetteer")
                break
        if best is None:
            for etype in sorted(compiled):
                if any(rx.fullmatch(terms[i]) for rx in compiled[etype]):
                    best = Entity(etype, utterance[i].surface, (i, i + 1), "pattern")
                    break
        if best is None:
            i += 1
        else:
            found.append(best)
            i = best.span[1]
    return found


# ---------------------------------------------------------------------------
# Retrieval and selection
# ---------------------------------------------------------------------------


class EmptyIndexError(ValueError):
    pass


def retrieve_candidates(
    query: DocumentVector,
    index: "KBIndex",
    lang: Lang,
    top_n: int = 5,
) -> list[CandidateResponse]:
    """Top entries of `lang` by best-variant cosine, zero scores filtered.

    With a clustering attached, only the nearest cluster is scored; if that
    cluster yields fewer than top_n positive matches the full language scan
    runs instead, so pruning can only save work, not change answers.
    """
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    entry_ids = index.entry_ids(lang)
    if not entry_ids:
        raise EmptyIndexError(f"index holds no entries for language {lang.value!r}")

    def scan(ids: Sequence[str]) -> list[CandidateResponse]:
        scored = []
        for entry_id in ids:
            score = max(cosine(query, v) for v in index.variant_vectors[entry_id])
            if score > 0.0:
                scored.append(CandidateResponse(entry_id, score))
        scored.sort(key=lambda c: (-c.score, c.entry_id))
        return scored[:top_n]

    clustering = index.clusterings.get(lang)
    if clustering is not None and not query.is_zero:
        cluster = nearest_centroid(query, clustering)
        member_ids = [entry_ids[i] for i, c in clustering.assignment.items() if c == cluster]
        pruned = scan(sorted(member_ids))
        if len(pruned) >= top_n:
            return pruned
    return scan(entry_ids)


def rerank_features(
    candidate: CandidateResponse,
    state: "DialogState | None",
    kb: "KnowledgeBase",
) -> list[float]:
    """Feature row for the re-ranking forest.

    [retrieval score, entry tag matches last intent, entry language matches
    session language, token-overlap ratio between entry questions and the
    last recognized entity values]
    """
    entry = kb.entries[candidate.entry_id]
    last_intent = state.last_intent[0] if state is not None and state.last_intent else None
    tag_match = 1.0 if last_intent is not None and last_intent in entry.tags else 0.0
    lang_match = 1.0 if state is not None and state.lang is entry.lang else 0.0
    overlap = 0.0
    if state is not None and state.last_entities:
        entity_terms = {
            t.normalized
            for e in state.last_entities
            for t in tokenize(e.value, entry.lang)
        }
        if entity_terms:
            entry_terms = {
                t.normalized for q in entry.questions for t in tokenize(q, entry.lang)
            }
            overlap = len(entity_terms & entry_terms) / len(entity_terms)
    return [candidate.score, tag_match, lang_match, overlap]


def select_response(
    candidates: Sequence[CandidateResponse],
    state: "DialogState | None",
    kb: "KnowledgeBase",
    model: "ForestModel | None" = None,
) -> str | None:
    """Pick the winning KB entry id, or None for an empty candidate list.

    Without a model the top retrieval score wins; with one, the forest scores
    each candidate's feature row and the argmax wins. Ties break by entry id.
    """
    if not candidates:
        return None
    if model is None:
        best = min(candidates, key=lambda c: (-c.score, c.entry_id))
        return best.entry_id
    for cand in candidates:
        cand.rerank = forest_predict(model, rerank_features(cand, state, kb))
    best = min(candidates, key=lambda c: (-(c.rerank or 0.0), c.entry_id))
    return best.entry_id


def synthetic_rerank_training_set() -> tuple[list[list[float]], list[float]]:
    """Deterministic labeled grid for pre-training the re-ranking forest.

    Targets increase with every feature, retrieval score dominating, so a
    forest trained here prefers tag/language/entity agreement among candidates
    with comparable retrieval scores.
    """
    rows: list[list[float]] = []
    targets: list[float] = []
    for score10 in range(0, 11, 2):
        for tag in (0.0, 1.0):
            for lang in (0.0, 1.0):
                for overlap in (0.0, 0.5, 1.0):
                    score = score10 / 10.0
                    rows.append([score, tag, lang, overlap])
                    targets.append(0.6 * score + 0.25 * tag + 0.1 * lang + 0.05 * overlap)
    return rows, targets
