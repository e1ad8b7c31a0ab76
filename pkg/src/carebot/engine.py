"""Pipeline orchestrator: connect -> understand -> respond, plus the
scenario replay runner.

The engine owns the immutable configuration snapshot (KB, index, flows,
catalogs) and the per-session dialog states. Turns within one session are
serialized; reindexing builds a fresh snapshot and swaps it atomically.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import dialog, nlg
from .flowdsl import DialogFlow, parse_flow_file, validate_flows
from .kb import IndexConfig, KBIndex, KnowledgeBase, staleness_report
from .nlu import (
    CandidateResponse,
    EmptyIndexError,
    Gazetteer,
    IntentClassifier,
    load_gazetteers,
    load_intent_catalog,
    recognize_entities,
    retrieve_candidates,
    select_response,
    synthetic_rerank_training_set,
)
from .nlg import ResponsePayload, Template, load_templates
from .text import Lang, load_stopwords, remove_stopwords, tokenize
from .vectors import ForestModel, ForestParams, forest_fit, vectorize

logger = logging.getLogger("carebot.engine")


class ConfigError(ValueError):
    pass


class UnknownSessionError(KeyError):
    pass


_CONFIG_KEYS = {
    "languages", "kb_dir", "flows_dir", "intents", "templates", "gazetteers",
    "stopwords", "patterns", "static_dir", "kb_floor", "suggest_low", "top_n",
    "cluster_min", "seed", "staleness_window_days", "cors_origin",
    "transcript_dir", "rerank",
}


@dataclass
class EngineConfig:
    languages: list[Lang]
    kb_dir: Path
    flows_dir: Path
    intents: Path
    templates: Path
    gazetteers: Path
    stopwords: dict[Lang, Path]
    patterns: dict[str, list[str]] = field(default_factory=dict)
    static_dir: Path | None = None
    kb_floor: float = 0.5
    suggest_low: float = 0.3
    top_n: int = 12
    cluster_min: int = 32
    seed: int = 13
    staleness_window_days: int = 14
    cors_origin: str = "*"
    transcript_dir: Path | None = None
    rerank: bool = False

    @classmethod
    def load(cls, path: str | Path) -> "EngineConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        unknown = set(raw) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        base = path.parent

        def resolve(value: str | None) -> Path | None:
            if value is None:
                return None
            p = Path(value)
            return p if p.is_absolute() else base / p

        try:
            languages = [Lang.parse(v) for v in raw.get("languages", ["en", "ar"])]
            stopwords = {Lang.parse(k): resolve(v) for k, v in raw["stopwords"].items()}
            config = cls(
                languages=languages,
                kb_dir=resolve(raw["kb_dir"]),
                flows_dir=resolve(raw["flows_dir"]),
                intents=resolve(raw["intents"]),
                templates=resolve(raw["templates"]),
                gazetteers=resolve(raw["gazetteers"]),
                stopwords=stopwords,
                patterns={str(k): [str(p) for p in v] for k, v in raw.get("patterns", {}).items()},
                static_dir=resolve(raw.get("static_dir")),
                kb_floor=float(raw.get("kb_floor", 0.5)),
                suggest_low=float(raw.get("suggest_low", 0.3)),
                top_n=int(raw.get("top_n", 12)),
                cluster_min=int(raw.get("cluster_min", 32)),
                seed=int(raw.get("seed", 13)),
                staleness_window_days=int(raw.get("staleness_window_days", 14)),
                cors_origin=str(raw.get("cors_origin", "*")),
                transcript_dir=resolve(raw.get("transcript_dir")),
                rerank=bool(raw.get("rerank", False)),
            )
        except KeyError as exc:
            raise ConfigError(f"{path}: missing config key {exc}") from None
        config.validate()
        return config

    def validate(self) -> None:
        if not self.languages:
            raise ConfigError("languages must not be empty")
        if not 0.0 < self.suggest_low < self.kb_floor <= 1.0:
            raise ConfigError(
                f"thresholds must satisfy 0 < suggest_low < kb_floor <= 1, "
                f"got suggest_low={self.suggest_low}, kb_floor={self.kb_floor}"
            )
        for name in ("kb_dir", "flows_dir", "intents", "templates", "gazetteers"):
            p = getattr(self, name)
            if p is None or not Path(p).exists():
                raise ConfigError(f"{name} path does not exist: {p}")
        for lang in self.languages:
            if lang not in self.stopwords or not self.stopwords[lang].exists():
                raise ConfigError(f"stopword file missing for language {lang.value!r}")


@dataclass
class Snapshot:
    kb: KnowledgeBase
    index: KBIndex
    flows: dict[str, DialogFlow]
    classifier: IntentClassifier
    templates: dict[str, Template]
    gazetteers: Gazetteer
    stopwords: dict[Lang, frozenset[str]]
    rerank_model: ForestModel | None = None


def _load_snapshot(config: EngineConfig) -> Snapshot:
    stopwords = {lang: load_stopwords(path, lang) for lang, path in config.stopwords.items()}
    catalog = load_intent_catalog(config.intents)
    classifier = IntentClassifier(catalog, stopwords)
    templates = load_templates(config.templates)
    if nlg.WELCOME_TEMPLATE not in templates:
        raise ConfigError(f"template catalog must define {nlg.WELCOME_TEMPLATE!r}")
    gazetteers = load_gazetteers(config.gazetteers)

    flows: dict[str, DialogFlow] = {}
    for path in sorted(Path(config.flows_dir).glob("*.json")):
        flow = parse_flow_file(path)
        flows[flow.id] = flow
    diagnostics = validate_flows(
        list(flows.values()), [i.name for i in catalog], templates.keys(), config.languages
    )
    if diagnostics:
        summary = "; ".join(str(d) for d in diagnostics[:5])
        raise ConfigError(f"flow validation failed with {len(diagnostics)} diagnostic(s): {summary}")

    kb = KnowledgeBase(stopwords)
    for path in sorted(Path(config.kb_dir).glob("*.jsonl")):
        kb.ingest_file(path)
    for path in sorted(Path(config.kb_dir).glob("*.md")):
        kb.ingest_file(path)
    index = kb.rebuild_index(IndexConfig(cluster_min=config.cluster_min, seed=config.seed))

    model = None
    if config.rerank:
        rows, targets = synthetic_rerank_training_set()
        model = forest_fit(rows, targets, ForestParams(seed=config.seed))
    return Snapshot(kb, index, flows, classifier, templates, gazetteers, stopwords, model)


@dataclass
class TurnResult:
    index: int
    user: str
    passed: bool
    failure: str | None = None


@dataclass
class ScenarioReport:
    name: str
    results: list[TurnResult]
    duration_ms: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "duration_ms": round(self.duration_ms, 3),
            "turns": [
                {"index": r.index, "user": r.user, "passed": r.passed, "failure": r.failure}
                for r in self.results
            ],
        }


@dataclass
class ScenarioScript:
    name: str
    language: Lang | None
    turns: list[dict]
    expect_greeting: dict | None = None

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioScript":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        turns = raw.get("turns", [])
        if not turns:
            raise ConfigError(f"{path}: scenario needs at least one turn")
        for i, turn in enumerate(turns):
            if "user" not in turn:
                raise ConfigError(f"{path}: turn {i} has no user text")
            if not turn.get("expect") and not turn.get("payloads"):
                raise ConfigError(f"{path}: turn {i} has no expectations")
        language = raw.get("language")
        return cls(
            name=str(raw.get("name", Path(path).stem)),
            language=Lang.parse(language) if language else None,
            turns=turns,
            expect_greeting=raw.get("expect_greeting"),
        )


def payloads_json(payloads: Sequence[ResponsePayload]) -> str:
    """Canonical JSON for a payload list (replay comparisons are byte-exact)."""
    return json.dumps([p.to_dict() for p in payloads], ensure_ascii=False, sort_keys=True)


class Engine:
    """Thread-safe conversation engine over one configuration."""

    def __init__(self, config: EngineConfig):
        self.config = config
        self._snap = _load_snapshot(config)
        self._sessions: dict[str, dialog.DialogState] = {}
        self._session_locks: dict[str, threading.Lock] = {}
        self._lock = threading.Lock()
        if config.transcript_dir is not None:
            Path(config.transcript_dir).mkdir(parents=True, exist_ok=True)

    @classmethod
    def from_config_file(cls, path: str | Path) -> "Engine":
        return cls(EngineConfig.load(path))

    @property
    def snapshot(self) -> Snapshot:
        return self._snap

    @property
    def kb(self) -> KnowledgeBase:
        return self._snap.kb

    @property
    def flows(self) -> dict[str, DialogFlow]:
        return self._snap.flows

    # -- sessions ----------------------------------------------------------

    def start_session(self, lang: Lang | None = None) -> tuple[str, list[ResponsePayload]]:
        state = dialog.start_session(lang)
        with self._lock:
            self._sessions[state.session_id] = state
            self._session_locks[state.session_id] = threading.Lock()
        greeting = nlg.welcome(lang, self._snap.templates)
        self._transcribe(state.session_id, None, [greeting], greeting=True)
        return state.session_id, [greeting]

    def get_session(self, session_id: str) -> dialog.DialogState:
        with self._lock:
            state = self._sessions.get(session_id)
        if state is None:
            raise UnknownSessionError(session_id)
        return state

    def session_count(self) -> int:
        with self._lock:
            return len(self._sessions)

    # -- the three phases --------------------------------------------------

    def handle_message(self, session_id: str, text: str) -> list[ResponsePayload]:
        state = self.get_session(session_id)
        with self._session_locks[session_id]:
            snap = self._snap
            logger.info("phase=connect session=%s turn=%d chars=%d", session_id[:8], state.turn_count + 1, len(text))
            if state.lang is None:
                payloads = self._pick_language(state, text, snap)
                logger.info("phase=understand session=%s language_selection=1", session_id[:8])
                logger.info("phase=respond session=%s payloads=%d", session_id[:8], len(payloads))
                self._transcribe(session_id, text, payloads)
                return payloads

            lang = state.lang
            tokens = tokenize(text, lang)
            content = remove_stopwords(tokens, snap.stopwords[lang])
            prediction = snap.classifier.classify(content, lang)
            entities = recognize_entities(tokens, snap.gazetteers, self.config.patterns)
            dialog.track(state, prediction, entities, text, snap.flows)
            candidates = self._retrieve(content, lang, snap)
            logger.info(
                "phase=understand session=%s intent=%s score=%.3f entities=%d candidates=%d",
                session_id[:8], prediction.intent, prediction.score, len(entities), len(candidates),
            )

            try:
                actions = dialog.decide(
                    state, prediction, snap.flows, snap.kb,
                    candidates=candidates, model=snap.rerank_model,
                    kb_floor=self.config.kb_floor, suggest_low=self.config.suggest_low,
                )
                payloads = self._render_actions(actions, state, snap)
            except Exception:
                logger.exception("turn failed for session %s", session_id[:8])
                payloads = [nlg.apology(state.lang)]
            if not payloads:
                payloads = [nlg.apology(state.lang)]
            logger.info("phase=respond session=%s payloads=%d", session_id[:8], len(payloads))
            self._transcribe(session_id, text, payloads)
            return payloads

    def _pick_language(self, state: dialog.DialogState, text: str, snap: Snapshot) -> list[ResponsePayload]:
        state.turn_count += 1
        state.last_text = text
        lowered = text.strip().lower()
        choice: Lang | None = None
        if lowered in {"english", "en", "1"}:
            choice = Lang.EN
        elif lowered in {"العربية", "عربي", "العربيه", "arabic", "ar", "2"}:
            choice = Lang.AR
        if choice is None:
            return [nlg.welcome(None, snap.templates)]
        state.lang = choice
        return [nlg.welcome(choice, snap.templates)]

    def _retrieve(self, content_tokens, lang: Lang, snap: Snapshot) -> list[CandidateResponse]:
        state = snap.index.vectorizers.get(lang)
        if state is None:
            return []
        query = vectorize([t.normalized for t in content_tokens], state)
        try:
            return retrieve_candidates(query, snap.index, lang, self.config.top_n)
        except EmptyIndexError:
            return []

    def _render_actions(self, actions, state: dialog.DialogState, snap: Snapshot) -> list[ResponsePayload]:
        payloads = []
        for action in actions:
            if action.kind == "kb_reply" and not action.entry_id:
                action = self._resolve_kb_action(action, state, snap)
            payloads.append(nlg.render(action, state, snap.templates, snap.kb.entries))
        return payloads

    def _resolve_kb_action(self, action: dialog.Action, state: dialog.DialogState, snap: Snapshot):
        """kb_answer flow steps carry a query; run retrieval to pick the entry."""
        lang = state.lang or Lang.EN
        query_text = str(action.bindings.get("query", state.last_text))
        tokens = remove_stopwords(tokenize(query_text, lang), snap.stopwords[lang])
        candidates = self._retrieve(tokens, lang, snap)
        chosen = select_response(candidates, state, snap.kb, snap.rerank_model)
        if chosen is None:
            return dialog.Action("fallback")
        return dialog.Action("kb_reply", entry_id=chosen)

    # -- maintenance -------------------------------------------------------

    def reindex(self) -> int:
        """Rebuild the whole snapshot from disk and swap it in atomically."""
        snap = _load_snapshot(self.config)
        self._snap = snap
        logger.info("reindexed: %d entries, %d flows", len(snap.kb.entries), len(snap.flows))
        return len(snap.kb.entries)

    def stale_entries(self, now: dt.date | None = None, window_days: int | None = None):
        window = self.config.staleness_window_days if window_days is None else window_days
        return staleness_report(list(self._snap.kb.entries.values()), now, window)

    def _transcribe(self, session_id: str, user: str | None, payloads, greeting: bool = False) -> None:
        if self.config.transcript_dir is None:
            return
        record = {"payloads": [p.to_dict() for p in payloads]}
        if greeting:
            record["greeting"] = True
        else:
            record["user"] = user
        path = Path(self.config.transcript_dir) / f"{session_id}.jsonl"
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Scenario replay
# ---------------------------------------------------------------------------


def _searchable_text(payloads: Sequence[ResponsePayload]) -> str:
    parts: list[str] = []
    for p in payloads:
        parts.append(p.text)
        parts.extend(p.options)
        for b in p.buttons:
            parts.extend(str(v) for v in b.values())
        for a in p.attachments:
            parts.extend(str(v) for v in a.values())
    return "\n".join(parts)


def check_expectation(expect: dict, payloads: Sequence[ResponsePayload]) -> str | None:
    """First failed assertion as text, or None when every check passes."""
    blob = _searchable_text(payloads)
    all_options = [o for p in payloads for o in p.options]
    all_buttons = [str(b.get("label", "")) for p in payloads for b in p.buttons]
    all_attachments = [a for p in payloads for a in p.attachments]
    if "type" in expect and all(p.type != expect["type"] for p in payloads):
        return f"no payload of type {expect['type']!r} (got {[p.type for p in payloads]})"
    for needle in expect.get("contains", []):
        if needle not in blob:
            return f"missing substring {needle!r}"
    for needle in expect.get("not_contains", []):
        if needle in blob:
            return f"forbidden substring {needle!r} present"
    for option in expect.get("options_include", []):
        if option not in all_options:
            return f"option {option!r} not offered (got {all_options})"
    for label in expect.get("buttons_include", []):
        if label not in all_buttons:
            return f"button {label!r} not present (got {all_buttons})"
    for kind in expect.get("attachment_kinds", []):
        if all(a.get("kind") != kind for a in all_attachments):
            return f"no attachment of kind {kind!r}"
    for needle in expect.get("attachments_contain", []):
        if not any(needle in str(v) for a in all_attachments for v in a.values()):
            return f"attachments missing substring {needle!r}"
    return None


def run_scenario(script: ScenarioScript, engine: Engine) -> ScenarioReport:
    """Replay a script through the engine and assert every expectation."""
    started = time.perf_counter()
    results: list[TurnResult] = []
    session_id, greeting = engine.start_session(script.language)
    if script.expect_greeting:
        failure = check_expectation(script.expect_greeting, greeting)
        results.append(TurnResult(0, "<greeting>", failure is None, failure))
    for i, turn in enumerate(script.turns, start=1):
        payloads = engine.handle_message(session_id, turn["user"])
        failure: str | None = None
        if "payloads" in turn:
            expected = json.dumps(turn["payloads"], ensure_ascii=False, sort_keys=True)
            actual = payloads_json(payloads)
            if expected != actual:
                failure = "payloads differ from recording"
        if failure is None and turn.get("expect"):
            failure = check_expectation(turn["expect"], payloads)
        results.append(TurnResult(i, turn["user"], failure is None, failure))
    duration_ms = (time.perf_counter() - started) * 1000.0
    return ScenarioReport(script.name, results, duration_ms)
