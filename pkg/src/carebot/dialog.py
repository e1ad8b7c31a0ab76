"""Dialog manager: per-session state tracking and the next-action policy.

Tracking folds each turn's intent prediction and entities into the session
state and abandons the active flow when a confident new intent points
elsewhere. The policy is a fixed priority: advance the active flow, else
enter the flow mapped to a confident intent, else answer from the KB, else
suggest near-miss questions, else fall back.
"""

from __future__ import annotations

import secrets
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

from .flowdsl import DialogFlow, Step
from .nlu import CandidateResponse, Entity, IntentPrediction, select_response
from .text import Lang, normalize

if TYPE_CHECKING:
    from .kb import KnowledgeBase
    from .vectors import ForestModel


class SessionMismatchError(ValueError):
    pass


class UnknownFlowError(ValueError):
    pass


class FlowRuntimeError(RuntimeError):
    pass


KB_FLOOR = 0.5
SUGGEST_LOW = 0.3


@dataclass
class DialogState:
    session_id: str
    lang: Lang | None
    active: tuple[str, str] | None = None  # (flow id, step id)
    slots: dict[str, str | list[str]] = field(default_factory=dict)
    last_intent: tuple[str, float] | None = None
    last_entities: list[Entity] = field(default_factory=list)
    turn_count: int = 0
    last_text: str = ""


@dataclass(frozen=True)
class Action:
    kind: str  # ask | answer | kb_reply | suggest | confirm | fallback
    flow_id: str = ""
    step: Step | None = None
    template: str = ""
    bindings: dict = field(default_factory=dict)
    entry_id: str = ""
    options: tuple[str, ...] = ()
    question: str = ""


def start_session(lang: Lang | None = None) -> DialogState:
    """Fresh state; with no language the first turn picks one."""
    return DialogState(session_id=secrets.token_urlsafe(24), lang=lang)


def track(
    state: DialogState,
    prediction: IntentPrediction,
    entities: Sequence[Entity],
    raw_text: str,
    flows: dict[str, DialogFlow],
    session_id: str | None = None,
) -> DialogState:
    """Fold one user turn into the session state.

    Entity values overwrite same-type slots (lists union); a confident intent
    that differs from the active flow's trigger abandons that flow so the new
    topic takes over.
    """
    if session_id is not None and session_id != state.session_id:
        raise SessionMismatchError(f"utterance for session {session_id!r} applied to {state.session_id!r}")
    state.turn_count += 1
    state.last_text = raw_text
    state.last_intent = (prediction.intent, prediction.score) if prediction.confident else None
    state.last_entities = list(entities)

    incoming: dict[str, list[str]] = {}
    for entity in entities:
        incoming.setdefault(entity.type, []).append(entity.value)
    for etype, values in incoming.items():
        current = state.slots.get(etype)
        if isinstance(current, list) or len(values) > 1:
            merged = list(current) if isinstance(current, list) else ([current] if current else [])
            merged.extend(v for v in values if v not in merged)
            state.slots[etype] = merged
        else:
            state.slots[etype] = values[0]

    if prediction.confident and state.active is not None:
        active_flow = flows.get(state.active[0])
        if active_flow is not None and prediction.intent != active_flow.trigger_intent:
            state.active = None
    return state


def _match_choice(step: Step, user_value: str, lang: Lang) -> list[str] | None:
    """Map user text to canonical option strings, or None when invalid."""
    by_norm = {normalize(opt, lang): opt for opt in step.options_for(lang)}
    if step.multi:
        picks: list[str] = []
        for part in user_value.split(","):
            key = normalize(part, lang)
            if not key:
                continue
            if key not in by_norm:
                return None
            if by_norm[key] not in picks:
                picks.append(by_norm[key])
        return picks or None
    key = normalize(user_value, lang)
    return [by_norm[key]] if key in by_norm else None


def _walk(state: DialogState, flow: DialogFlow, step_id: str) -> list[Action]:
    """Advance through silent steps until input is needed or the flow ends."""
    actions: list[Action] = []
    hops = 0
    while True:
        hops += 1
        if hops > len(flow.steps) + 1:
            raise FlowRuntimeError(f"flow {flow.id!r} looped without consuming input")
        step = flow.steps[step_id]
        if step.kind in ("prompt", "choice"):
            state.active = (flow.id, step_id)
            actions.append(
                Action(
                    "ask",
                    flow_id=flow.id,
                    step=step,
                    options=step.options_for(state.lang),
                    bindings=dict(state.slots),
                )
            )
            return actions
        if step.kind == "branch":
            value = state.slots.get(step.on)
            step_id = next(case.next for case in step.cases if case.matches(value))
            continue
        if step.kind == "answer":
            actions.append(Action("answer", flow_id=flow.id, template=step.template, bindings=dict(state.slots)))
            step_id = step.next
            continue
        if step.kind == "kb_answer":
            actions.append(Action("kb_reply", flow_id=flow.id, bindings={"query": state.last_text}))
            step_id = step.next
            continue
        # end
        state.active = None
        return actions


def advance_flow(state: DialogState, flow: DialogFlow, user_value: str | None) -> tuple[DialogState, list[Action]]:
    """Consume input for the active step and walk to the next actionable one.

    An input that matches none of a choice step's options re-asks the same
    step instead of raising.
    """
    if state.active is None or state.active[0] != flow.id:
        raise UnknownFlowError(f"session is not inside flow {flow.id!r}")
    step = flow.steps[state.active[1]]
    lang = state.lang or Lang.EN
    if step.kind == "choice":
        picks = _match_choice(step, user_value or "", lang)
        if picks is None:
            reask = Action(
                "ask", flow_id=flow.id, step=step,
                options=step.options_for(state.lang), bindings=dict(state.slots),
            )
            return state, [reask]
        state.slots[step.slot] = picks if step.multi else picks[0]
    elif step.kind == "prompt":
        text = (user_value or "").strip()
        if not text:
            return state, [Action("ask", flow_id=flow.id, step=step, bindings=dict(state.slots))]
        state.slots[step.slot] = text
    return state, _walk(state, flow, step.next)


def enter_flow(state: DialogState, flow: DialogFlow) -> list[Action]:
    return _walk(state, flow, flow.entry)


def decide(
    state: DialogState,
    prediction: IntentPrediction,
    flows: dict[str, DialogFlow],
    kb: "KnowledgeBase",
    candidates: Sequence[CandidateResponse] = (),
    model: "ForestModel | None" = None,
    kb_floor: float = KB_FLOOR,
    suggest_low: float = SUGGEST_LOW,
) -> list[Action]:
    """Pick the next action(s) for a tracked state.

    Priority: (1) advance the active flow on the user's input, (2) enter the
    flow triggered by a confident intent, (3) KB answer for a confident
    intent or a retrieval at/above kb_floor, (4) suggest the top candidate
    questions inside the (suggest_low, kb_floor) band, (5) fallback.
    """
    trigger_map = {flow.trigger_intent: flow for flow in flows.values()}

    if state.active is not None:
        flow = flows.get(state.active[0])
        if flow is None:
            raise UnknownFlowError(f"active flow {state.active[0]!r} is not loaded")
        _, actions = advance_flow(state, flow, state.last_text)
        return actions

    if prediction.confident:
        flow = trigger_map.get(prediction.intent or "")
        if flow is not None:
            return enter_flow(state, flow)

    top_score = candidates[0].score if candidates else 0.0
    if prediction.confident or top_score >= kb_floor:
        chosen = select_response(list(candidates), state, kb, model)
        if chosen is not None:
            return [Action("kb_reply", entry_id=chosen)]

    if suggest_low < top_score < kb_floor:
        questions = tuple(kb.entries[c.entry_id].questions[0] for c in candidates[:3])
        return [Action("suggest", options=questions)]

    return [Action("fallback")]
