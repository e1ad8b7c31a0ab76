"""Parser and static validator for the JSON dialog-flow definition language.

A flow is a finite state machine triggered by one intent: prompt and choice
steps collect slot values, branch steps route on them, answer/kb_answer steps
emit replies, end steps close the flow. Parsing enforces structure and
referential integrity; validate_flows adds the cross-artifact checks
(catalog, templates, languages, reachability, slot dataflow) as diagnostics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .text import Lang

STEP_KINDS = ("prompt", "choice", "branch", "answer", "kb_answer", "end")


class FlowSyntaxError(ValueError):
    pass


class FlowSchemaError(ValueError):
    def __init__(self, step: str, fld: str, reason: str):
        super().__init__(f"step {step!r}, field {fld!r}: {reason}")
        self.step = step
        self.field = fld
        self.reason = reason


@dataclass(frozen=True)
class BranchCase:
    condition: str  # "equals" | "contains_any" | "count_gte" | "default"
    values: tuple[str, ...]
    count: int
    next: str

    def matches(self, value: str | list[str] | None) -> bool:
        items = value if isinstance(value, list) else ([] if value is None else [value])
        if self.condition == "default":
            return True
        if self.condition == "equals":
            return value == self.values[0] or items == list(self.values)
        if self.condition == "contains_any":
            return any(v in items for v in self.values)
        if self.condition == "count_gte":
            return len(items) >= self.count
        raise AssertionError(f"unknown condition {self.condition}")


@dataclass(frozen=True)
class Step:
    id: str
    kind: str
    prompt: dict[Lang, str] = field(default_factory=dict)
    # per-language option lists; a plain list in the file applies to all languages
    options: dict[Lang, tuple[str, ...]] = field(default_factory=dict)
    multi: bool = False
    slot: str = ""
    on: str = ""
    cases: tuple[BranchCase, ...] = ()
    template: str = ""
    next: str = ""

    def options_for(self, lang: Lang | None) -> tuple[str, ...]:
        if lang is not None and lang in self.options:
            return self.options[lang]
        for candidate in self.options.values():
            return candidate
        return ()


@dataclass(frozen=True)
class DialogFlow:
    id: str
    trigger_intent: str
    entry: str
    steps: dict[str, Step]


@dataclass(frozen=True)
class Diagnostic:
    flow_id: str
    step_id: str  # "-" for flow-level findings
    code: str
    message: str

    def __str__(self) -> str:
        return f"[{self.code}] flow={self.flow_id} step={self.step_id}: {self.message}"


_STEP_FIELDS = {
    "prompt": {"kind", "prompt", "slot", "next"},
    "choice": {"kind", "prompt", "options", "multi", "slot", "next"},
    "branch": {"kind", "on", "cases"},
    "answer": {"kind", "template", "next"},
    "kb_answer": {"kind", "next"},
    "end": {"kind"},
}


def _parse_case(step_id: str, raw: object, index: int) -> BranchCase:
    if not isinstance(raw, dict) or "when" not in raw or "next" not in raw:
        raise FlowSchemaError(step_id, f"cases[{index}]", "case needs 'when' and 'next'")
    when = raw["when"]
    nxt = str(raw["next"])
    if when == "default":
        return BranchCase("default", (), 0, nxt)
    if not isinstance(when, dict) or len(when) != 1:
        raise FlowSchemaError(step_id, f"cases[{index}].when", "expected one condition or 'default'")
    (cond, arg), = when.items()
    if cond == "equals":
        return BranchCase("equals", (str(arg),), 0, nxt)
    if cond == "contains_any":
        values = tuple(str(v) for v in arg) if isinstance(arg, list) else ()
        if not values:
            raise FlowSchemaError(step_id, f"cases[{index}].when", "contains_any needs a non-empty list")
        return BranchCase("contains_any", values, 0, nxt)
    if cond == "count_gte":
        if not isinstance(arg, int) or arg < 1:
            raise FlowSchemaError(step_id, f"cases[{index}].when", "count_gte needs an integer >= 1")
        return BranchCase("count_gte", (), arg, nxt)
    raise FlowSchemaError(step_id, f"cases[{index}].when", f"unknown condition {cond!r}")


def _parse_prompt(step_id: str, raw: object) -> dict[Lang, str]:
    if not isinstance(raw, dict) or not raw:
        raise FlowSchemaError(step_id, "prompt", "expected a non-empty language->text object")
    out: dict[Lang, str] = {}
    for lang_value, text in raw.items():
        try:
            lang = Lang.parse(lang_value)
        except ValueError as exc:
            raise FlowSchemaError(step_id, "prompt", str(exc)) from None
        out[lang] = str(text)
    return out


def _parse_step(step_id: str, raw: object) -> Step:
    if not isinstance(raw, dict):
        raise FlowSchemaError(step_id, "-", "step must be an object")
    kind = raw.get("kind")
    if kind not in STEP_KINDS:
        raise FlowSchemaError(step_id, "kind", f"expected one of {list(STEP_KINDS)}, got {kind!r}")
    allowed = _STEP_FIELDS[kind]
    unknown = set(raw) - allowed
    if unknown:
        raise FlowSchemaError(step_id, ", ".join(sorted(unknown)), f"not a field of kind {kind!r}")
    step = Step(id=step_id, kind=kind)
    if kind in ("prompt", "choice"):
        prompt = _parse_prompt(step_id, raw.get("prompt"))
        slot = raw.get("slot")
        if not slot or not isinstance(slot, str):
            raise FlowSchemaError(step_id, "slot", "prompt/choice steps need a slot name")
        nxt = raw.get("next")
        if not nxt:
            raise FlowSchemaError(step_id, "next", "missing")
        options: dict[Lang, tuple[str, ...]] = {}
        multi = False
        if kind == "choice":
            raw_options = raw.get("options")
            if isinstance(raw_options, list):
                values = tuple(str(o) for o in raw_options)
                options = {lang: values for lang in Lang}
            elif isinstance(raw_options, dict):
                try:
                    options = {Lang.parse(lv): tuple(str(o) for o in items) for lv, items in raw_options.items()}
                except ValueError as exc:
                    raise FlowSchemaError(step_id, "options", str(exc)) from None
            if not any(options.values()):
                raise FlowSchemaError(step_id, "options", "choice steps need non-empty options")
            multi = bool(raw.get("multi", False))
        step = Step(step_id, kind, prompt, options, multi, slot, next=str(nxt))
    elif kind == "branch":
        on = raw.get("on")
        if not on or not isinstance(on, str):
            raise FlowSchemaError(step_id, "on", "branch steps need a slot name")
        raw_cases = raw.get("cases")
        if not isinstance(raw_cases, list) or not raw_cases:
            raise FlowSchemaError(step_id, "cases", "branch steps need at least one case")
        cases = tuple(_parse_case(step_id, rc, i) for i, rc in enumerate(raw_cases))
        defaults = [c for c in cases if c.condition == "default"]
        if len(defaults) != 1:
            raise FlowSchemaError(step_id, "cases", "branch needs exactly one default case")
        step = Step(step_id, kind, on=on, cases=cases)
    elif kind == "answer":
        template = raw.get("template")
        if not template or not isinstance(template, str):
            raise FlowSchemaError(step_id, "template", "answer steps need a template id")
        nxt = raw.get("next")
        if not nxt:
            raise FlowSchemaError(step_id, "next", "missing")
        step = Step(step_id, kind, template=template, next=str(nxt))
    elif kind == "kb_answer":
        nxt = raw.get("next")
        if not nxt:
            raise FlowSchemaError(step_id, "next", "missing")
        step = Step(step_id, kind, next=str(nxt))
    return step


def parse_flow(document: str) -> DialogFlow:
    """Parse one flow document; structural and referential errors raise."""
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise FlowSyntaxError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise FlowSyntaxError("flow document must be a JSON object")
    unknown = set(doc) - {"id", "trigger_intent", "entry", "steps"}
    if unknown:
        raise FlowSchemaError("-", ", ".join(sorted(unknown)), "unknown top-level field")
    for required in ("id", "trigger_intent", "entry", "steps"):
        if required not in doc:
            raise FlowSchemaError("-", required, "missing")
    raw_steps = doc["steps"]
    if not isinstance(raw_steps, dict) or not raw_steps:
        raise FlowSchemaError("-", "steps", "expected a non-empty step map")
    steps = {str(sid): _parse_step(str(sid), raw) for sid, raw in raw_steps.items()}
    entry = str(doc["entry"])
    if entry not in steps:
        raise FlowSchemaError("-", "entry", f"entry step {entry!r} not defined")
    for step in steps.values():
        targets = [c.next for c in step.cases] if step.kind == "branch" else []
        if step.next:
            targets.append(step.next)
        for target in targets:
            if target not in steps:
                raise FlowSchemaError(step.id, "next", f"target step {target!r} not defined")
    return DialogFlow(str(doc["id"]), str(doc["trigger_intent"]), entry, steps)


def parse_flow_file(path: str | Path) -> DialogFlow:
    return parse_flow(Path(path).read_bytes().decode("utf-8", errors="replace"))


def serialize_flow(flow: DialogFlow) -> str:
    """Canonical JSON for a flow; parse(serialize(flow)) == flow."""
    steps: dict[str, dict] = {}
    for sid, step in flow.steps.items():
        raw: dict = {"kind": step.kind}
        if step.kind in ("prompt", "choice"):
            raw["prompt"] = {lang.value: text for lang, text in step.prompt.items()}
            raw["slot"] = step.slot
            raw["next"] = step.next
        if step.kind == "choice":
            per_lang = set(step.options.values())
            if len(per_lang) == 1 and set(step.options) == set(Lang):
                raw["options"] = list(next(iter(per_lang)))
            else:
                raw["options"] = {lang.value: list(opts) for lang, opts in step.options.items()}
            if step.multi:
                raw["multi"] = True
        if step.kind == "branch":
            raw["on"] = step.on
            cases = []
            for case in step.cases:
                if case.condition == "default":
                    when: object = "default"
                elif case.condition == "equals":
                    when = {"equals": case.values[0]}
                elif case.condition == "contains_any":
                    when = {"contains_any": list(case.values)}
                else:
                    when = {"count_gte": case.count}
                cases.append({"when": when, "next": case.next})
            raw["cases"] = cases
        if step.kind == "answer":
            raw["template"] = step.template
            raw["next"] = step.next
        if step.kind == "kb_answer":
            raw["next"] = step.next
        steps[sid] = raw
    doc = {"id": flow.id, "trigger_intent": flow.trigger_intent, "entry": flow.entry, "steps": steps}
    return json.dumps(doc, ensure_ascii=False, indent=2)


def reachability(flow: DialogFlow) -> tuple[set[str], set[str]]:
    """(reachable, unreachable) step ids following next and branch cases."""
    seen: set[str] = set()
    stack = [flow.entry]
    while stack:
        sid = stack.pop()
        if sid in seen:
            continue
        seen.add(sid)
        step = flow.steps[sid]
        if step.kind == "branch":
            stack.extend(case.next for case in step.cases)
        elif step.next:
            stack.append(step.next)
    return seen, set(flow.steps) - seen


def _step_targets(step: Step) -> list[str]:
    targets = [c.next for c in step.cases] if step.kind == "branch" else []
    if step.next:
        targets.append(step.next)
    return targets


def _cycle_steps(flow: DialogFlow, reachable: set[str]) -> set[str]:
    """Steps sitting on a directed cycle (the DSL allows none)."""
    colors: dict[str, int] = {}  # 0 visiting, 1 done
    on_cycle: set[str] = set()

    def visit(sid: str, path: list[str]) -> None:
        state = colors.get(sid)
        if state == 0:
            on_cycle.update(path[path.index(sid):])
            return
        if state == 1:
            return
        colors[sid] = 0
        for target in _step_targets(flow.steps[sid]):
            visit(target, path + [sid])
        colors[sid] = 1

    for sid in sorted(reachable):
        visit(sid, [])
    return on_cycle


def _written_before(flow: DialogFlow) -> dict[str, set[str]]:
    """Slots guaranteed written on every path from entry to each step."""
    preds: dict[str, list[str]] = {sid: [] for sid in flow.steps}
    for step in flow.steps.values():
        for target in _step_targets(step):
            preds[target].append(step.id)

    all_slots = {s.slot for s in flow.steps.values() if s.slot}
    before: dict[str, set[str]] = {sid: set(all_slots) for sid in flow.steps}
    before[flow.entry] = set()

    def after(sid: str) -> set[str]:
        step = flow.steps[sid]
        written = set(before[sid])
        if step.kind in ("prompt", "choice"):
            written.add(step.slot)
        return written

    changed = True
    while changed:
        changed = False
        for sid in flow.steps:
            if sid == flow.entry:
                continue
            incoming = [after(p) for p in preds[sid]]
            merged = set.intersection(*incoming) if incoming else set()
            if merged != before[sid]:
                before[sid] = merged
                changed = True
    return before


def validate_flows(
    flows: Sequence[DialogFlow],
    intent_names: Iterable[str],
    template_ids: Iterable[str],
    languages: Sequence[Lang] = (Lang.EN, Lang.AR),
) -> list[Diagnostic]:
    """Static cross-checks; an empty result means the flow set is deployable."""
    diagnostics: list[Diagnostic] = []
    intent_names = set(intent_names)
    template_ids = set(template_ids)

    seen_ids: set[str] = set()
    seen_triggers: dict[str, str] = {}
    for flow in flows:
        if flow.id in seen_ids:
            diagnostics.append(Diagnostic(flow.id, "-", "duplicate_flow_id", f"flow id {flow.id!r} defined twice"))
        seen_ids.add(flow.id)
        if flow.trigger_intent in seen_triggers:
            diagnostics.append(
                Diagnostic(
                    flow.id,
                    "-",
                    "duplicate_trigger",
                    f"trigger intent {flow.trigger_intent!r} already used by flow {seen_triggers[flow.trigger_intent]!r}",
                )
            )
        else:
            seen_triggers[flow.trigger_intent] = flow.id
        if flow.trigger_intent not in intent_names:
            diagnostics.append(
                Diagnostic(flow.id, "-", "unknown_trigger", f"trigger intent {flow.trigger_intent!r} not in catalog")
            )

        reachable, unreachable = reachability(flow)
        for sid in sorted(unreachable):
            diagnostics.append(Diagnostic(flow.id, sid, "unreachable_step", "no path from entry reaches this step"))
        if not any(flow.steps[sid].kind == "end" for sid in reachable):
            diagnostics.append(Diagnostic(flow.id, "-", "no_end_reachable", "no end step is reachable from entry"))
        for sid in sorted(_cycle_steps(flow, reachable)):
            diagnostics.append(Diagnostic(flow.id, sid, "cycle", "step is part of a cycle; flows must be acyclic"))

        written = _written_before(flow)
        for sid in sorted(reachable):
            step = flow.steps[sid]
            if step.kind in ("prompt", "choice"):
                for lang in languages:
                    if not step.prompt.get(lang, "").strip():
                        diagnostics.append(
                            Diagnostic(flow.id, sid, "missing_language", f"prompt text missing for {lang.value!r}")
                        )
                    if step.kind == "choice" and not step.options.get(lang):
                        diagnostics.append(
                            Diagnostic(flow.id, sid, "missing_language", f"options missing for {lang.value!r}")
                        )
            if step.kind == "answer" and step.template not in template_ids:
                diagnostics.append(
                    Diagnostic(flow.id, sid, "unknown_template", f"template {step.template!r} not in catalog")
                )
            if step.kind == "branch" and step.on not in written[sid]:
                diagnostics.append(
                    Diagnostic(
                        flow.id, sid, "branch_slot_unwritten",
                        f"slot {step.on!r} is not written on every path reaching this branch",
                    )
                )
    return diagnostics
