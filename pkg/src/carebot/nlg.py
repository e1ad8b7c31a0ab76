"""Responding phase: template catalog and card payload rendering.

Templates are per-language texts with {slot} placeholders plus optional
options/buttons/attachments. Rendering never emits an unresolved
placeholder: a missing binding is a configuration error and raises.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

from .dialog import Action, DialogState
from .text import Lang

if TYPE_CHECKING:
    from .kb import KBEntry


class MissingSlotError(KeyError):
    def __init__(self, template_id: str, slot: str):
        super().__init__(f"template {template_id!r} references unbound slot {slot!r}")
        self.template_id = template_id
        self.slot = slot


class UnknownTemplateError(KeyError):
    pass


class TemplateFormatError(ValueError):
    pass


_PLACEHOLDER = re.compile(r"\{([^{}]+)\}")


@dataclass(frozen=True)
class Template:
    id: str
    text: dict[Lang, str]
    options: dict[Lang, tuple[str, ...]] = field(default_factory=dict)
    buttons: dict[Lang, tuple[dict, ...]] = field(default_factory=dict)
    attachments: dict[Lang, tuple[dict, ...]] = field(default_factory=dict)


@dataclass
class ResponsePayload:
    type: str  # "text" | "card"
    language: Lang
    text: str
    options: list[str] = field(default_factory=list)
    buttons: list[dict] = field(default_factory=list)
    attachments: list[dict] = field(default_factory=list)

    @classmethod
    def build(cls, language: Lang, text: str, options=(), buttons=(), attachments=()) -> "ResponsePayload":
        options = list(options)
        buttons = [dict(b) for b in buttons]
        attachments = [dict(a) for a in attachments]
        kind = "card" if (options or buttons or attachments) else "text"
        return cls(kind, language, text, options, buttons, attachments)

    def to_dict(self) -> dict:
        return {
            "type": self.type,
            "language": self.language.value,
            "text": self.text,
            "options": list(self.options),
            "buttons": [dict(b) for b in self.buttons],
            "attachments": [dict(a) for a in self.attachments],
        }


def _per_lang_lists(template_id: str, raw: object, what: str) -> dict[Lang, tuple]:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise TemplateFormatError(f"template {template_id!r}: {what} must map language to a list")
    out: dict[Lang, tuple] = {}
    for lang_value, items in raw.items():
        lang = Lang.parse(lang_value)
        if what == "options":
            out[lang] = tuple(str(i) for i in items)
        else:
            out[lang] = tuple(dict(i) for i in items)
    return out


def load_templates(path: str | Path) -> dict[str, Template]:
    """Read the template catalog: {"templates": [{"id", "text", ...}]}."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "templates" not in doc:
        raise TemplateFormatError(f"{path}: expected an object with a 'templates' list")
    catalog: dict[str, Template] = {}
    for raw in doc["templates"]:
        unknown = set(raw) - {"id", "text", "options", "buttons", "attachments"}
        if unknown:
            raise TemplateFormatError(f"{path}: template {raw.get('id')!r}: unknown fields {sorted(unknown)}")
        tid = raw.get("id")
        if not tid:
            raise TemplateFormatError(f"{path}: template without id")
        if tid in catalog:
            raise TemplateFormatError(f"{path}: duplicate template id {tid!r}")
        text = {Lang.parse(lv): str(t) for lv, t in raw.get("text", {}).items()}
        if not text:
            raise TemplateFormatError(f"{path}: template {tid!r} has no text")
        catalog[tid] = Template(
            id=tid,
            text=text,
            options=_per_lang_lists(tid, raw.get("options"), "options"),
            buttons=_per_lang_lists(tid, raw.get("buttons"), "buttons"),
            attachments=_per_lang_lists(tid, raw.get("attachments"), "attachments"),
        )
    return catalog


def _substitute(template_id: str, text: str, bindings: dict) -> str:
    def repl(match: re.Match) -> str:
        name = match.group(1)
        if name not in bindings:
            raise MissingSlotError(template_id, name)
        value = bindings[name]
        return ", ".join(str(v) for v in value) if isinstance(value, list) else str(value)

    return _PLACEHOLDER.sub(repl, text)


def render_template(template: Template, lang: Lang, bindings: dict) -> ResponsePayload:
    if lang not in template.text:
        raise MissingSlotError(template.id, f"text[{lang.value}]")
    text = _substitute(template.id, template.text[lang], bindings)
    options = [_substitute(template.id, o, bindings) for o in template.options.get(lang, ())]
    buttons = [
        {k: _substitute(template.id, v, bindings) if isinstance(v, str) else v for k, v in b.items()}
        for b in template.buttons.get(lang, ())
    ]
    attachments = [
        {k: _substitute(template.id, v, bindings) if isinstance(v, str) else v for k, v in a.items()}
        for a in template.attachments.get(lang, ())
    ]
    return ResponsePayload.build(lang, text, options, buttons, attachments)


def render_kb_entry(entry: "KBEntry", catalog: dict[str, Template], lang: Lang) -> ResponsePayload:
    """KB answers are literal text unless they name a catalog template."""
    if entry.answer in catalog:
        payload = render_template(catalog[entry.answer], lang, {})
    else:
        payload = ResponsePayload.build(lang, entry.answer)
    extras = entry.extras or {}
    payload.options.extend(str(o) for o in extras.get("options", []))
    payload.buttons.extend(dict(b) for b in extras.get("buttons", []))
    payload.attachments.extend(dict(a) for a in extras.get("attachments", []))
    if payload.options or payload.buttons or payload.attachments:
        payload.type = "card"
    return payload


_SUGGEST_LEAD = {Lang.EN: "Did you mean one of these?", Lang.AR: "هل تقصد أحد هذه الأسئلة؟"}
_FALLBACK_TEXT = {
    Lang.EN: "Sorry, I could not find an answer for that. Try rephrasing, or pick one of the menu options.",
    Lang.AR: "عذراً، لم أجد إجابة على سؤالك. حاول إعادة الصياغة أو اختر أحد الخيارات من القائمة.",
}
_CONFIRM_OPTIONS = {Lang.EN: ("Yes", "No"), Lang.AR: ("نعم", "لا")}
WELCOME_TEMPLATE = "welcome"
LANGUAGE_OPTIONS = ("English", "العربية")


def render(
    action: Action,
    state: DialogState,
    catalog: dict[str, Template],
    kb_entries: "dict[str, KBEntry] | None" = None,
) -> ResponsePayload:
    """Render one policy action into a payload in the session language."""
    lang = state.lang or Lang.EN
    if action.kind == "ask":
        step = action.step
        assert step is not None, "ask action without a step"
        prompt = step.prompt.get(lang) or next(iter(step.prompt.values()), "")
        prompt = _substitute(f"step:{step.id}", prompt, action.bindings)
        return ResponsePayload.build(lang, prompt, options=step.options_for(lang))
    if action.kind == "answer":
        template = catalog.get(action.template)
        if template is None:
            raise UnknownTemplateError(action.template)
        return render_template(template, lang, action.bindings)
    if action.kind == "kb_reply":
        if kb_entries is None or action.entry_id not in kb_entries:
            raise UnknownTemplateError(f"kb entry {action.entry_id!r} not available")
        return render_kb_entry(kb_entries[action.entry_id], catalog, lang)
    if action.kind == "suggest":
        return ResponsePayload.build(lang, _SUGGEST_LEAD[lang], options=action.options)
    if action.kind == "confirm":
        return ResponsePayload.build(lang, action.question, options=_CONFIRM_OPTIONS[lang])
    if action.kind == "fallback":
        return ResponsePayload.build(lang, _FALLBACK_TEXT[lang])
    raise ValueError(f"unknown action kind {action.kind!r}")


def welcome(lang: Lang | None, catalog: dict[str, Template]) -> ResponsePayload:
    """Greeting card: a language picker when no language is set yet, else the
    localized introduction listing the six top-level capabilities."""
    if lang is None:
        text = "Welcome! Please choose a language.\nأهلاً بك! الرجاء اختيار اللغة."
        payload = ResponsePayload.build(Lang.EN, text, options=LANGUAGE_OPTIONS)
        return payload
    template = catalog.get(WELCOME_TEMPLATE)
    if template is None:
        raise UnknownTemplateError(WELCOME_TEMPLATE)
    return render_template(template, lang, {})


def apology(lang: Lang | None) -> ResponsePayload:
    """Shown when an internal error interrupts a turn."""
    resolved = lang or Lang.EN
    text = {
        Lang.EN: "Something went wrong on our side. Please try again.",
        Lang.AR: "حدث خطأ من جهتنا. الرجاء المحاولة مرة أخرى.",
    }[resolved]
    return ResponsePayload.build(resolved, text)


def find_unresolved_placeholders(payload: ResponsePayload) -> list[str]:
    """Any '{...}' left in a rendered payload (test hook; must be empty)."""
    blobs = [payload.text, *payload.options]
    for b in payload.buttons:
        blobs.extend(str(v) for v in b.values())
    for a in payload.attachments:
        blobs.extend(str(v) for v in a.values())
    found: list[str] = []
    for blob in blobs:
        found.extend(_PLACEHOLDER.findall(blob))
    return found
