"""Operator command line: chat REPL, validation, corpus ingestion,
staleness reports, scenario replay and the HTTP server.

Exit codes: 0 success, 1 assertion/diagnostic failures, 2 usage errors
(click's default), 3 configuration or IO errors.
"""

from __future__ import annotations

import datetime as dt
import json
import sys
import tempfile
from pathlib import Path

import click

from .engine import ConfigError, Engine, EngineConfig, ScenarioScript, payloads_json, run_scenario
from .flowdsl import FlowSchemaError, FlowSyntaxError, parse_flow_file, validate_flows
from .kb import DuplicateIdError, KnowledgeBase, ParseError, staleness_report
from .nlg import ResponsePayload
from .nlu import load_intent_catalog
from .nlg import load_templates
from .resources import default_config_path
from .text import Lang

EXIT_FAILURE = 1
EXIT_CONFIG = 3


def _load_engine(config_path: str) -> Engine:
    try:
        return Engine.from_config_file(config_path)
    except (ConfigError, OSError, ParseError, DuplicateIdError, FlowSyntaxError, FlowSchemaError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


def _render_payload(payload: ResponsePayload) -> str:
    lines = [payload.text]
    for i, option in enumerate(payload.options, start=1):
        lines.append(f"  [{i}] {option}")
    for button in payload.buttons:
        lines.append(f"  [{button.get('label', 'open')}]({button.get('url', button.get('postback', ''))})")
    for att in payload.attachments:
        lines.append(f"  ({att.get('kind', 'attachment')}) {att.get('title', '')}: {att.get('url', '')}")
    return "\n".join(lines)


@click.group()
@click.version_option(package_name="carebot")
def main() -> None:
    """Bilingual retrieval-based chatbot: chat, validate, ingest, serve."""


@main.command()
@click.option("--config", "config_path", default=str(default_config_path()), show_default="packaged fixtures", help="Engine config file.")
@click.option("--lang", type=click.Choice(["en", "ar"]), default=None, help="Session language; omit for the language picker.")
def chat(config_path: str, lang: str | None) -> None:
    """Interactive REPL over the engine (options answerable by number)."""
    engine = _load_engine(config_path)
    session_lang = Lang.parse(lang) if lang else None
    session_id, greeting = engine.start_session(session_lang)
    transcript: dict = {
        "name": f"repl_{session_id[:8]}",
        "language": lang,
        "turns": [],
    }
    last_options: list[str] = []
    for payload in greeting:
        click.echo(_render_payload(payload))
        last_options = list(payload.options) or last_options
    while True:
        try:
            raw = input("> ").strip()
        except (EOFError, KeyboardInterrupt):
            click.echo("")
            break
        if not raw:
            continue
        if raw.isdigit() and last_options and 1 <= int(raw) <= len(last_options):
            raw = last_options[int(raw) - 1]
            click.echo(f"(sending: {raw})")
        payloads = engine.handle_message(session_id, raw)
        last_options = []
        for payload in payloads:
            click.echo(_render_payload(payload))
            if payload.options:
                last_options = list(payload.options)
        transcript["turns"].append({"user": raw, "payloads": [p.to_dict() for p in payloads]})
        transcript["language"] = (engine.get_session(session_id).lang or Lang.EN).value
    if transcript["turns"]:
        out = Path(tempfile.gettempdir()) / f"carebot_transcript_{session_id[:8]}.json"
        out.write_text(json.dumps(transcript, ensure_ascii=False, indent=2), encoding="utf-8")
        click.echo(f"transcript written to {out}")


@main.command()
@click.option("--config", "config_path", default=str(default_config_path()), show_default="packaged fixtures")
@click.option("--json", "as_json", is_flag=True, help="Machine-readable output.")
def validate(config_path: str, as_json: bool) -> None:
    """Validate flows against the intent and template catalogs."""
    try:
        config = EngineConfig.load(config_path)
        catalog = load_intent_catalog(config.intents)
        templates = load_templates(config.templates)
    except (ConfigError, OSError, ValueError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    diagnostics = []
    flows = []
    for path in sorted(Path(config.flows_dir).glob("*.json")):
        try:
            flows.append(parse_flow_file(path))
        except (FlowSyntaxError, FlowSchemaError) as exc:
            diagnostics.append({"flow_id": path.stem, "step_id": "-", "code": "parse_error", "message": str(exc)})
    for diag in validate_flows(flows, [i.name for i in catalog], templates.keys(), config.languages):
        diagnostics.append(
            {"flow_id": diag.flow_id, "step_id": diag.step_id, "code": diag.code, "message": diag.message}
        )
    if as_json:
        click.echo(json.dumps({"diagnostics": diagnostics}, ensure_ascii=False, indent=2))
    else:
        for d in diagnostics:
            click.echo(f"[{d['code']}] flow={d['flow_id']} step={d['step_id']}: {d['message']}")
        click.echo(f"{len(diagnostics)} diagnostic(s) in {len(flows)} flow(s)")
    sys.exit(min(len(diagnostics), 125))


@main.command()
@click.option("--kb", "kb_dir", required=True, type=click.Path(file_okay=False), help="Corpus directory.")
@click.argument("files", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
def ingest(kb_dir: str, files: tuple[str, ...]) -> None:
    """Validate corpus files and add them to the KB directory."""
    kb_path = Path(kb_dir)
    kb_path.mkdir(parents=True, exist_ok=True)
    kb = KnowledgeBase(stopwords={lang: frozenset() for lang in Lang})
    for existing in sorted(kb_path.glob("*.jsonl")):
        try:
            kb.ingest_file(existing)
        except (ParseError, DuplicateIdError) as exc:
            click.echo(f"existing corpus file {existing} is broken: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
    total = 0
    for name in files:
        src = Path(name)
        try:
            entries = kb.ingest_file(src)
        except (ParseError, DuplicateIdError) as exc:
            click.echo(f"{src}: {exc}", err=True)
            sys.exit(EXIT_FAILURE)
        destination = kb_path / src.name
        if src.resolve() != destination.resolve():
            destination.write_bytes(src.read_bytes())
        total += len(entries)
        click.echo(f"{src.name}: {len(entries)} entries")
    click.echo(f"ingested {total} entries into {kb_path}")


@main.command()
@click.option("--config", "config_path", default=str(default_config_path()), show_default="packaged fixtures")
@click.option("--window-days", type=int, default=None, help="Override the staleness window.")
@click.option("--json", "as_json", is_flag=True)
def stale(config_path: str, window_days: int | None, as_json: bool) -> None:
    """Report KB entries older than the staleness window."""
    try:
        config = EngineConfig.load(config_path)
        kb = KnowledgeBase(stopwords={lang: frozenset() for lang in Lang})
        for path in sorted(Path(config.kb_dir).glob("*.jsonl")):
            kb.ingest_file(path)
    except (ConfigError, OSError, ParseError, DuplicateIdError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    window = config.staleness_window_days if window_days is None else window_days
    report = staleness_report(list(kb.entries.values()), dt.date.today(), window)
    if as_json:
        click.echo(json.dumps({"window_days": window, "stale": [
            {"id": eid, "age_days": age} for eid, age in report
        ]}, ensure_ascii=False, indent=2))
    else:
        for eid, age in report:
            click.echo(f"{eid}\t{age} days old")
        click.echo(f"{len(report)} stale entries (window {window} days)")


@main.group()
def scenario() -> None:
    """Scenario replay tooling."""


@scenario.command("run")
@click.option("--config", "config_path", default=str(default_config_path()), show_default="packaged fixtures")
@click.option("--json", "as_json", is_flag=True)
@click.argument("files", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
def scenario_run(config_path: str, as_json: bool, files: tuple[str, ...]) -> None:
    """Replay scenario scripts; exit 0 only if every turn passes."""
    engine = _load_engine(config_path)
    reports = []
    for name in files:
        try:
            script = ScenarioScript.load(name)
        except (ConfigError, json.JSONDecodeError) as exc:
            click.echo(f"{name}: bad scenario file: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        reports.append(run_scenario(script, engine))
    if as_json:
        click.echo(json.dumps({"scenarios": [r.to_dict() for r in reports]}, ensure_ascii=False, indent=2))
    else:
        for report in reports:
            status = "PASS" if report.passed else "FAIL"
            click.echo(f"{status} {report.name} ({report.duration_ms:.0f} ms)")
            for result in report.results:
                mark = "ok" if result.passed else f"FAIL: {result.failure}"
                click.echo(f"  turn {result.index} {result.user!r}: {mark}")
    sys.exit(0 if all(r.passed for r in reports) else EXIT_FAILURE)


@main.command()
@click.option("--config", "config_path", default=str(default_config_path()), show_default="packaged fixtures")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8080, show_default=True)
def serve(config_path: str, host: str, port: int) -> None:
    """Run the HTTP chat service."""
    engine = _load_engine(config_path)
    from .server import serve as run_server

    try:
        run_server(engine, host=host, port=port)
    except OSError as exc:
        click.echo(f"cannot bind {host}:{port}: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


if __name__ == "__main__":
    main()
