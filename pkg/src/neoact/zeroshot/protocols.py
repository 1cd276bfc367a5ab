"""Prompt-based protocols: constrained output (ZSC-CO), binary questions (ZS-B), caption + judge (ZSC-J).

Protocol runs only issue calls and record them; labels always come from
:func:`decode`, a pure function of the call records, so a stored
transcript re-derives its labels offline.
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ..data import BABY, LABELS, SUCT, VENT, LabelVector
from .backends import Request, TransportError, TransportTimeout
from .parsers import ParseFailure, parse_co, parse_judge, parse_yes_no

log = logging.getLogger(__name__)

SCHEMA = 1
PROTOCOLS = ("ZSC-CO", "ZS-B", "ZSC-J")
YES_NO_SUFFIX = " Answer yes or no."


@dataclass
class PromptSpec:
    protocol: str
    prompt: str = ""
    judge: str = ""
    temperature: float = 0.0
    questions: dict = field(default_factory=dict)
    reminder: str = ""
    vlm_model: str = "vlm"
    llm_model: str = "llm"

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.protocol == "ZSC-J" and not (self.prompt and self.judge):
            raise ValueError("ZSC-J needs both a captioning prompt and a judge prompt")
        if self.protocol in ("ZS-B", "ZSC-J") and set(self.questions) != set(LABELS):
            raise ValueError(f"{self.protocol} needs one question per class {LABELS}")
        if self.protocol == "ZSC-CO" and not self.prompt:
            raise ValueError("ZSC-CO needs a prompt")


def _read(directory, name: str) -> str:
    if directory is None:
        return resources.files("neoact.zeroshot").joinpath(f"prompts/{name}").read_text("utf-8")
    return Path(directory, name).read_text(encoding="utf-8")


def load_questions(text: str) -> dict[str, str]:
    out = {}
    for i, line in enumerate(text.splitlines()):
        if not line.strip() or (i == 0 and line.startswith("label\t")):
            continue
        label, _, q = line.partition("\t")
        out[label.strip()] = q.strip()
    return out


def load_prompt_spec(protocol: str, directory=None, temperature: float = 0.0) -> PromptSpec:
    """Prompt texts from a configuration directory (the shipped one by default)."""
    questions = load_questions(_read(directory, "questions.tsv"))
    reminder = _read(directory, "reminder.txt").rstrip("\n")
    if protocol == "ZSC-CO":
        return PromptSpec(protocol, prompt=_read(directory, "co.txt").rstrip("\n"), temperature=temperature)
    if protocol == "ZS-B":
        return PromptSpec(protocol, questions=questions, temperature=temperature)
    return PromptSpec(protocol, prompt=caption_prompt(directory), judge=_read(directory, "judge.txt").rstrip("\n"),
                      questions=questions, reminder=reminder, temperature=temperature)


def caption_prompt(directory=None) -> str:
    return _read(directory, "caption.txt").rstrip("\n")


@dataclass
class ClipRef:
    clip_id: str
    frames: np.ndarray | None = None


@dataclass
class ProtocolResult:
    clip_id: str
    protocol: str
    y: LabelVector
    flags: tuple = ()
    caption: str | None = None
    calls: list = field(default_factory=list)

    @property
    def hallucinations(self) -> list[str]:
        return [f.split(":", 1)[1] for f in self.flags if f.startswith("hallucination:")]

    def to_record(self) -> dict:
        return {"schema": SCHEMA, "kind": "result", "clip_id": self.clip_id, "protocol": self.protocol,
                "y": list(self.y.y), "flags": list(self.flags), "caption": self.caption}


class ProtocolTransportError(TransportError):
    def __init__(self, msg: str, calls: list):
        super().__init__(msg)
        self.calls = calls


# -- calling ------------------------------------------------------------------

def call(backend, req: Request, protocol: str, records: list, max_retries: int) -> str:
    """One logical call with up to ``max_retries`` transport retries; every attempt is recorded."""
    last = None
    for attempt in range(max_retries + 1):
        rec = {"schema": SCHEMA, "kind": "call", "clip_id": req.clip_id, "protocol": protocol,
               "purpose": req.purpose, "attempt": attempt, "fingerprint": req.fingerprint(),
               "request": req.canonical(), "status": "ok", "response": None, "error": None,
               "latency_s": None}
        try:
            resp = backend.complete(req)
        except TransportTimeout as exc:
            rec.update(status="timeout", error=str(exc))
            last = exc
        except TransportError as exc:
            rec.update(status="error", error=str(exc))
            last = exc
        else:
            rec.update(response=resp.text, latency_s=resp.latency_s)
            records.append(rec)
            return resp.text
        records.append(rec)
    raise ProtocolTransportError(f"{req.alias}: {last} (after {max_retries + 1} attempts)", records)


def _retries(backend, max_retries):
    if max_retries is not None:
        return max_retries
    ep = getattr(backend, "endpoint", None)
    return ep.max_retries if ep is not None else 0


def run_zsc_co(clip: ClipRef, backend, spec: PromptSpec, max_retries: int | None = None) -> ProtocolResult:
    if spec.protocol != "ZSC-CO":
        raise ValueError("run_zsc_co needs a ZSC-CO prompt spec")
    records: list = []
    req = Request(clip.clip_id, "co", (("user", spec.prompt),), spec.vlm_model, spec.temperature, clip.frames)
    call(backend, req, "ZSC-CO", records, _retries(backend, max_retries))
    return decode("ZSC-CO", records, clip.clip_id)


def run_zs_b(clip: ClipRef, backend, spec: PromptSpec, max_retries: int | None = None) -> ProtocolResult:
    if spec.protocol != "ZS-B":
        raise ValueError("run_zs_b needs a ZS-B prompt spec")
    records: list = []
    n = _retries(backend, max_retries)
    for label in LABELS:
        req = Request(clip.clip_id, f"question:{label}", (("user", spec.questions[label] + YES_NO_SUFFIX),),
                      spec.vlm_model, spec.temperature, clip.frames)
        call(backend, req, "ZS-B", records, n)
    return decode("ZS-B", records, clip.clip_id)


def judge_messages(spec: PromptSpec, caption: str, label: str, retry: bool = False) -> tuple:
    user = f"Caption:\n{caption}\n\nQuestion: {spec.questions[label]}"
    if retry:
        user += "\n\n" + spec.reminder
    return (("system", spec.judge), ("user", user))


def run_zsc_j(clip: ClipRef, vlm, llm, spec: PromptSpec, max_retries: int | None = None) -> ProtocolResult:
    if spec.protocol != "ZSC-J":
        raise ValueError("run_zsc_j needs a ZSC-J prompt spec")
    records: list = []
    req = Request(clip.clip_id, "caption", (("user", spec.prompt),), spec.vlm_model, spec.temperature, clip.frames)
    caption = call(vlm, req, "ZSC-J", records, _retries(vlm, max_retries))
    if caption.strip():
        n = _retries(llm, max_retries)
        for label in LABELS:
            req = Request(clip.clip_id, f"judge:{label}", judge_messages(spec, caption, label),
                          spec.llm_model, spec.temperature)
            answer = call(llm, req, "ZSC-J", records, n)
            if isinstance(parse_judge(answer), ParseFailure):
                req = Request(clip.clip_id, f"judge-retry:{label}", judge_messages(spec, caption, label, True),
                              spec.llm_model, spec.temperature)
                call(llm, req, "ZSC-J", records, n)
    return decode("ZSC-J", records, clip.clip_id)


# -- decoding -------------------------------------------------------------------

def _ok(records: list, purpose: str):
    for r in records:
        if r["purpose"] == purpose and r["status"] == "ok":
            return r
    return None


def resolve_conflict(y: list[int], first_try: dict[int, bool], flags: list) -> None:
    """Ventilation and suction may not both be set; the retry-free affirmative wins, ties go to ventilation."""
    if not (y[VENT] and y[SUCT]):
        return
    fv, fs = first_try.get(VENT, False), first_try.get(SUCT, False)
    if fs and not fv:
        y[VENT] = 0
        flags.append("conflict:suction")
    elif fv and not fs:
        y[SUCT] = 0
        flags.append("conflict:ventilation")
    else:
        y[SUCT] = 0
        flags.append("conflict-tie:ventilation")


def decode(protocol: str, records: list, clip_id: str = "") -> ProtocolResult:
    """Labels and flags from call records alone."""
    y = [0, 0, 0, 0]
    flags: list[str] = []
    caption = None
    first_try: dict[int, bool] = {}
    if protocol == "ZSC-CO":
        rec = _ok(records, "co")
        if rec is None:
            flags.append("transport_error:co")
        else:
            parsed = parse_co(rec["response"])
            if isinstance(parsed, ParseFailure):
                flags.append("parse_failure:co")
            else:
                for lab in parsed.labels:
                    y[LABELS.index(lab)] = 1
                flags.extend(f"hallucination:{h}" for h in parsed.hallucinations)
                # both named in one answer: no ordering signal, so this is always a tie
                first_try = {VENT: True, SUCT: True}
    elif protocol == "ZS-B":
        for c, label in enumerate(LABELS):
            rec = _ok(records, f"question:{label}")
            if rec is None:
                flags.append(f"transport_error:{label}")
                continue
            parsed = parse_yes_no(rec["response"])
            if isinstance(parsed, ParseFailure):
                flags.append(f"parse_failure:{label}")
                continue
            y[c] = int(parsed)
            first_try[c] = rec["attempt"] == 0
    elif protocol == "ZSC-J":
        rec = _ok(records, "caption")
        if rec is None:
            flags.append("transport_error:caption")
        elif not rec["response"].strip():
            caption = rec["response"]
            flags.append("empty_caption")
        else:
            caption = rec["response"]
            for c, label in enumerate(LABELS):
                first = _ok(records, f"judge:{label}")
                if first is None:
                    flags.append(f"transport_error:{label}")
                    continue
                parsed = parse_judge(first["response"])
                if not isinstance(parsed, ParseFailure):
                    y[c] = parsed
                    first_try[c] = first["attempt"] == 0
                    continue
                flags.append(f"judge_retry:{label}")
                retry = _ok(records, f"judge-retry:{label}")
                parsed = parse_judge(retry["response"]) if retry is not None else ParseFailure("no retry")
                if isinstance(parsed, ParseFailure):
                    flags.append(f"judge_failure:{label}")
                else:
                    y[c] = parsed
                    first_try[c] = False
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    resolve_conflict(y, first_try, flags)
    if protocol == "ZSC-CO":
        y[BABY] = 0
    calls = [r for r in records]
    return ProtocolResult(clip_id, protocol, LabelVector(tuple(y)), tuple(flags), caption, calls)


# -- transcripts and corpora -------------------------------------------------------

class TranscriptWriter:
    """Single appender for newline-delimited call and result records."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, records: list[dict]) -> None:
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n")


def read_transcript(path) -> list[dict]:
    out = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("schema") != SCHEMA:
            raise ValueError(f"{path}:{i + 1}: unsupported transcript schema {rec.get('schema')!r}")
        out.append(rec)
    return out


def rederive(records: list[dict]) -> list[tuple[dict, ProtocolResult]]:
    """Pair every stored result record with the labels re-decoded from its calls."""
    calls: dict[tuple, list] = {}
    for r in records:
        if r["kind"] == "call":
            calls.setdefault((r["clip_id"], r["protocol"]), []).append(r)
    out = []
    for r in records:
        if r["kind"] == "result":
            out.append((r, decode(r["protocol"], calls.get((r["clip_id"], r["protocol"]), []), r["clip_id"])))
    return out


def run_protocol(protocol: str, clip: ClipRef, spec: PromptSpec, vlm, llm=None,
                 max_retries: int | None = None) -> ProtocolResult:
    """Run one clip; a transport failure yields a flagged all-zero result instead of raising."""
    try:
        if protocol == "ZSC-CO":
            return run_zsc_co(clip, vlm, spec, max_retries)
        if protocol == "ZS-B":
            return run_zs_b(clip, vlm, spec, max_retries)
        return run_zsc_j(clip, vlm, llm if llm is not None else vlm, spec, max_retries)
    except ProtocolTransportError as exc:
        log.warning("clip %s: %s", clip.clip_id, exc)
        return decode(protocol, exc.calls, clip.clip_id)


def run_corpus(protocol: str, clips: list[ClipRef], spec: PromptSpec, vlm, llm=None,
               max_in_flight: int = 1, writer: TranscriptWriter | None = None,
               max_retries: int | None = None) -> list[ProtocolResult]:
    """Clips run concurrently up to ``max_in_flight``; records are appended in clip order."""

    def one(clip):
        return run_protocol(protocol, clip, spec, vlm, llm, max_retries)

    results = []
    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        for res in pool.map(one, clips):
            if writer is not None:
                writer.append(res.calls + [res.to_record()])
            results.append(res)
    return results
