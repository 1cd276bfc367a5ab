"""Total parsers for backend responses.

Every parser accepts ``str`` or ``bytes`` and returns either a result or a
:class:`ParseFailure`; none of them raises on content.
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass, field
from importlib import resources

ACTIVITIES = ("ventilation", "stimulation", "suction")
NONE_TOKENS = frozenset({"none", "nothing", "no action", "no actions", "no activity", "n/a", "empty"})
AFFIRMATIVE = frozenset({"yes", "y", "true", "affirmative", "1"})
NEGATIVE = frozenset({"no", "n", "false", "negative", "0"})

_EDGE = " \t\r\n.,;:!?\"'`*()[]{}<>-_"


@dataclass(frozen=True)
class ParseFailure:
    reason: str
    text: str = ""


@dataclass(frozen=True)
class CoParse:
    labels: frozenset
    hallucinations: tuple = field(default=())


def as_text(raw) -> str:
    if isinstance(raw, (bytes, bytearray, memoryview)):
        return bytes(raw).decode("utf-8", errors="replace")
    if raw is None:
        return ""
    return str(raw)


def normalize(term: str) -> str:
    term = unicodedata.normalize("NFKC", term).casefold()
    term = re.sub(r"\s+", " ", term)
    return term.strip(_EDGE)


def load_synonyms(path=None) -> dict[str, str]:
    if path is None:
        text = resources.files("neoact.zeroshot").joinpath("prompts/synonyms.tsv").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    table = {a: a for a in ACTIVITIES}
    for i, line in enumerate(text.splitlines()):
        if not line.strip() or line.startswith("#") or (i == 0 and line.startswith("term\t")):
            continue
        term, _, label = line.partition("\t")
        label = label.strip()
        if label not in ACTIVITIES:
            raise ValueError(f"synonym table line {i + 1}: unknown label {label!r}")
        table[normalize(term)] = label
    return table


_SYNONYMS: dict[str, str] | None = None


def default_synonyms() -> dict[str, str]:
    global _SYNONYMS
    if _SYNONYMS is None:
        _SYNONYMS = load_synonyms()
    return _SYNONYMS


def parse_co(raw, synonyms: dict[str, str] | None = None) -> CoParse | ParseFailure:
    """Comma-separated activity names; unknown terms become hallucination events."""
    text = as_text(raw)
    table = default_synonyms() if synonyms is None else synonyms
    if not text.strip():
        return ParseFailure("empty response", text)
    labels, halluc = set(), []
    terms = [normalize(t) for t in re.split(r"[,;\n]", text)]
    terms = [re.sub(r"^(and|or) ", "", t) for t in terms if t]
    if not terms:
        return ParseFailure("no terms", text)
    for term in terms:
        if term in NONE_TOKENS:
            continue
        if term in table:
            labels.add(table[term])
        else:
            halluc.append(term)
    return CoParse(frozenset(labels), tuple(halluc))


def parse_yes_no(raw) -> bool | ParseFailure:
    """Leading affirmative/negative token."""
    text = as_text(raw)
    m = re.match(r"[\s\"'`*(\[]*([A-Za-z]+|[01])", text)
    if not m:
        return ParseFailure("no leading yes/no token", text)
    tok = m.group(1).casefold()
    if tok in AFFIRMATIVE:
        return True
    if tok in NEGATIVE:
        return False
    return ParseFailure(f"leading token {tok!r} is neither yes nor no", text)


def parse_judge(raw) -> int | ParseFailure:
    """First non-whitespace character must be ``0`` or ``1``."""
    text = as_text(raw).lstrip()
    if text[:1] in ("0", "1"):
        return int(text[0])
    return ParseFailure("answer does not begin with 0 or 1", as_text(raw))
