"""Turn free-text model replies into verdicts and counts."""

from __future__ import annotations

import re

from ..core import Verdict
from ..errors import ParseError

_VERDICT = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
_INTEGER = re.compile(r"(?<![\w.])(-?\d+)\b")
_REASON = re.compile(r"\breasons?\b\s*[:\-\u2014]\s*(.*)", re.IGNORECASE | re.DOTALL)

# "none" is left out on purpose: replies like "none that I can see" are too
# often hedges rather than a definite zero.
NUMBER_WORDS = {
    "zero": 0, "one": 1, "two": 2, "three": 3, "four": 4, "five": 5,
    "six": 6, "seven": 7, "eight": 8, "nine": 9, "ten": 10,
}
_WORDS = re.compile(r"\b(" + "|".join(NUMBER_WORDS) + r")\b", re.IGNORECASE)


def parse_verdict(raw: str) -> Verdict:
    match = _VERDICT.search(raw or "")
    if match is None:
        raise ParseError("reply contains neither 'yes' nor 'no'", raw)
    return Verdict(match.group(1).lower())


def parse_count(raw: str) -> int:
    text = _WORDS.sub(lambda m: str(NUMBER_WORDS[m.group(1).lower()]), raw or "")
    match = _INTEGER.search(text)
    if match is None:
        raise ParseError("reply contains no integer", raw)
    value = int(match.group(1))
    if value < 0:
        raise ParseError(f"negative count {value}", raw)
    return value


def extract_reason(raw: str) -> str:
    match = _REASON.search(raw or "")
    if match:
        return match.group(1).strip()
    return (raw or "").strip()
