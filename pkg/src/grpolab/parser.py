"""Structured completion parsing for the two supported output dialects.

``ThinkSolution``::

    <think> ... </think><solution> Label A, Label B </solution>

``AnalysisConclusion``::

    {analysis: ..., conclusion: Label A, Label B}

Braces are optional in the second dialect and keys match case-insensitively.
Predictions come from the solution/conclusion block only.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

from .vocab import LabelSet, parse_label


class FormatSpec(str, enum.Enum):
    THINK_SOLUTION = "think_solution"
    ANALYSIS_CONCLUSION = "analysis_conclusion"

    @classmethod
    def parse(cls, value: "str | FormatSpec") -> "FormatSpec":
        if isinstance(value, FormatSpec):
            return value
        key = re.sub(r"[-_\s]", "", value.lower())
        for member in cls:
            if member.value.replace("_", "") == key:
                return member
        raise ValueError(f"unknown format: {value!r}")


@dataclass(frozen=True)
class ParsedOutput:
    valid: bool
    reasoning_text: str = ""
    solution_text: str = ""
    predicted: LabelSet = field(default_factory=LabelSet)
    invalid_label_count: int = 0
    duplicate_count: int = 0
    extraneous_text: bool = False
    token_length: int = 0


_TOKEN = re.compile(r"\w+|[^\w\s]")
_SPLIT = re.compile(r"[,\n]")
_TAGS = ("<think>", "</think>", "<solution>", "</solution>")
_ANALYSIS_KEY = re.compile(r"analysis\s*:", re.IGNORECASE)
_CONCLUSION_KEY = re.compile(r"conclusion\s*:", re.IGNORECASE)


def count_tokens(text: str) -> int:
    """Word/punctuation token count used when no policy tokenization is available."""
    return len(_TOKEN.findall(text))


def _blocks_think_solution(text: str):
    if any(text.count(tag) != 1 for tag in _TAGS):
        return None
    pos = [text.index(tag) for tag in _TAGS]
    if not pos[0] < pos[1] < pos[2] < pos[3]:
        return None
    reasoning = text[pos[0] + len(_TAGS[0]) : pos[1]]
    solution = text[pos[2] + len(_TAGS[2]) : pos[3]]
    outside = text[: pos[0]] + text[pos[1] + len(_TAGS[1]) : pos[2]] + text[pos[3] + len(_TAGS[3]) :]
    return reasoning, solution, outside


def _blocks_analysis_conclusion(text: str):
    a_keys = list(_ANALYSIS_KEY.finditer(text))
    c_keys = list(_CONCLUSION_KEY.finditer(text))
    if len(a_keys) != 1 or len(c_keys) != 1:
        return None
    a, c = a_keys[0], c_keys[0]
    if a.end() > c.start():
        return None
    prefix = text[: a.start()].rstrip()
    braced = prefix.endswith("{")
    if braced:
        prefix = prefix[:-1]
    reasoning = text[a.end() : c.start()].strip()
    if reasoning.endswith(","):
        reasoning = reasoning[:-1]
    body = text[c.end() :]
    suffix = ""
    if braced:
        close = body.rfind("}")
        if close < 0:
            return None
        body, suffix = body[:close], body[close + 1 :]
    elif "{" in body or "}" in body:
        return None
    return reasoning.strip(), body, prefix + suffix


def parse_completion(
    text: str,
    spec: FormatSpec | str = FormatSpec.THINK_SOLUTION,
    token_length: int | None = None,
) -> ParsedOutput:
    """Validate ``text`` against ``spec`` and extract the predicted label set.

    ``token_length`` overrides the built-in word/punctuation count; the toy policy
    passes its own token count here. Never raises: failures are encoded in the
    returned :class:`ParsedOutput`.
    """
    spec = FormatSpec.parse(spec)
    n_tokens = count_tokens(text) if token_length is None else int(token_length)
    if spec is FormatSpec.THINK_SOLUTION:
        blocks = _blocks_think_solution(text)
    else:
        blocks = _blocks_analysis_conclusion(text)
    if blocks is None:
        return ParsedOutput(valid=False, token_length=n_tokens)
    reasoning, solution, outside = blocks

    seen = []
    invalid = duplicates = 0
    for fragment in _SPLIT.split(solution):
        if not fragment.strip():
            continue
        found = parse_label(fragment)
        if found is None:
            invalid += 1
        elif found in seen:
            duplicates += 1
        else:
            seen.append(found)
    return ParsedOutput(
        valid=True,
        reasoning_text=reasoning,
        solution_text=solution,
        predicted=LabelSet(seen),
        invalid_label_count=invalid,
        duplicate_count=duplicates,
        extraneous_text=bool(outside.strip()),
        token_length=n_tokens,
    )


def is_valid_format(text: str, spec: FormatSpec | str = FormatSpec.THINK_SOLUTION) -> bool:
    return parse_completion(text, spec).valid
