"""Offline keyword-matching backend.

Parses the same prompts the real models receive and answers them with a
transparent rule: a statement matches a code when any contentful word of
the code's name appears in the statement. Useful for smoke tests, demos,
and fully deterministic end-to-end runs without network access.
"""

from __future__ import annotations

import json
import re

from .gateway import ChatRequest, RuleBackend
from .segment import split_sentences

_STOPWORDS = {
    "a", "an", "the", "of", "for", "and", "or", "to", "in", "on", "with",
    "about", "using", "use", "is", "are", "as", "at", "by",
}

_STATEMENT_RE = re.compile(r'(?m)^(\d+)\. (?:\(Context: .*\)\n\s+)?"(.*)"$')


def keywords(name: str) -> set[str]:
    words = {w.strip(".,;:!?\"'()").lower() for w in name.split()}
    return {w for w in words if w and w not in _STOPWORDS}


def _matches(name: str, statement: str) -> bool:
    text = statement.lower()
    return any(k in text for k in keywords(name))


def _parse_statements(section: str) -> dict[int, str]:
    return {int(m.group(1)): m.group(2) for m in _STATEMENT_RE.finditer(section)}


def _answer_apply(prompt: str) -> str:
    tag_m = re.search(r"(?m)^Code Name:\n(.+)$", prompt)
    tag = tag_m.group(1).strip() if tag_m else ""
    section = prompt.rsplit("#### Statements to Evaluate", 1)[-1]
    statements = _parse_statements(section)
    binary = '"ANSWER"' in prompt or '"Yes" or "No"' in prompt
    out = {}
    for k, text in statements.items():
        hit = _matches(tag, text)
        if binary:
            out[str(k)] = {"REASONING": "keyword rule", "ANSWER": "Yes" if hit else "No"}
        else:
            out[str(k)] = {"REASONING": "keyword rule", "SCORE": 10 if hit else 1}
    return json.dumps(out)


def _answer_distribute(prompt: str) -> str:
    sub_section = prompt.rsplit("SUBTHEMES:", 1)[-1].split("STATEMENTS:", 1)[0]
    subthemes = {}
    for m in re.finditer(r"(?m)^- ([A-Z])\. ([^:(\n]+)", sub_section):
        subthemes[m.group(1)] = m.group(2).strip()
    statements = _parse_statements(prompt.rsplit("STATEMENTS:", 1)[-1])
    out = {}
    for k, text in statements.items():
        out[str(k)] = [
            letter for letter, name in subthemes.items() if _matches(name, text)
        ]
    return json.dumps(out)


def _answer_line_code(prompt: str) -> str:
    m = re.search(r"between (\d+) and (\d+) emergent codes", prompt)
    n_min = int(m.group(1)) if m else 3
    segment = prompt.rsplit("## Segment", 1)[-1].strip()
    codes = []
    for sent in split_sentences(segment):
        words = [w for w in sent.split() if w.strip(".,;:!?\"'()").lower() not in _STOPWORDS]
        if len(words) < 2:
            continue
        name = " ".join(w.strip(".,;:!?\"'()") for w in words[:2])
        if any(c["name"] == name for c in codes):
            continue
        codes.append(
            {
                "name": name,
                "definition": f"Statements concerning {name.lower()}.",
                "quotes": [sent],
            }
        )
        if len(codes) >= n_min:
            break
    return json.dumps({"codes": codes})


def _answer_condense(prompt: str) -> str:
    books_raw = prompt.rsplit("## Preliminary Codebooks", 1)[-1].strip()
    books = json.loads(books_raw)
    merged: dict[str, dict] = {}
    for book in books:
        for code in book.get("codes", []):
            slot = merged.setdefault(
                code["name"],
                {"name": code["name"], "definition": code.get("definition", ""), "quotes": []},
            )
            for q in code.get("quotes", []):
                if q not in slot["quotes"]:
                    slot["quotes"].append(q)
    return json.dumps({"codes": list(merged.values())})


def _answer_parents(prompt: str) -> str:
    section = prompt.rsplit("## Child Codes", 1)[-1]
    children = [m.group(1).strip() for m in re.finditer(r"(?m)^- ([^:\n]+):", section)]
    return json.dumps(
        {
            "parents": [
                {
                    "name": "General Themes",
                    "definition": "Overarching grouping of the discovered codes.",
                    "children": children,
                }
            ]
        }
    )


def keyword_rule(req: ChatRequest) -> str:
    p = req.user_prompt
    if p.startswith("# Qualitative Research Task") and "PARENT THEME" in p:
        return _answer_distribute(p)
    if p.startswith("# Qualitative Research Task"):
        return _answer_apply(p)
    if p.startswith("# Thematic Line Coding"):
        return _answer_line_code(p)
    if p.startswith("# Codebook Condensation"):
        return _answer_condense(p)
    if p.startswith("# Parent Theme Synthesis"):
        return _answer_parents(p)
    if p.startswith("# Code Grounding Validation"):
        return json.dumps({"supported": True})
    if p.startswith("# Hierarchy Refinement"):
        return json.dumps({"actions": []})
    return json.dumps({})


def keyword_backend(embed_dim: int = 64) -> RuleBackend:
    return RuleBackend(keyword_rule, embed_dim=embed_dim)
