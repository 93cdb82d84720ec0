"""Core domain types: documents, excerpts, codes, codebooks, annotations.

Everything here is a plain immutable-ish dataclass with a dict round-trip
(`to_dict` / `from_dict`) used by the on-disk store and the HTTP layer.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional


class DocumentKind(str, Enum):
    INTERVIEW = "interview"
    POST = "post"
    ABSTRACT = "abstract"
    NEWS = "news"
    FREEFORM = "freeform"


class SpeakerRole(str, Enum):
    INTERVIEWER = "interviewer"
    RESPONDENT = "respondent"
    NONE = "none"


class ErrorCategory(str, Enum):
    """Vocabulary for labeling the root cause of a machine coding error."""

    CODE_UNDER_SPECIFICATION = "code_under_specification"
    CONTEXTUAL_LIMITATION = "contextual_limitation"
    ANNOTATION_INCONSISTENCY = "annotation_inconsistency"
    THRESHOLDING_ERROR = "thresholding_error"
    OTHER_LLM_ERROR = "other_llm_error"


HUMAN_RATER = "human"


def model_rater(name: str) -> str:
    return f"model:{name}"


def ensemble_rater(names: list[str]) -> str:
    return "ensemble:" + "+".join(names)


def doc_scope_id(doc_id: str) -> str:
    """Excerpt-id convention for annotations made at document scope."""
    return f"doc::{doc_id}"


def is_doc_scope(excerpt_id: str) -> bool:
    return excerpt_id.startswith("doc::")


def word_count(text: str) -> int:
    return len(text.split())


@dataclass
class Document:
    id: str
    title: str
    kind: DocumentKind
    body: str
    source_order: int
    turns: list[tuple[SpeakerRole, str]] = field(default_factory=list)

    def __post_init__(self):
        self.kind = DocumentKind(self.kind)
        self.turns = [(SpeakerRole(r), t) for r, t in self.turns]
        if self.kind == DocumentKind.INTERVIEW and self.turns:
            joined = "".join(t for _, t in self.turns)
            if "".join(self.body.split()) != "".join(joined.split()):
                raise ValueError(
                    f"document {self.id}: interview body must equal its turns"
                )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "title": self.title,
            "kind": self.kind.value,
            "body": self.body,
            "source_order": self.source_order,
            "turns": [[r.value, t] for r, t in self.turns],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Document":
        return cls(
            id=d["id"],
            title=d["title"],
            kind=DocumentKind(d["kind"]),
            body=d["body"],
            source_order=d["source_order"],
            turns=[(SpeakerRole(r), t) for r, t in d.get("turns", [])],
        )


@dataclass
class Excerpt:
    id: str
    doc_id: str
    index: int
    text: str
    word_count: int
    preceding_context: Optional[str] = None
    is_respondent_turn: bool = True

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Excerpt":
        return cls(**d)


@dataclass
class Code:
    id: str
    name: str
    definition: str = ""
    inclusion_criteria: list[str] = field(default_factory=list)
    exclusion_criteria: list[str] = field(default_factory=list)
    parent_id: Optional[str] = None
    positive_examples: list[str] = field(default_factory=list)
    negative_examples: list[str] = field(default_factory=list)
    supporting_quotes: list[tuple[str, Optional[str]]] = field(default_factory=list)

    def __post_init__(self):
        if not self.name:
            raise ValueError("code name must be nonempty")
        self.supporting_quotes = [tuple(q) for q in self.supporting_quotes]
        overlap = set(self.positive_examples) & set(self.negative_examples)
        if overlap:
            raise ValueError(f"code {self.name}: example lists overlap: {overlap}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["supporting_quotes"] = [list(q) for q in self.supporting_quotes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Code":
        d = dict(d)
        d["supporting_quotes"] = [tuple(q) for q in d.get("supporting_quotes", [])]
        return cls(**d)


@dataclass
class Codebook:
    id: str
    codes: list[Code] = field(default_factory=list)
    version: int = 1
    lens: Optional[str] = None

    def __post_init__(self):
        self._validate()

    def _validate(self):
        ids = [c.id for c in self.codes]
        if len(ids) != len(set(ids)):
            raise ValueError(f"codebook {self.id}: duplicate code ids")
        by_id = {c.id: c for c in self.codes}
        for c in self.codes:
            if c.parent_id is not None and c.parent_id not in by_id:
                raise ValueError(
                    f"codebook {self.id}: code {c.id} has unresolved parent {c.parent_id}"
                )
            if self.depth(c.id) > 2:
                raise ValueError(f"codebook {self.id}: depth cap exceeded at {c.id}")

    def get(self, code_id: str) -> Code:
        for c in self.codes:
            if c.id == code_id:
                return c
        raise KeyError(code_id)

    def children(self, code_id: Optional[str]) -> list[Code]:
        return [c for c in self.codes if c.parent_id == code_id]

    def roots(self) -> list[Code]:
        return self.children(None)

    def depth(self, code_id: str) -> int:
        by_id = {c.id: c for c in self.codes}
        d, cur, seen = 0, by_id[code_id], set()
        while cur.parent_id is not None:
            if cur.id in seen:
                raise ValueError(f"codebook {self.id}: parent cycle at {cur.id}")
            seen.add(cur.id)
            cur = by_id[cur.parent_id]
            d += 1
        return d

    def descendants(self, code_id: str) -> list[Code]:
        out: list[Code] = []
        stack = [code_id]
        while stack:
            cur = stack.pop()
            for c in self.children(cur):
                out.append(c)
                stack.append(c.id)
        return out

    def height(self) -> int:
        return max((self.depth(c.id) for c in self.codes), default=0)

    def ancestry(self, code_id: str) -> list[Code]:
        """Path from root to the code, inclusive."""
        by_id = {c.id: c for c in self.codes}
        path = [by_id[code_id]]
        while path[0].parent_id is not None:
            path.insert(0, by_id[path[0].parent_id])
        return path

    def bump(self) -> None:
        self.version += 1

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "version": self.version,
            "lens": self.lens,
            "codes": [c.to_dict() for c in self.codes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Codebook":
        return cls(
            id=d["id"],
            version=d.get("version", 1),
            lens=d.get("lens"),
            codes=[Code.from_dict(c) for c in d.get("codes", [])],
        )


@dataclass
class Annotation:
    excerpt_id: str
    code_id: str
    rater: str
    positive: bool
    run_id: str
    created_at: str
    score: Optional[int] = None
    reasoning: Optional[str] = None
    failed: bool = False
    fallback: bool = False

    def __post_init__(self):
        if self.score is not None and not 1 <= self.score <= 10:
            raise ValueError(f"score {self.score} outside [1, 10]")

    @property
    def key(self) -> tuple:
        return (self.excerpt_id, self.code_id, self.rater, self.run_id)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Annotation":
        return cls(**d)


@dataclass
class Run:
    """Audit record of one coding run: config snapshot, request hashes, failures."""

    id: str
    kind: str
    code_id: Optional[str]
    created_at: str
    config: dict = field(default_factory=dict)
    prompt_catalog_version: str = ""
    request_hashes: list[str] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Run":
        return cls(**d)
