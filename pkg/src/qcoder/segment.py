"""Excerpt segmentation.

Documents are split into ~target_words excerpts at sentence boundaries.
Interviews split at turn boundaries first; interviewer turns are kept as
context (the eliciting question) rather than emitted as codable excerpts.
"""

from __future__ import annotations

import re

from .models import Document, DocumentKind, Excerpt, SpeakerRole, word_count

# Sentence boundary: terminal punctuation followed by whitespace.
# Deliberately no abbreviation dictionary; determinism over cleverness.
_SENTENCE_RE = re.compile(r"(?<=[.?!])\s+")


def split_sentences(text: str) -> list[str]:
    parts = [p for p in _SENTENCE_RE.split(text) if p.strip()]
    return parts


def _pack_sentences(sentences: list[str], target_words: int) -> list[str]:
    """Greedy packing: close a chunk at whichever boundary around the
    crossing sentence lands nearest the running word target."""
    chunks: list[list[str]] = []
    cur: list[str] = []
    cur_words = 0
    for sent in sentences:
        n = word_count(sent)
        if cur and cur_words + n >= target_words:
            # include the crossing sentence only if that lands closer to target
            if abs(cur_words + n - target_words) <= abs(cur_words - target_words):
                cur.append(sent)
                chunks.append(cur)
                cur, cur_words = [], 0
            else:
                chunks.append(cur)
                cur, cur_words = [sent], n
        else:
            cur.append(sent)
            cur_words += n
    if cur:
        chunks.append(cur)
    return [" ".join(c) for c in chunks]


def segment(doc: Document, target_words: int = 80) -> list[Excerpt]:
    """Split a document into excerpts of approximately target_words words.

    Non-interview documents: one pass over sentence boundaries; each
    excerpt's preceding_context is the previous excerpt's text.

    Interviews: respondent turns are segmented individually; the first
    excerpt of a turn carries the eliciting interviewer question as
    context, later excerpts carry the previous excerpt.
    """
    if target_words < 10:
        raise ValueError("target_words must be >= 10")
    if not doc.body.strip():
        return []

    excerpts: list[Excerpt] = []

    def emit(text: str, context: str | None, respondent: bool) -> None:
        idx = len(excerpts)
        excerpts.append(
            Excerpt(
                id=f"{doc.id}:{idx}",
                doc_id=doc.id,
                index=idx,
                text=text,
                word_count=word_count(text),
                preceding_context=context,
                is_respondent_turn=respondent,
            )
        )

    if doc.kind == DocumentKind.INTERVIEW and doc.turns:
        question: str | None = None
        for role, turn_text in doc.turns:
            if not turn_text.strip():
                continue
            if role == SpeakerRole.INTERVIEWER:
                question = turn_text.strip()
                continue
            chunks = _pack_sentences(split_sentences(turn_text), target_words)
            for i, chunk in enumerate(chunks):
                context = question if i == 0 else excerpts[-1].text
                emit(chunk, context, role == SpeakerRole.RESPONDENT)
            question = None
        return excerpts

    chunks = _pack_sentences(split_sentences(doc.body), target_words)
    for chunk in chunks:
        context = excerpts[-1].text if excerpts else None
        emit(chunk, context, True)
    return excerpts
