"""Five-stage codebook generation: line coding over corpus segments,
recursive condensation, parent synthesis, MMR-grounded validation, and
hierarchical refinement. Steerable by a natural-language lens.

Anti-hallucination safeguard: every supporting quote is checked for
verbatim containment (after whitespace normalization) in its source
segment, at every stage that produces quotes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import prompt_catalog
from .errors import ParseError, ValidationError
from .gateway import ChatRequest, Gateway, request_hash, strip_fences
from .models import Code, Codebook, Document, Excerpt
from .segment import split_sentences

SYSTEM_PROMPT = "You are an expert qualitative researcher."


@dataclass
class CodegenConfig:
    segment_words: int = 60_000
    themes_min: int = 3
    themes_max: int = 10
    lens: Optional[str] = None
    parent_lens: Optional[str] = None
    condense_fanin: int = 5
    mmr_lambda: float = 0.7
    validation_top_k: int = 20
    line_model: str = "default"
    condense_model: str = "default"
    parent_model: str = "default"
    validate_model: str = "default"
    refine_model: str = "default"
    seed: int = 0

    def __post_init__(self):
        if self.themes_min < 1 or self.themes_min > self.themes_max:
            raise ValidationError("need 1 <= themes_min <= themes_max")
        if self.segment_words < 1_000:
            raise ValidationError("segment_words must be >= 1,000")
        if self.validation_top_k < 1:
            raise ValidationError("validation_top_k must be >= 1")
        if not 0 <= self.mmr_lambda <= 1:
            raise ValidationError("mmr_lambda must be in [0, 1]")
        if self.condense_fanin < 2:
            raise ValidationError("condense_fanin must be >= 2")

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class PrelimCode:
    name: str
    definition: str = ""
    quotes: list[str] = field(default_factory=list)


@dataclass
class PreliminaryCodebook:
    segment_id: int
    codes: list[PrelimCode] = field(default_factory=list)


@dataclass
class PipelineLog:
    request_hashes: list[str] = field(default_factory=list)
    events: list[str] = field(default_factory=list)
    failed_segments: list[int] = field(default_factory=list)
    llm_calls: dict[str, int] = field(default_factory=dict)

    def count(self, stage: str) -> None:
        self.llm_calls[stage] = self.llm_calls.get(stage, 0) + 1


def _norm(text: str) -> str:
    return " ".join(text.split())


def quote_is_verbatim(quote: str, source: str) -> bool:
    q = _norm(quote)
    return bool(q) and q in _norm(source)


def segment_corpus(docs: Sequence[Document], segment_words: int) -> list[str]:
    """Partition the concatenated corpus into units of <= segment_words
    words, breaking only at document or sentence boundaries. A single
    segment may span multiple documents."""
    if not docs:
        raise ValidationError("docs must be nonempty")
    ordered = sorted(docs, key=lambda d: d.source_order)
    segments: list[str] = []
    cur: list[str] = []
    cur_words = 0
    for doc in ordered:
        for sent in split_sentences(doc.body):
            n = len(sent.split())
            if cur and cur_words + n > segment_words:
                segments.append(" ".join(cur))
                cur, cur_words = [], 0
            cur.append(sent)
            cur_words += n
    if cur:
        segments.append(" ".join(cur))
    return segments


def _chat_json(
    gateway: Gateway, model: str, prompt: str, log: PipelineLog, stage: str
) -> dict:
    """One chat call with a single corrective re-prompt on malformed JSON."""
    req = ChatRequest(model=model, system_prompt=SYSTEM_PROMPT, user_prompt=prompt)
    for attempt in range(2):
        log.request_hashes.append(request_hash(req))
        log.count(stage)
        resp = gateway.chat(req)
        try:
            data = json.loads(strip_fences(resp.text))
            if isinstance(data, dict):
                return data
            raise ParseError("top-level JSON must be an object")
        except (json.JSONDecodeError, ParseError) as exc:
            if attempt == 1:
                raise ParseError(f"{stage}: malformed model output: {exc}") from exc
            from dataclasses import replace

            req = replace(
                req,
                user_prompt=prompt
                + "\n\nYour previous response was malformed. Respond with ONLY the "
                "valid JSON object described above.",
            )
    raise AssertionError("unreachable")


def _parse_prelim(data: dict, source: str, segment_id: int, log: PipelineLog) -> PreliminaryCodebook:
    codes = []
    for item in data.get("codes", []):
        name = str(item.get("name", "")).strip()
        if not name:
            continue
        quotes = []
        for q in item.get("quotes", []):
            if quote_is_verbatim(str(q), source):
                quotes.append(str(q))
            else:
                log.events.append(f"segment {segment_id}: dropped non-verbatim quote for {name!r}")
        if not quotes:
            log.events.append(f"segment {segment_id}: dropped code {name!r} (no verbatim quotes)")
            continue
        codes.append(PrelimCode(name=name, definition=str(item.get("definition", "")), quotes=quotes))
    return PreliminaryCodebook(segment_id=segment_id, codes=codes)


def line_code(
    gateway: Gateway,
    segment: str,
    cfg: CodegenConfig,
    segment_id: int = 0,
    log: Optional[PipelineLog] = None,
) -> PreliminaryCodebook:
    """First-pass emergent theme extraction over one corpus segment."""
    if not segment.strip():
        raise ValidationError("segment must be nonempty")
    log = log if log is not None else PipelineLog()
    lens_block = f"Research lens (steer toward this framing): {cfg.lens}" if cfg.lens else ""
    prompt = prompt_catalog.render(
        "line_code",
        n_min=str(cfg.themes_min),
        n_max=str(cfg.themes_max),
        lens=lens_block,
        segment=segment,
    )
    data = _chat_json(gateway, cfg.line_model, prompt, log, "line_code")
    book = _parse_prelim(data, segment, segment_id, log)
    if len(book.codes) > cfg.themes_max:
        # one corrective re-prompt, then deterministic truncation
        retry = prompt + (
            f"\n\nYour previous response contained {len(book.codes)} codes; return "
            f"at most {cfg.themes_max}."
        )
        data = _chat_json(gateway, cfg.line_model, retry, log, "line_code")
        book = _parse_prelim(data, segment, segment_id, log)
        if len(book.codes) > cfg.themes_max:
            log.events.append(
                f"segment {segment_id}: truncated {len(book.codes)} codes to {cfg.themes_max}"
            )
            book.codes = book.codes[: cfg.themes_max]
    return book


def _serialize_books(books: Sequence[PreliminaryCodebook]) -> str:
    payload = [
        {
            "codes": [
                {"name": c.name, "definition": c.definition, "quotes": c.quotes}
                for c in b.codes
            ]
        }
        for b in books
    ]
    return json.dumps(payload, ensure_ascii=False, indent=2)


def condensation_call_count(n_books: int, fanin: int) -> int:
    """Calls made by the recursive m-ary reduction of n books to one."""
    if n_books <= 1:
        return 0
    calls, k = 0, n_books
    while k > 1:
        groups = math.ceil(k / fanin)
        calls += groups
        k = groups
    return calls


def condense(
    gateway: Gateway,
    books: Sequence[PreliminaryCodebook],
    cfg: CodegenConfig,
    log: Optional[PipelineLog] = None,
) -> PreliminaryCodebook:
    """Recursively merge per-segment codebooks, at most condense_fanin
    per LLM call, until one remains. Quotes survive only if they appear
    verbatim among the input books' quotes."""
    if not books:
        raise ValidationError("books must be nonempty")
    log = log if log is not None else PipelineLog()
    if len(books) == 1:
        return books[0]

    valid_quotes = {_norm(q) for b in books for c in b.codes for q in c.quotes}

    def merge_group(group: Sequence[PreliminaryCodebook]) -> PreliminaryCodebook:
        prompt = prompt_catalog.render(
            "condense",
            n_min=str(cfg.themes_min),
            n_max=str(cfg.themes_max * 2),
            books=_serialize_books(group),
        )
        data = _chat_json(gateway, cfg.condense_model, prompt, log, "condense")
        codes = []
        for item in data.get("codes", []):
            name = str(item.get("name", "")).strip()
            if not name:
                continue
            quotes = [str(q) for q in item.get("quotes", []) if _norm(str(q)) in valid_quotes]
            if not quotes:
                log.events.append(f"condense: dropped code {name!r} (no surviving quotes)")
                continue
            codes.append(
                PrelimCode(name=name, definition=str(item.get("definition", "")), quotes=quotes)
            )
        if len(codes) > cfg.themes_max * 2:
            log.events.append(f"condense: hard-truncated {len(codes)} codes")
            codes = codes[: cfg.themes_max * 2]
        return PreliminaryCodebook(segment_id=group[0].segment_id, codes=codes)

    level = list(books)
    while len(level) > 1:
        level = [
            merge_group(level[i : i + cfg.condense_fanin])
            for i in range(0, len(level), cfg.condense_fanin)
        ]
    return level[0]


def synthesize_parents(
    gateway: Gateway,
    flat: PreliminaryCodebook,
    cfg: CodegenConfig,
    codebook_id: str = "cb",
    lens: Optional[str] = None,
    log: Optional[PipelineLog] = None,
) -> Codebook:
    """Group flat codes under generated parent concepts; every child is
    assigned to exactly one parent (stragglers go to 'Uncategorized')."""
    if not flat.codes:
        raise ValidationError("flat codebook must be nonempty")
    log = log if log is not None else PipelineLog()
    lens_block = (
        f"Organizing instruction (steer parent themes toward this): {cfg.parent_lens}"
        if cfg.parent_lens
        else ""
    )
    listing = "\n".join(f"- {c.name}: {c.definition}" for c in flat.codes)
    prompt = prompt_catalog.render(
        "parent_synthesis", lens=lens_block, codes=listing
    )
    data = _chat_json(gateway, cfg.parent_model, prompt, log, "parents")

    by_name = {c.name: c for c in flat.codes}
    assigned: set[str] = set()
    counter = 0

    def next_id() -> str:
        nonlocal counter
        counter += 1
        return f"{codebook_id}-c{counter}"

    codes: list[Code] = []
    for parent in data.get("parents", []):
        pname = str(parent.get("name", "")).strip()
        if not pname:
            continue
        children = []
        for cname in parent.get("children", []):
            child = by_name.get(str(cname))
            if child is None:
                log.events.append(f"parents: unknown child {cname!r} ignored")
                continue
            if child.name in assigned:
                log.events.append(f"parents: child {cname!r} already assigned; skipped")
                continue
            assigned.add(child.name)
            children.append(child)
        if not children:
            log.events.append(f"parents: empty parent {pname!r} dropped")
            continue
        pid = next_id()
        codes.append(
            Code(
                id=pid,
                name=pname,
                definition=str(parent.get("definition", "")),
                supporting_quotes=[(q, None) for c in children for q in c.quotes],
            )
        )
        for child in children:
            codes.append(
                Code(
                    id=next_id(),
                    name=child.name,
                    definition=child.definition,
                    parent_id=pid,
                    supporting_quotes=[(q, None) for q in child.quotes],
                )
            )

    orphans = [c for c in flat.codes if c.name not in assigned]
    if orphans:
        log.events.append(f"parents: {len(orphans)} codes reassigned to catch-all")
        pid = next_id()
        codes.append(
            Code(
                id=pid,
                name="Uncategorized",
                definition="Codes not yet assigned to a parent concept.",
                supporting_quotes=[(q, None) for c in orphans for q in c.quotes],
            )
        )
        for child in orphans:
            codes.append(
                Code(
                    id=next_id(),
                    name=child.name,
                    definition=child.definition,
                    parent_id=pid,
                    supporting_quotes=[(q, None) for q in child.quotes],
                )
            )
    return Codebook(id=codebook_id, codes=codes, lens=lens)


def mmr_select(
    query: np.ndarray, candidates: np.ndarray, k: int, lam: float
) -> list[int]:
    """Greedy maximal-marginal-relevance selection over unit vectors.

    score(d) = lam * cos(q, d) - (1 - lam) * max over selected d' of cos(d, d')
    """
    n = len(candidates)
    k = min(k, n)
    relevance = candidates @ query
    selected: list[int] = []
    remaining = set(range(n))
    while len(selected) < k:
        best_i, best_score = None, -np.inf
        for i in sorted(remaining):
            redundancy = 0.0
            if selected:
                redundancy = max(float(candidates[i] @ candidates[j]) for j in selected)
            score = lam * float(relevance[i]) - (1 - lam) * redundancy
            if score > best_score:
                best_i, best_score = i, score
        selected.append(best_i)
        remaining.discard(best_i)
    return selected


def validate_codes(
    gateway: Gateway,
    book: Codebook,
    excerpts: Sequence[Excerpt],
    cfg: CodegenConfig,
    log: Optional[PipelineLog] = None,
) -> Codebook:
    """Prune codes lacking empirical grounding.

    Each leaf code gets a composite embedding (mean of its definition and
    quote embeddings, renormalized); the judge sees the MMR top-k
    excerpts plus the code's own quotes. Embedding failure retains the
    code with a warning; parents emptied by pruning are removed.
    """
    log = log if log is not None else PipelineLog()
    if not excerpts:
        log.events.append("validate: no excerpts available; codebook unchanged")
        return book
    texts = [e.text for e in excerpts]
    try:
        excerpt_vecs = np.asarray(gateway.embed(texts), dtype=float)
    except Exception as exc:  # fail-open: validation is a pruning pass
        log.events.append(f"validate: excerpt embedding failed ({exc}); codebook unchanged")
        return book

    leaves = [c for c in book.codes if not book.children(c.id)]
    keep: set[str] = {c.id for c in book.codes}
    for code in leaves:
        parts = [code.definition] if code.definition else []
        parts += [q for q, _ in code.supporting_quotes]
        if not parts:
            parts = [code.name]
        try:
            part_vecs = np.asarray(gateway.embed(parts), dtype=float)
        except Exception as exc:
            log.events.append(f"validate: embedding failed for {code.name!r} ({exc}); retained")
            continue
        composite = part_vecs.mean(axis=0)
        norm = np.linalg.norm(composite)
        if norm > 0:
            composite = composite / norm
        picks = mmr_select(composite, excerpt_vecs, cfg.validation_top_k, cfg.mmr_lambda)
        prompt = prompt_catalog.render(
            "validate",
            name=code.name,
            definition=code.definition or "No definition provided.",
            quotes="\n".join(f"- \"{q}\"" for q, _ in code.supporting_quotes) or "None.",
            excerpts="\n".join(f"- \"{texts[i]}\"" for i in picks),
        )
        try:
            data = _chat_json(gateway, cfg.validate_model, prompt, log, "validate")
        except ParseError as exc:
            log.events.append(f"validate: judge failed for {code.name!r} ({exc}); retained")
            continue
        if not data.get("supported", True):
            keep.discard(code.id)
            log.events.append(f"validate: removed unsupported code {code.name!r}")

    pruned = [c for c in book.codes if c.id in keep]
    # drop parents whose children were all removed
    parent_ids = {c.parent_id for c in pruned if c.parent_id}
    final = [
        c
        for c in pruned
        if c.parent_id is not None
        or c.id in parent_ids
        or not book.children(c.id)  # leaf root survives on its own
    ]
    if not final:
        log.events.append("validate: every code rejected; returning empty codebook")
    return Codebook(id=book.id, codes=final, version=book.version + 1, lens=book.lens)


def refine_hierarchy(
    gateway: Gateway,
    book: Codebook,
    cfg: CodegenConfig,
    log: Optional[PipelineLog] = None,
) -> Codebook:
    """Per-parent merge/split pass. Merges union quotes and examples;
    splits add subcodes under the split code; depth stays capped and the
    union of supporting quotes never changes."""
    log = log if log is not None else PipelineLog()
    codes = {c.id: c for c in book.codes}
    counter = sum(1 for _ in book.codes)

    def next_id() -> str:
        nonlocal counter
        counter += 1
        return f"{book.id}-r{counter}"

    for parent in list(book.roots()):
        children = [codes[c.id] for c in book.children(parent.id) if c.id in codes]
        if not children:
            continue
        listing = "\n".join(f"- {c.name}: {c.definition}" for c in children)
        prompt = prompt_catalog.render(
            "refine",
            parent_name=parent.name,
            parent_definition=parent.definition or "No definition provided.",
            children=listing,
        )
        try:
            data = _chat_json(gateway, cfg.refine_model, prompt, log, "refine")
        except ParseError as exc:
            log.events.append(f"refine: skipped parent {parent.name!r} ({exc})")
            continue
        by_name = {c.name: c for c in children}
        for action in data.get("actions", []):
            op = action.get("op")
            if op == "merge":
                names = [n for n in action.get("codes", []) if n in by_name]
                if len(names) < 2:
                    log.events.append(f"refine: merge with unknown codes ignored: {action}")
                    continue
                kept_name = action.get("name") or names[0]
                merged = by_name[names[0]]
                quotes = list(merged.supporting_quotes)
                pos = list(merged.positive_examples)
                neg = list(merged.negative_examples)
                for n in names[1:]:
                    other = by_name[n]
                    quotes += [q for q in other.supporting_quotes if q not in quotes]
                    pos += [p for p in other.positive_examples if p not in pos]
                    neg += [p for p in other.negative_examples if p not in neg]
                    # reparent any subcodes of the absorbed code
                    for sub in book.children(other.id):
                        if sub.id in codes:
                            codes[sub.id].parent_id = merged.id
                    codes.pop(other.id, None)
                    by_name.pop(n, None)
                merged.name = kept_name
                merged.supporting_quotes = quotes
                merged.positive_examples = pos
                merged.negative_examples = neg
                by_name[kept_name] = merged
            elif op == "split":
                target = by_name.get(action.get("code"))
                if target is None:
                    log.events.append(f"refine: split of unknown code ignored: {action}")
                    continue
                if book.depth(target.id) >= 2:
                    log.events.append(
                        f"refine: split of {target.name!r} rejected (depth cap)"
                    )
                    continue
                for sub in action.get("into", []):
                    sname = str(sub.get("name", "")).strip()
                    if not sname:
                        continue
                    sid = next_id()
                    codes[sid] = Code(
                        id=sid,
                        name=sname,
                        definition=str(sub.get("definition", "")),
                        parent_id=target.id,
                        supporting_quotes=list(target.supporting_quotes),
                    )
    return Codebook(
        id=book.id, codes=list(codes.values()), version=book.version + 1, lens=book.lens
    )


def generate_codebook(
    gateway: Gateway,
    docs: Sequence[Document],
    excerpts: Sequence[Excerpt],
    cfg: CodegenConfig,
    codebook_id: Optional[str] = None,
) -> tuple[Codebook, PipelineLog]:
    """Run the full pipeline over a corpus. Failed segments are logged
    and skipped; the pipeline is deterministic given a fixed backend."""
    log = PipelineLog()
    segments = segment_corpus(docs, cfg.segment_words)
    if codebook_id is None:
        basis = json.dumps(
            {"docs": [d.id for d in docs], "cfg": cfg.to_dict()}, sort_keys=True
        )
        codebook_id = "cb-" + hashlib.sha256(basis.encode()).hexdigest()[:10]

    books: list[PreliminaryCodebook] = []
    for i, seg in enumerate(segments):
        try:
            books.append(line_code(gateway, seg, cfg, segment_id=i, log=log))
        except ParseError as exc:
            log.failed_segments.append(i)
            log.events.append(f"segment {i} failed: {exc}")
    books = [b for b in books if b.codes]
    if not books:
        raise ValidationError("line coding produced no codes on any segment")

    flat = condense(gateway, books, cfg, log=log)
    book = synthesize_parents(
        gateway, flat, cfg, codebook_id=codebook_id, lens=cfg.lens, log=log
    )
    book = validate_codes(gateway, book, excerpts, cfg, log=log)
    if book.codes:
        book = refine_hierarchy(gateway, book, cfg, log=log)
    return book, log
