"""Document ingestion from plain text, delimited tables, and JSONL records."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional

from .errors import IngestError
from .models import (
    Annotation,
    Document,
    DocumentKind,
    HUMAN_RATER,
    SpeakerRole,
    doc_scope_id,
)

PLAIN_TEXT = "plain-text"
DELIMITED_TABLE = "delimited-table"
LINE_DELIMITED = "line-delimited-records"


def ingest(
    path: str | Path,
    kind: DocumentKind | str,
    fmt: str,
    body_column: Optional[str] = None,
    label_column: Optional[str] = None,
    title_column: Optional[str] = None,
    gold_run_id: str = "gold",
) -> tuple[list[Document], list[Annotation]]:
    """Read one input file into Documents plus any gold-label Annotations.

    Delimited formats must name the body column; the optional label column
    yields one document-scoped human Annotation per (row, label).
    Multi-label cells may separate labels with ';' or '|'.
    """
    kind = DocumentKind(kind)
    path = Path(path)
    if not path.exists():
        raise IngestError(f"unreadable file: {path}")

    if fmt == PLAIN_TEXT:
        text = path.read_text(encoding="utf-8")
        if not text.strip():
            raise IngestError("empty corpus")
        doc = Document(
            id=path.stem, title=path.stem, kind=kind, body=text.strip(), source_order=0
        )
        return [doc], []

    if fmt == DELIMITED_TABLE:
        if not body_column:
            raise IngestError("delimited-table requires body_column")
        docs: list[Document] = []
        gold: list[Annotation] = []
        with path.open(encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            for i, row in enumerate(reader):
                if body_column not in row or row[body_column] is None:
                    raise IngestError(f"malformed record at row {i + 2}: no {body_column!r}")
                doc_id = f"{path.stem}-{i}"
                docs.append(
                    Document(
                        id=doc_id,
                        title=(row.get(title_column) or doc_id) if title_column else doc_id,
                        kind=kind,
                        body=row[body_column].strip(),
                        source_order=i,
                    )
                )
                if label_column and row.get(label_column):
                    for label in _split_labels(row[label_column]):
                        gold.append(
                            Annotation(
                                excerpt_id=doc_scope_id(doc_id),
                                code_id=label,
                                rater=HUMAN_RATER,
                                positive=True,
                                run_id=gold_run_id,
                                created_at="",
                            )
                        )
        if not docs:
            raise IngestError("empty corpus")
        return docs, gold

    if fmt == LINE_DELIMITED:
        docs = []
        gold = []
        with path.open(encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise IngestError(f"malformed record at row {i + 1}: {exc}") from exc
                doc_id = str(rec.get("id", f"{path.stem}-{i}"))
                turns = [
                    (SpeakerRole(r), t) for r, t in rec.get("turns", [])
                ]
                body = rec.get("body")
                if body is None and turns:
                    body = "".join(t for _, t in turns)
                if body is None:
                    raise IngestError(f"malformed record at row {i + 1}: no body")
                docs.append(
                    Document(
                        id=doc_id,
                        title=rec.get("title", doc_id),
                        kind=kind,
                        body=body,
                        source_order=len(docs),
                        turns=turns,
                    )
                )
                for label in rec.get("labels", []):
                    gold.append(
                        Annotation(
                            excerpt_id=doc_scope_id(doc_id),
                            code_id=label,
                            rater=HUMAN_RATER,
                            positive=True,
                            run_id=gold_run_id,
                            created_at="",
                        )
                    )
        if not docs:
            raise IngestError("empty corpus")
        return docs, gold

    raise IngestError(f"unknown format: {fmt}")


def _split_labels(cell: str) -> list[str]:
    for sep in (";", "|"):
        if sep in cell:
            return [p.strip() for p in cell.split(sep) if p.strip()]
    return [cell.strip()] if cell.strip() else []
