from __future__ import annotations

import csv
import random

import pytest

from qcoder.gateway import Gateway
from qcoder.mockllm import keyword_backend
from qcoder.models import Annotation, Code, Codebook, Document, Excerpt, doc_scope_id
from qcoder.segment import segment
from qcoder.store import Project

POSITIVE_SENTENCES = [
    "We rely on solar panels to cut our energy bills.",
    "Installing solar panels changed how the family thinks about power.",
    "The cooperative financed solar panels for every rooftop in the block.",
    "Cheap solar panels made the community microgrid viable at last.",
]

NEGATIVE_SENTENCES = [
    "The committee debated the new parking rules for an hour.",
    "Grocery prices kept climbing all through the spring.",
    "Our neighborhood book club met at the library on Tuesday.",
    "The bridge repair closed two lanes for most of the month.",
]


def make_corpus_project(n_docs: int = 20, seed: int = 1, code_id: str = "c-solar") -> Project:
    """Synthetic project: every even document mentions solar panels and
    carries the matching document-scoped gold label."""
    rng = random.Random(seed)
    project = Project(name="fixture")
    for i in range(n_docs):
        positive = i % 2 == 0
        body = rng.choice(POSITIVE_SENTENCES if positive else NEGATIVE_SENTENCES)
        doc = Document(id=f"d{i}", title=f"d{i}", kind="post", body=body, source_order=i)
        project.documents.append(doc)
        project.excerpts.extend(segment(doc, target_words=80))
        if positive:
            project.annotations.append(
                Annotation(
                    excerpt_id=doc_scope_id(doc.id), code_id=code_id, rater="human",
                    positive=True, run_id="gold", created_at="",
                )
            )
    project.codebooks.append(
        Codebook(
            id="manual",
            codes=[
                Code(id="c-root", name="Energy transitions"),
                Code(id="c-solar", name="solar panels",
                     definition="Mentions of rooftop or community solar panels.",
                     parent_id="c-root"),
                Code(id="c-parking", name="parking rules",
                     definition="Municipal parking policy talk.", parent_id="c-root"),
            ],
        )
    )
    return project


@pytest.fixture
def corpus_project() -> Project:
    return make_corpus_project()


@pytest.fixture
def keyword_gateway() -> Gateway:
    return Gateway(backend=keyword_backend())


def make_excerpts(texts, doc_id: str = "d0") -> list[Excerpt]:
    return [
        Excerpt(id=f"{doc_id}:{i}", doc_id=doc_id, index=i, text=t,
                word_count=len(t.split()))
        for i, t in enumerate(texts)
    ]


def write_corpus_csv(path, n_docs: int = 20, seed: int = 1) -> None:
    rng = random.Random(seed)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["text", "labels", "title"])
        for i in range(n_docs):
            if i % 2 == 0:
                w.writerow([rng.choice(POSITIVE_SENTENCES), "c-solar", f"doc{i}"])
            else:
                w.writerow([rng.choice(NEGATIVE_SENTENCES), "", f"doc{i}"])
