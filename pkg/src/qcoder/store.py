"""On-disk project persistence.

Layout (one directory per project):
    project.json          manifest: schema_version, name, checksums
    documents.jsonl
    excerpts.jsonl
    annotations.jsonl
    codebooks/<id>.json
    runs/<run_id>.json

Single-writer, multi-reader: a load sees a consistent snapshot; every
save rewrites record files and the manifest checksums last, so a partial
write is detected on load.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import StoreError
from .models import Annotation, Codebook, Document, Excerpt, Run

SCHEMA_VERSION = 1


@dataclass
class Project:
    name: str
    documents: list[Document] = field(default_factory=list)
    excerpts: list[Excerpt] = field(default_factory=list)
    codebooks: list[Codebook] = field(default_factory=list)
    annotations: list[Annotation] = field(default_factory=list)
    runs: list[Run] = field(default_factory=list)

    def document(self, doc_id: str) -> Document:
        for d in self.documents:
            if d.id == doc_id:
                return d
        raise KeyError(doc_id)

    def codebook(self, codebook_id: str) -> Codebook:
        for cb in self.codebooks:
            if cb.id == codebook_id:
                return cb
        raise KeyError(codebook_id)

    def run(self, run_id: str) -> Run:
        for r in self.runs:
            if r.id == run_id:
                return r
        raise KeyError(run_id)

    def run_annotations(self, run_id: str) -> list[Annotation]:
        return [a for a in self.annotations if a.run_id == run_id]

    def find_code(self, code_id: str):
        for cb in self.codebooks:
            for c in cb.codes:
                if c.id == code_id:
                    return cb, c
        raise KeyError(code_id)


def _dump_jsonl(path: Path, records: list[dict]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def _load_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with path.open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _checksum(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_project(project: Project, root: str | Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "codebooks").mkdir(exist_ok=True)
    (root / "runs").mkdir(exist_ok=True)

    _dump_jsonl(root / "documents.jsonl", [d.to_dict() for d in project.documents])
    _dump_jsonl(root / "excerpts.jsonl", [e.to_dict() for e in project.excerpts])
    _dump_jsonl(root / "annotations.jsonl", [a.to_dict() for a in project.annotations])

    kept = set()
    for cb in project.codebooks:
        p = root / "codebooks" / f"{cb.id}.json"
        p.write_text(json.dumps(cb.to_dict(), ensure_ascii=False, sort_keys=True, indent=2))
        kept.add(p.name)
    for stale in (root / "codebooks").glob("*.json"):
        if stale.name not in kept:
            stale.unlink()
    kept = set()
    for run in project.runs:
        p = root / "runs" / f"{run.id}.json"
        p.write_text(json.dumps(run.to_dict(), ensure_ascii=False, sort_keys=True, indent=2))
        kept.add(p.name)
    for stale in (root / "runs").glob("*.json"):
        if stale.name not in kept:
            stale.unlink()

    checksums = {}
    for rel in _tracked_files(root):
        checksums[rel] = _checksum(root / rel)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "name": project.name,
        "checksums": checksums,
    }
    (root / "project.json").write_text(
        json.dumps(manifest, ensure_ascii=False, sort_keys=True, indent=2)
    )
    return root


def _tracked_files(root: Path) -> list[str]:
    files = ["documents.jsonl", "excerpts.jsonl", "annotations.jsonl"]
    files += sorted(f"codebooks/{p.name}" for p in (root / "codebooks").glob("*.json"))
    files += sorted(f"runs/{p.name}" for p in (root / "runs").glob("*.json"))
    return [f for f in files if (root / f).exists()]


def load_project(root: str | Path) -> Project:
    root = Path(root)
    manifest_path = root / "project.json"
    if not manifest_path.exists():
        raise StoreError(f"not a project directory (missing manifest): {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise StoreError(
            f"schema version mismatch: file has {manifest.get('schema_version')}, "
            f"expected {SCHEMA_VERSION}"
        )
    for rel, expect in manifest.get("checksums", {}).items():
        p = root / rel
        if not p.exists() or _checksum(p) != expect:
            raise StoreError(f"partial write detected: checksum mismatch for {rel}")

    project = Project(name=manifest["name"])
    project.documents = [Document.from_dict(d) for d in _load_jsonl(root / "documents.jsonl")]
    project.excerpts = [Excerpt.from_dict(d) for d in _load_jsonl(root / "excerpts.jsonl")]
    project.annotations = [
        Annotation.from_dict(d) for d in _load_jsonl(root / "annotations.jsonl")
    ]
    for p in sorted((root / "codebooks").glob("*.json")):
        project.codebooks.append(Codebook.from_dict(json.loads(p.read_text())))
    for p in sorted((root / "runs").glob("*.json")):
        project.runs.append(Run.from_dict(json.loads(p.read_text())))
    return project
