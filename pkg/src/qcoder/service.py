"""HTTP facade over projects, runs, and the human-feedback loop.

Thin adapter: every endpoint reuses the same library functions as the
CLI, and all mutations go through the on-disk store behind a single
writer lock. Long operations run as jobs with polling and server-sent
progress events; one mutating job per lock key at a time (409 otherwise).
"""

from __future__ import annotations

import json
import math
import threading
import uuid
from dataclasses import dataclass, field, replace as d_replace
from pathlib import Path
from typing import Optional

from fastapi import Body, FastAPI, HTTPException, Query
from fastapi.responses import StreamingResponse

from . import coder, codegen, evaluate, prompt_catalog
from .errors import BackendError, IngestError, ParseError, StoreError, ValidationError
from .gateway import Gateway
from .ingest import PLAIN_TEXT, ingest as ingest_file
from .mockllm import keyword_backend
from .models import Annotation, Code, Run
from .runmeta import make_run_id, timestamp
from .segment import segment
from .store import Project, load_project, save_project

JOB_KINDS = ("gen_codebook", "apply_code", "distribute", "feedback_iteration")
TERMINAL = ("done", "failed")


@dataclass
class Job:
    id: str
    kind: str
    lock_key: str
    state: str = "queued"
    progress: tuple[int, int] = (0, 0)
    result_ref: Optional[str] = None
    error: Optional[str] = None
    events: list[dict] = field(default_factory=list)
    cond: threading.Condition = field(default_factory=threading.Condition)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "state": self.state,
            "progress": {"completed": self.progress[0], "total": self.progress[1]},
            "result_ref": self.result_ref,
            "error": self.error,
        }

    def emit(self, completed: int, total: int) -> None:
        with self.cond:
            self.progress = (max(self.progress[0], completed), total)
            self.events.append(
                {"state": self.state, "completed": self.progress[0], "total": total}
            )
            self.cond.notify_all()

    def finish(self, state: str, result_ref: Optional[str] = None,
               error: Optional[str] = None) -> None:
        with self.cond:
            self.state = state
            self.result_ref = result_ref
            self.error = error
            self.events.append(
                {"state": state, "completed": self.progress[0],
                 "total": self.progress[1], "result_ref": result_ref, "error": error}
            )
            self.cond.notify_all()


class AppState:
    def __init__(self, project_root: str | Path, gateway: Optional[Gateway] = None,
                 run_jobs_inline: bool = False):
        self.root = Path(project_root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.gateway = gateway or Gateway(backend=keyword_backend())
        self.jobs: dict[str, Job] = {}
        self.write_lock = threading.Lock()
        self.jobs_lock = threading.Lock()
        self.run_jobs_inline = run_jobs_inline

    # -- project helpers -------------------------------------------------
    def project_names(self) -> list[str]:
        return sorted(
            p.parent.name for p in self.root.glob("*/project.json")
        )

    def load(self, name: str) -> Project:
        path = self.root / name
        if not (path / "project.json").exists():
            raise HTTPException(404, f"unknown project: {name}")
        return load_project(path)

    def save(self, project: Project, name: str) -> None:
        save_project(project, self.root / name)

    def find_run(self, run_id: str) -> tuple[str, Project, Run]:
        for name in self.project_names():
            project = self.load(name)
            for r in project.runs:
                if r.id == run_id:
                    return name, project, r
        raise HTTPException(404, f"unknown run: {run_id}")

    # -- jobs ------------------------------------------------------------
    def submit(self, kind: str, lock_key: str, work) -> Job:
        with self.jobs_lock:
            for other in self.jobs.values():
                if other.lock_key == lock_key and other.state not in TERMINAL:
                    raise HTTPException(
                        409, f"job {other.id} already active for {lock_key}"
                    )
            job = Job(id=f"job-{uuid.uuid4().hex[:10]}", kind=kind, lock_key=lock_key)
            self.jobs[job.id] = job

        def runner():
            job.state = "running"
            job.emit(0, job.progress[1])
            try:
                result_ref = work(job)
            except (ValidationError, ParseError, IngestError, StoreError,
                    BackendError, HTTPException, ValueError, KeyError) as exc:
                detail = getattr(exc, "detail", None) or str(exc)
                job.finish("failed", error=str(detail))
                return
            job.finish("done", result_ref=result_ref)

        if self.run_jobs_inline:
            runner()
        else:
            threading.Thread(target=runner, daemon=True).start()
        return job


def _http_error(exc: Exception) -> HTTPException:
    if isinstance(exc, BackendError):
        return HTTPException(502, str(exc))
    if isinstance(exc, (ValidationError, ParseError, IngestError, ValueError)):
        return HTTPException(400, str(exc))
    if isinstance(exc, KeyError):
        return HTTPException(404, f"not found: {exc.args[0] if exc.args else exc}")
    return HTTPException(500, str(exc))


def annotation_row_id(a: Annotation) -> str:
    return f"{a.excerpt_id}|{a.code_id}|{a.rater}"


def create_app(project_root: str | Path, gateway: Optional[Gateway] = None,
               run_jobs_inline: bool = False) -> FastAPI:
    state = AppState(project_root, gateway=gateway, run_jobs_inline=run_jobs_inline)
    app = FastAPI(title="qcoder", version="1")
    app.state.qc = state

    # ---- projects ------------------------------------------------------
    @app.get("/projects")
    def list_projects():
        out = []
        for name in state.project_names():
            p = state.load(name)
            out.append(
                {
                    "name": name,
                    "documents": len(p.documents),
                    "excerpts": len(p.excerpts),
                    "codebooks": [cb.id for cb in p.codebooks],
                    "runs": [r.id for r in p.runs],
                }
            )
        return out

    @app.post("/projects", status_code=201)
    def create_project(body: dict = Body(...)):
        name = body.get("name", "").strip()
        if not name or "/" in name:
            raise HTTPException(400, "invalid project name")
        if name in state.project_names():
            raise HTTPException(400, f"project exists: {name}")
        with state.write_lock:
            state.save(Project(name=name), name)
        return {"name": name}

    @app.post("/projects/{p}/documents", status_code=201)
    def upload_documents(p: str, body: dict = Body(...)):
        project = state.load(p)
        content = body.get("content")
        if not content:
            raise HTTPException(400, "content is required")
        fmt = body.get("format", PLAIN_TEXT)
        kind = body.get("kind", "freeform")
        filename = body.get("filename", f"upload-{len(project.documents)}")
        target_words = int(body.get("target_words", 80))
        tmp = state.root / p / "_uploads" / filename
        tmp.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_text(content, encoding="utf-8")
        try:
            docs, gold = ingest_file(
                tmp, kind, fmt,
                body_column=body.get("body_column"),
                label_column=body.get("label_column"),
                title_column=body.get("title_column"),
            )
            existing = {d.id for d in project.documents}
            offset = len(project.documents)
            n_excerpts = 0
            for doc in docs:
                if doc.id in existing:
                    raise ValidationError(f"document id already in project: {doc.id}")
                doc.source_order += offset
                project.documents.append(doc)
                exs = segment(doc, target_words=target_words)
                project.excerpts.extend(exs)
                n_excerpts += len(exs)
            project.annotations.extend(gold)
            with state.write_lock:
                state.save(project, p)
        except (IngestError, ValidationError, ValueError) as exc:
            raise _http_error(exc)
        return {"documents": len(docs), "excerpts": n_excerpts, "gold_labels": len(gold)}

    # ---- codebooks -----------------------------------------------------
    @app.get("/projects/{p}/codebooks")
    def list_codebooks(p: str):
        return [cb.to_dict() for cb in state.load(p).codebooks]

    @app.get("/projects/{p}/codebooks/{c}")
    def get_codebook(p: str, c: str):
        project = state.load(p)
        try:
            return project.codebook(c).to_dict()
        except KeyError as exc:
            raise _http_error(exc)

    @app.put("/projects/{p}/codebooks/{c}")
    def put_codebook(p: str, c: str, body: dict = Body(...)):
        project = state.load(p)
        try:
            cb = project.codebook(c)
        except KeyError as exc:
            raise _http_error(exc)
        editable = ("name", "definition", "inclusion_criteria", "exclusion_criteria",
                    "positive_examples", "negative_examples")
        try:
            by_id = {code.id: code for code in cb.codes}
            for patch in body.get("codes", []):
                code = by_id.get(patch.get("id"))
                if code is None:
                    raise ValidationError(f"unknown code: {patch.get('id')}")
                for field_name in editable:
                    if field_name in patch:
                        setattr(code, field_name, patch[field_name])
                Code.__post_init__(code)  # re-validate edited fields
            cb.bump()
            with state.write_lock:
                state.save(project, p)
        except (ValidationError, ValueError) as exc:
            raise _http_error(exc)
        return cb.to_dict()

    # ---- jobs ----------------------------------------------------------
    @app.post("/projects/{p}/jobs", status_code=202)
    def create_job(p: str, body: dict = Body(...)):
        kind = body.get("kind")
        params = body.get("params", {})
        if kind not in JOB_KINDS:
            raise HTTPException(400, f"unknown job kind: {kind}")
        state.load(p)  # 404 early on unknown project

        if kind == "gen_codebook":
            work, lock_key = _gen_codebook_work(state, p, params)
        elif kind == "apply_code":
            work, lock_key = _apply_code_work(state, p, params)
        elif kind == "distribute":
            work, lock_key = _distribute_work(state, p, params)
        else:
            work, lock_key = _feedback_work(state, p, params)
        return state.submit(kind, lock_key, work).to_dict()

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        job = state.jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job: {job_id}")
        return job.to_dict()

    @app.get("/jobs/{job_id}/events")
    def job_events(job_id: str):
        job = state.jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job: {job_id}")

        def stream():
            seen = 0
            while True:
                with job.cond:
                    while len(job.events) <= seen and job.state not in TERMINAL:
                        job.cond.wait(timeout=0.25)
                    chunk = job.events[seen:]
                    seen += len(chunk)
                    terminal = job.state in TERMINAL and seen >= len(job.events)
                for ev in chunk:
                    yield f"data: {json.dumps(ev)}\n\n"
                if terminal:
                    return

        return StreamingResponse(stream(), media_type="text/event-stream")

    # ---- runs ----------------------------------------------------------
    @app.get("/runs/{r}/annotations")
    def run_annotations(r: str, code: Optional[str] = None,
                        min_score: Optional[int] = None,
                        page: int = Query(1, ge=1), page_size: int = Query(50, ge=1)):
        _, project, _run = state.find_run(r)
        rows = project.run_annotations(r)
        if code:
            rows = [a for a in rows if a.code_id == code]
        if min_score is not None:
            rows = [a for a in rows if a.score is not None and a.score >= min_score]
        rows.sort(key=lambda a: (-(a.score or 0), a.excerpt_id, a.code_id))
        total = len(rows)
        start = (page - 1) * page_size
        excerpt_text = {e.id: e.text for e in project.excerpts}
        items = [
            {**a.to_dict(), "id": annotation_row_id(a),
             "excerpt_text": excerpt_text.get(a.excerpt_id, "")}
            for a in rows[start : start + page_size]
        ]
        return {
            "total": total,
            "page": page,
            "pages": max(1, math.ceil(total / page_size)),
            "positive": sum(1 for a in rows if a.positive),
            "items": items,
        }

    @app.post("/runs/{r}/threshold")
    def run_threshold(r: str, body: dict = Body(...)):
        code_id = body.get("code_id")
        threshold = body.get("threshold")
        if code_id is None or threshold is None:
            raise HTTPException(400, "code_id and threshold are required")
        name, project, run = state.find_run(r)
        try:
            targeted = [a for a in project.run_annotations(r) if a.code_id == code_id]
            if not targeted:
                raise HTTPException(404, f"no annotations for code {code_id} in run {r}")
            updated, warnings = coder.rethreshold(targeted, int(threshold))
            by_key = {a.key: a for a in updated}
            project.annotations = [by_key.get(a.key, a) for a in project.annotations]
            run.config.setdefault("thresholds", {})[code_id] = int(threshold)
            with state.write_lock:
                state.save(project, name)
        except (ValidationError, ValueError) as exc:
            raise _http_error(exc)
        positives = sum(1 for a in updated if a.positive)
        result = {
            "code_id": code_id,
            "threshold": int(threshold),
            "positive": positives,
            "negative": len(updated) - positives,
            "warnings": warnings,
        }
        gold_run = body.get("gold")
        if gold_run:
            kappa = _live_kappa(project, r, gold_run, code_id)
            if kappa is not None:
                result["kappa"] = kappa
        return result

    @app.post("/runs/{r}/feedback", status_code=201)
    def run_feedback(r: str, body: dict = Body(...)):
        verdict = body.get("verdict")
        if verdict not in ("false_positive", "false_negative"):
            raise HTTPException(400, "verdict must be false_positive or false_negative")
        annotation_id = body.get("annotation_id", "")
        parts = annotation_id.split("|")
        if len(parts) != 3:
            raise HTTPException(400, "annotation_id must be excerpt|code|rater")
        excerpt_id, code_id, _rater = parts
        name, project, run = state.find_run(r)
        excerpt = next((e for e in project.excerpts if e.id == excerpt_id), None)
        if excerpt is None:
            raise HTTPException(404, f"unknown excerpt: {excerpt_id}")
        try:
            cb, code = project.find_code(code_id)
        except KeyError as exc:
            raise _http_error(exc)
        text = excerpt.text
        if verdict == "false_positive":
            if text not in code.negative_examples:
                code.negative_examples.append(text)
        else:
            if text not in code.positive_examples:
                code.positive_examples.append(text)
        record = {
            "annotation_id": annotation_id,
            "excerpt_id": excerpt_id,
            "code_id": code_id,
            "verdict": verdict,
            "error_category": body.get("error_category"),
            "created_at": timestamp(state.gateway.deterministic),
        }
        run.extra.setdefault("verdicts", []).append(record)
        cb.bump()
        with state.write_lock:
            state.save(project, name)
        return {
            "stored": record,
            "example_pools": {
                "positive": len(code.positive_examples),
                "negative": len(code.negative_examples),
            },
        }

    @app.post("/runs/{r}/rerun", status_code=202)
    def run_rerun(r: str):
        name, project, run = state.find_run(r)
        if run.code_id is None:
            raise HTTPException(400, f"run {r} has no associated code")
        verdicts = run.extra.get("verdicts", [])
        work = _rerun_work(state, name, run, len(verdicts))
        return state.submit("feedback_iteration", r, work).to_dict()

    @app.get("/runs/{r}/eval")
    def run_eval(r: str, gold: str = "gold", mode: str = "untuned",
                 threshold: Optional[int] = None, bootstrap: int = 200, seed: int = 0):
        if mode not in ("untuned", "code_tuned"):
            raise HTTPException(400, f"unknown mode: {mode}")
        _, project, _run = state.find_run(r)
        machine = project.run_annotations(r)
        gold_rows = [a for a in project.annotations if a.run_id == gold]
        if not gold_rows:
            raise HTTPException(404, f"no gold labels under run {gold!r}")
        excerpt_doc = {e.id: e.doc_id for e in project.excerpts}
        doc_order = [
            d.id for d in sorted(project.documents, key=lambda d: d.source_order)
        ]
        try:
            rep = evaluate.build_report(
                machine, gold_rows, excerpt_doc, doc_order, mode=mode,
                threshold=threshold, bootstrap_B=bootstrap, seed=seed,
            )
        except ValueError as exc:
            raise _http_error(exc)
        return rep.to_dict()

    @app.get("/runs/{r}/drift")
    def run_drift(r: str, gold: str = "gold", window: Optional[int] = None):
        _, project, _run = state.find_run(r)
        machine = project.run_annotations(r)
        gold_rows = [a for a in project.annotations if a.run_id == gold]
        if not gold_rows:
            raise HTTPException(404, f"no gold labels under run {gold!r}")
        excerpt_doc = {e.id: e.doc_id for e in project.excerpts}
        doc_order = [
            d.id for d in sorted(project.documents, key=lambda d: d.source_order)
        ]
        rater = sorted({a.rater for a in machine})[0] if machine else "machine"
        m_sets = evaluate.aggregate_to_document(machine, excerpt_doc).get(rater, {})
        g_sets = evaluate.aggregate_to_document(gold_rows, excerpt_doc).get("human", {})
        code_ids = sorted({a.code_id for a in machine})
        fps, fns = evaluate.drift_indicators(m_sets, g_sets, doc_order, code_ids)
        w = window if window is not None else evaluate.default_drift_window(len(doc_order))
        if w < 1:
            raise HTTPException(400, "window must be >= 1")
        curve = evaluate.drift_audit(fps, fns, w)
        return {
            "window": w,
            "points": [{"doc_index": i, "fp_rate": fp, "fn_rate": fn}
                       for i, fp, fn in curve],
        }

    _mount_ui(app)
    return app


def _live_kappa(project: Project, run_id: str, gold_run: str, code_id: str):
    gold_rows = [a for a in project.annotations if a.run_id == gold_run]
    if not gold_rows:
        return None
    excerpt_doc = {e.id: e.doc_id for e in project.excerpts}
    doc_order = [d.id for d in sorted(project.documents, key=lambda d: d.source_order)]
    rep = evaluate.build_report(
        project.run_annotations(run_id), gold_rows, excerpt_doc, doc_order,
        code_ids=[code_id], mode="untuned", threshold=None, bootstrap_B=0,
    )
    return rep.per_code[0].kappa if rep.per_code else None


def _respondent_excerpts(project: Project):
    return [e for e in project.excerpts if e.is_respondent_turn]


def _gen_codebook_work(state: AppState, p: str, params: dict):
    try:
        cfg = codegen.CodegenConfig(
            segment_words=int(params.get("segment_words", 60_000)),
            themes_min=int(params.get("min", params.get("themes_min", 3))),
            themes_max=int(params.get("max", params.get("themes_max", 10))),
            lens=params.get("lens"),
            parent_lens=params.get("parent_lens"),
            condense_fanin=int(params.get("fanin", 5)),
            seed=int(params.get("seed", 0)),
        )
    except (ValidationError, ValueError) as exc:
        raise _http_error(exc)

    def work(job: Job):
        project = state.load(p)
        job.emit(0, 4)
        book, log = codegen.generate_codebook(
            state.gateway, project.documents, project.excerpts, cfg,
            codebook_id=params.get("codebook_id"),
        )
        job.emit(3, 4)
        project.codebooks = [cb for cb in project.codebooks if cb.id != book.id]
        project.codebooks.append(book)
        run_id = make_run_id("codegen", {"codebook": book.id, "cfg": cfg.to_dict()})
        project.runs = [r for r in project.runs if r.id != run_id]
        project.runs.append(
            Run(
                id=run_id, kind="codegen", code_id=None,
                created_at=timestamp(state.gateway.deterministic),
                config=cfg.to_dict(),
                prompt_catalog_version=prompt_catalog.catalog_version(),
                request_hashes=log.request_hashes,
                extra={"events": log.events, "llm_calls": log.llm_calls},
            )
        )
        with state.write_lock:
            state.save(project, p)
        job.emit(4, 4)
        return book.id

    return work, f"{p}:gen_codebook"


def _coding_config(params: dict) -> coder.CodingConfig:
    return coder.CodingConfig(
        models=params.get("models", [params.get("model", "default")]),
        batch_size=int(params.get("batch", params.get("batch_size", 4))),
        scoring=params.get("scoring", coder.DISCRETIZED),
        cot=bool(params.get("cot", True)),
        threshold=int(params.get("threshold", 8)),
        seed=int(params.get("seed", 0)),
        project_context=params.get("project_context", ""),
    )


def _apply_code_work(state: AppState, p: str, params: dict):
    code_id = params.get("code")
    if not code_id:
        raise HTTPException(400, "params.code is required")
    try:
        cfg = _coding_config(params)
    except (ValidationError, ValueError) as exc:
        raise _http_error(exc)

    def work(job: Job):
        project = state.load(p)
        codebook, code = project.find_code(code_id)
        excerpts = _respondent_excerpts(project)
        if not excerpts:
            raise ValidationError("project has no codable excerpts")
        run_id = make_run_id(
            "apply",
            {"code": code_id, "cfg": cfg.to_dict(),
             "excerpts": [e.id for e in excerpts]},
        )
        created = timestamp(state.gateway.deterministic)
        chunks = [excerpts[i : i + cfg.batch_size]
                  for i in range(0, len(excerpts), cfg.batch_size)]
        job.emit(0, len(chunks))
        annotations: list[Annotation] = []
        hashes: list[str] = []
        failures: list[dict] = []
        for i, chunk in enumerate(chunks, start=1):
            res = coder.apply_code(
                state.gateway, code, chunk, cfg, run_id=run_id,
                created_at=created, codebook=codebook,
            )
            annotations.extend(res.annotations)
            hashes.extend(res.request_hashes)
            failures.extend(res.failures)
            job.emit(i, len(chunks))
        # stage-then-commit: nothing visible until the whole run succeeded
        project.annotations = [a for a in project.annotations if a.run_id != run_id]
        project.annotations.extend(annotations)
        project.runs = [r for r in project.runs if r.id != run_id]
        project.runs.append(
            Run(
                id=run_id, kind="apply", code_id=code_id, created_at=created,
                config=cfg.to_dict(),
                prompt_catalog_version=prompt_catalog.catalog_version(),
                request_hashes=hashes, failures=failures,
            )
        )
        with state.write_lock:
            state.save(project, p)
        return run_id

    return work, f"{p}:apply:{code_id}"


def _distribute_work(state: AppState, p: str, params: dict):
    parent_id = params.get("parent")
    if not parent_id:
        raise HTTPException(400, "params.parent is required")
    try:
        base = _coding_config(params)
        cfg = coder.DistributeConfig(
            **{**vars(base)},
            allow_multi_code=bool(params.get("allow_multi", True)),
            force_assign=bool(params.get("force_assign", False)),
        )
    except (ValidationError, ValueError) as exc:
        raise _http_error(exc)

    def work(job: Job):
        project = state.load(p)
        codebook, parent = project.find_code(parent_id)
        siblings = codebook.children(parent_id)
        excerpts = _respondent_excerpts(project)
        if not excerpts:
            raise ValidationError("project has no codable excerpts")
        run_id = make_run_id(
            "distribute",
            {"parent": parent_id, "cfg": cfg.to_dict(),
             "excerpts": [e.id for e in excerpts]},
        )
        created = timestamp(state.gateway.deterministic)
        job.emit(0, 1)
        res = coder.distribute_code(
            state.gateway, parent, siblings, excerpts, cfg,
            run_id=run_id, created_at=created,
        )
        project.annotations = [a for a in project.annotations if a.run_id != run_id]
        project.annotations.extend(res.annotations)
        project.runs = [r for r in project.runs if r.id != run_id]
        project.runs.append(
            Run(
                id=run_id, kind="distribute", code_id=parent_id, created_at=created,
                config=cfg.to_dict(),
                prompt_catalog_version=prompt_catalog.catalog_version(),
                request_hashes=res.request_hashes, failures=res.failures,
            )
        )
        with state.write_lock:
            state.save(project, p)
        job.emit(1, 1)
        return run_id

    return work, f"{p}:distribute:{parent_id}"


def _feedback_work(state: AppState, p: str, params: dict):
    code_id = params.get("code")
    if not code_id:
        raise HTTPException(400, "params.code is required")
    try:
        cfg = _coding_config(params)
    except (ValidationError, ValueError) as exc:
        raise _http_error(exc)
    gold_run = params.get("gold", "gold")
    iterations = int(params.get("iterations", 6))

    def work(job: Job):
        project = state.load(p)
        codebook, code = project.find_code(code_id)
        excerpts = _respondent_excerpts(project)
        gold_sets = evaluate.aggregate_to_document(
            [a for a in project.annotations if a.run_id == gold_run],
            {e.id: e.doc_id for e in project.excerpts},
        ).get("human", {})
        if not gold_sets:
            raise ValidationError(f"no gold labels under run {gold_run!r}")
        gold = {e.id: code_id in gold_sets.get(e.doc_id, set()) for e in excerpts}
        run_id = make_run_id("feedback", {"code": code_id, "cfg": cfg.to_dict()})
        created = timestamp(state.gateway.deterministic)
        job.emit(0, iterations + 1)
        history, enriched = coder.feedback_iterate(
            state.gateway, code, excerpts, gold, cfg, iterations=iterations,
            run_id=run_id, created_at=created, codebook=codebook,
        )
        job.emit(len(history), iterations + 1)
        for i, c in enumerate(codebook.codes):
            if c.id == code_id:
                enriched.id = code_id
                codebook.codes[i] = enriched
        codebook.bump()
        project.runs = [r for r in project.runs if r.id != run_id]
        project.runs.append(
            Run(
                id=run_id, kind="feedback", code_id=code_id, created_at=created,
                config=cfg.to_dict(),
                prompt_catalog_version=prompt_catalog.catalog_version(),
                extra={"history": [h.to_dict() for h in history]},
            )
        )
        with state.write_lock:
            state.save(project, p)
        job.emit(iterations + 1, iterations + 1)
        return run_id

    return work, f"{p}:feedback:{code_id}"


def _rerun_work(state: AppState, name: str, source: Run, n_verdicts: int):
    def work(job: Job):
        project = state.load(name)
        codebook, code = project.find_code(source.code_id)
        excerpts = _respondent_excerpts(project)
        if not excerpts:
            raise ValidationError("project has no codable excerpts")
        try:
            cfg = _coding_config(source.config)
        except (ValidationError, ValueError):
            cfg = coder.CodingConfig()
        run_id = make_run_id(
            "apply",
            {"code": source.code_id, "cfg": cfg.to_dict(),
             "excerpts": [e.id for e in excerpts],
             "examples": [code.positive_examples, code.negative_examples]},
        )
        created = timestamp(state.gateway.deterministic)
        job.emit(0, 1)
        res = coder.apply_code(
            state.gateway, code, excerpts, cfg, run_id=run_id, created_at=created,
            codebook=codebook, use_all_examples=True,
        )
        project.annotations = [a for a in project.annotations if a.run_id != run_id]
        project.annotations.extend(res.annotations)
        project.runs = [r for r in project.runs if r.id != run_id]
        project.runs.append(
            Run(
                id=run_id, kind="feedback_rerun", code_id=source.code_id,
                created_at=created, config=cfg.to_dict(),
                prompt_catalog_version=prompt_catalog.catalog_version(),
                request_hashes=res.request_hashes, failures=res.failures,
                extra={
                    "source_run": source.id,
                    "verdicts_used": n_verdicts,
                    "example_pools": {
                        "positive": len(code.positive_examples),
                        "negative": len(code.negative_examples),
                    },
                },
            )
        )
        with state.write_lock:
            state.save(project, name)
        job.emit(1, 1)
        return run_id

    return work


def _mount_ui(app: FastAPI) -> None:
    """Serve the built web UI bundle when present."""
    from fastapi.staticfiles import StaticFiles

    here = Path(__file__).resolve()
    for candidate in (
        here.parent / "webui",
        here.parents[2] / "frontend" / "dist",
    ):
        if (candidate / "index.html").exists():
            app.mount("/", StaticFiles(directory=candidate, html=True), name="ui")
            return
