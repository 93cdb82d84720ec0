"""Command-line interface.

Exit codes: 0 success, 2 usage error, 3 missing resource, 4 backend
failure, 5 parse/validation error.
"""

from __future__ import annotations

import functools
import os
import sys
from dataclasses import replace as d_replace
from pathlib import Path

import click

from . import __version__, codegen, coder, evaluate, mockllm, prompt_catalog, report
from .errors import (
    BackendError,
    IngestError,
    MissingResourceError,
    ParseError,
    StoreError,
    ValidationError,
)
from .gateway import Gateway, OpenAIBackend, RecordingBackend, ReplayBackend
from .ingest import DELIMITED_TABLE, LINE_DELIMITED, PLAIN_TEXT, ingest as ingest_file
from .models import Run
from .runmeta import make_run_id, timestamp
from .segment import segment
from .store import Project, load_project, save_project

EXIT_MISSING = 3
EXIT_BACKEND = 4
EXIT_PARSE = 5

_SCORING_FLAGS = {
    "binary": coder.BINARY,
    "discretized": coder.DISCRETIZED,
    "logprob": coder.BINARY_LOGPROB,
}


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (MissingResourceError, StoreError, FileNotFoundError) as exc:
            _fail(EXIT_MISSING, str(exc))
        except KeyError as exc:
            _fail(EXIT_MISSING, f"not found: {exc.args[0] if exc.args else exc}")
        except BackendError as exc:
            _fail(EXIT_BACKEND, str(exc))
        except (ParseError, ValidationError, IngestError, ValueError) as exc:
            _fail(EXIT_PARSE, str(exc))

    return wrapper


def backend_options(fn):
    fn = click.option(
        "--backend",
        type=click.Choice(["api", "keyword"]),
        default=None,
        help="api: OpenAI-compatible endpoint (QC_API_BASE); keyword: "
        "deterministic offline matcher. Default: api when QC_API_BASE is "
        "set, keyword otherwise.",
    )(fn)
    fn = click.option("--cassette", type=click.Path(), default=None,
                      help="Replay recorded responses from this file.")(fn)
    fn = click.option("--record", is_flag=True,
                      help="Record backend traffic into --cassette instead of replaying.")(fn)
    fn = click.option("--model", "model", default="default", show_default=True,
                      help="Model name; comma-separate for an ensemble (M,M2,M3).")(fn)
    return fn


def make_gateway(backend: str | None, cassette: str | None, record: bool) -> Gateway:
    if cassette and not record:
        return Gateway(backend=ReplayBackend(cassette))
    if backend is None:
        backend = "api" if os.environ.get("QC_API_BASE") else "keyword"
    inner = OpenAIBackend() if backend == "api" else mockllm.keyword_backend()
    if cassette and record:
        inner = RecordingBackend(inner, cassette)
    return Gateway(backend=inner)


def _models(model: str) -> list[str]:
    names = [m.strip() for m in model.split(",") if m.strip()]
    return names or ["default"]


def _project_dir_option(fn):
    return click.option(
        "--project", "project_dir",
        default=lambda: os.environ.get("QC_PROJECT", "."),
        show_default="$QC_PROJECT or .",
        type=click.Path(),
    )(fn)


def _store_run(project: Project, run: Run, annotations) -> None:
    """Stage-then-commit: replace any previous state for this run id."""
    project.annotations = [a for a in project.annotations if a.run_id != run.id]
    project.annotations.extend(annotations)
    project.runs = [r for r in project.runs if r.id != run.id]
    project.runs.append(run)


@click.group()
@click.version_option(version=__version__)
def main():
    """Qualitative coding with LLM assistance."""


@main.command("ingest")
@click.argument("src", type=click.Path(exists=True))
@_project_dir_option
@click.option("--kind", default="freeform", show_default=True,
              type=click.Choice(["interview", "post", "abstract", "news", "freeform"]))
@click.option("--format", "fmt", default=PLAIN_TEXT, show_default=True,
              type=click.Choice([PLAIN_TEXT, DELIMITED_TABLE, LINE_DELIMITED]))
@click.option("--body-column", default=None)
@click.option("--label-column", default=None)
@click.option("--title-column", default=None)
@click.option("--target-words", default=80, show_default=True)
@click.option("--gold-run", default="gold", show_default=True)
@handle_errors
def cmd_ingest(src, project_dir, kind, fmt, body_column, label_column, title_column,
               target_words, gold_run):
    """Add documents from SRC to a project, segmenting into excerpts."""
    root = Path(project_dir)
    project = (
        load_project(root) if (root / "project.json").exists() else Project(name=root.name)
    )
    docs, gold = ingest_file(
        src, kind, fmt, body_column=body_column, label_column=label_column,
        title_column=title_column, gold_run_id=gold_run,
    )
    offset = len(project.documents)
    existing = {d.id for d in project.documents}
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
    save_project(project, root)
    click.echo(
        f"ingested {len(docs)} documents, {n_excerpts} excerpts, "
        f"{len(gold)} gold labels into {root}"
    )


@main.command("gen-codebook")
@_project_dir_option
@click.option("--lens", default=None, help="Natural-language steering instruction.")
@click.option("--parent-lens", default=None)
@click.option("--min", "themes_min", default=3, show_default=True,
              help="Minimum emergent themes per segment.")
@click.option("--max", "themes_max", default=10, show_default=True,
              help="Maximum emergent themes per segment.")
@click.option("--segment-words", default=60_000, show_default=True)
@click.option("--fanin", default=5, show_default=True)
@click.option("--codebook-id", default=None)
@click.option("--seed", default=0, show_default=True)
@backend_options
@handle_errors
def cmd_gen_codebook(project_dir, lens, parent_lens, themes_min, themes_max,
                     segment_words, fanin, codebook_id, seed, backend, cassette,
                     record, model):
    """Generate a hierarchical codebook from the project corpus."""
    gateway = make_gateway(backend, cassette, record)
    project = load_project(project_dir)
    m = _models(model)[0]
    cfg = codegen.CodegenConfig(
        segment_words=segment_words, themes_min=themes_min, themes_max=themes_max,
        lens=lens, parent_lens=parent_lens, condense_fanin=fanin, seed=seed,
        line_model=m, condense_model=m, parent_model=m, validate_model=m,
        refine_model=m,
    )
    click.echo(f"seed: {seed}", err=True)
    book, log = codegen.generate_codebook(
        gateway, project.documents, project.excerpts, cfg, codebook_id=codebook_id
    )
    project.codebooks = [cb for cb in project.codebooks if cb.id != book.id]
    project.codebooks.append(book)
    run_id = make_run_id("codegen", {"codebook": book.id, "cfg": cfg.to_dict()})
    project.runs = [r for r in project.runs if r.id != run_id]
    project.runs.append(
        Run(
            id=run_id, kind="codegen", code_id=None,
            created_at=timestamp(gateway.deterministic), config=cfg.to_dict(),
            prompt_catalog_version=prompt_catalog.catalog_version(),
            request_hashes=log.request_hashes,
            failures=[{"segment": i} for i in log.failed_segments],
            extra={"events": log.events, "llm_calls": log.llm_calls},
        )
    )
    save_project(project, project_dir)
    click.echo(f"codebook {book.id}: {len(book.codes)} codes ({len(book.roots())} parents)")
    for e in log.events:
        click.echo(f"note: {e}", err=True)


@main.command("apply-code")
@_project_dir_option
@click.option("--code", "code_id", required=True)
@click.option("--scoring", default="discretized", show_default=True,
              type=click.Choice(sorted(_SCORING_FLAGS)))
@click.option("--batch", "batch_size", default=4, show_default=True)
@click.option("--threshold", default=8, show_default=True)
@click.option("--cot/--no-cot", default=True, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--project-context", default="")
@click.option("--out", type=click.Path(), default=None,
              help="Also export the annotations as CSV.")
@backend_options
@handle_errors
def cmd_apply_code(project_dir, code_id, scoring, batch_size, threshold, cot, seed,
                   project_context, out, backend, cassette, record, model):
    """Score every excerpt in the project against one code."""
    gateway = make_gateway(backend, cassette, record)
    project = load_project(project_dir)
    codebook, code = project.find_code(code_id)
    cfg = coder.CodingConfig(
        models=_models(model), batch_size=batch_size, scoring=_SCORING_FLAGS[scoring],
        cot=cot, threshold=threshold, seed=seed, project_context=project_context,
    )
    excerpts = [e for e in project.excerpts if e.is_respondent_turn]
    if not excerpts:
        raise MissingResourceError("project has no codable excerpts")
    run_id = make_run_id(
        "apply",
        {"code": code_id, "cfg": cfg.to_dict(), "excerpts": [e.id for e in excerpts]},
    )
    click.echo(f"seed: {seed}", err=True)
    created = timestamp(gateway.deterministic)
    result = coder.apply_code(
        gateway, code, excerpts, cfg, run_id=run_id, created_at=created,
        codebook=codebook,
    )
    _store_run(
        project,
        Run(
            id=run_id, kind="apply", code_id=code_id, created_at=created,
            config=cfg.to_dict(),
            prompt_catalog_version=prompt_catalog.catalog_version(),
            request_hashes=result.request_hashes, failures=result.failures,
        ),
        result.annotations,
    )
    save_project(project, project_dir)
    positives = sum(1 for a in result.annotations if a.positive)
    failed = sum(1 for a in result.annotations if a.failed)
    click.echo(
        f"run {run_id}: {len(result.annotations)} annotations, "
        f"{positives} positive, {failed} failed"
    )
    if out:
        report.write_annotations_csv(result.annotations, out)
        click.echo(f"wrote {out}")


@main.command("distribute")
@_project_dir_option
@click.option("--parent", "parent_id", required=True,
              help="Parent code whose children are the assignment targets.")
@click.option("--batch", "batch_size", default=4, show_default=True)
@click.option("--allow-multi/--single", "allow_multi", default=True, show_default=True)
@click.option("--force-assign", is_flag=True)
@click.option("--project-context", default="")
@click.option("--out", type=click.Path(), default=None)
@backend_options
@handle_errors
def cmd_distribute(project_dir, parent_id, batch_size, allow_multi, force_assign,
                   project_context, out, backend, cassette, record, model):
    """Assign excerpts among the children of one parent code."""
    gateway = make_gateway(backend, cassette, record)
    project = load_project(project_dir)
    codebook, parent = project.find_code(parent_id)
    siblings = codebook.children(parent_id)
    cfg = coder.DistributeConfig(
        models=_models(model), batch_size=batch_size, allow_multi_code=allow_multi,
        force_assign=force_assign, project_context=project_context,
    )
    excerpts = [e for e in project.excerpts if e.is_respondent_turn]
    if not excerpts:
        raise MissingResourceError("project has no codable excerpts")
    run_id = make_run_id(
        "distribute",
        {"parent": parent_id, "cfg": cfg.to_dict(), "excerpts": [e.id for e in excerpts]},
    )
    created = timestamp(gateway.deterministic)
    result = coder.distribute_code(
        gateway, parent, siblings, excerpts, cfg, run_id=run_id, created_at=created
    )
    _store_run(
        project,
        Run(
            id=run_id, kind="distribute", code_id=parent_id, created_at=created,
            config=cfg.to_dict(),
            prompt_catalog_version=prompt_catalog.catalog_version(),
            request_hashes=result.request_hashes, failures=result.failures,
        ),
        result.annotations,
    )
    save_project(project, project_dir)
    positives = sum(1 for a in result.annotations if a.positive)
    click.echo(f"run {run_id}: {positives} assignments over {len(excerpts)} excerpts")
    if out:
        report.write_annotations_csv(result.annotations, out)
        click.echo(f"wrote {out}")


@main.command("rethreshold")
@_project_dir_option
@click.option("--run", "run_id", required=True)
@click.option("--threshold", required=True, type=int)
@handle_errors
def cmd_rethreshold(project_dir, run_id, threshold):
    """Re-derive positives from stored scores at a new cutoff (no LLM)."""
    project = load_project(project_dir)
    source = project.run(run_id)
    annotations = project.run_annotations(run_id)
    if not annotations:
        raise MissingResourceError(f"run has no annotations: {run_id}")
    updated, warnings = coder.rethreshold(annotations, threshold)
    new_id = f"{run_id}-t{threshold}"
    cfg = dict(source.config)
    cfg["threshold"] = threshold
    _store_run(
        project,
        Run(
            id=new_id, kind="rethreshold", code_id=source.code_id,
            created_at=source.created_at, config=cfg,
            prompt_catalog_version=source.prompt_catalog_version,
            extra={"source_run": run_id},
        ),
        [d_replace(a, run_id=new_id) for a in updated],
    )
    save_project(project, project_dir)
    positives = sum(1 for a in updated if a.positive)
    click.echo(f"run {new_id}: {positives} positive at threshold {threshold}")
    for w in warnings:
        click.echo(f"warning: {w}", err=True)


@main.command("feedback")
@_project_dir_option
@click.option("--code", "code_id", required=True)
@click.option("--iterations", default=6, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--gold", "gold_run", default="gold", show_default=True)
@click.option("--threshold", default=8, show_default=True)
@backend_options
@handle_errors
def cmd_feedback(project_dir, code_id, iterations, seed, gold_run, threshold,
                 backend, cassette, record, model):
    """Iteratively fold coding errors back into the code's examples."""
    gateway = make_gateway(backend, cassette, record)
    project = load_project(project_dir)
    codebook, code = project.find_code(code_id)
    excerpts = [e for e in project.excerpts if e.is_respondent_turn]
    gold_sets = evaluate.aggregate_to_document(
        [a for a in project.annotations if a.run_id == gold_run],
        {e.id: e.doc_id for e in project.excerpts},
    ).get("human", {})
    if not gold_sets:
        raise MissingResourceError(f"no gold labels under run {gold_run!r}")
    gold = {e.id: code_id in gold_sets.get(e.doc_id, set()) for e in excerpts}
    cfg = coder.CodingConfig(models=_models(model), threshold=threshold, seed=seed)
    click.echo(f"seed: {seed}", err=True)
    run_id = make_run_id("feedback", {"code": code_id, "cfg": cfg.to_dict()})
    created = timestamp(gateway.deterministic)
    history, enriched = coder.feedback_iterate(
        gateway, code, excerpts, gold, cfg, iterations=iterations,
        run_id=run_id, created_at=created, codebook=codebook,
    )
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
    save_project(project, project_dir)
    click.echo("iteration  kappa   examples")
    for h in history:
        click.echo(f"{h.iteration:9d}  {h.kappa:5.3f}  {h.total_examples:8d}")


@main.command("eval")
@_project_dir_option
@click.option("--run", "run_id", required=True)
@click.option("--gold", "gold_run", default="gold", show_default=True)
@click.option("--code-tuned", is_flag=True,
              help="Sweep 2..10 per code for the kappa-optimal cutoff.")
@click.option("--threshold", default=None, type=int)
@click.option("--code", "code_ids", multiple=True,
              help="Restrict to these codes; default: every code in the run.")
@click.option("--bootstrap", "bootstrap_b", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(), default=None,
              help="Directory for the delimited report and figures.")
@handle_errors
def cmd_eval(project_dir, run_id, gold_run, code_tuned, threshold, code_ids,
             bootstrap_b, seed, out):
    """Benchmark a coding run against human gold labels."""
    project = load_project(project_dir)
    machine = project.run_annotations(run_id)
    if not machine:
        raise MissingResourceError(f"run has no annotations: {run_id}")
    gold = [a for a in project.annotations if a.run_id == gold_run]
    if not gold:
        raise MissingResourceError(f"no gold labels under run {gold_run!r}")
    excerpt_doc = {e.id: e.doc_id for e in project.excerpts}
    doc_order = [d.id for d in sorted(project.documents, key=lambda d: d.source_order)]
    rep = evaluate.build_report(
        machine, gold, excerpt_doc, doc_order,
        code_ids=list(code_ids) or None,
        mode="code_tuned" if code_tuned else "untuned",
        threshold=threshold, bootstrap_B=bootstrap_b, seed=seed,
    )
    click.echo(rep.table())
    if out:
        for p in report.write_eval_report(rep, Path(out)):
            click.echo(f"wrote {p}", err=True)


@main.command("audit-drift")
@_project_dir_option
@click.option("--run", "run_id", required=True)
@click.option("--gold", "gold_run", default="gold", show_default=True)
@click.option("--window", default=None, type=int,
              help="Rolling window; default max(25, n_docs/20).")
@click.option("--out", type=click.Path(), required=True)
@handle_errors
def cmd_audit_drift(project_dir, run_id, gold_run, window, out):
    """Rolling false-positive/false-negative rates over document order."""
    project = load_project(project_dir)
    machine = project.run_annotations(run_id)
    if not machine:
        raise MissingResourceError(f"run has no annotations: {run_id}")
    gold = [a for a in project.annotations if a.run_id == gold_run]
    if not gold:
        raise MissingResourceError(f"no gold labels under run {gold_run!r}")
    excerpt_doc = {e.id: e.doc_id for e in project.excerpts}
    doc_order = [d.id for d in sorted(project.documents, key=lambda d: d.source_order)]
    rater = sorted({a.rater for a in machine})[0]
    m_sets = evaluate.aggregate_to_document(machine, excerpt_doc).get(rater, {})
    g_sets = evaluate.aggregate_to_document(gold, excerpt_doc).get("human", {})
    code_ids = sorted({a.code_id for a in machine})
    fps, fns = evaluate.drift_indicators(m_sets, g_sets, doc_order, code_ids)
    w = window if window is not None else evaluate.default_drift_window(len(doc_order))
    curve = evaluate.drift_audit(fps, fns, w)
    for p in report.write_drift(curve, Path(out), w):
        click.echo(f"wrote {p}")


@main.command("simscore")
@_project_dir_option
@click.option("--a", "a_id", required=True, help="Reference codebook id.")
@click.option("--b", "b_id", required=True, help="Comparison codebook id.")
@click.option("--out", type=click.Path(), default=None)
@backend_options
@handle_errors
def cmd_simscore(project_dir, a_id, b_id, out, backend, cassette, record, model):
    """Blended semantic/structural similarity between two codebooks."""
    from .simmetric import codebook_similarity

    gateway = make_gateway(backend, cassette, record)
    project = load_project(project_dir)
    rep = codebook_similarity(project.codebook(a_id), project.codebook(b_id), gateway.embed)
    click.echo(f"{rep.s_bar:.4f}")
    if out:
        for p in report.write_similarity(rep, Path(out)):
            click.echo(f"wrote {p}", err=True)


@main.command("sample")
@_project_dir_option
@click.option("--words", "target_words", default=None, type=int,
              help="Random documents until this word budget is reached.")
@click.option("--parents", "k", default=None, type=int,
              help="Sample this many parent codes plus labeled documents.")
@click.option("--docs", "n_docs", default=1000, show_default=True)
@click.option("--repeats", default=5, show_default=True)
@click.option("--codebook", "codebook_id", default=None)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@handle_errors
def cmd_sample(project_dir, target_words, k, n_docs, repeats, codebook_id, seed, out):
    """Draw an evaluation sub-corpus (word-budget or parent-code mode)."""
    if (target_words is None) == (k is None):
        raise click.UsageError("exactly one of --words or --parents is required")
    project = load_project(project_dir)
    click.echo(f"seed: {seed}", err=True)
    if target_words is not None:
        sub, warnings = evaluate.sample_words(project, target_words, seed=seed)
        save_project(sub, out)
        total = sum(len(d.body.split()) for d in sub.documents)
        click.echo(f"sampled {len(sub.documents)} documents ({total} words) into {out}")
    else:
        if codebook_id is None:
            raise click.UsageError("--parents requires --codebook")
        samples, warnings = evaluate.sample_parents(
            project, project.codebook(codebook_id), k, n_docs, repeats, seed=seed
        )
        for i, (sub, sub_cb) in enumerate(samples):
            sub.codebooks = [sub_cb]
            dest = f"{out}-{i}"
            save_project(sub, dest)
            click.echo(
                f"sample {i}: {len(sub.documents)} documents, "
                f"{len(sub_cb.codes)} codes into {dest}"
            )
    for w in warnings:
        click.echo(f"warning: {w}", err=True)


@main.command("serve")
@_project_dir_option
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8765, show_default=True)
@backend_options
@handle_errors
def cmd_serve(project_dir, host, port, backend, cassette, record, model):
    """Run the HTTP service (REST API plus the bundled web UI)."""
    import uvicorn

    from .service import create_app

    gateway = make_gateway(backend, cassette, record)
    app = create_app(project_dir, gateway=gateway)
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
