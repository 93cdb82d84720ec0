"""Benchmarking machine annotations against human gold labels.

Agreement metrics (Cohen's kappa, F1, percent agreement), document-level
bootstrap confidence intervals, threshold tuning, span-to-excerpt
alignment, evaluation-corpus sampling, and the coder-drift audit.
"""

from __future__ import annotations

import copy
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .models import Annotation, Codebook, Excerpt, is_doc_scope
from .store import Project


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_vectors(cls, pred: Sequence[int], gold: Sequence[int]) -> "ConfusionCounts":
        c = cls()
        for p, g in zip(pred, gold, strict=True):
            if p and g:
                c.tp += 1
            elif p and not g:
                c.fp += 1
            elif not p and g:
                c.fn += 1
            else:
                c.tn += 1
        return c


def cohen_kappa(a: Sequence, b: Sequence) -> float:
    """Chance-corrected agreement between two label vectors.

    Degenerate case: when chance agreement is exactly 1 (both raters
    constant and identical marginals), returns 1.0 on full agreement and
    0.0 otherwise.
    """
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("empty vectors")
    n = len(a)
    p_o = sum(1 for x, y in zip(a, b) if x == y) / n
    ca, cb = Counter(a), Counter(b)
    classes = set(ca) | set(cb)
    p_e = sum((ca[c] / n) * (cb[c] / n) for c in classes)
    if p_e >= 1.0 - 1e-15:
        return 1.0 if p_o >= 1.0 - 1e-15 else 0.0
    return (p_o - p_e) / (1 - p_e)


def percent_agreement(a: Sequence, b: Sequence) -> float:
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("empty vectors")
    return sum(1 for x, y in zip(a, b) if x == y) / len(a)


def f1(c: ConfusionCounts) -> Optional[float]:
    """F1 over the positive class; None when no positives exist anywhere."""
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return None
    return 2 * c.tp / denom


def kappa_from_counts(c: ConfusionCounts) -> float:
    pred = [1] * c.tp + [1] * c.fp + [0] * c.fn + [0] * c.tn
    gold = [1] * c.tp + [0] * c.fp + [1] * c.fn + [0] * c.tn
    return cohen_kappa(pred, gold)


def bootstrap_ci(
    groups: Sequence[tuple[Sequence, Sequence]],
    metric: Callable[[Sequence, Sequence], Optional[float]],
    B: int = 1000,
    seed: int = 0,
    redraw_budget_factor: int = 10,
) -> tuple[float, float]:
    """Percentile bootstrap resampling whole documents with replacement.

    ``groups`` pairs one (pred, gold) vector per document. Resamples in
    which the metric is undefined are redrawn, up to a capped budget.
    """
    if len(groups) < 2:
        raise ValueError("bootstrap requires >= 2 documents")
    rng = np.random.default_rng(seed)
    stats: list[float] = []
    budget = B * redraw_budget_factor
    while len(stats) < B and budget > 0:
        budget -= 1
        idx = rng.integers(0, len(groups), size=len(groups))
        pred: list = []
        gold: list = []
        for i in idx:
            pred.extend(groups[i][0])
            gold.extend(groups[i][1])
        try:
            value = metric(pred, gold)
        except (ValueError, ZeroDivisionError):
            value = None
        if value is not None:
            stats.append(value)
    if not stats:
        raise ValueError("metric undefined in every resample")
    lo, hi = np.percentile(stats, [2.5, 97.5])
    return float(lo), float(hi)


def rethreshold_vector(scores: Sequence[int], threshold: int) -> list[int]:
    return [1 if s >= threshold else 0 for s in scores]


def tune_threshold(
    scores: Sequence[int],
    gold: Sequence[int],
    thresholds: Iterable[int] = range(2, 11),
) -> tuple[int, float]:
    """Sweep thresholds and return (argmax-kappa threshold, kappa).

    Ties break toward the higher threshold.
    """
    best: tuple[int, float] | None = None
    for t in thresholds:
        k = cohen_kappa(rethreshold_vector(scores, t), list(gold))
        if best is None or k >= best[1]:
            best = (t, k)
    assert best is not None
    return best


def _token_multiset(text: str) -> Counter:
    return Counter(w.lower().strip(".,;:!?\"'()") for w in text.split())


def align_annotations(
    spans: Sequence[tuple[str, str, str]],
    excerpts: Sequence[Excerpt],
    rater: str = "human",
    run_id: str = "gold",
) -> tuple[list[Annotation], list[str]]:
    """Assign human-coded spans (text, doc_id, code_id) to excerpts.

    Each span goes to the respondent excerpt of its document with the
    largest token-multiset overlap; ties break toward the earliest
    excerpt; spans with zero overlap everywhere are dropped.
    """
    by_doc: dict[str, list[Excerpt]] = {}
    for e in excerpts:
        if e.is_respondent_turn:
            by_doc.setdefault(e.doc_id, []).append(e)
    for lst in by_doc.values():
        lst.sort(key=lambda e: e.index)

    out: list[Annotation] = []
    warnings: list[str] = []
    for text, doc_id, code_id in spans:
        span_tokens = _token_multiset(text)
        best_excerpt, best_overlap = None, 0
        for e in by_doc.get(doc_id, []):
            overlap = sum((span_tokens & _token_multiset(e.text)).values())
            if overlap > best_overlap:
                best_excerpt, best_overlap = e, overlap
        if best_excerpt is None:
            warnings.append(f"span dropped (zero overlap in {doc_id}): {text[:40]!r}")
            continue
        out.append(
            Annotation(
                excerpt_id=best_excerpt.id,
                code_id=code_id,
                rater=rater,
                positive=True,
                run_id=run_id,
                created_at="",
            )
        )
    return out, warnings


def aggregate_to_document(
    annotations: Sequence[Annotation], excerpt_doc: dict[str, str]
) -> dict[str, dict[str, set[str]]]:
    """Union of positive codes per document, keyed rater -> doc -> codes.

    Document-scoped annotations (``doc::<id>`` excerpt ids) pass through;
    excerpt-scoped ones are resolved via ``excerpt_doc``.
    """
    out: dict[str, dict[str, set[str]]] = {}
    for a in annotations:
        if not a.positive:
            continue
        if is_doc_scope(a.excerpt_id):
            doc_id = a.excerpt_id.split("::", 1)[1]
        else:
            doc_id = excerpt_doc.get(a.excerpt_id)
            if doc_id is None:
                continue
        out.setdefault(a.rater, {}).setdefault(doc_id, set()).add(a.code_id)
    return out


def doc_score_table(
    annotations: Sequence[Annotation], excerpt_doc: dict[str, str]
) -> dict[str, dict[str, int]]:
    """Max excerpt score per (code, document) for scored annotations."""
    out: dict[str, dict[str, int]] = {}
    for a in annotations:
        if a.score is None:
            continue
        if is_doc_scope(a.excerpt_id):
            doc_id = a.excerpt_id.split("::", 1)[1]
        else:
            doc_id = excerpt_doc.get(a.excerpt_id)
            if doc_id is None:
                continue
        table = out.setdefault(a.code_id, {})
        table[doc_id] = max(table.get(doc_id, 0), a.score)
    return out


def top_codes(
    gold_doc_sets: dict[str, set[str]], n: int = 4, min_frequency: float = 0.01
) -> list[str]:
    """Most frequent codes by document-level frequency, >= min_frequency."""
    n_docs = len(gold_doc_sets)
    if n_docs == 0:
        return []
    counts: Counter = Counter()
    for codes in gold_doc_sets.values():
        counts.update(codes)
    eligible = [(c, k) for k, c in counts.items() if c / n_docs >= min_frequency]
    eligible.sort(key=lambda t: (-t[0], t[1]))
    return [k for _, k in eligible[:n]]


@dataclass
class CodeEval:
    code_id: str
    counts: ConfusionCounts
    kappa: float
    f1: Optional[float]
    percent_agreement: float
    kappa_ci_95: Optional[tuple[float, float]] = None
    f1_ci_95: Optional[tuple[float, float]] = None
    threshold_used: Optional[int] = None
    code_tuned_threshold: Optional[int] = None
    degenerate_kappa: bool = False

    def to_dict(self) -> dict:
        return {
            "code_id": self.code_id,
            "counts": vars(self.counts),
            "kappa": self.kappa,
            "f1": self.f1,
            "percent_agreement": self.percent_agreement,
            "kappa_ci_95": self.kappa_ci_95,
            "f1_ci_95": self.f1_ci_95,
            "threshold_used": self.threshold_used,
            "code_tuned_threshold": self.code_tuned_threshold,
        }


@dataclass
class EvalReport:
    per_code: list[CodeEval] = field(default_factory=list)
    mean_kappa: Optional[float] = None
    pooled_kappa: Optional[float] = None
    mean_f1: Optional[float] = None
    drift_curve: Optional[list[tuple[int, float, float]]] = None

    def to_dict(self) -> dict:
        return {
            "per_code": [c.to_dict() for c in self.per_code],
            "mean_kappa": self.mean_kappa,
            "pooled_kappa": self.pooled_kappa,
            "mean_f1": self.mean_f1,
            "drift_curve": self.drift_curve,
        }

    def table(self) -> str:
        """Plain-text table: code, threshold, kappa [CI], f1 [CI]."""
        rows = [["Code", "Threshold", "Cohen's k [95% CI]", "F1 [95% CI]"]]
        for c in self.per_code:
            t = c.code_tuned_threshold if c.code_tuned_threshold is not None else c.threshold_used
            rows.append(
                [
                    c.code_id,
                    str(t) if t is not None else "-",
                    _fmt_ci(c.kappa, c.kappa_ci_95),
                    _fmt_ci(c.f1, c.f1_ci_95),
                ]
            )
        if self.mean_kappa is not None:
            rows.append(["mean", "", f"{self.mean_kappa:.3f}", ""])
        if self.pooled_kappa is not None:
            rows.append(["pooled", "", f"{self.pooled_kappa:.3f}", ""])
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows]
        lines.insert(1, "-" * (sum(widths) + 2 * (len(widths) - 1)))
        return "\n".join(lines)


def _fmt_ci(value: Optional[float], ci: Optional[tuple[float, float]]) -> str:
    if value is None:
        return "-"
    s = f"{value:.3f}"
    if ci is not None:
        s += f" [{ci[0]:.3f}, {ci[1]:.3f}]"
    return s


def build_report(
    machine: Sequence[Annotation],
    gold: Sequence[Annotation],
    excerpt_doc: dict[str, str],
    doc_order: Sequence[str],
    code_ids: Optional[Sequence[str]] = None,
    mode: str = "untuned",
    threshold: Optional[int] = None,
    bootstrap_B: int = 1000,
    seed: int = 0,
) -> EvalReport:
    """Document-level IRR report for a run against human gold labels.

    mode="untuned" applies a single global threshold to doc-level scores
    (or trusts the stored positive flags when scores are absent);
    mode="code_tuned" sweeps 2..10 per code for the kappa-optimal cutoff.
    """
    machine_sets = aggregate_to_document(machine, excerpt_doc)
    gold_sets_all = aggregate_to_document(gold, excerpt_doc)
    gold_sets = gold_sets_all.get("human", {})
    scores = doc_score_table(machine, excerpt_doc)

    if code_ids is None:
        code_ids = sorted({a.code_id for a in machine})

    machine_rater = next(iter(machine_sets), None)
    m_sets = machine_sets.get(machine_rater, {}) if machine_rater else {}

    report = EvalReport()
    pooled = ConfusionCounts()
    kappas, f1s = [], []
    for code_id in code_ids:
        score_row = scores.get(code_id, {})
        gold_vec = [1 if code_id in gold_sets.get(d, set()) else 0 for d in doc_order]
        tuned_threshold = None
        if score_row and mode == "code_tuned":
            score_vec = [score_row.get(d, 0) for d in doc_order]
            tuned_threshold, _ = tune_threshold(score_vec, gold_vec)
            pred_vec = rethreshold_vector(score_vec, tuned_threshold)
        elif score_row and threshold is not None:
            score_vec = [score_row.get(d, 0) for d in doc_order]
            pred_vec = rethreshold_vector(score_vec, threshold)
        else:
            pred_vec = [1 if code_id in m_sets.get(d, set()) else 0 for d in doc_order]

        counts = ConfusionCounts.from_vectors(pred_vec, gold_vec)
        k = cohen_kappa(pred_vec, gold_vec)
        groups = [([p], [g]) for p, g in zip(pred_vec, gold_vec)]
        kappa_ci = f1_ci = None
        if len(groups) >= 2 and bootstrap_B > 0:
            try:
                kappa_ci = bootstrap_ci(groups, cohen_kappa, B=bootstrap_B, seed=seed)
                f1_ci = bootstrap_ci(
                    groups,
                    lambda p, g: f1(ConfusionCounts.from_vectors(p, g)),
                    B=bootstrap_B,
                    seed=seed,
                )
            except ValueError:
                pass
        ce = CodeEval(
            code_id=code_id,
            counts=counts,
            kappa=k,
            f1=f1(counts),
            percent_agreement=percent_agreement(pred_vec, gold_vec),
            kappa_ci_95=kappa_ci,
            f1_ci_95=f1_ci,
            threshold_used=threshold,
            code_tuned_threshold=tuned_threshold,
            degenerate_kappa=len(set(pred_vec)) == 1 and pred_vec == gold_vec,
        )
        report.per_code.append(ce)
        kappas.append(k)
        if ce.f1 is not None:
            f1s.append(ce.f1)
        pooled.tp += counts.tp
        pooled.fp += counts.fp
        pooled.fn += counts.fn
        pooled.tn += counts.tn

    if kappas:
        report.mean_kappa = float(np.mean(kappas))
        report.pooled_kappa = kappa_from_counts(pooled)
    if f1s:
        report.mean_f1 = float(np.mean(f1s))
    return report


def drift_audit(
    fp_indicators: Sequence[float],
    fn_indicators: Sequence[float],
    window: int,
) -> list[tuple[int, float, float]]:
    """Trailing rolling mean of FP and FN rates over document index."""
    if window < 1:
        raise ValueError("window must be >= 1")
    n = len(fp_indicators)
    if n == 0:
        return []
    if window > n:
        return [(n - 1, float(np.mean(fp_indicators)), float(np.mean(fn_indicators)))]
    out = []
    for i in range(n):
        lo = max(0, i - window + 1)
        out.append(
            (
                i,
                float(np.mean(fp_indicators[lo : i + 1])),
                float(np.mean(fn_indicators[lo : i + 1])),
            )
        )
    return out


def default_drift_window(n_docs: int) -> int:
    return max(25, n_docs // 20)


def drift_indicators(
    machine_sets: dict[str, set[str]],
    gold_sets: dict[str, set[str]],
    doc_order: Sequence[str],
    code_ids: Sequence[str],
) -> tuple[list[float], list[float]]:
    """Per-document FP / FN indicator rates across the given codes."""
    fps, fns = [], []
    for d in doc_order:
        m = machine_sets.get(d, set())
        g = gold_sets.get(d, set())
        n = max(1, len(code_ids))
        fps.append(sum(1 for c in code_ids if c in m and c not in g) / n)
        fns.append(sum(1 for c in code_ids if c not in m and c in g) / n)
    return fps, fns


def sample_words(project: Project, target_words: int, seed: int = 0) -> tuple[Project, list[str]]:
    """Seeded random documents accumulated until the word target is hit.

    Stops at the first document that reaches the target (so the total is
    within one document's words of the target). Returns (sub-project,
    warnings).
    """
    rng = np.random.default_rng(seed)
    docs = list(project.documents)
    order = rng.permutation(len(docs))
    picked, total = [], 0
    warnings: list[str] = []
    for i in order:
        picked.append(docs[i])
        total += len(docs[i].body.split())
        if total >= target_words:
            break
    if total < target_words:
        warnings.append(
            f"corpus smaller than target ({total} < {target_words}); returning all"
        )
    return _subproject(project, {d.id for d in picked}), warnings


def sample_parents(
    project: Project,
    codebook: Codebook,
    k: int,
    n_docs: int,
    repeats: int,
    seed: int = 0,
) -> tuple[list[tuple[Project, Codebook]], list[str]]:
    """Repeatedly sample k parent codes and n_docs documents labeled with
    any of them; each repeat yields (sub-corpus, sub-codebook)."""
    rng = np.random.default_rng(seed)
    gold = [a for a in project.annotations if a.rater == "human" and a.positive]
    excerpt_doc = {e.id: e.doc_id for e in project.excerpts}
    doc_sets = aggregate_to_document(gold, excerpt_doc).get("human", {})
    parents = codebook.roots()
    if len(parents) < k:
        raise ValueError(f"codebook has {len(parents)} parents, need {k}")

    warnings: list[str] = []
    out: list[tuple[Project, Codebook]] = []
    for _ in range(repeats):
        chosen = [parents[i] for i in rng.choice(len(parents), size=k, replace=False)]
        families = {
            p.id: {p.id} | {c.id for c in codebook.descendants(p.id)} for p in chosen
        }
        covered = set().union(*families.values())
        eligible = sorted(d for d, codes in doc_sets.items() if codes & covered)
        if len(eligible) < n_docs:
            warnings.append(
                f"only {len(eligible)} documents labeled with sampled parents; "
                f"requested {n_docs}"
            )
            sampled_ids = set(eligible)
        else:
            idx = rng.choice(len(eligible), size=n_docs, replace=False)
            sampled_ids = {eligible[i] for i in idx}
        present = set()
        for d in sampled_ids:
            present |= doc_sets.get(d, set()) & covered
        sub_codes = [copy.deepcopy(p) for p in chosen]
        for p in chosen:
            for c in codebook.descendants(p.id):
                if c.id in present:
                    sub_codes.append(copy.deepcopy(c))
        sub_cb = Codebook(id=f"{codebook.id}-sample", codes=sub_codes, lens=codebook.lens)
        out.append((_subproject(project, sampled_ids), sub_cb))
    return out, warnings


def _subproject(project: Project, doc_ids: set[str]) -> Project:
    sub = Project(name=f"{project.name}-sample")
    sub.documents = [copy.deepcopy(d) for d in project.documents if d.id in doc_ids]
    sub.excerpts = [copy.deepcopy(e) for e in project.excerpts if e.doc_id in doc_ids]
    keep_excerpts = {e.id for e in sub.excerpts}
    for a in project.annotations:
        if is_doc_scope(a.excerpt_id):
            if a.excerpt_id.split("::", 1)[1] in doc_ids:
                sub.annotations.append(copy.deepcopy(a))
        elif a.excerpt_id in keep_excerpts:
            sub.annotations.append(copy.deepcopy(a))
    sub.codebooks = [copy.deepcopy(cb) for cb in project.codebooks]
    return sub
