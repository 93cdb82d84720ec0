"""Code application: single-code scoring, multi-code distribution,
score post-processing, ensembling, thresholding, and the error-driven
feedback loop.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import prompt_catalog
from .errors import ParseError, ValidationError
from .evaluate import cohen_kappa
from .gateway import (
    ChatRequest,
    ChatResponse,
    Gateway,
    parse_assignment_batch,
    parse_binary_batch,
    parse_scored_batch,
    request_hash,
)
from .models import Annotation, Code, Codebook, Excerpt, ensemble_rater, model_rater

SYSTEM_PROMPT = "You are a meticulous assistant for qualitative text analysis."

BINARY = "binary"
DISCRETIZED = "discretized"
BINARY_LOGPROB = "binary_logprob"


@dataclass
class CodingConfig:
    models: list[str] = field(default_factory=lambda: ["default"])
    batch_size: int = 4
    scoring: str = DISCRETIZED
    cot: bool = True
    few_shot_positive: int = 4
    few_shot_negative: Optional[int] = None  # None: match pool availability
    threshold: int = 8
    softmax_temperature: float = 1.0
    project_context: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 1 <= self.threshold <= 10:
            raise ValidationError("threshold must be in [1, 10]")
        if self.scoring not in (BINARY, DISCRETIZED, BINARY_LOGPROB):
            raise ValidationError(f"unknown scoring mode: {self.scoring}")
        if self.softmax_temperature <= 0:
            raise ValidationError("softmax_temperature must be > 0")

    def to_dict(self) -> dict:
        d = dict(vars(self))
        return d


@dataclass
class DistributeConfig(CodingConfig):
    allow_multi_code: bool = True
    force_assign: bool = False


@dataclass
class CodingResult:
    annotations: list[Annotation]
    request_hashes: list[str] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def score_from_logprobs(yes_lp: float, no_lp: float, temperature: float = 1.0) -> int:
    """Map Yes/No token log-probabilities onto the 1-10 confidence scale
    through a temperature-controlled softmax."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if not (math.isfinite(yes_lp) and math.isfinite(no_lp)):
        raise ValueError("log-probs must be finite")
    a, b = yes_lp / temperature, no_lp / temperature
    m = max(a, b)
    p_yes = math.exp(a - m) / (math.exp(a - m) + math.exp(b - m))
    return max(1, min(10, round_half_up(1 + 9 * p_yes)))


def extract_yes_no_logprobs(
    token_logprobs: Optional[Sequence[tuple[str, float]]],
) -> tuple[float, float]:
    """Find the Yes and No token log-probs; error rather than guess."""
    yes = no = None
    for token, lp in token_logprobs or []:
        t = token.strip().lower()
        if t == "yes" and yes is None:
            yes = lp
        elif t == "no" and no is None:
            no = lp
    if yes is None or no is None:
        raise ParseError("token extraction failed: Yes/No log-probs missing")
    return yes, no


def _output_instructions(scoring: str, cot: bool) -> str:
    if scoring == DISCRETIZED:
        if cot:
            return (
                "For each statement, provide:\n\n"
                "1. A brief explanation (5-10 words) of your reasoning\n"
                "2. A confidence score (1-10) where 10 indicates highest confidence the "
                "statement should be tagged and 1 indicates the statement should "
                "definitely not be tagged\n\n"
                "Your output will be a JSON with one numeric key for every provided input "
                'statement. The value for each key will be a JSON with two keys: '
                '"REASONING" and "SCORE".'
            )
        return (
            "For each statement, provide a confidence score (1-10) where 10 indicates "
            "highest confidence the statement should be tagged and 1 indicates the "
            "statement should definitely not be tagged.\n\n"
            "Your output will be a JSON with one numeric key for every provided input "
            'statement. The value for each key will be a JSON with one key: "SCORE".'
        )
    if scoring == BINARY:
        if cot:
            return (
                "For each statement, provide a brief explanation (5-10 words) of your "
                'reasoning and a final answer: "Yes" if the statement should be tagged, '
                '"No" otherwise.\n\n'
                "Your output will be a JSON with one numeric key for every provided input "
                'statement. The value for each key will be a JSON with two keys: '
                '"REASONING" and "ANSWER".'
            )
        return (
            'For each statement, answer "Yes" if the statement should be tagged and '
            '"No" otherwise.\n\n'
            "Your output will be a JSON with one numeric key for every provided input "
            'statement. The value for each key will be the string "Yes" or "No".'
        )
    # binary_logprob: one statement per call, bare token answer
    return (
        "You will be given exactly one statement. Respond with exactly one word: "
        "Yes if the statement should be tagged with the code, No otherwise."
    )


def _numbered_statements(excerpts: Sequence[Excerpt]) -> str:
    lines = []
    for i, e in enumerate(excerpts, start=1):
        if e.preceding_context:
            lines.append(f"{i}. (Context: ...{e.preceding_context})\n   \"{e.text}\"")
        else:
            lines.append(f"{i}. \"{e.text}\"")
    return "\n".join(lines)


def _bullets(items: Sequence[str], empty: str = "None provided.") -> str:
    if not items:
        return empty
    return "\n".join(f"{i}. {t}" for i, t in enumerate(items, start=1))


def _select_examples(
    pool: Sequence[str], k: Optional[int], rng: np.random.Generator, use_all: bool
) -> list[str]:
    if use_all or k is None:
        return list(pool)
    if k >= len(pool):
        return list(pool)
    idx = sorted(rng.choice(len(pool), size=k, replace=False))
    return [pool[i] for i in idx]


def tag_context(code: Code, codebook: Optional[Codebook]) -> str:
    if codebook is None:
        return ""
    try:
        path = codebook.ancestry(code.id)
    except KeyError:
        return ""
    if len(path) < 2:
        return ""
    return "(Hierarchy: " + " -> ".join(c.name for c in path) + ")"


def render_apply_prompt(
    code: Code,
    excerpts: Sequence[Excerpt],
    cfg: CodingConfig,
    codebook: Optional[Codebook] = None,
    use_all_examples: bool = False,
) -> str:
    rng = np.random.default_rng(cfg.seed)
    positives = _select_examples(
        code.positive_examples, cfg.few_shot_positive, rng, use_all_examples
    )
    n_neg = cfg.few_shot_negative
    if n_neg is None:
        n_neg = cfg.few_shot_positive if code.negative_examples else 0
    negatives = _select_examples(code.negative_examples, n_neg, rng, use_all_examples)
    return prompt_catalog.render(
        "apply_code",
        tag=code.name,
        tag_definition=code.definition or "No definition provided.",
        tag_context=tag_context(code, codebook),
        inclusion_criteria=_bullets(code.inclusion_criteria),
        exclusion_criteria=_bullets(code.exclusion_criteria),
        positive_statements=_bullets([f'"{p}"' for p in positives]),
        negative_statements=_bullets([f'"{n}"' for n in negatives]),
        question_and_statements=_numbered_statements(excerpts),
        project_context=cfg.project_context or "",
        output_instructions=_output_instructions(cfg.scoring, cfg.cot),
    )


_REPROMPT_SUFFIX = (
    "\n\nYour previous response was malformed. Respond again with ONLY the valid "
    "JSON object described in the output instructions, covering every statement key."
)


def _batches(excerpts: Sequence[Excerpt], size: int) -> list[list[Excerpt]]:
    return [list(excerpts[i : i + size]) for i in range(0, len(excerpts), size)]


def apply_code(
    gateway: Gateway,
    code: Code,
    excerpts: Sequence[Excerpt],
    cfg: CodingConfig,
    run_id: str,
    created_at: str = "",
    codebook: Optional[Codebook] = None,
    use_all_examples: bool = False,
) -> CodingResult:
    """Score every excerpt against one code, one annotation per excerpt.

    With multiple models configured, members run independently and are
    combined into an unweighted ensemble (mean score, rounded half-up).
    Parse failures re-prompt once, then fall back to batch size 1; an
    excerpt that still fails yields a flagged annotation without a score.
    """
    if not code.name:
        raise ValidationError("code name must be nonempty")
    if not excerpts:
        raise ValidationError("excerpts must be nonempty")

    result = CodingResult(annotations=[])
    per_model: dict[str, dict[str, Annotation]] = {}
    for model in cfg.models:
        per_model[model] = _apply_single_model(
            gateway, model, code, excerpts, cfg, run_id, created_at, codebook,
            use_all_examples, result,
        )

    if len(cfg.models) == 1:
        members = per_model[cfg.models[0]]
        result.annotations = [members[e.id] for e in excerpts]
        return result

    rater = ensemble_rater(cfg.models)
    for e in excerpts:
        members = [per_model[m][e.id] for m in cfg.models]
        ok = [a for a in members if not a.failed]
        if not ok:
            result.annotations.append(
                Annotation(
                    excerpt_id=e.id, code_id=code.id, rater=rater, positive=False,
                    run_id=run_id, created_at=created_at, failed=True,
                )
            )
            continue
        if cfg.scoring == BINARY:
            positive = round_half_up(float(np.mean([a.positive for a in ok]))) >= 1
            score = None
        else:
            score = round_half_up(float(np.mean([a.score for a in ok])))
            positive = score >= cfg.threshold
        result.annotations.append(
            Annotation(
                excerpt_id=e.id, code_id=code.id, rater=rater, positive=positive,
                score=score, run_id=run_id, created_at=created_at,
            )
        )
    return result


def _apply_single_model(
    gateway: Gateway,
    model: str,
    code: Code,
    excerpts: Sequence[Excerpt],
    cfg: CodingConfig,
    run_id: str,
    created_at: str,
    codebook: Optional[Codebook],
    use_all_examples: bool,
    result: CodingResult,
) -> dict[str, Annotation]:
    rater = model_rater(model)
    out: dict[str, Annotation] = {}

    def annotate(e: Excerpt, score: Optional[int], positive: bool,
                 reasoning: Optional[str], failed: bool = False) -> None:
        out[e.id] = Annotation(
            excerpt_id=e.id, code_id=code.id, rater=rater, positive=positive,
            score=score, reasoning=reasoning, run_id=run_id, created_at=created_at,
            failed=failed,
        )

    batch_size = 1 if cfg.scoring == BINARY_LOGPROB else cfg.batch_size
    for batch in _batches(excerpts, batch_size):
        try:
            parsed = _run_batch(gateway, model, code, batch, cfg, codebook,
                                use_all_examples, result)
        except ParseError as exc:
            result.failures.append(
                {"stage": "batch", "excerpts": [e.id for e in batch], "error": str(exc)}
            )
            parsed = None
        if parsed is not None:
            for i, e in enumerate(batch, start=1):
                score, positive, reasoning = parsed[i]
                annotate(e, score, positive, reasoning)
            continue
        # degraded path: each excerpt individually
        for e in batch:
            try:
                single = _run_batch(gateway, model, code, [e], cfg, codebook,
                                    use_all_examples, result)
                score, positive, reasoning = single[1]
                annotate(e, score, positive, reasoning)
            except ParseError as exc:
                result.failures.append(
                    {"stage": "single", "excerpts": [e.id], "error": str(exc)}
                )
                annotate(e, None, False, None, failed=True)
    return out


def _run_batch(
    gateway: Gateway,
    model: str,
    code: Code,
    batch: Sequence[Excerpt],
    cfg: CodingConfig,
    codebook: Optional[Codebook],
    use_all_examples: bool,
    result: CodingResult,
) -> dict[int, tuple[Optional[int], bool, Optional[str]]]:
    """Returns per statement-number (score, positive, reasoning)."""
    prompt = render_apply_prompt(code, batch, cfg, codebook, use_all_examples)
    want_logprobs = cfg.scoring == BINARY_LOGPROB
    shape = "free_text" if want_logprobs else "json_object"
    req = ChatRequest(
        model=model, system_prompt=SYSTEM_PROMPT, user_prompt=prompt,
        want_logprobs=want_logprobs, response_shape=shape,
    )
    keys = list(range(1, len(batch) + 1))

    def attempt(r: ChatRequest):
        result.request_hashes.append(request_hash(r))
        resp = gateway.chat(r)
        return _parse_apply_response(resp, keys, cfg)

    try:
        return attempt(req)
    except ParseError:
        retry = replace(req, user_prompt=prompt + _REPROMPT_SUFFIX)
        return attempt(retry)


def _parse_apply_response(
    resp: ChatResponse, keys: Sequence[int], cfg: CodingConfig
) -> dict[int, tuple[Optional[int], bool, Optional[str]]]:
    if cfg.scoring == DISCRETIZED:
        scored = parse_scored_batch(resp.text, keys)
        return {
            k: (s, s >= cfg.threshold, r if cfg.cot else None)
            for k, (r, s) in scored.items()
        }
    if cfg.scoring == BINARY:
        answers = parse_binary_batch(resp.text, keys)
        return {k: (None, v, None) for k, v in answers.items()}
    # binary_logprob: single statement, score from Yes/No log-probs
    yes_lp, no_lp = extract_yes_no_logprobs(resp.token_logprobs)
    score = score_from_logprobs(yes_lp, no_lp, cfg.softmax_temperature)
    return {keys[0]: (score, score >= cfg.threshold, None)}


def rethreshold(
    annotations: Sequence[Annotation], threshold: int
) -> tuple[list[Annotation], list[str]]:
    """Re-derive positive flags from stored scores; no LLM calls.

    Annotations without a score pass through unchanged with a warning.
    """
    if not 1 <= threshold <= 10:
        raise ValidationError("threshold must be in [1, 10]")
    out: list[Annotation] = []
    warnings: list[str] = []
    for a in annotations:
        if a.score is None:
            warnings.append(f"annotation {a.excerpt_id}/{a.code_id} has no score; skipped")
            out.append(a)
            continue
        out.append(replace(a, positive=a.score >= threshold))
    return out, warnings


_LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"


def _subtheme_block(siblings: Sequence[Code]) -> str:
    lines = []
    for letter, c in zip(_LETTERS, siblings):
        desc = f"- {letter}. {c.name}"
        if c.definition:
            desc += f": {c.definition}"
        if c.inclusion_criteria:
            desc += f" (Include: {'; '.join(c.inclusion_criteria)})"
        if c.exclusion_criteria:
            desc += f" (Exclude: {'; '.join(c.exclusion_criteria)})"
        lines.append(desc)
    return "\n".join(lines)


def _assignment_rules(cfg: DistributeConfig) -> str:
    rules = []
    if cfg.allow_multi_code:
        rules.append("- Flexible Assignment: Each statement can be assigned to one, "
                     "multiple, or no subthemes.")
    else:
        rules.append("- Single Assignment: Each statement can be assigned to AT MOST "
                     "ONE subtheme; never assign more than one.")
    if cfg.force_assign:
        rules.append("- Mandatory Assignment: Every statement MUST be assigned at "
                     "least one subtheme; [] is not an acceptable value.")
    else:
        rules.append("- Default Assignment: If none of the provided subthemes clearly "
                     "match a statement, assign [] to that statement.")
    rules.append("- Strict Criteria: Only assign a subtheme if the statement clearly "
                 "meets the subtheme's definition, inclusion criteria, and any "
                 "provided examples.")
    return "\n".join(rules)


def render_distribute_prompt(
    parent: Optional[Code],
    siblings: Sequence[Code],
    excerpts: Sequence[Excerpt],
    cfg: DistributeConfig,
) -> str:
    theme = "All codes in the codebook"
    if parent is not None:
        theme = parent.name + (f": {parent.definition}" if parent.definition else "")
    return prompt_catalog.render(
        "distribute_code",
        assignment_rules=_assignment_rules(cfg),
        project_context=cfg.project_context or "",
        theme=theme,
        subthemes=_subtheme_block(siblings),
        statements=_numbered_statements(excerpts),
    )


def distribute_code(
    gateway: Gateway,
    parent: Optional[Code],
    siblings: Sequence[Code],
    excerpts: Sequence[Excerpt],
    cfg: DistributeConfig,
    run_id: str,
    created_at: str = "",
) -> CodingResult:
    """Assign each excerpt among sibling codes in one pass.

    Produces one boolean annotation per (excerpt, sibling). Constraint
    violations re-prompt once; persisting violations are repaired
    deterministically (truncate to the first letter; force_assign falls
    back to the run's most frequent sibling, flagged).
    """
    if len(siblings) < 2:
        raise ValidationError("distribute_code requires at least 2 sibling codes")
    if len(siblings) > len(_LETTERS):
        raise ValidationError("too many siblings")
    if not excerpts:
        raise ValidationError("excerpts must be nonempty")

    model = cfg.models[0]
    rater = model_rater(model) if len(cfg.models) == 1 else ensemble_rater(cfg.models)
    letters = list(_LETTERS[: len(siblings)])
    by_letter = dict(zip(letters, siblings))
    result = CodingResult(annotations=[])
    assignments: dict[str, tuple[list[str], bool]] = {}  # excerpt -> (letters, fallback?)

    for batch in _batches(excerpts, cfg.batch_size):
        prompt = render_distribute_prompt(parent, siblings, batch, cfg)
        keys = list(range(1, len(batch) + 1))
        req = ChatRequest(model=model, system_prompt=SYSTEM_PROMPT, user_prompt=prompt)

        def attempt(r: ChatRequest):
            result.request_hashes.append(request_hash(r))
            resp = gateway.chat(r)
            parsed, warnings = parse_assignment_batch(resp.text, keys, letters)
            for w in warnings:
                result.failures.append({"stage": "assignment", "warning": w})
            return parsed

        try:
            parsed = attempt(req)
        except ParseError as exc:
            result.failures.append(
                {"stage": "batch", "excerpts": [e.id for e in batch], "error": str(exc)}
            )
            parsed = {k: [] for k in keys}

        violated = any(
            (not cfg.allow_multi_code and len(v) > 1)
            or (cfg.force_assign and len(v) == 0)
            for v in parsed.values()
        )
        if violated:
            retry = replace(req, user_prompt=prompt + _REPROMPT_SUFFIX)
            try:
                parsed = attempt(retry)
            except ParseError as exc:
                result.failures.append(
                    {"stage": "reprompt", "excerpts": [e.id for e in batch],
                     "error": str(exc)}
                )
        for i, e in enumerate(batch, start=1):
            letters_i = parsed.get(i, [])
            if not cfg.allow_multi_code and len(letters_i) > 1:
                letters_i = letters_i[:1]
            assignments[e.id] = (letters_i, False)

    if cfg.force_assign:
        freq: dict[str, int] = {c: 0 for c in letters}
        for ls, _ in assignments.values():
            for letter in ls:
                freq[letter] += 1
        fallback_letter = max(letters, key=lambda c: (freq[c], -letters.index(c)))
        for eid, (ls, _) in list(assignments.items()):
            if not ls:
                assignments[eid] = ([fallback_letter], True)
                result.failures.append(
                    {"stage": "force_assign", "excerpt": eid,
                     "warning": f"fallback to most frequent sibling {fallback_letter}"}
                )

    for e in excerpts:
        ls, is_fallback = assignments[e.id]
        for letter in letters:
            result.annotations.append(
                Annotation(
                    excerpt_id=e.id,
                    code_id=by_letter[letter].id,
                    rater=rater,
                    positive=letter in ls,
                    run_id=run_id,
                    created_at=created_at,
                    fallback=is_fallback and letter in ls,
                )
            )
    return result


@dataclass
class FeedbackIteration:
    iteration: int
    kappa: float
    total_examples: int
    fp_added: list[str] = field(default_factory=list)
    fn_added: list[str] = field(default_factory=list)
    annotations: list[Annotation] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "kappa": self.kappa,
            "total_examples": self.total_examples,
            "fp_added": self.fp_added,
            "fn_added": self.fn_added,
        }


def feedback_iterate(
    gateway: Gateway,
    code: Code,
    excerpts: Sequence[Excerpt],
    gold: dict[str, bool],
    cfg: CodingConfig,
    iterations: int = 6,
    errors_per_iter: tuple[int, int] = (2, 2),
    run_id: str = "feedback",
    created_at: str = "",
    codebook: Optional[Codebook] = None,
) -> tuple[list[FeedbackIteration], Code]:
    """Iteratively feed coding errors back as few-shot examples.

    The baseline pass seeds the pools with four random gold examples;
    every later pass appends up to 2 false positives (as negative
    examples) and 2 false negatives (as positive examples) drawn from the
    previous pass's disagreements, then re-codes all non-example
    excerpts. Kappa per iteration is computed afterwards on the excerpts
    that were never used as examples.
    """
    if iterations > 6:
        raise ValidationError("iterations capped at 6")
    missing = [e.id for e in excerpts if e.id not in gold]
    if missing:
        raise ValidationError(f"gold labels missing for {len(missing)} excerpts")

    rng = np.random.default_rng(cfg.seed)
    work = copy.deepcopy(code)
    by_id = {e.id: e for e in excerpts}

    positives = [e.id for e in excerpts if gold[e.id]]
    negatives = [e.id for e in excerpts if not gold[e.id]]
    if len(positives) < 2 or len(negatives) < 2:
        raise ValidationError("need at least 2 gold positives and 2 gold negatives")

    def draw(pool: list[str], k: int) -> list[str]:
        k = min(k, len(pool))
        idx = sorted(rng.choice(len(pool), size=k, replace=False))
        return [pool[i] for i in idx]

    example_ids: set[str] = set()
    seed_pos = draw(positives, 2)
    seed_neg = draw(negatives, 2)
    for eid in seed_pos:
        work.positive_examples.append(by_id[eid].text)
    for eid in seed_neg:
        work.negative_examples.append(by_id[eid].text)
    example_ids.update(seed_pos + seed_neg)

    history: list[FeedbackIteration] = []
    for it in range(iterations + 1):
        if it > 0:
            prev = history[-1].annotations
            fps = [a.excerpt_id for a in prev
                   if a.positive and not gold[a.excerpt_id]]
            fns = [a.excerpt_id for a in prev
                   if not a.positive and gold[a.excerpt_id]]
            if not fps and not fns:
                break  # aligned; further iterations change nothing
            fp_pick = draw(fps, errors_per_iter[0])
            fn_pick = draw(fns, errors_per_iter[1])
            for eid in fp_pick:
                work.negative_examples.append(by_id[eid].text)
            for eid in fn_pick:
                work.positive_examples.append(by_id[eid].text)
            example_ids.update(fp_pick + fn_pick)
        else:
            fp_pick, fn_pick = [], []

        target = [e for e in excerpts if e.id not in example_ids]
        res = apply_code(
            gateway, work, target, cfg, run_id=f"{run_id}-{it}",
            created_at=created_at, codebook=codebook, use_all_examples=True,
        )
        history.append(
            FeedbackIteration(
                iteration=it,
                kappa=float("nan"),
                total_examples=len(work.positive_examples) + len(work.negative_examples),
                fp_added=fp_pick,
                fn_added=fn_pick,
                annotations=res.annotations,
            )
        )

    eval_ids = [e.id for e in excerpts if e.id not in example_ids]
    gold_vec = [1 if gold[eid] else 0 for eid in eval_ids]
    for rec in history:
        by_excerpt = {a.excerpt_id: a for a in rec.annotations}
        pred_vec = [1 if by_excerpt[eid].positive else 0 for eid in eval_ids]
        rec.kappa = cohen_kappa(pred_vec, gold_vec)
    return history, work
