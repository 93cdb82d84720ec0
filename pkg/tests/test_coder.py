from __future__ import annotations

import json
import math
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_excerpts
from qcoder.coder import (
    BINARY,
    BINARY_LOGPROB,
    DISCRETIZED,
    CodingConfig,
    DistributeConfig,
    apply_code,
    distribute_code,
    extract_yes_no_logprobs,
    feedback_iterate,
    render_apply_prompt,
    render_distribute_prompt,
    rethreshold,
    round_half_up,
    score_from_logprobs,
)
from qcoder.errors import ParseError, ValidationError
from qcoder.gateway import ChatResponse, Gateway, RuleBackend
from qcoder.models import Annotation, Code, Codebook

STATEMENT_RE = re.compile(r'(?m)^(\d+)\. (?:\(Context: .*\)\n\s+)?"(.*)"$')


def statements(prompt: str) -> dict[int, str]:
    # skip the template's worked example; the real batch follows the last
    # statements header
    for header in ("#### Statements to Evaluate", "STATEMENTS:"):
        if header in prompt:
            prompt = prompt.rsplit(header, 1)[1]
            break
    return {int(n): text for n, text in STATEMENT_RE.findall(prompt)}


def scoring_rule(score_fn, cot=True):
    def rule(req):
        out = {}
        for n, text in statements(req.user_prompt).items():
            s = score_fn(text)
            out[str(n)] = {"REASONING": "because", "SCORE": s} if cot else {"SCORE": s}
        return json.dumps(out)

    return rule


def solar_score(text: str) -> int:
    return 9 if "solar" in text else 2


def make_code(**kw):
    defaults = dict(id="c1", name="solar power", definition="mentions solar energy")
    defaults.update(kw)
    return Code(**defaults)


class TestRoundHalfUp:
    def test_halves_round_up(self):
        assert round_half_up(0.5) == 1
        assert round_half_up(1.5) == 2
        assert round_half_up(2.5) == 3
        assert round_half_up(2.4) == 2


class TestScoreFromLogprobs:
    def test_equal_logprobs_give_six(self):
        # p_yes = 0.5 -> 1 + 4.5 = 5.5 -> rounds half-up to 6
        assert score_from_logprobs(-1.0, -1.0) == 6
        assert score_from_logprobs(0.0, 0.0, temperature=3.0) == 6

    def test_confident_yes_gives_ten(self):
        assert score_from_logprobs(0.0, -20.0) == 10

    def test_confident_no_gives_one(self):
        assert score_from_logprobs(-20.0, 0.0) == 1

    def test_hand_derived_interior_point(self):
        # p_yes = 1/(1+e^-2.197) ~= 0.900 -> 1 + 9*0.900 = 9.1 -> 9
        assert score_from_logprobs(0.0, -2.197, temperature=1.0) == 9

    def test_temperature_softens(self):
        sharp = score_from_logprobs(0.0, -2.197, temperature=1.0)
        soft = score_from_logprobs(0.0, -2.197, temperature=10.0)
        assert soft < sharp

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-30, 30), st.floats(-30, 30), st.floats(0.1, 10))
    def test_bounded_and_monotone_in_gap(self, yes, no, t):
        s = score_from_logprobs(yes, no, t)
        assert 1 <= s <= 10
        assert score_from_logprobs(yes + 1.0, no, t) >= s

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            score_from_logprobs(0.0, 0.0, temperature=0)
        with pytest.raises(ValueError):
            score_from_logprobs(float("nan"), 0.0)


def test_extract_yes_no_logprobs():
    tokens = [("The", -3.0), (" Yes", -0.1), ("No", -2.3)]
    assert extract_yes_no_logprobs(tokens) == (-0.1, -2.3)
    with pytest.raises(ParseError, match="token extraction failed"):
        extract_yes_no_logprobs([("Yes", -0.1)])
    with pytest.raises(ParseError):
        extract_yes_no_logprobs(None)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValidationError):
            CodingConfig(batch_size=0)
        with pytest.raises(ValidationError):
            CodingConfig(threshold=11)
        with pytest.raises(ValidationError):
            CodingConfig(scoring="fuzzy")


class TestRenderApplyPrompt:
    def test_contains_code_and_statements(self):
        code = make_code(inclusion_criteria=["direct mentions"],
                         exclusion_criteria=["metaphors"],
                         positive_examples=["we put up solar panels"],
                         negative_examples=["the sun was bright"])
        excerpts = make_excerpts(["first thing", "second thing"])
        prompt = render_apply_prompt(code, excerpts, CodingConfig())
        assert "solar power" in prompt
        assert "mentions solar energy" in prompt
        assert "direct mentions" in prompt and "metaphors" in prompt
        assert '"we put up solar panels"' in prompt
        assert '1. "first thing"' in prompt and '2. "second thing"' in prompt
        assert "REASONING" in prompt and "SCORE" in prompt

    def test_context_line_rendered(self):
        excerpts = make_excerpts(["answer text"])
        excerpts[0].preceding_context = "What changed?"
        prompt = render_apply_prompt(make_code(), excerpts, CodingConfig())
        assert "(Context: ...What changed?)" in prompt
        assert statements(prompt) == {1: "answer text"}

    def test_no_cot_drops_reasoning(self):
        prompt = render_apply_prompt(make_code(), make_excerpts(["x"]),
                                     CodingConfig(cot=False))
        instructions = prompt.split("### Output Instructions", 1)[1].split("---")[0]
        assert "REASONING" not in instructions
        assert '"SCORE"' in instructions

    def test_binary_instructions(self):
        prompt = render_apply_prompt(make_code(), make_excerpts(["x"]),
                                     CodingConfig(scoring=BINARY))
        assert '"Yes" or "No"' in prompt or "ANSWER" in prompt

    def test_few_shot_subsample_is_seeded(self):
        code = make_code(positive_examples=[f"pos {i}" for i in range(10)])
        cfg = CodingConfig(few_shot_positive=4, seed=3)
        p1 = render_apply_prompt(code, make_excerpts(["x"]), cfg)
        p2 = render_apply_prompt(code, make_excerpts(["x"]), cfg)
        assert p1 == p2
        assert len(re.findall(r'"pos \d+"', p1)) == 4
        full = render_apply_prompt(code, make_excerpts(["x"]), cfg,
                                   use_all_examples=True)
        assert len(re.findall(r'"pos \d+"', full)) == 10

    def test_hierarchy_context(self):
        cb = Codebook(id="cb", codes=[
            Code(id="root", name="energy"),
            Code(id="c1", name="solar power", parent_id="root"),
        ])
        prompt = render_apply_prompt(cb.codes[1], make_excerpts(["x"]),
                                     CodingConfig(), codebook=cb)
        assert "(Hierarchy: energy -> solar power)" in prompt


class TestApplyCodeDiscretized:
    def run(self, texts, cfg=None, rule=None):
        gw = Gateway(backend=RuleBackend(rule or scoring_rule(solar_score)))
        cfg = cfg or CodingConfig()
        return apply_code(gw, make_code(), make_excerpts(texts), cfg, run_id="r"), gw

    def test_scores_and_positive_flags(self):
        texts = ["solar on the roof", "bike lanes", "more solar", "potholes"]
        result, _ = self.run(texts)
        assert [a.score for a in result.annotations] == [9, 2, 9, 2]
        assert [a.positive for a in result.annotations] == [True, False, True, False]
        assert all(a.rater == "model:default" for a in result.annotations)
        assert all(a.reasoning == "because" for a in result.annotations)
        assert result.failures == []
        assert len(result.request_hashes) == 1

    def test_batch_size_invariance(self):
        texts = [f"text {i} {'solar' if i % 3 == 0 else 'other'}" for i in range(10)]
        scores = {}
        for bs in (1, 4, 10):
            result, _ = self.run(texts, cfg=CodingConfig(batch_size=bs))
            scores[bs] = [a.score for a in result.annotations]
        assert scores[1] == scores[4] == scores[10]

    def test_threshold_applied(self):
        result, _ = self.run(["solar"], cfg=CodingConfig(threshold=10))
        assert result.annotations[0].score == 9
        assert result.annotations[0].positive is False

    def test_reprompt_recovers(self):
        calls = {"n": 0}
        good = scoring_rule(solar_score)

        def flaky(req):
            calls["n"] += 1
            if calls["n"] == 1:
                return "sorry, I cannot"
            assert "previous response was malformed" in req.user_prompt
            return good(req)

        result, gw = self.run(["solar here", "nothing"], rule=flaky)
        assert [a.score for a in result.annotations] == [9, 2]
        assert calls["n"] == 2
        assert len(result.request_hashes) == 2

    def test_degraded_to_single_then_failed(self):
        good = scoring_rule(solar_score)

        def poisoned(req):
            if "poison" in req.user_prompt:
                return "not json"
            return good(req)

        result, _ = self.run(["solar a", "poison b", "plain c"], rule=poisoned)
        by_id = {a.excerpt_id: a for a in result.annotations}
        assert by_id["d0:0"].score == 9 and not by_id["d0:0"].failed
        assert by_id["d0:2"].score == 2 and not by_id["d0:2"].failed
        assert by_id["d0:1"].failed and by_id["d0:1"].score is None
        assert not by_id["d0:1"].positive
        stages = [f["stage"] for f in result.failures]
        assert "batch" in stages and "single" in stages

    def test_rejects_empty_inputs(self):
        gw = Gateway(backend=RuleBackend(scoring_rule(solar_score)))
        with pytest.raises(ValidationError):
            apply_code(gw, make_code(), [], CodingConfig(), run_id="r")
        with pytest.raises(ValueError):
            make_code(name="")


class TestApplyCodeBinary:
    def test_yes_no_answers(self):
        def rule(req):
            return json.dumps({str(n): ("Yes" if "solar" in t else "No")
                               for n, t in statements(req.user_prompt).items()})

        gw = Gateway(backend=RuleBackend(rule))
        result = apply_code(gw, make_code(), make_excerpts(["solar", "bus"]),
                            CodingConfig(scoring=BINARY, cot=False), run_id="r")
        assert [a.positive for a in result.annotations] == [True, False]
        assert all(a.score is None for a in result.annotations)


class LogprobBackend:
    deterministic = True

    def __init__(self):
        self.calls = []

    def chat(self, req):
        self.calls.append(req)
        assert req.want_logprobs and req.response_shape == "free_text"
        (text,) = statements(req.user_prompt).values()
        gap = 2.197 if "solar" in text else -2.197
        return ChatResponse(text="Yes" if gap > 0 else "No",
                            token_logprobs=[("Yes", -0.105 if gap > 0 else -2.302),
                                            ("No", -2.302 if gap > 0 else -0.105)])

    def embed(self, texts, model):
        return [[1.0]] * len(texts)


class TestApplyCodeLogprob:
    def test_scores_from_token_probabilities(self):
        backend = LogprobBackend()
        gw = Gateway(backend=backend)
        result = apply_code(gw, make_code(), make_excerpts(["solar", "cars"]),
                            CodingConfig(scoring=BINARY_LOGPROB, batch_size=4),
                            run_id="r")
        # e^-0.105 ~= 0.900 -> score 9; complement -> score 2
        assert [a.score for a in result.annotations] == [9, 2]
        assert [a.positive for a in result.annotations] == [True, False]
        # logprob scoring always runs one statement per call
        assert len(backend.calls) == 2


class TestEnsemble:
    def test_mean_score_round_half_up(self):
        def rule(req):
            score = 9 if req.model == "m1" else 2
            return json.dumps({str(n): {"REASONING": "r", "SCORE": score}
                               for n in statements(req.user_prompt)})

        gw = Gateway(backend=RuleBackend(rule))
        cfg = CodingConfig(models=["m1", "m2"])
        result = apply_code(gw, make_code(), make_excerpts(["x"]), cfg, run_id="r")
        (a,) = result.annotations
        # mean(9, 2) = 5.5 -> 6
        assert a.score == 6
        assert a.positive is False
        assert a.rater == "ensemble:m1+m2"

    def test_ensemble_survives_one_failed_member(self):
        def rule(req):
            if req.model == "bad":
                return "garbage"
            return json.dumps({str(n): {"REASONING": "r", "SCORE": 8}
                               for n in statements(req.user_prompt)})

        gw = Gateway(backend=RuleBackend(rule))
        cfg = CodingConfig(models=["good", "bad"])
        result = apply_code(gw, make_code(), make_excerpts(["x"]), cfg, run_id="r")
        (a,) = result.annotations
        assert a.score == 8 and a.positive and not a.failed


class TestRethreshold:
    def ann(self, score, positive=None):
        return Annotation(excerpt_id=f"e{score}", code_id="c", rater="model:m",
                          positive=positive if positive is not None else score >= 8,
                          score=score, run_id="r", created_at="")

    def test_flips_follow_scores(self):
        rows = [self.ann(9), self.ann(8), self.ann(3), self.ann(2)]
        out, warnings = rethreshold(rows, 9)
        assert [a.positive for a in out] == [True, False, False, False]
        assert warnings == []

    def test_originals_not_mutated(self):
        rows = [self.ann(9)]
        rethreshold(rows, 10)
        assert rows[0].positive is True

    def test_unscored_passthrough_with_warning(self):
        unscored = Annotation(excerpt_id="e", code_id="c", rater="model:m",
                              positive=True, run_id="r", created_at="")
        out, warnings = rethreshold([unscored], 5)
        assert out == [unscored]
        assert len(warnings) == 1

    def test_threshold_range(self):
        with pytest.raises(ValidationError):
            rethreshold([], 0)


SIBLINGS = [
    Code(id="s-a", name="costs", definition="money and fees"),
    Code(id="s-b", name="safety", definition="physical safety"),
    Code(id="s-c", name="noise", definition="sound complaints"),
]


def assignment_rule(mapping):
    """mapping: statement-text keyword -> list of letters."""

    def rule(req):
        out = {}
        for n, text in statements(req.user_prompt).items():
            letters = []
            for kw, ls in mapping.items():
                if kw in text:
                    letters = ls
            out[str(n)] = letters
        return json.dumps(out)

    return rule


class TestDistribute:
    def test_prompt_lists_subthemes_with_letters(self):
        parent = Code(id="p", name="complaints", definition="resident complaints")
        prompt = render_distribute_prompt(parent, SIBLINGS, make_excerpts(["x"]),
                                          DistributeConfig())
        assert "complaints: resident complaints" in prompt
        assert "- A. costs: money and fees" in prompt
        assert "- B. safety" in prompt and "- C. noise" in prompt

    def test_multi_label_assignments(self):
        rule = assignment_rule({"toll": ["A"], "crosswalk": ["B"],
                                "loud": ["A", "C"], "mural": []})
        gw = Gateway(backend=RuleBackend(rule))
        excerpts = make_excerpts(["toll hike", "crosswalk faded",
                                  "loud and pricey", "mural art"])
        result = distribute_code(gw, None, SIBLINGS, excerpts,
                                 DistributeConfig(), run_id="r")
        assert len(result.annotations) == 4 * 3
        pos = {(a.excerpt_id, a.code_id) for a in result.annotations if a.positive}
        assert pos == {("d0:0", "s-a"), ("d0:1", "s-b"),
                       ("d0:2", "s-a"), ("d0:2", "s-c")}

    def test_single_mode_truncates_after_reprompt(self):
        calls = {"n": 0}
        rule = assignment_rule({"loud": ["A", "C"]})

        def counting(req):
            calls["n"] += 1
            return rule(req)

        gw = Gateway(backend=RuleBackend(counting))
        result = distribute_code(gw, None, SIBLINGS, make_excerpts(["loud place"]),
                                 DistributeConfig(allow_multi_code=False), run_id="r")
        assert calls["n"] == 2  # violation triggered one re-prompt
        pos = [a.code_id for a in result.annotations if a.positive]
        assert pos == ["s-a"]  # persisting violation truncated to first letter

    def test_force_assign_falls_back_to_most_frequent(self):
        rule = assignment_rule({"toll": ["A"], "fee": ["A"], "crosswalk": ["B"]})
        gw = Gateway(backend=RuleBackend(rule))
        excerpts = make_excerpts(["toll", "fee", "crosswalk", "mystery"])
        result = distribute_code(gw, None, SIBLINGS, excerpts,
                                 DistributeConfig(force_assign=True), run_id="r")
        fallback = [a for a in result.annotations
                    if a.excerpt_id == "d0:3" and a.positive]
        assert [a.code_id for a in fallback] == ["s-a"]
        assert fallback[0].fallback
        assert any(f["stage"] == "force_assign" for f in result.failures)
        # organically assigned rows are never flagged
        organic = [a for a in result.annotations
                   if a.positive and a.excerpt_id != "d0:3"]
        assert not any(a.fallback for a in organic)

    def test_parse_failure_yields_no_assignments(self):
        gw = Gateway(backend=RuleBackend(lambda r: "nope"))
        result = distribute_code(gw, None, SIBLINGS, make_excerpts(["x"]),
                                 DistributeConfig(), run_id="r")
        assert all(not a.positive for a in result.annotations)
        assert result.failures

    def test_needs_two_siblings(self):
        gw = Gateway(backend=RuleBackend(lambda r: "{}"))
        with pytest.raises(ValidationError):
            distribute_code(gw, None, SIBLINGS[:1], make_excerpts(["x"]),
                            DistributeConfig(), run_id="r")


class TestFeedback:
    def corpus(self):
        """Four strata: alpha/delta are gold-positive, gamma/omega gold-negative."""
        kinds = ["alpha", "delta", "gamma", "omega"]
        texts = [f"statement {i} mentions {kinds[i % 4]} things" for i in range(64)]
        excerpts = make_excerpts(texts)
        gold = {e.id: i % 4 < 2 for i, e in enumerate(excerpts)}
        return excerpts, gold

    def improving_rule(self):
        """A coder that over-fires on 'gamma' and misses 'delta' until
        enough corrective examples accumulate in the few-shot pools."""

        def rule(req):
            task = req.user_prompt.rsplit("### Task Instructions", 1)[1]
            pos_block, rest = task.split("Untagged Examples (Irrelevant Statements):")
            neg_block = rest.split("#### Statements to Evaluate")[0]
            out = {}
            for n, text in statements(req.user_prompt).items():
                positive = ("alpha" in text
                            or ("delta" in text and pos_block.count("delta") >= 3)
                            or ("gamma" in text and neg_block.count("gamma") < 4))
                out[str(n)] = {"REASONING": "r", "SCORE": 9 if positive else 2}
            return json.dumps(out)

        return rule

    def test_examples_accumulate_and_kappa_improves(self):
        excerpts, gold = self.corpus()
        gw = Gateway(backend=RuleBackend(self.improving_rule()))
        history, tuned = feedback_iterate(
            gw, make_code(), excerpts, gold, CodingConfig(seed=0), iterations=6)
        assert history[0].total_examples == 4
        # every later iteration adds at most 2 FPs + 2 FNs
        for prev, cur in zip(history, history[1:]):
            assert cur.total_examples - prev.total_examples <= 4
            assert len(cur.fp_added) <= 2 and len(cur.fn_added) <= 2
        assert history[-1].kappa > history[0].kappa
        assert history[-1].kappa == 1.0
        # the mistake surface is folded into the code's example pools
        assert any("gamma" in t for t in tuned.negative_examples)

    def test_full_budget_reaches_28_examples(self):
        excerpts, gold = self.corpus()

        def incorrigible(req):
            # persistent errors regardless of examples: fires on every
            # gamma/omega negative, misses every delta positive
            out = {}
            for n, text in statements(req.user_prompt).items():
                positive = "alpha" in text or "gamma" in text or "omega" in text
                out[str(n)] = {"REASONING": "r", "SCORE": 9 if positive else 2}
            return json.dumps(out)

        gw = Gateway(backend=RuleBackend(incorrigible))
        history, tuned = feedback_iterate(
            gw, make_code(), excerpts, gold, CodingConfig(seed=1), iterations=6)
        assert len(history) == 7  # baseline + 6 feedback passes
        assert history[-1].total_examples == 28
        assert (len(tuned.positive_examples) + len(tuned.negative_examples)) == 28

    def test_early_stop_when_aligned(self):
        excerpts, gold = self.corpus()

        def perfect(req):
            out = {}
            for n, text in statements(req.user_prompt).items():
                hit = "alpha" in text or "delta" in text
                out[str(n)] = {"REASONING": "r", "SCORE": 9 if hit else 2}
            return json.dumps(out)

        gw = Gateway(backend=RuleBackend(perfect))
        history, _ = feedback_iterate(gw, make_code(), excerpts, gold,
                                      CodingConfig(seed=0), iterations=6)
        assert len(history) == 1
        assert history[0].kappa == 1.0

    def test_kappa_excludes_all_example_excerpts(self):
        excerpts, gold = self.corpus()
        gw = Gateway(backend=RuleBackend(self.improving_rule()))
        history, _ = feedback_iterate(gw, make_code(), excerpts, gold,
                                      CodingConfig(seed=0), iterations=2)
        used = set()
        for rec in history:
            used.update(rec.fp_added)
            used.update(rec.fn_added)
        final_ids = {a.excerpt_id for a in history[-1].annotations}
        assert used.isdisjoint(final_ids)

    def test_validates_inputs(self):
        excerpts, gold = self.corpus()
        gw = Gateway(backend=RuleBackend(lambda r: "{}"))
        with pytest.raises(ValidationError, match="capped"):
            feedback_iterate(gw, make_code(), excerpts, gold, CodingConfig(),
                             iterations=7)
        with pytest.raises(ValidationError, match="gold labels missing"):
            feedback_iterate(gw, make_code(), excerpts, {}, CodingConfig())
