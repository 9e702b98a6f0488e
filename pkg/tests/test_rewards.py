"""Reward scoring: subscores, aggregation, and the pluggable judges."""

import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partscope import rewards as rw
from partscope.parts import NUM_PARTS, PartId, PartMaskSet
from partscope.transcript import get_vocab, parse

V = get_vocab()


def toks(text: str) -> list[int]:
    return V.encode(text)


def mask_set(present=()) -> PartMaskSet:
    masks = np.zeros((NUM_PARTS, 4, 4))
    for p in present:
        masks[int(p), 0, 0] = 1.0
    return PartMaskSet(masks)


ALL_PRESENT = mask_set(tuple(PartId))
NONE_PRESENT = mask_set()


def plan_exam_tokens(planned, examined, answer="FAKE") -> list[int]:
    """A structurally complete transcript planning `planned` and examining `examined`."""
    words = ["<BOS>", "<global_evidence>", "elevated", "energy", "</global_evidence>", "<planning>"]
    words += [f"<P_{p.name}>" for p in sorted(planned)]
    words.append("</planning>")
    words.append("<part_evidence>")
    for p in sorted(examined):
        words += [f"<P_{p.name}>", "texture", "detail"]
    words.append("</part_evidence>")
    words += ["<conclusion>", "verdict", "</conclusion>", "<answer>", answer, "</answer>", "<EOS>"]
    return toks(" ".join(words))


# A fully well-formed fake-verdict transcript whose evidence carries two
# anomaly keywords ("periodic", "artifact") and one clean keyword ("natural").
FAKE_TOKENS = toks(
    "<BOS> <global_evidence> <EVIDENCE_SUMMARY> the spectrum shows elevated energy "
    "</global_evidence> <planning> <P_NOSE> <P_MOUTH> </planning> "
    "<part_evidence> <P_NOSE> strong periodic artifact residual "
    "<P_MOUTH> texture appears natural </part_evidence> "
    "<conclusion> evidence indicates a manipulated image </conclusion> "
    "<answer> FAKE </answer> <EOS>"
)


# ---------------------------------------------------------------------------
# Oracles


def f1_oracle(planned: frozenset, examined: frozenset) -> float:
    """Harmonic mean of precision and recall in exact rational arithmetic.

    Independent of the implementation's closed form; empty intersection
    (including both sets empty) scores 0 by definition.
    """
    overlap = len(planned & examined)
    if overlap == 0:
        return 0.0
    precision = Fraction(overlap, len(examined))
    recall = Fraction(overlap, len(planned))
    return float(2 * precision * recall / (precision + recall))


def bits_to_parts(bits: int) -> frozenset:
    return frozenset(p for p in PartId if bits >> int(p) & 1)


ALL_SUBSETS = [bits_to_parts(b) for b in range(1 << NUM_PARTS)]

part_sets = st.frozensets(st.sampled_from(list(PartId)), max_size=NUM_PARTS)


# ---------------------------------------------------------------------------
# Plan/evidence F1


class TestPartSetF1:
    def test_matches_exhaustive_enumeration(self):
        for planned in ALL_SUBSETS:
            for examined in ALL_SUBSETS:
                got = rw.part_set_f1(planned, examined)
                assert got == f1_oracle(planned, examined), (planned, examined)

    def test_both_empty_scores_zero(self):
        assert rw.part_set_f1(frozenset(), frozenset()) == 0.0

    def test_half_overlap(self):
        planned = {PartId.LEFT_EYE, PartId.NOSE}
        examined = {PartId.LEFT_EYE, PartId.MOUTH}
        assert rw.part_set_f1(planned, examined) == 0.5

    def test_symmetry(self):
        for planned in (frozenset({PartId.NOSE}), frozenset({PartId.NOSE, PartId.HAIR})):
            for examined in (frozenset(), frozenset({PartId.HAIR, PartId.MOUTH})):
                assert rw.part_set_f1(planned, examined) == rw.part_set_f1(examined, planned)


# ---------------------------------------------------------------------------
# Accuracy


class TestAccuracyReward:
    def test_correct_answer(self):
        t = parse(FAKE_TOKENS)
        assert rw.accuracy_reward(t, "FAKE") == 1.0

    def test_wrong_answer(self):
        t = parse(FAKE_TOKENS)
        assert rw.accuracy_reward(t, "REAL") == 0.0

    def test_malformed_answer(self):
        t = parse(toks("<BOS> the image <EOS>"))
        assert t.answer == "MALFORMED"
        assert rw.accuracy_reward(t, "FAKE") == 0.0
        assert rw.accuracy_reward(t, "REAL") == 0.0

    def test_invalid_label_rejected(self):
        t = parse(FAKE_TOKENS)
        with pytest.raises(ValueError):
            rw.accuracy_reward(t, "MALFORMED")


# ---------------------------------------------------------------------------
# Part-grounding subscores


class TestPartReward:
    def test_perfect_plan(self):
        t = parse(plan_exam_tokens({PartId.NOSE, PartId.MOUTH}, {PartId.NOSE, PartId.MOUTH}))
        scores = rw.part_reward(t, mask_set({PartId.NOSE, PartId.MOUTH}))
        assert scores.f1 == 1.0
        assert scores.existence_rate == 1.0
        assert scores.quantity_penalty == 0.0
        assert scores.value == 1.0

    def test_half_overlap_f1(self):
        t = parse(plan_exam_tokens({PartId.LEFT_EYE, PartId.NOSE}, {PartId.LEFT_EYE, PartId.MOUTH}))
        scores = rw.part_reward(t, ALL_PRESENT)
        assert scores.f1 == 0.5

    def test_fabricated_region_halves_score(self):
        # Planned and examined agree on HAIR, but the hair mask is empty.
        t = parse(plan_exam_tokens({PartId.HAIR}, {PartId.HAIR}))
        scores = rw.part_reward(t, mask_set({PartId.NOSE}))
        assert scores.f1 == 1.0
        assert scores.existence_rate == 0.0
        assert scores.value == 0.5

    def test_empty_plan_scores_zero(self):
        t = parse(plan_exam_tokens(set(), {PartId.NOSE}))
        scores = rw.part_reward(t, ALL_PRESENT)
        assert scores.f1 == 0.0
        assert scores.existence_rate == 0.0
        assert scores.value == 0.0

    def test_quantity_penalty_beyond_budget(self):
        six = set(list(PartId)[:6])
        t = parse(plan_exam_tokens(six, six))
        scores = rw.part_reward(t, ALL_PRESENT)
        assert scores.quantity_penalty == pytest.approx(0.2, abs=1e-12)
        assert scores.value == pytest.approx(0.8, abs=1e-12)

    def test_penalty_clamps_at_zero(self):
        # Eight planned parts, none examined, none present: raw score is
        # negative (0 + 0 - 0.4) and must clamp to 0.
        t = parse(plan_exam_tokens(set(PartId), set()))
        scores = rw.part_reward(t, NONE_PRESENT)
        assert scores.quantity_penalty == pytest.approx(0.4, abs=1e-12)
        assert scores.value == 0.0

    def test_partial_existence_rate(self):
        planned = {PartId.NOSE, PartId.MOUTH, PartId.HAIR, PartId.FACE_CONTOUR}
        t = parse(plan_exam_tokens(planned, planned))
        scores = rw.part_reward(t, mask_set({PartId.NOSE, PartId.FACE_CONTOUR}))
        assert scores.existence_rate == 0.5
        assert scores.value == pytest.approx(0.75, abs=1e-12)

    @settings(max_examples=300, deadline=None)
    @given(planned=part_sets, examined=part_sets, present=part_sets)
    def test_value_always_in_unit_interval(self, planned, examined, present):
        t = parse(plan_exam_tokens(planned, examined))
        scores = rw.part_reward(t, mask_set(present))
        assert 0.0 <= scores.value <= 1.0

    @settings(max_examples=300, deadline=None)
    @given(planned=part_sets, examined=part_sets, present=part_sets,
           extra=st.sampled_from(list(PartId)))
    def test_planning_an_absent_unexamined_part_never_helps(
        self, planned, examined, present, extra
    ):
        # "Absent" meaning: no mask pixels and never examined.  (Planning an
        # *examined* empty-mask part can raise F1; the existence term is what
        # pushes back, per the fabricated-region example above.)
        examined = examined - {extra}
        present = present - {extra}
        base = rw.part_reward(parse(plan_exam_tokens(planned - {extra}, examined)),
                              mask_set(present))
        widened = rw.part_reward(parse(plan_exam_tokens(planned | {extra}, examined)),
                                 mask_set(present))
        assert widened.value <= base.value + 1e-12


# ---------------------------------------------------------------------------
# Judges


class FixedJudge:
    def __init__(self, verdict: str):
        self._verdict = verdict

    def verdict(self, evidence: str) -> str:
        return self._verdict


class RaisingJudge:
    def verdict(self, evidence: str) -> str:
        raise rw.JudgeError("judge offline")


class TestMockJudge:
    def test_two_anomaly_keywords_is_fake(self):
        assert rw.MockJudge().verdict("frequency anomaly boundary artifact") == "FAKE"

    def test_clean_keywords_is_real(self):
        assert rw.MockJudge().verdict("smooth natural texture overall") == "REAL"

    def test_empty_evidence_abstains(self):
        assert rw.MockJudge().verdict("") == "ABSTAIN"

    def test_single_signal_abstains(self):
        assert rw.MockJudge().verdict("one artifact near the nose") == "ABSTAIN"
        assert rw.MockJudge().verdict("looks natural to me") == "ABSTAIN"

    def test_anomaly_signals_take_precedence(self):
        text = "artifact seam but smooth natural skin"
        assert rw.MockJudge().verdict(text) == "FAKE"

    def test_unknown_words_are_ignored(self):
        assert rw.MockJudge().verdict("lorem ipsum dolor sit amet") == "ABSTAIN"

    def test_repeated_keyword_counts(self):
        assert rw.MockJudge().verdict("artifact upon artifact") == "FAKE"

    def test_deterministic(self):
        text = "periodic banding near the mouth"
        verdicts = {rw.MockJudge().verdict(text) for _ in range(5)}
        assert verdicts == {"FAKE"}


class TestRecordedJudge:
    def test_replays_recorded_verdicts(self, tmp_path):
        path = tmp_path / "judge.jsonl"
        texts = ["frequency anomaly boundary artifact", "smooth natural texture overall", ""]
        rw.record_judge_responses(path, rw.MockJudge(), texts)
        replay = rw.RecordedJudge(path)
        live = rw.MockJudge()
        for text in texts:
            assert replay.verdict(text) == live.verdict(text)

    def test_missing_entry_is_a_transport_error(self, tmp_path):
        path = tmp_path / "judge.jsonl"
        rw.record_judge_responses(path, rw.MockJudge(), ["smooth natural texture"])
        with pytest.raises(rw.JudgeError):
            rw.RecordedJudge(path).verdict("never recorded")

    def test_recording_dedupes_by_content(self, tmp_path):
        path = tmp_path / "judge.jsonl"
        rw.record_judge_responses(path, rw.MockJudge(), ["smooth natural", "smooth natural"])
        rw.record_judge_responses(path, rw.MockJudge(), ["smooth natural"])
        lines = [l for l in path.read_text().splitlines() if l.strip()]
        assert len(lines) == 1

    def test_corrupt_verdict_rejected(self, tmp_path):
        path = tmp_path / "judge.jsonl"
        key = rw.evidence_key("whatever text")
        path.write_text(json.dumps({"sha256": key, "verdict": "MAYBE"}) + "\n")
        with pytest.raises(rw.JudgeError):
            rw.RecordedJudge(path).verdict("whatever text")


# ---------------------------------------------------------------------------
# Evidence-only text


class TestEvidenceText:
    def test_conclusion_and_answer_stripped(self):
        text = rw.evidence_text(parse(FAKE_TOKENS))
        assert "manipulated" not in text
        assert "FAKE" not in text
        assert "periodic" in text and "artifact" in text
        assert "<P_NOSE>" in text

    def test_structural_tags_dropped(self):
        text = rw.evidence_text(parse(FAKE_TOKENS))
        assert "<global_evidence>" not in text
        assert "</part_evidence>" not in text

    def test_prompt_prefix_excluded(self):
        prompt = toks("<BOS> inspect this face")
        t = parse(prompt + FAKE_TOKENS[1:])
        text = rw.evidence_text(t)
        assert "inspect" not in text
        assert "periodic" in text

    def test_planning_tokens_included(self):
        text = rw.evidence_text(parse(FAKE_TOKENS))
        assert "<P_MOUTH>" in text


# ---------------------------------------------------------------------------
# Consistency reward


class TestConsistencyReward:
    @pytest.mark.parametrize("judge_verdict", ["REAL", "FAKE"])
    @pytest.mark.parametrize("y_hat", ["REAL", "FAKE"])
    @pytest.mark.parametrize("y", ["REAL", "FAKE"])
    def test_indicator_product_truth_table(self, judge_verdict, y_hat, y):
        t = parse(toks(f"<answer> {y_hat} </answer>"))
        expected = 1.0 if judge_verdict == y_hat == y else 0.0
        assert rw.consistency_reward(t, y, FixedJudge(judge_verdict)) == expected

    @pytest.mark.parametrize("y", ["REAL", "FAKE"])
    def test_abstain_scores_zero(self, y):
        t = parse(toks(f"<answer> {y} </answer>"))
        assert rw.consistency_reward(t, y, FixedJudge("ABSTAIN")) == 0.0

    def test_malformed_answer_scores_zero_without_judge_call(self):
        t = parse(toks("<BOS> the image <EOS>"))
        assert rw.consistency_reward(t, "FAKE", RaisingJudge()) == 0.0

    def test_wrong_answer_scores_zero_without_judge_call(self):
        t = parse(FAKE_TOKENS)
        assert rw.consistency_reward(t, "REAL", RaisingJudge()) == 0.0

    def test_judge_failure_propagates_when_verdict_matters(self):
        t = parse(FAKE_TOKENS)
        with pytest.raises(rw.JudgeError):
            rw.consistency_reward(t, "FAKE", RaisingJudge())

    def test_invalid_judge_verdict_is_an_error(self):
        t = parse(FAKE_TOKENS)
        with pytest.raises(rw.JudgeError):
            rw.consistency_reward(t, "FAKE", FixedJudge("UNSURE"))

    def test_never_exceeds_accuracy(self):
        for y_hat in ("REAL", "FAKE"):
            t = parse(toks(f"<answer> {y_hat} </answer>"))
            for y in ("REAL", "FAKE"):
                for verdict in ("REAL", "FAKE", "ABSTAIN"):
                    cons = rw.consistency_reward(t, y, FixedJudge(verdict))
                    assert cons <= rw.accuracy_reward(t, y)


# ---------------------------------------------------------------------------
# Aggregation


class TestAggregate:
    def test_all_components_one(self):
        scores = rw.PartScores(f1=1.0, existence_rate=1.0, quantity_penalty=0.0, value=1.0)
        breakdown = rw.aggregate(1.0, scores, 1.0, 1.0)
        assert breakdown.total == pytest.approx(2.0, abs=1e-12)

    def test_all_components_zero(self):
        scores = rw.PartScores(0.0, 0.0, 0.0, 0.0)
        assert rw.aggregate(0.0, scores, 0.0, 0.0).total == 0.0

    def test_accuracy_only(self):
        scores = rw.PartScores(0.0, 0.0, 0.0, 0.0)
        assert rw.aggregate(1.0, scores, 0.0, 0.0).total == 1.0

    def test_total_resums_independently(self):
        scores = rw.PartScores(0.5, 1.0, 0.0, 0.75)
        b = rw.aggregate(1.0, scores, 0.0, 1.0)
        resum = 1.0 + 0.4 * 0.75 + 0.4 * 0.0 + 0.2 * 1.0
        assert abs(b.total - resum) <= 1e-12

    def test_custom_weights(self):
        scores = rw.PartScores(1.0, 1.0, 0.0, 1.0)
        weights = rw.RewardWeights(part=0.1, cons=0.2, fmt=0.3)
        b = rw.aggregate(0.0, scores, 1.0, 1.0, weights)
        assert abs(b.total - (0.1 + 0.2 + 0.3)) <= 1e-12


class TestComputeReward:
    def test_perfect_transcript_scores_two(self):
        b = rw.compute_reward(FAKE_TOKENS, "FAKE", mask_set({PartId.NOSE, PartId.MOUTH}),
                              rw.MockJudge())
        assert b.r_acc == 1.0
        assert b.r_fmt == 1.0
        assert b.r_part.value == 1.0
        assert b.r_cons == 1.0
        assert b.total == pytest.approx(2.0, abs=1e-12)

    def test_garbage_scores_zero(self):
        b = rw.compute_reward(toks("<BOS> the image <EOS>"), "FAKE", ALL_PRESENT,
                              rw.MockJudge())
        assert (b.r_acc, b.r_fmt, b.r_part.value, b.r_cons, b.total) == (0, 0, 0, 0, 0)

    def test_wrong_answer_keeps_part_credit(self):
        b = rw.compute_reward(FAKE_TOKENS, "REAL", mask_set({PartId.NOSE, PartId.MOUTH}),
                              rw.MockJudge())
        assert b.r_acc == 0.0
        assert b.r_cons == 0.0
        assert b.r_part.value == 1.0
        assert b.r_fmt == 1.0
        assert abs(b.total - (0.4 + 0.2)) <= 1e-12

    def test_total_resums_independently(self):
        b = rw.compute_reward(FAKE_TOKENS, "FAKE", mask_set({PartId.NOSE}), rw.MockJudge())
        resum = b.r_acc + 0.4 * b.r_part.value + 0.4 * b.r_cons + 0.2 * b.r_fmt
        assert abs(b.total - resum) <= 1e-12

    def test_judge_abstains_on_thin_evidence(self):
        tokens = toks(
            "<BOS> <global_evidence> energy </global_evidence> <planning> <P_NOSE> </planning> "
            "<part_evidence> <P_NOSE> texture detail </part_evidence> "
            "<conclusion> verdict </conclusion> <answer> FAKE </answer> <EOS>"
        )
        b = rw.compute_reward(tokens, "FAKE", ALL_PRESENT, rw.MockJudge())
        assert b.r_acc == 1.0
        assert b.r_cons == 0.0

    def test_json_round_trip(self):
        b = rw.compute_reward(FAKE_TOKENS, "FAKE", ALL_PRESENT, rw.MockJudge())
        blob = json.loads(json.dumps(b.to_json()))
        assert blob["total"] == b.total
        assert blob["r_part"]["f1"] == b.r_part.f1
        assert blob["r_part"]["value"] == b.r_part.value

    @settings(max_examples=150, deadline=None)
    @given(planned=part_sets, examined=part_sets, present=part_sets,
           answer=st.sampled_from(["REAL", "FAKE"]), label=st.sampled_from(["REAL", "FAKE"]))
    def test_breakdown_ranges_and_resum(self, planned, examined, present, answer, label):
        tokens = plan_exam_tokens(planned, examined, answer=answer)
        b = rw.compute_reward(tokens, label, mask_set(present), rw.MockJudge())
        assert b.r_acc in (0.0, 1.0)
        assert b.r_fmt in (0.0, 1.0)
        assert b.r_cons in (0.0, 1.0)
        assert 0.0 <= b.r_part.value <= 1.0
        assert b.r_cons <= b.r_acc
        resum = b.r_acc + 0.4 * b.r_part.value + 0.4 * b.r_cons + 0.2 * b.r_fmt
        assert abs(b.total - resum) <= 1e-12
