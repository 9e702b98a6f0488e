"""Annotation pipeline: ROI ranking, consensus, synthesis, review hook."""

from types import SimpleNamespace

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partscope import annotation as an
from partscope import rewards as rw
from partscope.parts import NUM_PARTS, PartId, PartMaskSet
from partscope.transcript import get_vocab, parse, validate_format

V = get_vocab()


def fake_bundle(scores, present=None):
    scores = np.asarray(scores, dtype=float)
    if present is None:
        present = np.ones(NUM_PARTS, dtype=bool)
    return SimpleNamespace(a=SimpleNamespace(value=scores), present=np.asarray(present))


def mask_set(present) -> PartMaskSet:
    masks = np.zeros((NUM_PARTS, 4, 4))
    for p in present:
        masks[int(p), 0, 0] = 1.0
    return PartMaskSet(masks)


TRUTH = {
    "fake-0": an.GroundTruth(
        label="FAKE",
        artifact_kinds={PartId.NOSE: "HIGH_FREQ_NOISE", PartId.MOUTH: "BLUR_PATCH"},
    ),
    "real-0": an.GroundTruth(label="REAL"),
}


def clients(n=3, rate=0.0, seed=0):
    return [an.MockPerceptionClient(f"client-{i}", TRUTH, rate, seed) for i in range(n)]


# ---------------------------------------------------------------------------
# ROI selection


class TestSelectRois:
    def test_single_peak(self):
        scores = np.full(NUM_PARTS, 0.1)
        scores[int(PartId.NOSE)] = 0.9
        assert an.select_rois(fake_bundle(scores), k=1) == [PartId.NOSE]

    def test_all_equal_uses_canonical_order(self):
        rois = an.select_rois(fake_bundle(np.full(NUM_PARTS, 0.5)), k=3)
        assert rois == [PartId.LEFT_EYE, PartId.RIGHT_EYE, PartId.LEFT_EYEBROW]

    def test_k_larger_than_present_set(self):
        present = np.zeros(NUM_PARTS, dtype=bool)
        present[int(PartId.NOSE)] = present[int(PartId.HAIR)] = True
        rois = an.select_rois(fake_bundle(np.linspace(0, 1, NUM_PARTS), present), k=5)
        assert rois == [PartId.HAIR, PartId.NOSE]

    def test_absent_parts_excluded(self):
        scores = np.zeros(NUM_PARTS)
        scores[int(PartId.HAIR)] = 1.0  # highest score but absent
        present = np.ones(NUM_PARTS, dtype=bool)
        present[int(PartId.HAIR)] = False
        assert PartId.HAIR not in an.select_rois(fake_bundle(scores, present), k=8)

    @pytest.mark.parametrize("k", [0, 9, -1])
    def test_k_bounds(self, k):
        with pytest.raises(ValueError):
            an.select_rois(fake_bundle(np.zeros(NUM_PARTS)), k=k)

    @settings(max_examples=200, deadline=None)
    @given(
        scores=st.lists(
            st.floats(min_value=0, max_value=1, allow_nan=False), min_size=8, max_size=8
        ),
        present_bits=st.integers(min_value=0, max_value=255),
        k=st.integers(min_value=1, max_value=8),
    )
    def test_matches_sort_enumeration(self, scores, present_bits, k):
        present = np.array([bool(present_bits >> i & 1) for i in range(NUM_PARTS)])
        expected = sorted(
            (p for p in PartId if present[int(p)]),
            key=lambda p: (-scores[int(p)], int(p)),
        )[:k]
        assert an.select_rois(fake_bundle(scores, present), k=k) == expected


# ---------------------------------------------------------------------------
# Consensus


class TestConsensusFilter:
    def test_two_of_three_survive(self):
        descs = [
            {PartId.NOSE: "blurred nose texture"},
            {PartId.NOSE: "blurred nose texture"},
            {PartId.NOSE: "crisp nose texture"},
        ]
        assert an.consensus_filter(descs) == {PartId.NOSE: "blurred nose texture"}

    def test_all_disagree_nothing_survives(self):
        descs = [{PartId.NOSE: f"claim variant {i}"} for i in range(3)]
        assert an.consensus_filter(descs) == {}

    def test_even_split_dropped(self):
        descs = [{PartId.NOSE: "claim a"}, {PartId.NOSE: "claim b"}]
        assert an.consensus_filter(descs) == {}

    def test_unanimous_pair_survives(self):
        descs = [{PartId.NOSE: "claim a"}, {PartId.NOSE: "claim a"}]
        assert an.consensus_filter(descs) == {PartId.NOSE: "claim a"}

    def test_requires_two_clients(self):
        with pytest.raises(ValueError):
            an.consensus_filter([{PartId.NOSE: "claim"}])

    def test_normalization_merges_spacing_and_case(self):
        descs = [
            {PartId.NOSE: "Blurred  Nose   texture"},
            {PartId.NOSE: "blurred nose texture"},
            {PartId.NOSE: "something else"},
        ]
        assert an.consensus_filter(descs) == {PartId.NOSE: "blurred nose texture"}

    def test_parts_filtered_independently(self):
        descs = [
            {PartId.NOSE: "claim a", PartId.MOUTH: "claim m"},
            {PartId.NOSE: "claim a", PartId.MOUTH: "claim x"},
            {PartId.NOSE: "claim b", PartId.MOUTH: "claim y"},
        ]
        assert an.consensus_filter(descs) == {PartId.NOSE: "claim a"}


# ---------------------------------------------------------------------------
# Mock perception clients


class TestMockPerceptionClient:
    def test_deterministic(self):
        a = an.MockPerceptionClient("c", TRUTH, 0.5, seed=1)
        b = an.MockPerceptionClient("c", TRUTH, 0.5, seed=1)
        rois = [PartId.NOSE, PartId.MOUTH, PartId.HAIR]
        assert a.describe("fake-0", rois) == b.describe("fake-0", rois)

    def test_describes_exactly_the_rois(self):
        rois = [PartId.NOSE, PartId.HAIR]
        desc = clients(1)[0].describe("fake-0", rois)
        assert list(desc) == rois

    def test_artifact_parts_get_anomaly_claims(self):
        desc = clients(1)[0].describe("fake-0", [PartId.NOSE, PartId.MOUTH, PartId.HAIR])
        assert desc[PartId.NOSE] == an.ARTIFACT_CLAIMS["HIGH_FREQ_NOISE"]
        assert desc[PartId.MOUTH] == an.ARTIFACT_CLAIMS["BLUR_PATCH"]
        assert desc[PartId.HAIR] == an.CLEAN_CLAIM

    def test_real_sample_is_all_clean(self):
        desc = clients(1)[0].describe("real-0", list(PartId))
        assert set(desc.values()) == {an.CLEAN_CLAIM}

    def test_full_hallucination_diverges(self):
        desc = an.MockPerceptionClient("c", TRUTH, 1.0).describe("fake-0", [PartId.NOSE])
        assert desc[PartId.NOSE] in an.HALLUCINATED_CLAIMS

    def test_unknown_sample_is_transport_error(self):
        with pytest.raises(an.AnnotationClientError):
            clients(1)[0].describe("nonexistent", [PartId.NOSE])

    def test_claim_words_are_in_vocabulary(self):
        texts = [*an.ARTIFACT_CLAIMS.values(), an.CLEAN_CLAIM, *an.HALLUCINATED_CLAIMS]
        for text in texts:
            V.encode(text)  # raises on any out-of-vocabulary word


# ---------------------------------------------------------------------------
# Synthesis and the full per-sample pipeline


class BrokenSynthesizer:
    """Emits an unclosed planning block."""

    def compose(self, summary, rois, claims, label):
        return ["<BOS>", "<planning>", "<answer>", label, "</answer>", "<EOS>"]


class OovSynthesizer:
    def compose(self, summary, rois, claims, label):
        return ["<BOS>", "totally", "unknown", "words", "<EOS>"]


class TestAnnotateSample:
    def suspicious_bundle(self):
        scores = np.full(NUM_PARTS, 0.1)
        scores[int(PartId.NOSE)] = 0.9
        scores[int(PartId.MOUTH)] = 0.8
        scores[int(PartId.HAIR)] = 0.3
        return fake_bundle(scores)

    def test_fake_sample_annotated(self):
        record = an.annotate_sample("fake-0", "FAKE", self.suspicious_bundle(), clients())
        assert record.status == an.ANNOTATED
        assert record.rois == (PartId.NOSE, PartId.MOUTH, PartId.HAIR)
        t = parse(record.tokens)
        assert validate_format(t).ok
        assert t.answer == "FAKE"
        assert t.planned_parts == t.examined_parts == {PartId.NOSE, PartId.MOUTH, PartId.HAIR}

    def test_annotated_earns_full_part_reward(self):
        record = an.annotate_sample("fake-0", "FAKE", self.suspicious_bundle(), clients())
        masks = mask_set(record.rois)
        scores = rw.part_reward(parse(record.tokens), masks)
        assert scores.value == 1.0

    def test_real_sample_answer_real(self):
        record = an.annotate_sample("real-0", "REAL", fake_bundle(np.full(NUM_PARTS, 0.1)),
                                    clients())
        assert record.status == an.ANNOTATED
        assert parse(record.tokens).answer == "REAL"

    def test_evidence_supports_the_judge(self):
        # The synthesized evidence alone should let the keyword judge
        # reach the right verdict for both labels.
        fake = an.annotate_sample("fake-0", "FAKE", self.suspicious_bundle(), clients())
        real = an.annotate_sample("real-0", "REAL", fake_bundle(np.full(NUM_PARTS, 0.1)),
                                  clients())
        judge = rw.MockJudge()
        assert judge.verdict(rw.evidence_text(parse(fake.tokens))) == "FAKE"
        assert judge.verdict(rw.evidence_text(parse(real.tokens))) == "REAL"

    def test_byte_identical_determinism(self):
        first = an.annotate_sample("fake-0", "FAKE", self.suspicious_bundle(), clients())
        second = an.annotate_sample("fake-0", "FAKE", self.suspicious_bundle(), clients())
        assert first.to_json() == second.to_json()

    def test_no_consensus_fails(self):
        stubs = [
            SimpleNamespace(describe=lambda ref, rois, i=i: {p: f"variant {i}" for p in rois})
            for i in range(3)
        ]
        record = an.annotate_sample("fake-0", "FAKE", self.suspicious_bundle(), stubs)
        assert record.status == an.FAILED
        assert "consensus" in record.reason

    def test_partial_consensus_fails(self):
        def describe(ref, rois, split):
            # Clients agree on NOSE, disagree on everything else.
            return {
                p: (an.CLEAN_CLAIM if p == PartId.NOSE else f"variant {split}") for p in rois
            }

        stubs = [SimpleNamespace(describe=lambda r, ro, i=i: describe(r, ro, i)) for i in range(3)]
        record = an.annotate_sample("fake-0", "FAKE", self.suspicious_bundle(), stubs)
        assert record.status == an.FAILED
        assert "MOUTH" in record.reason and "HAIR" in record.reason
        assert "NOSE" not in record.reason

    def test_invalid_synthesis_fails(self):
        record = an.annotate_sample(
            "fake-0", "FAKE", self.suspicious_bundle(), clients(),
            synthesizer=BrokenSynthesizer(),
        )
        assert record.status == an.FAILED
        assert "invalid transcript" in record.reason

    def test_oov_synthesis_fails(self):
        record = an.annotate_sample(
            "fake-0", "FAKE", self.suspicious_bundle(), clients(),
            synthesizer=OovSynthesizer(),
        )
        assert record.status == an.FAILED
        assert "vocabulary" in record.reason

    def test_client_straying_outside_rois_is_an_error(self):
        stub = SimpleNamespace(describe=lambda ref, rois: {PartId.LEFT_EYE: "claim"})
        with pytest.raises(an.AnnotationClientError):
            an.annotate_sample("fake-0", "FAKE", self.suspicious_bundle(), [stub, stub])

    def test_hallucination_rate_exercises_both_outcomes(self):
        # Seeded, content-keyed RNG makes the noisy pipeline fully
        # deterministic, so the split below is pinned, not flaky.
        truth = {
            f"s-{i}": an.GroundTruth(
                label="FAKE", artifact_kinds={PartId.NOSE: "HIGH_FREQ_NOISE"}
            )
            for i in range(12)
        }
        noisy = [an.MockPerceptionClient(f"client-{i}", truth, 0.35, seed=7) for i in range(3)]
        records = [
            an.annotate_sample(sid, "FAKE", self.suspicious_bundle(), noisy) for sid in truth
        ]
        statuses = {r.status for r in records}
        assert statuses == {an.ANNOTATED, an.FAILED}
        again = [
            an.annotate_sample(sid, "FAKE", self.suspicious_bundle(), noisy) for sid in truth
        ]
        assert [r.to_json() for r in records] == [r.to_json() for r in again]


# ---------------------------------------------------------------------------
# Records, splits, review hook, serialization


class TestRecordsAndSplits:
    def make_records(self):
        bundle = fake_bundle(np.linspace(0.9, 0.1, NUM_PARTS))
        good = an.annotate_sample("fake-0", "FAKE", bundle, clients())
        stubs = [
            SimpleNamespace(describe=lambda ref, rois, i=i: {p: f"variant {i}" for p in rois})
            for i in range(3)
        ]
        bad = an.annotate_sample("real-0", "REAL", bundle, stubs)
        return [good, bad]

    def test_split_is_exhaustive_and_disjoint(self):
        records = self.make_records()
        annotated, failed = an.split_annotations(records)
        assert len(annotated) + len(failed) == len(records)
        assert {r.sample_id for r in annotated} & {r.sample_id for r in failed} == set()
        assert all(r.status == an.ANNOTATED for r in annotated)
        assert all(r.status == an.FAILED for r in failed)

    def test_failed_requires_reason(self):
        with pytest.raises(ValueError):
            an.AnnotationRecord("x", "FAKE", (), (), (), status=an.FAILED)

    def test_annotated_requires_tokens(self):
        with pytest.raises(ValueError):
            an.AnnotationRecord("x", "FAKE", (), (), (), status=an.ANNOTATED)

    def test_review_hook_demotes(self, tmp_path):
        records = self.make_records()
        review = tmp_path / "review.jsonl"
        review.write_text(json.dumps({"id": "fake-0"}) + "\n")
        rejected = an.load_review_rejections(review)
        reviewed = an.apply_review(records, rejected)
        assert reviewed[0].status == an.FAILED
        assert "review" in reviewed[0].reason
        assert reviewed[1].status == records[1].status

    def test_round_trip(self, tmp_path):
        records = self.make_records()
        path = tmp_path / "annotations.jsonl"
        an.save_annotations(path, records)
        loaded = an.load_annotations(path)
        assert loaded == records

    def test_tampered_text_rejected_on_load(self, tmp_path):
        records = self.make_records()
        path = tmp_path / "annotations.jsonl"
        an.save_annotations(path, records)
        lines = path.read_text().splitlines()
        row = json.loads(lines[0])
        row["text"] = "tampered"
        path.write_text("\n".join([json.dumps(row)] + lines[1:]) + "\n")
        with pytest.raises(ValueError):
            an.load_annotations(path)

    def test_ground_truth_validation(self):
        with pytest.raises(ValueError):
            an.GroundTruth(label="MAYBE")
        with pytest.raises(ValueError):
            an.GroundTruth(label="REAL", artifact_kinds={PartId.NOSE: "BLUR_PATCH"})
