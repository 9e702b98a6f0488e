"""The five-stage structured output grammar and its closed vocabulary.

A transcript walks through five tagged stages in fixed order — global
evidence, planning, part evidence, conclusion, answer — over a small
closed vocabulary: structural tags, one evidence-summary token, eight
part tokens (one per anatomical region), the REAL/FAKE answer literals,
and ~200 plain words.

Stage labeling uses one rule everywhere (parser, rewards, and the
decode-time injection gate): a position belongs to the stage of the most
recent unclosed structural tag; an opening tag belongs to the stage it
opens, a matching closing tag belongs to that stage and then pops it.
`StageTracker` exposes the rule incrementally so generation can gate
injection on exactly what a later parse will report.

`parse` is total: arbitrary token sequences yield a `Transcript`, with
grammar violations recorded as diagnostics and `answer="MALFORMED"`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache
from pathlib import Path

from .parts import PartId


class Stage(IntEnum):
    PROMPT = 0
    GLOBAL = 1
    PLANNING = 2
    PART_EVIDENCE = 3
    CONCLUSION = 4
    ANSWER = 5


GENERATION_STAGES = (Stage.GLOBAL, Stage.PLANNING, Stage.PART_EVIDENCE, Stage.CONCLUSION, Stage.ANSWER)

STAGE_TAGS: dict[Stage, tuple[str, str]] = {
    Stage.GLOBAL: ("<global_evidence>", "</global_evidence>"),
    Stage.PLANNING: ("<planning>", "</planning>"),
    Stage.PART_EVIDENCE: ("<part_evidence>", "</part_evidence>"),
    Stage.CONCLUSION: ("<conclusion>", "</conclusion>"),
    Stage.ANSWER: ("<answer>", "</answer>"),
}

PAD, BOS, EOS = "<PAD>", "<BOS>", "<EOS>"
EVIDENCE_SUMMARY = "<EVIDENCE_SUMMARY>"
PART_TOKENS = tuple(f"<P_{p.name}>" for p in PartId)
ANSWER_LITERALS = ("REAL", "FAKE")

# Words whose presence in evidence text reads as "something is wrong" /
# "everything is fine"; the evidence-only judge counts them.
ANOMALY_WORDS = (
    "aliasing", "anomalous", "anomaly", "artifact", "artifacts", "banding", "blocky", "blotchy",
    "checkerboard", "corrupted", "discontinuity", "distorted", "distortion",
    "fabricated", "forged", "ghosting", "glitch", "inconsistent", "irregular",
    "jagged", "manipulated", "mismatched", "oversmoothed", "periodic",
    "ringing", "seam", "seams", "smeared", "spike", "spikes", "spurious",
    "suspicious", "synthetic", "tampered", "unnatural", "warped",
)

CLEAN_WORDS = (
    "authentic", "balanced", "clean", "coherent", "consistent", "credible",
    "crisp", "genuine", "intact", "natural", "nominal", "ordinary", "organic",
    "plausible", "pristine", "realistic", "regular", "sharp", "smooth",
    "stable", "typical", "unaltered", "undistorted", "untouched",
)

NEUTRAL_WORDS = (
    # determiners / connectives
    "a", "an", "the", "this", "that",
    "and", "but", "or", "with", "without", "within", "across", "near", "at",
    "in", "on", "of", "to", "from", "under", "over", "around", "between",
    # verbs
    "is", "are", "was", "were", "has", "have", "shows", "show", "appears",
    "appear", "looks", "look", "seems", "seem", "exhibits", "exhibit",
    "indicates", "indicate", "suggests", "suggest", "reveals", "reveal",
    "contains", "contain", "lacks", "lack", "matches", "match", "supports",
    "support", "confirms", "confirm", "inspect", "examine", "check",
    "detected",
    # quantity / negation / adverbs
    "no", "not", "none", "some", "any", "few", "several", "most", "all",
    "both", "only", "very", "slightly", "strongly", "clearly", "faintly",
    "overall", "locally", "globally", "here", "there", "elsewhere",
    # adjectives
    "strong", "weak", "mild", "slight", "moderate", "severe", "faint",
    "visible", "subtle", "notable", "minor", "major", "low", "high", "mid",
    "elevated", "reduced", "uniform", "flat", "dense", "sparse", "central",
    "outer", "inner",
    # nouns
    "pattern", "patterns", "texture", "grain", "edge", "edges", "gradient",
    "region", "regions", "area", "pixel", "pixels", "band", "bands",
    "frequency", "spectrum", "energy", "magnitude", "phase", "noise",
    "signal", "response", "residual", "detail", "details", "structure",
    "blending", "patch", "surface", "boundary", "transition", "skin", "eye",
    "eyes", "eyebrow", "eyebrows", "nose", "mouth", "hair", "face", "image",
    "evidence", "plan", "verdict", "summary", "finding",
)

WORDS = ANOMALY_WORDS + CLEAN_WORDS + NEUTRAL_WORDS


class Vocab:
    """Closed token set with stable integer ids.

    Id layout: <PAD>, <BOS>, <EOS>, the ten stage tags in stage order,
    <EVIDENCE_SUMMARY>, the eight part tokens in PartId order, REAL, FAKE,
    then the word list.  The layout is frozen; checkpoints store
    `fingerprint()` and refuse to load against a different vocabulary.
    """

    def __init__(self):
        tags = [tag for stage in GENERATION_STAGES for tag in STAGE_TAGS[stage]]
        tokens = [PAD, BOS, EOS, *tags, EVIDENCE_SUMMARY, *PART_TOKENS, *ANSWER_LITERALS, *WORDS]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate token in vocabulary")
        self._tokens: tuple[str, ...] = tuple(tokens)
        self._ids: dict[str, int] = {t: i for i, t in enumerate(tokens)}

        self.pad_id = self._ids[PAD]
        self.bos_id = self._ids[BOS]
        self.eos_id = self._ids[EOS]
        self.evidence_summary_id = self._ids[EVIDENCE_SUMMARY]
        self.real_id = self._ids["REAL"]
        self.fake_id = self._ids["FAKE"]
        self._open_stage = {self._ids[STAGE_TAGS[s][0]]: s for s in GENERATION_STAGES}
        self._close_stage = {self._ids[STAGE_TAGS[s][1]]: s for s in GENERATION_STAGES}
        self._part_by_id = {self._ids[f"<P_{p.name}>"]: p for p in PartId}
        self._id_by_part = {p: i for i, p in self._part_by_id.items()}
        self.word_ids = frozenset(self._ids[w] for w in WORDS)
        self.anomaly_ids = frozenset(self._ids[w] for w in ANOMALY_WORDS)
        self.clean_ids = frozenset(self._ids[w] for w in CLEAN_WORDS)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise ValueError(f"token not in vocabulary: {token!r}") from None

    def token(self, tid: int) -> str:
        if not 0 <= tid < len(self._tokens):
            raise ValueError(f"token id out of range: {tid}")
        return self._tokens[tid]

    def encode(self, text: str) -> list[int]:
        return [self.id(t) for t in text.split()]

    def decode(self, ids) -> str:
        return " ".join(self.token(int(t)) for t in ids)

    def open_stage(self, tid: int) -> Stage | None:
        return self._open_stage.get(tid)

    def close_stage(self, tid: int) -> Stage | None:
        return self._close_stage.get(tid)

    def is_tag(self, tid: int) -> bool:
        return tid in self._open_stage or tid in self._close_stage

    def part_of(self, tid: int) -> PartId | None:
        return self._part_by_id.get(tid)

    def part_token_id(self, part: PartId) -> int:
        return self._id_by_part[part]

    @property
    def part_token_ids(self) -> tuple[int, ...]:
        return tuple(self._id_by_part[p] for p in PartId)

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self._tokens).encode()).hexdigest()


@lru_cache(maxsize=1)
def get_vocab() -> Vocab:
    return Vocab()


class StageTracker:
    """Incremental stage labeling over a growing token sequence.

    `feed` returns the stage label of the token just consumed, and
    `current` is the stage any *next* token would inherit if it is not a
    tag.  Generation uses the same instance that a later `parse` of the
    full sequence will reproduce, so gate decisions and parsed labels
    cannot drift apart.
    """

    def __init__(self, vocab: Vocab):
        self._vocab = vocab
        self._stack: list[Stage] = []

    @property
    def current(self) -> Stage:
        return self._stack[-1] if self._stack else Stage.PROMPT

    def feed(self, tid: int) -> Stage:
        opened = self._vocab.open_stage(tid)
        if opened is not None:
            self._stack.append(opened)
            return opened
        closed = self._vocab.close_stage(tid)
        if closed is not None and self._stack and self._stack[-1] == closed:
            self._stack.pop()
            return closed
        return self.current  # plain token, or an unmatched close tag

    def copy(self) -> "StageTracker":
        dup = StageTracker(self._vocab)
        dup._stack = list(self._stack)
        return dup


def label_stages(tokens, vocab: Vocab | None = None) -> list[Stage]:
    vocab = vocab or get_vocab()
    tracker = StageTracker(vocab)
    return [tracker.feed(int(t)) for t in tokens]


@dataclass(frozen=True)
class PartSpan:
    """One examined part inside the part-evidence block: [start, end)."""

    part: PartId
    start: int
    end: int
    substantive: bool  # at least one word token follows the part token


@dataclass(frozen=True)
class Transcript:
    tokens: tuple[int, ...]
    stage_labels: tuple[Stage, ...]
    planned_parts: frozenset[PartId]
    examined_parts: frozenset[PartId]
    part_spans: tuple[PartSpan, ...]
    answer: str  # "REAL" | "FAKE" | "MALFORMED"
    diagnostics: tuple[str, ...]


def parse(tokens, vocab: Vocab | None = None) -> Transcript:
    """Total best-effort parse; malformation is data, never an exception."""
    vocab = vocab or get_vocab()
    tokens = tuple(int(t) for t in tokens)
    tracker = StageTracker(vocab)
    labels: list[Stage] = []
    diagnostics: list[str] = []
    planned: set[PartId] = set()
    spans: list[PartSpan] = []
    answer_inner: list[int] = []
    answer_closed = True
    open_span_start: int | None = None
    open_span_part: PartId | None = None
    open_span_has_word = False

    def close_span(end: int) -> None:
        nonlocal open_span_start, open_span_part, open_span_has_word
        if open_span_part is not None:
            spans.append(PartSpan(open_span_part, open_span_start, end, open_span_has_word))
        open_span_start = open_span_part = None
        open_span_has_word = False

    for pos, tid in enumerate(tokens):
        before = tracker.current
        opened = vocab.open_stage(tid)
        closed = vocab.close_stage(tid)
        label = tracker.feed(tid)
        labels.append(label)

        if opened is not None:
            if before != Stage.PROMPT:
                diagnostics.append(f"nested {STAGE_TAGS[opened][0]} inside {before.name}")
            if opened == Stage.ANSWER:
                answer_closed = False
            continue
        if closed is not None:
            if before == closed:
                if closed == Stage.PART_EVIDENCE:
                    close_span(pos)
                if closed == Stage.ANSWER:
                    answer_closed = True
            else:
                diagnostics.append(f"unmatched {STAGE_TAGS[closed][1]} in {before.name}")
            continue

        part = vocab.part_of(tid)
        if label == Stage.PLANNING and part is not None:
            planned.add(part)
        elif label == Stage.PART_EVIDENCE:
            if part is not None:
                close_span(pos)
                open_span_start, open_span_part = pos, part
            elif open_span_part is not None and tid in vocab.word_ids:
                open_span_has_word = True
        elif label == Stage.ANSWER:
            answer_inner.append(tid)

    close_span(len(tokens))
    final = tracker.current
    while final != Stage.PROMPT:
        diagnostics.append(f"unclosed {final.name.lower()}")
        tracker.feed(vocab.id(STAGE_TAGS[final][1]))
        final = tracker.current

    if answer_closed and len(answer_inner) == 1 and answer_inner[0] in (vocab.real_id, vocab.fake_id):
        answer = vocab.token(answer_inner[0])
    else:
        answer = "MALFORMED"

    return Transcript(
        tokens=tokens,
        stage_labels=tuple(labels),
        planned_parts=frozenset(planned),
        examined_parts=frozenset(s.part for s in spans),
        part_spans=tuple(spans),
        answer=answer,
        diagnostics=tuple(diagnostics),
    )


def stage_of(transcript: Transcript, position: int) -> Stage:
    if not 0 <= position < len(transcript.tokens):
        raise IndexError(f"position {position} outside transcript of length {len(transcript.tokens)}")
    return transcript.stage_labels[position]


@dataclass(frozen=True)
class FormatCheck:
    ok: bool
    diagnostics: tuple[str, ...]


def validate_format(transcript: Transcript, vocab: Vocab | None = None) -> FormatCheck:
    """Strict well-formedness: the five stages exactly once, in order,
    non-empty, properly nested, nothing stray between or after them
    (trailing <EOS> allowed), and the answer a single REAL/FAKE literal.
    """
    vocab = vocab or get_vocab()
    problems: list[str] = []
    seen: list[Stage] = []
    inside: Stage | None = None
    inner_count = 0
    answer_inner: list[int] = []
    expected = list(GENERATION_STAGES)

    for tid in transcript.tokens:
        opened = vocab.open_stage(tid)
        closed = vocab.close_stage(tid)
        if opened is not None:
            if inside is not None:
                problems.append(f"nested {STAGE_TAGS[opened][0]} inside {inside.name}")
                break
            want = expected[len(seen)] if len(seen) < len(expected) else None
            if opened != want:
                if opened in seen:
                    problems.append(f"duplicate {STAGE_TAGS[opened][0]} block")
                else:
                    problems.append(
                        f"stage out of order: got {STAGE_TAGS[opened][0]}, "
                        f"expected {STAGE_TAGS[want][0] if want else 'end of transcript'}"
                    )
                break
            inside = opened
            inner_count = 0
            continue
        if closed is not None:
            if inside != closed:
                problems.append(f"unmatched {STAGE_TAGS[closed][1]}")
                break
            if inner_count == 0:
                problems.append(f"empty {STAGE_TAGS[closed][0]} block")
                break
            seen.append(closed)
            inside = None
            continue
        if inside is None:
            if seen and tid != vocab.eos_id:
                problems.append(f"stray token {vocab.token(tid)!r} between stages")
                break
            continue  # prompt tokens before the first stage, or trailing EOS
        inner_count += 1
        if inside == Stage.ANSWER:
            answer_inner.append(tid)

    if not problems:
        if inside is not None:
            problems.append(f"unclosed {inside.name.lower()}")
        elif len(seen) < len(expected):
            problems.append(f"missing {STAGE_TAGS[expected[len(seen)]][0]} block")
        elif not (len(answer_inner) == 1 and answer_inner[0] in (vocab.real_id, vocab.fake_id)):
            problems.append("answer must be a single REAL or FAKE literal")

    return FormatCheck(ok=not problems, diagnostics=tuple(problems))


# --- JSONL interchange ---

@dataclass(frozen=True)
class TranscriptRecord:
    id: str
    tokens: tuple[int, ...]
    text: str
    label: str  # ground-truth REAL | FAKE
    split: str

    @classmethod
    def from_tokens(cls, id: str, tokens, label: str, split: str,
                    vocab: Vocab | None = None) -> "TranscriptRecord":
        vocab = vocab or get_vocab()
        tokens = tuple(int(t) for t in tokens)
        return cls(id=id, tokens=tokens, text=vocab.decode(tokens), label=label, split=split)

    def to_json(self) -> str:
        return json.dumps(
            {"id": self.id, "tokens": list(self.tokens), "text": self.text,
             "label": self.label, "split": self.split}
        )


def save_transcripts(path: str | Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def load_transcripts(path: str | Path, vocab: Vocab | None = None) -> list[TranscriptRecord]:
    vocab = vocab or get_vocab()
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            rec = TranscriptRecord(
                id=obj["id"], tokens=tuple(obj["tokens"]), text=obj["text"],
                label=obj["label"], split=obj["split"],
            )
            if vocab.decode(rec.tokens) != rec.text:
                raise ValueError(f"{path}:{line_no}: text does not match tokens")
            out.append(rec)
    return out
