"""Single-choice benchmark loading, shuffled multi-trial evaluation and reporting.

Benchmark file: one JSON object per line::

    {"id": "q001", "image": "img/0001.png", "question": "...",
     "choices": ["...", "..."], "answer": 1, "dimensions": ["identity", "color"]}
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .chat import ChatClient, ChatRequest

log = logging.getLogger(__name__)

DIMENSIONS = (
    "identity", "color", "orientation", "shape", "area",
    "resolution", "modality", "location", "distance", "quantity", "reasoning",
)
TOP_LEVEL = {
    "identity": "recognition", "color": "recognition", "orientation": "recognition",
    "shape": "recognition", "area": "recognition", "resolution": "imagery",
    "modality": "imagery", "location": "spatial-awareness", "distance": "spatial-awareness",
    "quantity": "quantity", "reasoning": "reasoning",
}
LETTERS = "ABCD"
BENCH_PROMPT = "Please answer the question based on the given choices:\nQuestion: {question}\nChoice: {choices}\nAnswer:"


class BenchLoadError(ValueError):
    pass


@dataclass(frozen=True)
class BenchQuestion:
    id: str
    image: str
    question: str
    choices: tuple[str, ...]
    answer: int
    dimensions: tuple[str, ...]


@dataclass(frozen=True)
class ShuffledQuestion:
    question: BenchQuestion
    order: tuple[int, ...]  # order[k] = original index shown at position k
    answer: int  # position of the correct choice after shuffling

    @property
    def choices(self) -> tuple[str, ...]:
        return tuple(self.question.choices[i] for i in self.order)

    @property
    def letters(self) -> str:
        return LETTERS[: len(self.order)]

    @property
    def correct_letter(self) -> str:
        return LETTERS[self.answer]


@dataclass(frozen=True)
class TrialResult:
    question_id: str
    trial: int
    order: tuple[int, ...]
    raw: str | None
    correct: bool
    error: str | None = None

    def to_obj(self) -> dict:
        return {
            "question_id": self.question_id, "trial": self.trial, "order": list(self.order),
            "raw": self.raw, "verdict": "correct" if self.correct else "incorrect", "error": self.error,
        }


def _question_from_obj(obj, lineno: int) -> BenchQuestion:
    if not isinstance(obj, dict):
        raise BenchLoadError(f"line {lineno}: record is not an object")
    qid = obj.get("id")
    where = f"question {qid!r} (line {lineno})"
    if not isinstance(qid, (str, int)) or isinstance(qid, bool):
        raise BenchLoadError(f"line {lineno}: field 'id' missing or not a string")
    for name in ("image", "question"):
        if not isinstance(obj.get(name), str):
            raise BenchLoadError(f"{where}: field '{name}' must be a string")
    choices = obj.get("choices")
    if not isinstance(choices, list) or not all(isinstance(c, str) for c in choices):
        raise BenchLoadError(f"{where}: field 'choices' must be a list of strings")
    if not 2 <= len(choices) <= 4:
        raise BenchLoadError(f"{where}: field 'choices' has {len(choices)} entries, expected 2 to 4")
    answer = obj.get("answer")
    if isinstance(answer, bool) or not isinstance(answer, int) or not 0 <= answer < len(choices):
        raise BenchLoadError(f"{where}: field 'answer' must index into choices")
    dims = obj.get("dimensions")
    if not isinstance(dims, list) or not dims:
        raise BenchLoadError(f"{where}: field 'dimensions' must be a non-empty list")
    unknown = [d for d in dims if d not in DIMENSIONS]
    if unknown:
        raise BenchLoadError(f"{where}: field 'dimensions' has unknown entries {unknown}")
    return BenchQuestion(str(qid), obj["image"], obj["question"], tuple(choices), answer, tuple(dict.fromkeys(dims)))


def load_benchmark(lines: Iterable[str]) -> list[BenchQuestion]:
    questions, seen = [], set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BenchLoadError(f"line {lineno}: invalid JSON ({exc})") from None
        q = _question_from_obj(obj, lineno)
        if q.id in seen:
            raise BenchLoadError(f"question {q.id!r} (line {lineno}): field 'id' is a duplicate")
        seen.add(q.id)
        questions.append(q)
    return questions


def question_to_obj(q: BenchQuestion) -> dict:
    return {"id": q.id, "image": q.image, "question": q.question, "choices": list(q.choices),
            "answer": q.answer, "dimensions": list(q.dimensions)}


def trial_rng(seed: int, question_id: str, trial: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}\x1f{question_id}\x1f{trial}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


def shuffle_choices(q: BenchQuestion, trial: int, seed: int) -> ShuffledQuestion:
    order = tuple(int(i) for i in trial_rng(seed, q.id, trial).permutation(len(q.choices)))
    return ShuffledQuestion(q, order, order.index(q.answer))


def build_eval_prompt(sq: ShuffledQuestion) -> str:
    listed = "\n".join(f"{letter}. {text}" for letter, text in zip(sq.letters, sq.choices))
    return BENCH_PROMPT.format(question=sq.question.question, choices=listed)


_LETTER_TOKEN = re.compile(r"(?<![A-Za-z0-9])([A-Za-z])(?![A-Za-z0-9'])")
_LEADING_LETTER = re.compile(r"^\W*([A-Za-z])(?![A-Za-z0-9'])")


def answer_letter(raw: str, letters: str) -> str | None:
    """First standalone choice letter in ``raw``.

    A lowercase letter only counts at the very start of the reply, so that the
    article "a" inside a sentence is not read as choice A.
    """
    m = _LEADING_LETTER.match(raw)
    if m and m.group(1).upper() in letters:
        return m.group(1).upper()
    for m in _LETTER_TOKEN.finditer(raw):
        ch = m.group(1)
        if ch.isupper() and ch in letters:
            return ch
    return None


def match_answer(raw: str | None, sq: ShuffledQuestion) -> bool:
    if not raw or not raw.strip():
        return False
    if answer_letter(raw, sq.letters) == sq.correct_letter:
        return True
    text = raw.casefold()
    # longest choice text wins so a choice that is a substring of another cannot steal the match
    for pos in sorted(range(len(sq.choices)), key=lambda k: (-len(sq.choices[k]), k)):
        choice = sq.choices[pos].strip().casefold()
        if choice and choice in text:
            return pos == sq.answer
    return False


@dataclass(frozen=True)
class DimensionRow:
    dimension: str
    correct: float
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


@dataclass(frozen=True)
class BenchReport:
    rows: tuple[DimensionRow, ...]
    overall: DimensionRow
    scores: dict[str, float]
    trials: tuple[TrialResult, ...]
    policy: str

    def to_tsv(self) -> str:
        lines = ["dimension\tcorrect\ttotal\taccuracy"]
        for r in (*self.rows, self.overall):
            lines.append(f"{r.dimension}\t{r.correct:g}\t{r.total}\t{r.accuracy:.4f}")
        return "\n".join(lines) + "\n"


def _ask(client: ChatClient, q: BenchQuestion, trials: int, seed: int) -> list[TrialResult]:
    out = []
    for t in range(trials):
        sq = shuffle_choices(q, t, seed)
        request = ChatRequest("", (("user", build_eval_prompt(sq)),), attachments=(q.image,))
        try:
            raw = client.complete(request)
            out.append(TrialResult(q.id, t, sq.order, raw, match_answer(raw, sq)))
        except Exception as exc:  # noqa: BLE001 - endpoint failures count as wrong answers
            log.warning("question %s trial %d failed: %s", q.id, t, exc)
            out.append(TrialResult(q.id, t, sq.order, None, False, f"{type(exc).__name__}: {exc}"))
    return out


def evaluate(
    client: ChatClient,
    questions: Sequence[BenchQuestion],
    trials: int = 4,
    seed: int = 0,
    *,
    policy: str = "strict",
    concurrency: int = 1,
) -> BenchReport:
    """Ask every question ``trials`` times with freshly shuffled choices.

    ``policy="strict"`` scores a question correct only when every trial is
    correct; ``policy="average"`` scores the fraction of correct trials.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if policy not in ("strict", "average"):
        raise ValueError(f"unknown policy {policy!r}")
    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        per_q = list(pool.map(lambda q: _ask(client, q, trials, seed), questions))
    scores: dict[str, float] = {}
    for q, results in zip(questions, per_q):
        hits = sum(r.correct for r in results)
        scores[q.id] = float(hits == trials) if policy == "strict" else hits / trials
    rows = []
    for dim in DIMENSIONS:
        tagged = [q for q in questions if dim in q.dimensions]
        rows.append(DimensionRow(dim, sum(scores[q.id] for q in tagged), len(tagged)))
    overall = DimensionRow("overall", sum(scores.values()), len(questions))
    all_trials = tuple(r for results in per_q for r in results)
    return BenchReport(tuple(rows), overall, scores, all_trials, policy)
