from __future__ import annotations

import json
from collections import Counter
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vgi_align.bench_harness import (
    BENCH_PROMPT,
    DIMENSIONS,
    BenchLoadError,
    BenchQuestion,
    ShuffledQuestion,
    answer_letter,
    build_eval_prompt,
    evaluate,
    load_benchmark,
    match_answer,
    shuffle_choices,
)
from vgi_align.caption_gen import load_template_data
from vgi_align.chat import MockChatClient

from helpers import (
    BENCH10_EXPECTED,
    Q0_SEED0_POSITIONS,
    TABLE1_COUNTS,
    ScriptedBenchModel,
    bench10_lines,
    table1_benchmark_lines,
)

GOLDEN = Path(__file__).parent / "golden"


def q(choices=("a", "b", "c"), answer=0, qid="x", dims=("identity",)):
    return BenchQuestion(qid, "img.png", "Which?", tuple(choices), answer, tuple(dims))


def record(**over):
    obj = {"id": "q1", "image": "i.png", "question": "?", "choices": ["a", "b"], "answer": 0, "dimensions": ["color"]}
    obj.update(over)
    return json.dumps(obj)


def test_load_fixture():
    assert len(load_benchmark(bench10_lines()[:5])) == 5


@pytest.mark.parametrize(
    "override, field",
    [
        ({"choices": ["a", "b", "c", "d", "e"]}, "choices"),
        ({"choices": ["a"]}, "choices"),
        ({"dimensions": []}, "dimensions"),
        ({"dimensions": ["smell"]}, "dimensions"),
        ({"answer": 2}, "answer"),
        ({"image": None}, "image"),
    ],
)
def test_load_errors_name_question_and_field(override, field):
    with pytest.raises(BenchLoadError) as err:
        load_benchmark([record(**override)])
    assert "'q1'" in str(err.value) and f"'{field}'" in str(err.value)


def test_duplicate_ids_rejected():
    with pytest.raises(BenchLoadError, match="duplicate"):
        load_benchmark([record(), record()])


def test_shuffle_properties():
    single = q(choices=("only",))
    assert shuffle_choices(single, 0, 0).order == (0,)
    a, b = shuffle_choices(q(), 2, 7), shuffle_choices(q(), 2, 7)
    assert a == b
    assert a.choices[a.answer] == "a"


def test_shuffle_positions_uniform():
    counts = Counter()
    question = q(choices=("a", "b", "c", "d"))
    for trial in range(10000):
        counts[shuffle_choices(question, trial, 0).answer] += 1
    for pos in range(4):
        assert abs(counts[pos] / 10000 - 0.25) < 0.02


def test_eval_prompt_golden():
    question = BenchQuestion("g", "i", "Which sports venue is shown?",
                             ("tennis court", "basketball stadium", "swimming pool"), 1, ("identity",))
    sq = ShuffledQuestion(question, (0, 1, 2), 1)  # identity order for the golden layout
    assert build_eval_prompt(sq) == (GOLDEN / "eval_prompt.txt").read_text(encoding="utf-8")
    assert BENCH_PROMPT == load_template_data("evaluation")["bench"]


def test_choice_order_only_changes_choice_block():
    question = q(choices=("é café", "b"))
    a = build_eval_prompt(ShuffledQuestion(question, (0, 1), 0))
    b = build_eval_prompt(ShuffledQuestion(question, (1, 0), 1))
    assert a.split("Choice:")[0] == b.split("Choice:")[0]
    assert "A. é café" in a and "B. é café" in b


def test_match_examples():
    sq = ShuffledQuestion(q(choices=("tennis court", "basketball stadium", "pool"), answer=1), (0, 1, 2), 1)
    assert match_answer("B", sq)
    assert match_answer("The answer is a basketball stadium.", sq)
    assert not match_answer("A. tennis court", sq)
    assert not match_answer("", sq) and not match_answer(None, sq)
    c_sq = ShuffledQuestion(sq.question, (0, 2, 1), 2)
    assert not match_answer("A. wrong thing", c_sq)


def test_answer_letter_rules():
    assert answer_letter("b) something", "ABC") == "B"
    assert answer_letter("I think it is a big C", "ABC") == "C"
    assert answer_letter("It's D", "ABC") is None
    assert answer_letter("(A)", "AB") == "A"


def test_longest_choice_text_wins():
    question = q(choices=("park", "park and ride"), answer=1)
    sq = ShuffledQuestion(question, (0, 1), 1)
    assert match_answer("a park and ride facility", sq)
    assert not match_answer("a park", sq)


def test_always_a_three_of_four_is_incorrect():
    question = q(choices=("right", "wrong"), answer=0, qid="q0")
    assert [shuffle_choices(question, t, 0).answer for t in range(4)] == Q0_SEED0_POSITIONS
    report = evaluate(MockChatClient(lambda r: "A"), [question], trials=4, seed=0)
    assert [t.correct for t in report.trials] == [True, True, False, True]
    assert report.overall.correct == 0
    avg = evaluate(MockChatClient(lambda r: "A"), [question], trials=4, seed=0, policy="average")
    assert avg.scores["q0"] == 0.75


def test_echoing_correct_text_scores_one():
    questions = load_benchmark(bench10_lines())

    def echo(req):
        qtext = req.user_message.split("Question: ")[1].split("\n")[0]
        question = next(x for x in questions if x.question == qtext)
        return question.choices[question.answer]

    report = evaluate(MockChatClient(echo), questions, concurrency=4)
    assert report.overall.accuracy == 1.0
    assert all(r.accuracy == 1.0 for r in report.rows if r.total)


def test_scripted_report_matches_hand_computation():
    questions = load_benchmark(bench10_lines())
    report = evaluate(ScriptedBenchModel(), questions, trials=4, seed=0)
    got = {r.dimension: (r.correct, r.total) for r in (*report.rows, report.overall)}
    assert got == BENCH10_EXPECTED
    failed = [t for t in report.trials if t.error]
    assert [(t.question_id, t.trial) for t in failed] == [("q8", 2)]
    lines = report.to_tsv().splitlines()
    assert lines[0] == "dimension\tcorrect\ttotal\taccuracy"
    assert lines[-1] == "overall\t5\t10\t0.5000"


def test_table1_denominators():
    questions = load_benchmark(table1_benchmark_lines())
    assert len(questions) == 690
    report = evaluate(MockChatClient(lambda r: "A"), questions, trials=1)
    assert {r.dimension: r.total for r in report.rows} == TABLE1_COUNTS


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 5))
def test_strictness_monotone(seed, trials):
    import random

    questions = [q(choices=("a", "b", "c"), answer=i % 3, qid=f"m{i}") for i in range(8)]

    def responder(req):
        return random.Random(req.digest() + str(seed)).choice("ABC")

    fewer = evaluate(MockChatClient(responder), questions, trials, seed)
    more = evaluate(MockChatClient(responder), questions, trials + 1, seed)
    for qid, score in more.scores.items():
        assert score <= fewer.scores[qid]
    for r in more.rows:
        assert 0.0 <= r.accuracy <= 1.0 and r.correct <= r.total


def test_evaluate_validation_and_determinism():
    with pytest.raises(ValueError):
        evaluate(MockChatClient(lambda r: "A"), [q()], trials=0)
    with pytest.raises(ValueError):
        evaluate(MockChatClient(lambda r: "A"), [q()], policy="lenient")
    a = evaluate(ScriptedBenchModel(), load_benchmark(bench10_lines()), seed=3)
    b = evaluate(ScriptedBenchModel(), load_benchmark(bench10_lines()), seed=3, concurrency=4)
    assert a.to_tsv() == b.to_tsv()
    assert [t.to_obj() for t in a.trials] == [t.to_obj() for t in b.trials]
    assert len(DIMENSIONS) == 11
