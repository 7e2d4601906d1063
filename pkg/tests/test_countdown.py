import numpy as np
import pytest
import yaml

from core.errors import ArgumentError, DependencyError, EvaluationError, FormatError, ParseError, VocabularyError
from countdown import tokenizer as tok
from countdown.arithmetic import Chain, as_chain, evaluate_left_to_right, operands_of
from countdown.corpus import INDEX_FILE, build_corpus, load_corpus, save_corpus
from countdown.instances import generate_instance, generate_instances, generation_prompt, render_prompt
from countdown.solver import brute_force_solve, reachable_values
from countdown.transcript import Marker, parse_text, synthesize_transcript


# Arithmetic

@pytest.mark.parametrize("expression,value", [
    ("40 * 14 / 20", 28),
    ("2 + 3 * 4", 20),
    ("(2 + 3) * 4", 20),
    ("2 * (3 + 4)", 14),
    ("10 - 3 - 2", 5),
])
def test_left_to_right_evaluation(expression, value):
    assert evaluate_left_to_right(expression) == value


@pytest.mark.parametrize("expression", ["2 +", "2 $ 3", "(2 + 3", "2 3", ""])
def test_malformed_expressions(expression):
    with pytest.raises(ParseError):
        evaluate_left_to_right(expression)


@pytest.mark.parametrize("expression", ["7 / 2", "5 / 0"])
def test_inexact_division(expression):
    with pytest.raises(EvaluationError):
        evaluate_left_to_right(expression)


def test_chain_rendering():
    chain = Chain((40, 14, 20), ("*", "/"))
    assert chain.expression == "40 * 14 / 20"
    assert chain.value() == 28
    assert chain.render_steps() == "40 * 14 / 20 = 560 / 20 = 28"
    assert as_chain("40 * 14 / 20") == chain
    assert as_chain("(1 + 2) * 3") is None
    assert operands_of("(1 + 2) * 30") == [1, 2, 30]


# Solver

def _pair_values(a, b):
    values = {a + b, a * b}
    if a != b:
        values.add(abs(a - b))
    if a % b == 0:
        values.add(a // b)
    if b % a == 0:
        values.add(b // a)
    return values


def test_solver_agrees_with_pair_enumeration():
    for a in range(1, 13):
        for b in range(1, 13):
            expected = _pair_values(a, b)
            assert reachable_values((a, b)) == expected
            for target in range(1, 150):
                witness = brute_force_solve((a, b), target)
                assert (witness is not None) == (target in expected), (a, b, target)
                if witness is not None:
                    assert evaluate_left_to_right(witness) == target
                    assert sorted(operands_of(witness)) == sorted((a, b))


def test_solver_witnesses_use_every_operand_once():
    rng = np.random.default_rng(11)
    for _ in range(50):
        inst = generate_instance(rng, int(rng.choice([3, 4])))
        witness = brute_force_solve(inst.operands, inst.target)
        assert evaluate_left_to_right(witness) == inst.target
        assert sorted(operands_of(witness)) == sorted(inst.operands)


def test_solver_handles_repeated_operands():
    witness = brute_force_solve((1, 1, 5, 5), 20)
    assert witness is not None
    assert evaluate_left_to_right(witness) == 20


@pytest.mark.parametrize("operands", [(5,), (1, 2, 3, 4, 5), (0, 3), (1000, 2)])
def test_solver_rejects_bad_operands(operands):
    with pytest.raises(ArgumentError):
        brute_force_solve(operands, 10)


# Tokenizer

def test_numbers_up_to_three_digits_are_single_tokens(tokenizer):
    assert tokenizer.encode("123") == [tokenizer.number_id(123)]
    assert tokenizer.encode("0") == [tokenizer.number_id(0)]
    assert len(tokenizer.encode("1234")) == 4
    assert len(tokenizer.encode("012")) == 3
    with pytest.raises(VocabularyError):
        tokenizer.number_id(1000)


def test_reserved_strings_are_single_tokens(tokenizer):
    for piece in (tok.THINK_OPEN, tok.THINK_CLOSE, tok.ANSWER_OPEN, tok.EOS, tok.VALID_WORD, tok.INVALID_WORD):
        assert tokenizer.encode(piece) == [tokenizer.token_id(piece)]


def test_encode_decode_and_offsets(tokenizer, worked_instance):
    text = generation_prompt(worked_instance) + "\n40 * 14 / 20 = 560 / 20 = 28 (this works)\n"
    ids, offsets = tokenizer.encode_with_offsets(text)
    assert tokenizer.decode(ids) == text
    decoded, decoded_offsets = tokenizer.decode_with_offsets(ids)
    assert decoded == text and decoded_offsets == offsets


def test_unknown_character(tokenizer):
    with pytest.raises(VocabularyError):
        tokenizer.encode("café")
    with pytest.raises(VocabularyError):
        tokenizer.piece(tokenizer.vocab_size)


# Instances

def test_generated_instances_are_solvable_and_in_range():
    instances = generate_instances(np.random.default_rng(5), 20)
    for inst in instances:
        assert len(inst.operands) in (3, 4)
        assert all(1 <= n <= 99 for n in inst.operands)
        assert 10 <= inst.target <= 99
        assert brute_force_solve(inst.operands, inst.target) is not None
    assert instances == generate_instances(np.random.default_rng(5), 20)


def test_generate_instance_rejects_operand_count(rng):
    with pytest.raises(ArgumentError):
        generate_instance(rng, 2)


def test_prompt_rendering(worked_instance):
    prompt = render_prompt(worked_instance)
    assert "[20, 14, 40]" in prompt and "equals 28." in prompt
    assert generation_prompt(worked_instance).endswith(tok.THINK_OPEN)


# Transcripts

def test_synthesized_transcript_structure(transcript, tokenizer):
    assert transcript.target == 28
    assert transcript.operands == (20, 14, 40)
    assert tokenizer.piece(transcript.tokens[transcript.t_ans]) == "28"
    assert not transcript.out_of_range and not transcript.truncated
    assert transcript.think_closed
    assert transcript.is_validated()
    assert len(transcript.t_valid) == 1
    assert len(transcript.t_invalid) == 2
    assert transcript.attempts[-1].marker is Marker.VALID
    for attempt in transcript.attempts:
        assert tokenizer.piece(transcript.tokens[attempt.marker_pos]) == "("
        word = tokenizer.piece(transcript.tokens[attempt.marker_pos + 1])
        assert word == (tok.VALID_WORD if attempt.is_valid else tok.INVALID_WORD)
        assert attempt.span[0] < attempt.marker_pos < attempt.span[1]
    assert evaluate_left_to_right(transcript.answer) == 28
    assert transcript.tokens[-1] == tokenizer.eos_id


def test_synthesize_parse_agreement_over_many_instances(tokenizer):
    rng = np.random.default_rng(21)
    for inst in generate_instances(rng, 300):
        n_failures = int(rng.integers(0, 4))
        t = synthesize_transcript(inst, rng, n_failures, tokenizer)
        assert t.is_validated(), tokenizer.decode(t.tokens)
        assert not t.out_of_range and not t.truncated
        assert len(t.t_valid) == 1
        assert t.attempts[-1].value == inst.target
        for attempt in t.attempts[:-1]:
            assert attempt.marker is Marker.INVALID
            assert attempt.value != inst.target
            assert attempt.shown == inst.target
        assert t.instance == inst


def test_worked_attempt_parses(tokenizer, worked_instance):
    text = generation_prompt(worked_instance) + "\n20 + 14 = 34 (not 28)\n40 * 14 / 20 = 560 / 20 = 28 (this works)\n"
    text += "</think> <answer> 40 * 14 / 20 </answer><|endoftext|>"
    t = parse_text(text, tokenizer)
    assert [a.expression for a in t.attempts] == ["20 + 14", "40 * 14 / 20"]
    assert [a.value for a in t.attempts] == [34, 28]
    assert [a.claimed for a in t.attempts] == [34, 28]
    assert t.attempts[0].shown == 28
    assert t.answer == "40 * 14 / 20"
    assert t.claims[-1].in_answer_block and t.claims[-1].value == 28


def test_missing_think_tag_is_out_of_range(tokenizer, worked_instance):
    t = parse_text(render_prompt(worked_instance), tokenizer)
    assert t.out_of_range
    assert t.out_of_range_at == len(t.tokens)
    assert t.target == 28


def test_free_text_outside_grammar_is_out_of_range(tokenizer, worked_instance):
    text = generation_prompt(worked_instance) + "\nblah blah\n40 * 14 / 20 = 560 / 20 = 28 (this works)\n"
    text += "</think> <answer> 40 * 14 / 20 </answer><|endoftext|>"
    t = parse_text(text, tokenizer)
    assert t.out_of_range
    assert t.out_of_range_at is not None and t.out_of_range_at < t.attempts[0].marker_pos
    assert not t.is_validated()


def test_prose_lines_and_claims_are_accepted(tokenizer, worked_instance):
    text = generation_prompt(worked_instance) + "\nLet me try multiplying first.\n"
    text += "40 * 14 / 20 = 560 / 20 = 28 (this works)\nThe answer is 40 * 14 / 20\n"
    text += "</think> <answer> 40 * 14 / 20 </answer><|endoftext|>"
    t = parse_text(text, tokenizer)
    assert not t.out_of_range
    assert any(c.value == 28 and not c.in_answer_block for c in t.claims)


def test_unfinished_attempt_is_truncated(tokenizer, worked_instance):
    t = parse_text(generation_prompt(worked_instance) + "\n20 + 14 = 34 (not 28)\n40 * 14 = 560", tokenizer)
    assert t.truncated
    assert not t.out_of_range
    assert len(t.attempts) == 1


# Corpus

def test_corpus_is_deterministic(tokenizer):
    a = build_corpus(7, 20, tokenizer)
    b = build_corpus(7, 20, tokenizer)
    assert [r.to_json() for r in a] == [r.to_json() for r in b]
    stats = a.stats()
    assert stats["train"] + stats["val"] + stats["test"] == 20
    assert stats["val"] == 2 and stats["test"] == 2


def test_corpus_save_and_load(tmp_path, tokenizer):
    corpus = build_corpus(3, 10, tokenizer, digest="d1")
    save_corpus(corpus, str(tmp_path))
    loaded = load_corpus(str(tmp_path), tokenizer)
    assert loaded.digest == "d1"
    assert [r.to_json() for r in loaded] == [r.to_json() for r in corpus]
    assert [r.transcript.t_valid for r in loaded] == [r.transcript.t_valid for r in corpus]


def test_corpus_missing_is_a_dependency_error(tmp_path, tokenizer):
    with pytest.raises(DependencyError, match="gen-data"):
        load_corpus(str(tmp_path), tokenizer)


def test_corpus_index_mismatch(tmp_path, tokenizer):
    corpus = build_corpus(3, 4, tokenizer)
    save_corpus(corpus, str(tmp_path))
    index = tmp_path / INDEX_FILE
    data = yaml.safe_load(index.read_text())
    data["samples"]["s000000"]["t_valid"] = [999]
    index.write_text(yaml.safe_dump(data))
    with pytest.raises(FormatError):
        load_corpus(str(tmp_path), tokenizer)
