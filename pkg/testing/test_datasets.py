#!/usr/bin/env python3
"""
Dataset tests
- text corpus chunking, uniform chunk placement and tokenization
- synthetic sources, their unigram marginals and entropy rates
- JSON-lines export
"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from core.exceptions import DatasetError
from data.datasets import (
    ALPHABET,
    ArraySampler,
    SyntheticSource,
    TextCorpus,
    TextSampler,
    TokenSequence,
    detokenize,
    load_text,
    read_jsonl,
    stack_sequences,
    synth_generate,
    tokenize,
    write_jsonl,
)


@pytest.fixture
def corpus_file(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text("abc", encoding="utf-8")
    return path


def test_short_corpus_has_two_chunks(corpus_file, rng):
    corpus = TextCorpus(str(corpus_file), 2)
    assert corpus.num_offsets == 2
    chunks = {tuple(row) for row in corpus.sample(200, rng)}
    assert chunks == {(0, 1), (1, 2)}


def test_corpus_shorter_than_chunk(corpus_file):
    with pytest.raises(DatasetError):
        TextCorpus(str(corpus_file), 4)


def test_unreadable_corpus(tmp_path):
    with pytest.raises(DatasetError):
        TextCorpus(str(tmp_path / "missing.txt"), 2)
    binary = tmp_path / "binary.txt"
    binary.write_bytes(b"\xff\xfe\xfa")
    with pytest.raises(DatasetError):
        TextCorpus(str(binary), 1)


def test_chunk_starts_are_uniform(tmp_path, rng):
    path = tmp_path / "long.txt"
    path.write_text("the quick brown fox jumps over the lazy dog " * 2, encoding="utf-8")
    corpus = TextCorpus(str(path), 11)
    starts = corpus.chunk_starts(100_000, rng)
    assert starts.min() >= 0 and starts.max() < corpus.num_offsets
    counts = np.bincount(starts, minlength=corpus.num_offsets)
    assert stats.chisquare(counts).pvalue > 0.01


def test_tokenize_maps_other_characters_to_space():
    ids = tokenize("Hi, there!")
    assert detokenize(ids) == "hi  there "
    assert len(ALPHABET) == 27 and ids.max() < 27


def test_load_text_stream(corpus_file, rng):
    sequences = list(load_text(str(corpus_file), 3, rng, 2))
    assert [s.ids for s in sequences] == [[0, 1, 2], [0, 1, 2]]
    assert sequences[0].meta["alphabet"] == "text27"


def test_uniform_source_entropy():
    source = SyntheticSource.uniform(8)
    assert source.entropy_rate() == pytest.approx(math.log(8))
    sequences, entropy = synth_generate(source, 5, 7, np.random.default_rng(0))
    assert len(sequences) == 5 and all(len(s) == 7 for s in sequences)
    assert entropy == pytest.approx(math.log(8))


def test_deterministic_source(rng):
    source = SyntheticSource.deterministic(5, 3)
    assert source.entropy_rate() == 0.0
    assert np.all(source.generate(4, 6, rng) == 3)


def test_markov_source(rng):
    matrix = np.array([[0.9, 0.1], [0.5, 0.5]])
    source = SyntheticSource("markov", matrix=matrix)
    pi = source.stationary()
    assert_allclose(pi, [5 / 6, 1 / 6], atol=1e-12)
    row_entropy = np.array([-(0.9 * math.log(0.9) + 0.1 * math.log(0.1)), math.log(2)])
    assert source.entropy_rate() == pytest.approx(float(pi @ row_entropy))
    ids = source.generate(2000, 50, rng)
    transitions = np.count_nonzero((ids[:, :-1] == 0) & (ids[:, 1:] == 1)) / np.count_nonzero(ids[:, :-1] == 0)
    assert transitions == pytest.approx(0.1, abs=0.01)


def test_source_validation():
    with pytest.raises(DatasetError):
        SyntheticSource("iid", probs=[0.5, 0.6])
    with pytest.raises(DatasetError):
        SyntheticSource("markov", matrix=[[1.0, 0.0]])
    with pytest.raises(DatasetError):
        SyntheticSource("zipf")


def test_jsonl_export(tmp_path):
    path = tmp_path / "samples.jsonl"
    write_jsonl(str(path), [TokenSequence([1, 2, 3]), TokenSequence([0, 0, 4])])
    assert path.read_text().splitlines() == ["[1, 2, 3]", "[0, 0, 4]"]
    loaded = read_jsonl(str(path))
    assert stack_sequences(loaded).tolist() == [[1, 2, 3], [0, 0, 4]]


def test_jsonl_rejects_bad_lines(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('[1, 2]\n{"a": 1}\n')
    with pytest.raises(DatasetError):
        read_jsonl(str(path))
    path.write_text("[1, 2\n")
    with pytest.raises(DatasetError):
        read_jsonl(str(path))


def test_stack_needs_equal_lengths():
    with pytest.raises(DatasetError):
        stack_sequences([TokenSequence([1]), TokenSequence([1, 2])])


def test_token_sequence_check():
    with pytest.raises(DatasetError):
        TokenSequence([0, 5]).check(5)


def test_samplers(corpus_file, rng):
    ids = np.arange(12).reshape(4, 3)
    batch = ArraySampler(ids)(rng, 10)
    assert batch.shape == (10, 3)
    with pytest.raises(DatasetError):
        ArraySampler(np.zeros((0, 3)))
    assert TextSampler(TextCorpus(str(corpus_file), 2))(rng, 5).shape == (5, 2)


@pytest.mark.parametrize("source", [
    SyntheticSource("iid", probs=[0.5, 0.3, 0.15, 0.05]),
    SyntheticSource("markov", matrix=[[0.9, 0.1, 0.0], [0.2, 0.5, 0.3], [0.4, 0.0, 0.6]]),
])
def test_generated_unigram_matches_the_marginal(source, rng):
    sequences, _ = synth_generate(source, 4000, 32, rng)
    ids = stack_sequences(sequences)
    d = source.vocab_size
    # sequences are independent; tokens inside a Markov sequence are not
    per_sequence = np.stack([np.bincount(row, minlength=d) / len(row) for row in ids])
    se = per_sequence.std(axis=0) / math.sqrt(len(ids))
    assert np.all(np.abs(per_sequence.mean(axis=0) - source.stationary()) <= 3 * se)
