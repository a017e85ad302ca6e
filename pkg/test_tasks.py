"""
Synthetic task generators and TSV ingestion.
"""
from collections import Counter

import pytest
import torch
from pydantic import ValidationError

from bitsplit.exceptions import MalformedRowError, TaskError, UnknownTaskError
from bitsplit.schemas import ModelSpec, TaskConfig, TsvSchema
from bitsplit.tasks import PARITY_MARKERS, PATTERN, RESERVED_TOKENS, batches, build_vocabulary, ingest_tsv, load_task, synth_task
from bitsplit.transformer import CLS_ID, PAD_ID, SEP_ID, UNK_ID


def _contents(examples):
    """Token ids between [CLS] and [SEP] for each row."""
    rows = []
    for ids in examples.input_ids.tolist():
        assert ids[0] == CLS_ID
        end = ids.index(SEP_ID)
        assert all(t == PAD_ID for t in ids[end + 1:])
        rows.append(ids[1:end])
    return rows


def _all(task):
    return _contents(task.train) + _contents(task.dev), task.train.labels.tolist() + task.dev.labels.tolist()


def test_synthetic_tasks_are_deterministic():
    first = synth_task("parity-of-marked-tokens", seed=3, vocab=64, seq_len=16, train_size=40, dev_size=10)
    second = synth_task("parity-of-marked-tokens", seed=3, vocab=64, seq_len=16, train_size=40, dev_size=10)
    other = synth_task("parity-of-marked-tokens", seed=4, vocab=64, seq_len=16, train_size=40, dev_size=10)
    assert torch.equal(first.train.input_ids, second.train.input_ids)
    assert torch.equal(first.dev.labels, second.dev.labels)
    assert not torch.equal(first.train.input_ids, other.train.input_ids)
    assert first.source == "synthetic:parity-of-marked-tokens:seed=3"


def test_split_sizes_and_padding():
    task = synth_task("pattern-containment", seed=0, vocab=64, seq_len=16, train_size=30, dev_size=12)
    assert (len(task.train), len(task.dev)) == (30, 12)
    assert task.train.input_ids.shape == (30, 16)
    assert int(task.train.token_type_ids.abs().sum()) == 0
    _contents(task.train)


@pytest.mark.parametrize("num_classes", [2, 3])
def test_majority_labels_are_uniform_and_correct(num_classes):
    task = synth_task("majority-token-class", seed=1, vocab=128, seq_len=20, train_size=600, dev_size=150, num_classes=num_classes)
    contents, labels = _all(task)
    prior = Counter(labels)
    for cls in range(num_classes):
        assert prior[cls] / len(labels) == pytest.approx(1 / num_classes, abs=0.01)
    for content, label in zip(contents, labels):
        votes = Counter((t - RESERVED_TOKENS) % num_classes for t in content)
        assert votes.most_common(1)[0][0] == label
        assert votes[label] > len(content) / 2


def test_parity_counts_markers():
    contents, labels = _all(synth_task("parity-of-marked-tokens", seed=2, vocab=64, seq_len=16, train_size=100, dev_size=20))
    for content, label in zip(contents, labels):
        assert sum(t in PARITY_MARKERS for t in content) % 2 == label


def test_pattern_containment_detects_bigram():
    contents, labels = _all(synth_task("pattern-containment", seed=5, vocab=64, seq_len=16, train_size=100, dev_size=20))
    for content, label in zip(contents, labels):
        found = any((a, b) == PATTERN for a, b in zip(content, content[1:]))
        assert found == bool(label)


def test_synth_task_rejects_bad_requests():
    with pytest.raises(UnknownTaskError):
        synth_task("sentiment", seed=0)
    with pytest.raises(TaskError):
        synth_task("parity-of-marked-tokens", seed=0, num_classes=3)
    with pytest.raises(TaskError):
        synth_task("majority-token-class", seed=0, seq_len=4)


def test_build_vocabulary_orders_by_frequency_then_word():
    counts = Counter({"b": 3, "a": 3, "c": 1})
    assert build_vocabulary(counts, 10, 2) == {"a": 6, "b": 7, "c": 8}
    assert build_vocabulary(counts, 7, 2) == {"a": 6}
    with pytest.raises(TaskError):
        build_vocabulary(counts, 5, 4)


def _write(tmp_path, text, name="reviews.tsv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_ingest_single_column_tsv(tmp_path):
    path = _write(tmp_path, "sentence\tlabel\ngood film\tpos\nbad film\tneg\ngood good\tpos\nfilm\tneg\nawful plot\tneg\n")
    schema = TsvSchema(path=path, text_columns=["sentence"], label_column="label", hash_buckets=0)
    task = ingest_tsv(path, schema, vocab_size=32, seq_len=8)
    assert task.label_names == ["neg", "pos"]
    assert task.num_classes == 2
    assert (len(task.train), len(task.dev)) == (4, 1)
    assert task.vocabulary["film"] == RESERVED_TOKENS
    assert task.vocabulary["good"] == RESERVED_TOKENS + 1
    assert task.train.input_ids[0, :4].tolist() == [CLS_ID, task.vocabulary["good"], task.vocabulary["film"], SEP_ID]
    assert task.train.labels.tolist() == [1, 0, 1, 0]
    assert task.name == "reviews"


def test_ingest_sentence_pairs_and_truncation(tmp_path):
    path = _write(tmp_path, "a\tb\ty\none two three four five\tsix\t1\nx\ty\t0\n")
    schema = TsvSchema(path=path, text_columns=["a", "b"], label_column="y", dev_fraction=0.0, hash_buckets=4)
    task = ingest_tsv(path, schema, vocab_size=32, seq_len=6)
    first = task.train.input_ids[0].tolist()
    assert first[0] == CLS_ID and first.count(SEP_ID) == 2
    assert PAD_ID not in first
    assert task.train.token_type_ids[0].tolist() == [0, 0, 0, 0, 1, 1]


def test_out_of_vocabulary_words(tmp_path):
    path = _write(tmp_path, "s\tl\nalpha beta\t0\n")
    schema = TsvSchema(path=path, text_columns=["s"], label_column="l", dev_fraction=0.0, hash_buckets=0)
    task = ingest_tsv(path, schema, vocab_size=5, seq_len=6)
    assert task.train.input_ids[0, 1:3].tolist() == [4, UNK_ID]

    hashed = ingest_tsv(path, schema.model_copy(update={"hash_buckets": 1}), vocab_size=5, seq_len=6)
    assert hashed.train.input_ids[0, 1:3].tolist() == [RESERVED_TOKENS, RESERVED_TOKENS]


def test_malformed_rows_are_reported_with_line(tmp_path):
    path = _write(tmp_path, "s\tl\nfine\t0\nbroken row\n")
    schema = TsvSchema(path=path, text_columns=["s"], label_column="l")
    with pytest.raises(MalformedRowError) as exc:
        ingest_tsv(path, schema, 32, 8)
    assert exc.value.line == 3

    path = _write(tmp_path, "s\tl\nfine\t\n", "blank.tsv")
    with pytest.raises(MalformedRowError):
        ingest_tsv(path, schema.model_copy(update={"path": path}), 32, 8)


def test_unusable_files_raise_task_error(tmp_path):
    empty = _write(tmp_path, "", "empty.tsv")
    header_only = _write(tmp_path, "s\tl\n", "header.tsv")
    other_columns = _write(tmp_path, "text\tgold\nx\t1\n", "other.tsv")
    for path in (empty, header_only, other_columns):
        with pytest.raises(TaskError):
            ingest_tsv(path, TsvSchema(path=path, text_columns=["s"], label_column="l"), 32, 8)
    with pytest.raises(TaskError):
        ingest_tsv(tmp_path / "missing.tsv", TsvSchema(path=empty, text_columns=["s"], label_column="l"), 32, 8)


def test_load_task_checks_classes(tmp_path):
    spec = ModelSpec(num_layers=1, hidden=16, heads=2, ffn_dim=32, vocab=64, max_seq_len=16, num_classes=2)
    task = load_task(TaskConfig(train_size=20, dev_size=4), spec, 12)
    assert task.num_classes == 2 and task.seq_len == 12
    with pytest.raises(TaskError):
        load_task(TaskConfig(num_classes=3, train_size=20, dev_size=4), spec, 12)
    with pytest.raises(ValidationError):
        TaskConfig(tsv={"path": tmp_path / "nope.tsv", "text_columns": ["s"], "label_column": "l"})


def test_batches():
    task = synth_task("majority-token-class", seed=0, vocab=64, seq_len=12, train_size=12, dev_size=0)
    assert [len(b) for b in batches(task.train, 5)] == [5, 5, 2]
    shuffled = torch.cat([b.labels for b in batches(task.train, 5, torch.Generator().manual_seed(1))])
    assert sorted(shuffled.tolist()) == sorted(task.train.labels.tolist())
