"""
Desk-scale classification tasks: synthetic generators and TSV ingestion.
Sequences are [CLS] tokens [SEP] padded with [PAD]; ids 0-3 are reserved.
"""
import csv
import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from bitsplit.exceptions import MalformedRowError, TaskError, UnknownTaskError
from bitsplit.schemas import ModelSpec, TaskConfig, TsvSchema
from bitsplit.transformer import CLS_ID, PAD_ID, SEP_ID, UNK_ID

logger = logging.getLogger(__name__)

RESERVED_TOKENS = 4
SYNTH_KINDS = ("parity-of-marked-tokens", "majority-token-class", "pattern-containment")

# parity task: marker ids
PARITY_MARKERS = (4, 5, 6, 7)
# containment task: the bigram to detect
PATTERN = (4, 5)


@dataclass
class Examples:
    input_ids: torch.Tensor
    token_type_ids: torch.Tensor
    labels: torch.Tensor

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, index: torch.Tensor) -> "Examples":
        return Examples(self.input_ids[index], self.token_type_ids[index], self.labels[index])


@dataclass
class Task:
    name: str
    num_classes: int
    seq_len: int
    train: Examples
    dev: Examples
    source: str
    vocabulary: dict[str, int] = field(default_factory=dict)
    label_names: list[str] = field(default_factory=list)


def _pack(rows: list[list[int]], types: list[list[int]], labels: list[int], seq_len: int) -> Examples:
    ids = torch.full((len(rows), seq_len), PAD_ID, dtype=torch.long)
    tt = torch.zeros((len(rows), seq_len), dtype=torch.long)
    for i, (row, row_types) in enumerate(zip(rows, types)):
        ids[i, :len(row)] = torch.tensor(row, dtype=torch.long)
        tt[i, :len(row_types)] = torch.tensor(row_types, dtype=torch.long)
    return Examples(ids, tt, torch.tensor(labels, dtype=torch.long))


def _parity_example(rng: np.random.Generator, label: int, length: int, vocab: int) -> list[int]:
    count = int(rng.choice([1, 3])) if label else int(rng.choice([0, 2]))
    content = rng.integers(PARITY_MARKERS[-1] + 1, vocab, size=length).tolist()
    for position in rng.choice(length, size=count, replace=False):
        content[int(position)] = int(rng.choice(PARITY_MARKERS))
    return content


def _majority_example(rng: np.random.Generator, label: int, length: int, vocab: int, num_classes: int) -> list[int]:
    def token_of(cls: int) -> int:
        # ids whose (id - 4) % C == cls
        slots = (vocab - RESERVED_TOKENS - cls - 1) // num_classes + 1
        return RESERVED_TOKENS + cls + num_classes * int(rng.integers(0, slots))

    majority = length // 2 + 1
    others = [c for c in range(num_classes) if c != label] or [label]
    content = [token_of(label) for _ in range(majority)]
    content += [token_of(int(rng.choice(others))) for _ in range(length - majority)]
    return [content[int(i)] for i in rng.permutation(length)]


def _contains(content: list[int]) -> bool:
    return any(a == PATTERN[0] and b == PATTERN[1] for a, b in zip(content, content[1:]))


def _pattern_example(rng: np.random.Generator, label: int, length: int, vocab: int) -> list[int]:
    # pattern tokens appear often on their own so the bigram order matters
    pool = np.concatenate([np.array(PATTERN), np.arange(RESERVED_TOKENS + 2, vocab)])
    weights = np.ones(len(pool))
    weights[:2] = len(pool) * 0.1
    content = rng.choice(pool, size=length, p=weights / weights.sum()).tolist()
    for i in range(1, length):
        if content[i - 1] == PATTERN[0] and content[i] == PATTERN[1]:
            content[i] = int(rng.integers(RESERVED_TOKENS + 2, vocab))
    if label:
        start = int(rng.integers(0, length - 1))
        content[start], content[start + 1] = PATTERN
    return [int(t) for t in content]


def synth_task(
    kind: str,
    seed: int,
    vocab: int = 1024,
    seq_len: int = 32,
    train_size: int = 2000,
    dev_size: int = 500,
    num_classes: int = 2,
) -> Task:
    """Deterministic synthetic task with balanced labels (i mod C, then shuffled)."""
    if kind not in SYNTH_KINDS:
        raise UnknownTaskError(kind)
    if kind != "majority-token-class" and num_classes != 2:
        raise TaskError(f"'{kind}' is a binary task, got {num_classes} classes")
    if seq_len < 6 or vocab < RESERVED_TOKENS + 2 * num_classes + 8:
        raise TaskError(f"seq_len {seq_len} / vocab {vocab} too small for '{kind}'")

    rng = np.random.default_rng(seed)
    total = train_size + dev_size
    labels = [i % num_classes for i in range(total)]
    rows = []
    for label in labels:
        length = int(rng.integers(seq_len // 2, seq_len - 1))
        if kind == "parity-of-marked-tokens":
            content = _parity_example(rng, label, length, vocab)
        elif kind == "majority-token-class":
            content = _majority_example(rng, label, length, vocab, num_classes)
        else:
            content = _pattern_example(rng, label, length, vocab)
        rows.append([CLS_ID, *content, SEP_ID])

    order = rng.permutation(total)
    rows = [rows[int(i)] for i in order]
    labels = [labels[int(i)] for i in order]
    types = [[0] * len(row) for row in rows]
    examples = _pack(rows, types, labels, seq_len)
    index = torch.arange(total)
    logger.debug("Generated %s task (%d train, %d dev)", kind, train_size, dev_size)
    return Task(
        name=kind,
        num_classes=num_classes,
        seq_len=seq_len,
        train=examples.subset(index[:train_size]),
        dev=examples.subset(index[train_size:]),
        source=f"synthetic:{kind}:seed={seed}",
    )


def _hash_bucket(word: str, buckets: int) -> int:
    digest = hashlib.md5(word.encode("utf-8")).hexdigest()
    return RESERVED_TOKENS + int(digest, 16) % buckets


def build_vocabulary(counts: Counter, vocab_size: int, hash_buckets: int) -> dict[str, int]:
    """Reserved ids, then hash buckets, then words by descending frequency (ties by word)."""
    first = RESERVED_TOKENS + hash_buckets
    if first > vocab_size:
        raise TaskError(f"{hash_buckets} hash buckets do not fit a vocabulary of {vocab_size}")
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return {word: first + i for i, (word, _) in enumerate(ranked[:vocab_size - first])}


def ingest_tsv(path: Path, schema: TsvSchema, vocab_size: int, seq_len: int) -> Task:
    """
    Load a UTF-8 TSV with a header row. One or two text columns are whitespace-tokenized;
    the last dev_fraction of rows form the dev split.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise TaskError(f"Cannot read {path}: {exc}") from exc
    reader = csv.reader(text.splitlines(), delimiter="\t", quoting=csv.QUOTE_NONE)
    header = next(reader, None)
    if not header:
        raise TaskError(f"{path} is empty")
    missing = [c for c in (*schema.text_columns, schema.label_column) if c not in header]
    if missing:
        raise TaskError(f"{path} lacks columns: {', '.join(missing)}")
    text_index = [header.index(c) for c in schema.text_columns]
    label_index = header.index(schema.label_column)

    records = []
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise MalformedRowError(str(path), line, f"expected {len(header)} fields, found {len(row)}")
        label = row[label_index].strip()
        if not label:
            raise MalformedRowError(str(path), line, "empty label")
        records.append(([row[i].split() for i in text_index], label))
    if not records:
        raise TaskError(f"{path} has a header but no examples")

    counts = Counter(word for segments, _ in records for segment in segments for word in segment)
    vocabulary = build_vocabulary(counts, vocab_size, schema.hash_buckets)

    def token_id(word: str) -> int:
        if word in vocabulary:
            return vocabulary[word]
        return _hash_bucket(word, schema.hash_buckets) if schema.hash_buckets else UNK_ID

    label_names = sorted({label for _, label in records})
    rows, types, labels = [], [], []
    for segments, label in records:
        ids = [[token_id(w) for w in segment] for segment in segments]
        while sum(len(s) for s in ids) + len(ids) + 1 > seq_len:
            longest = max(range(len(ids)), key=lambda i: len(ids[i]))
            ids[longest].pop()
        row, row_types = [CLS_ID], [0]
        for segment_type, segment in enumerate(ids):
            row += [*segment, SEP_ID]
            row_types += [segment_type] * (len(segment) + 1)
        rows.append(row)
        types.append(row_types)
        labels.append(label_names.index(label))

    examples = _pack(rows, types, labels, seq_len)
    n_dev = int(round(len(records) * schema.dev_fraction))
    index = torch.arange(len(records))
    split = len(records) - n_dev
    logger.info("📄 Loaded %s: %d examples, %d labels, %d words", path.name, len(records), len(label_names), len(vocabulary))
    return Task(
        name=path.stem,
        num_classes=len(label_names),
        seq_len=seq_len,
        train=examples.subset(index[:split]),
        dev=examples.subset(index[split:]),
        source=str(path),
        vocabulary=vocabulary,
        label_names=label_names,
    )


def load_task(config: TaskConfig, spec: ModelSpec, seq_len: int) -> Task:
    """Synthetic or TSV task sized for the model."""
    if config.tsv is not None:
        task = ingest_tsv(config.tsv.path, config.tsv, spec.vocab, seq_len)
    else:
        task = synth_task(
            config.kind,
            config.data_seed,
            vocab=spec.vocab,
            seq_len=seq_len,
            train_size=config.train_size,
            dev_size=config.dev_size,
            num_classes=config.num_classes,
        )
    if task.num_classes > spec.num_classes:
        raise TaskError(f"task has {task.num_classes} classes but the model predicts {spec.num_classes}")
    return task


def batches(examples: Examples, batch_size: int, generator: Optional[torch.Generator] = None):
    """Yield mini-batches; shuffled when a generator is given."""
    n = len(examples)
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    for start in range(0, n, batch_size):
        yield examples.subset(order[start:start + batch_size])
