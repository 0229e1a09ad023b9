"""Ingestion, tokenization and vocabulary construction.

Both the unlabeled candidate corpus and the labeled task splits are JSONL
files, one object per line. Everything here is deterministic: the same bytes
always produce the same token ids.
"""

import json
import logging
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .artifacts import atomic_write_json, atomic_write_text, require
from .errors import InvalidInputError

logger = logging.getLogger(__name__)

UNK_ID = 0
MASK_ID = 1
UNK_TOKEN = '[UNK]'
MASK_TOKEN = '[MASK]'
RESERVED_IDS = (UNK_ID, MASK_ID)

_PUNCT = string.punctuation


def tokenize(text: str) -> List[str]:
    """Lowercase, split on whitespace, strip ASCII punctuation from each piece"""
    pieces = (piece.strip(_PUNCT) for piece in text.lower().split())
    return [piece for piece in pieces if piece]


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    tokens: Tuple[int, ...]

    def __post_init__(self):
        if not self.tokens:
            raise InvalidInputError(f"Document {self.id} has no tokens")


@dataclass(frozen=True)
class TaskExample:
    id: str
    tokens: Tuple[int, ...]
    label: int
    text: str = ''

    def __post_init__(self):
        if not self.tokens:
            raise InvalidInputError(f"Task example {self.id} has no tokens")
        if self.label < 0:
            raise InvalidInputError(f"Task example {self.id} has negative label {self.label}")


Sample = Union[Document, TaskExample]


class Vocabulary:
    """Bidirectional token/id map with UNK=0 and MASK=1 reserved"""

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token: List[str] = [UNK_TOKEN, MASK_TOKEN, *tokens]
        self.token_to_id: Dict[str, int] = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise InvalidInputError("Vocabulary tokens must be unique")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return self.size

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def encode(self, tokens: Iterable[str]) -> Tuple[int, ...]:
        return tuple(self.token_to_id.get(tok, UNK_ID) for tok in tokens)

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.id_to_token[i] for i in ids]

    def save(self, path: Path) -> Path:
        return atomic_write_json(path, {'tokens': self.id_to_token[2:]})

    @classmethod
    def load(cls, path: Path) -> 'Vocabulary':
        with open(require(path, "run the ingest stage first"), 'r', encoding='utf-8') as fh:
            return cls(json.load(fh)['tokens'])


def build_vocabulary(
    docs: Iterable[str],
    task: Iterable[str] = (),
    min_freq: int = 2,
    task_min_freq: int = 1,
) -> Vocabulary:
    """Build a vocabulary from raw corpus and task texts.

    A token is kept when its total count reaches ``min_freq`` or its count in
    the task texts reaches ``task_min_freq``. Ids follow descending total
    frequency, ties broken lexicographically.
    """
    if min_freq < 1 or task_min_freq < 1:
        raise InvalidInputError("min_freq must be >= 1")

    corpus_counts = Counter()
    for text in docs:
        corpus_counts.update(tokenize(text))
    task_counts = Counter()
    for text in task:
        task_counts.update(tokenize(text))

    totals = corpus_counts + task_counts
    for reserved in (UNK_TOKEN, MASK_TOKEN):
        totals.pop(reserved, None)
    if not totals:
        raise InvalidInputError("no tokens")

    kept = [
        tok for tok, count in totals.items()
        if count >= min_freq or task_counts[tok] >= task_min_freq
    ]
    kept.sort(key=lambda tok: (-totals[tok], tok))
    logger.info("Vocabulary: %d of %d distinct tokens kept", len(kept), len(totals))
    return Vocabulary(kept)


def _read_records(path: Path, fields: Tuple[str, ...]) -> List[Tuple[int, Dict[str, str]]]:
    records = []
    with open(require(path), 'rb') as fh:
        for line_no, raw in enumerate(fh, start=1):
            try:
                line = raw.decode('utf-8')
            except UnicodeDecodeError as e:
                raise InvalidInputError(f"{path}: malformed line {line_no}: invalid UTF-8") from e
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise InvalidInputError(f"{path}: malformed line {line_no}: {e.msg}") from e
            if not isinstance(record, dict) or set(record) != set(fields):
                raise InvalidInputError(
                    f"{path}: malformed line {line_no}: expected exactly fields {', '.join(fields)}"
                )
            if not all(isinstance(record[f], str) for f in fields):
                raise InvalidInputError(f"{path}: malformed line {line_no}: fields must be strings")
            records.append((line_no, record))
    return records


def read_texts(path: Path, fields: Tuple[str, ...] = ('id', 'text')) -> List[str]:
    return [record['text'] for _, record in _read_records(path, fields)]


@dataclass
class IngestResult:
    documents: List[Document]
    skipped: int = 0


def ingest_corpus(path: Path, vocab: Vocabulary) -> IngestResult:
    """Read the candidate corpus; empty-after-tokenization lines are skipped and counted"""
    documents: List[Document] = []
    seen = set()
    skipped = 0
    for line_no, record in _read_records(path, ('id', 'text')):
        doc_id = record['id']
        if doc_id in seen:
            raise InvalidInputError(f"duplicate id {doc_id} (line {line_no})")
        seen.add(doc_id)
        tokens = vocab.encode(tokenize(record['text']))
        if not tokens:
            skipped += 1
            continue
        documents.append(Document(doc_id, record['text'], tokens))
    if skipped:
        logger.warning("Skipped %d empty documents in %s", skipped, path)
    logger.info("Ingested %d documents from %s", len(documents), path)
    return IngestResult(documents, skipped)


@dataclass
class LabelMap:
    """String labels mapped to category indices in first-seen order"""

    labels: List[str] = field(default_factory=list)

    def index(self, label: str) -> int:
        if label not in self.labels:
            self.labels.append(label)
        return self.labels.index(label)

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    def save(self, path: Path) -> Path:
        return atomic_write_json(path, {'labels': self.labels})

    @classmethod
    def load(cls, path: Path) -> 'LabelMap':
        with open(require(path, "run the ingest stage first"), 'r', encoding='utf-8') as fh:
            return cls(list(json.load(fh)['labels']))


@dataclass
class TaskData:
    examples: List[TaskExample]
    skipped: int = 0


def ingest_task(path: Path, vocab: Vocabulary, label_map: Optional[LabelMap] = None) -> TaskData:
    """Read one task split; labels extend ``label_map`` in first-seen order"""
    label_map = label_map if label_map is not None else LabelMap()
    examples: List[TaskExample] = []
    seen = set()
    skipped = 0
    for line_no, record in _read_records(path, ('id', 'text', 'label')):
        ex_id = record['id']
        if ex_id in seen:
            raise InvalidInputError(f"duplicate id {ex_id} (line {line_no})")
        seen.add(ex_id)
        tokens = vocab.encode(tokenize(record['text']))
        if not tokens:
            skipped += 1
            continue
        label = label_map.index(record['label'])
        examples.append(TaskExample(ex_id, tokens, label, record['text']))
    if skipped:
        logger.warning("Skipped %d empty task examples in %s", skipped, path)
    return TaskData(examples, skipped)


def write_tokens(path: Path, samples: Sequence[Sample]) -> Path:
    """Persist ingested samples as JSONL of ids, token ids and (for task data) labels"""
    lines = []
    for sample in samples:
        record = {'id': sample.id, 'tokens': list(sample.tokens)}
        if isinstance(sample, TaskExample):
            record['label'] = sample.label
        lines.append(json.dumps(record, sort_keys=True))
    return atomic_write_text(path, ''.join(line + '\n' for line in lines))


def read_documents(path: Path) -> List[Document]:
    with open(require(path, "run the ingest stage first"), 'r', encoding='utf-8') as fh:
        return [
            Document(rec['id'], '', tuple(rec['tokens']))
            for rec in map(json.loads, filter(str.strip, fh))
        ]


def read_examples(path: Path) -> List[TaskExample]:
    with open(require(path, "run the ingest stage first"), 'r', encoding='utf-8') as fh:
        return [
            TaskExample(rec['id'], tuple(rec['tokens']), rec['label'])
            for rec in map(json.loads, filter(str.strip, fh))
        ]


def validate_ids(samples: Sequence[Sample], vocab_size: int, num_classes: Optional[int] = None) -> None:
    """Every token id must be < V and every label < C"""
    for sample in samples:
        if max(sample.tokens) >= vocab_size or min(sample.tokens) < 0:
            raise InvalidInputError(f"{sample.id} holds a token id outside [0, {vocab_size})")
        if num_classes is not None and isinstance(sample, TaskExample) and sample.label >= num_classes:
            raise InvalidInputError(f"{sample.id} has label {sample.label} >= C={num_classes}")
