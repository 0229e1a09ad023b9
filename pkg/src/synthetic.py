"""Planted synthetic benchmark.

Each task class owns a set of topic words. The candidate corpus mixes planted
documents (topic words of a single class), distractors (topic words drawn
across classes, lexically similar but label-inconsistent) and background
documents. ``planted.txt`` lists the planted ids for recall checks.

Training examples only use the first ``train_topic_share`` of each class's
topic words; validation and test examples use all of them, so the remaining
words are learnable only from the corpus. ``topics.json`` records both parts.
"""

import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .artifacts import atomic_write_text
from .config import SynthSettings
from .errors import InvalidInputError

logger = logging.getLogger(__name__)

_SYLLABLES = ('ba', 'ko', 'mi', 'tu', 're', 'sa', 'lo', 'ni', 've', 'da', 'pe', 'zu', 'gi', 'fo', 'ha', 'ky')
_CLASS_NAMES = ('alpha', 'beta', 'gamma', 'delta', 'epsilon', 'zeta', 'eta', 'theta')


@dataclass
class SyntheticBenchmark:
    corpus: Path
    task_train: Path
    task_val: Path
    task_test: Path
    planted: Path
    distractors: Path
    topics: Path

    def paths(self) -> List[Path]:
        return [self.corpus, self.task_train, self.task_val, self.task_test, self.planted, self.distractors,
                self.topics]


def _lexicon(rng: np.random.Generator, count: int) -> List[str]:
    words = [''.join(parts) for parts in itertools.product(_SYLLABLES, repeat=3)]
    if count > len(words):
        raise InvalidInputError(f"synthetic lexicon holds {len(words)} words, {count} requested")
    picked = rng.permutation(len(words))[:count]
    return [words[i] for i in picked]


def _draw(rng: np.random.Generator, pool: Sequence[str], n: int) -> List[str]:
    return [pool[i] for i in rng.integers(0, len(pool), size=n)]


def _mixed(rng: np.random.Generator, topical: List[str], filler: Sequence[str], length: int) -> str:
    words = topical + _draw(rng, filler, length - len(topical))
    return ' '.join(words[i] for i in rng.permutation(len(words)))


def class_label(index: int) -> str:
    return _CLASS_NAMES[index] if index < len(_CLASS_NAMES) else f"class{index}"


def generate(settings: SynthSettings, seed: int, out_dir: Path) -> SyntheticBenchmark:
    if settings.topic_per_example > settings.example_len:
        raise InvalidInputError("topic_per_example cannot exceed example_len")
    n_background = settings.num_docs - settings.num_planted - settings.num_distractors
    if n_background < 0:
        raise InvalidInputError("num_planted + num_distractors exceeds num_docs")
    rng = np.random.default_rng(seed)
    C = settings.num_classes
    words = _lexicon(rng, C * settings.topic_words + settings.shared_words + settings.background_words)
    topics = [words[c * settings.topic_words:(c + 1) * settings.topic_words] for c in range(C)]
    offset = C * settings.topic_words
    shared = words[offset:offset + settings.shared_words]
    background = words[offset + settings.shared_words:]
    all_topic = [w for topic in topics for w in topic]
    n_visible = max(1, int(round(settings.train_topic_share * settings.topic_words)))

    n_topical = max(1, int(round(settings.topic_fraction * settings.doc_len)))
    kinds: List[str] = []
    texts: List[str] = []
    for _ in range(settings.num_planted):
        c = int(rng.integers(C))
        texts.append(_mixed(rng, _draw(rng, topics[c], n_topical), shared, settings.doc_len))
        kinds.append('planted')
    for _ in range(settings.num_distractors):
        texts.append(_mixed(rng, _draw(rng, all_topic, n_topical), shared, settings.doc_len))
        kinds.append('distractor')
    for _ in range(n_background):
        n_shared = settings.doc_len // 4
        texts.append(_mixed(rng, _draw(rng, shared, n_shared), background, settings.doc_len))
        kinds.append('background')

    order = rng.permutation(len(texts))
    corpus_lines, planted, distractors = [], [], []
    for new_index, old_index in enumerate(order):
        doc_id = f"doc{new_index:05d}"
        corpus_lines.append(json.dumps({'id': doc_id, 'text': texts[old_index]}))
        if kinds[old_index] == 'planted':
            planted.append(doc_id)
        elif kinds[old_index] == 'distractor':
            distractors.append(doc_id)

    def task_split(prefix: str, size: int, visible: int) -> List[str]:
        lines = []
        for i in range(size):
            c = i % C
            topical = _draw(rng, topics[c][:visible], settings.topic_per_example)
            text = _mixed(rng, topical, shared, settings.example_len)
            lines.append(json.dumps({'id': f"{prefix}{i:04d}", 'text': text, 'label': class_label(c)}))
        order = rng.permutation(size)
        return [lines[i] for i in order]

    out_dir = Path(out_dir)
    write = lambda name, lines: atomic_write_text(out_dir / name, ''.join(line + '\n' for line in lines))
    bench = SyntheticBenchmark(
        corpus=write('corpus.jsonl', corpus_lines),
        task_train=write('task_train.jsonl', task_split('train', settings.train_size, n_visible)),
        task_val=write('task_val.jsonl', task_split('val', settings.val_size, settings.topic_words)),
        task_test=write('task_test.jsonl', task_split('test', settings.test_size, settings.topic_words)),
        planted=write('planted.txt', sorted(planted)),
        distractors=write('distractors.txt', sorted(distractors)),
        topics=atomic_write_text(out_dir / 'topics.json', json.dumps({
            class_label(c): {'train': topic[:n_visible], 'held_out': topic[n_visible:]}
            for c, topic in enumerate(topics)
        }, indent=2, sort_keys=True) + '\n'),
    )
    logger.info("Synthetic benchmark: %d documents (%d planted, %d distractors), %d classes",
                len(texts), len(planted), len(distractors), C)
    return bench


def planted_recall(members: Sequence[str], planted: Sequence[str]) -> float:
    """Fraction of planted documents that made it into the subset"""
    if not planted:
        return 0.0
    return len(set(members) & set(planted)) / len(set(planted))


def summarize(members: Sequence[str], planted: Sequence[str], distractors: Sequence[str]) -> Dict[str, float]:
    chosen = set(members)
    return {
        'size': len(chosen),
        'planted_recall': planted_recall(members, planted),
        'planted_share': len(chosen & set(planted)) / len(chosen) if chosen else 0.0,
        'distractor_share': len(chosen & set(distractors)) / len(chosen) if chosen else 0.0,
    }
