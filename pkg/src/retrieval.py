"""Okapi BM25 pre-filter that narrows the corpus to a candidate pool."""

import json
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .artifacts import atomic_write_json, atomic_write_text, require
from .corpus import RESERVED_IDS, Document, TaskExample
from .errors import InvalidInputError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Bm25Index:
    doc_ids: Tuple[str, ...]
    term_freqs: Tuple[Mapping[int, int], ...]
    doc_lens: Tuple[int, ...]
    df: Mapping[int, int]
    avgdl: float
    k1: float = 1.2
    b: float = 0.75

    @property
    def N(self) -> int:
        return len(self.doc_ids)

    def idf(self, term: int) -> float:
        df = self.df.get(term, 0)
        return math.log((self.N - df + 0.5) / (df + 0.5) + 1.0)

    def position(self, doc_id: str) -> int:
        try:
            return self._positions[doc_id]
        except KeyError:
            raise InvalidInputError(f"Unknown document id: {doc_id}") from None

    def __post_init__(self):
        object.__setattr__(self, '_positions', {d: i for i, d in enumerate(self.doc_ids)})
        postings: Dict[int, List[Tuple[int, int]]] = {}
        for pos, tfs in enumerate(self.term_freqs):
            for term, tf in tfs.items():
                postings.setdefault(term, []).append((pos, tf))
        object.__setattr__(self, '_postings', {
            term: (np.array([p for p, _ in plist], dtype=np.int64),
                   np.array([tf for _, tf in plist], dtype=np.float64))
            for term, plist in postings.items()
        })

    def save(self, path: Path) -> Path:
        return atomic_write_json(path, {
            'k1': self.k1,
            'b': self.b,
            'docs': [
                {'id': doc_id, 'len': dl, 'tf': {str(t): c for t, c in sorted(tfs.items())}}
                for doc_id, dl, tfs in zip(self.doc_ids, self.doc_lens, self.term_freqs)
            ],
        })

    @classmethod
    def load(cls, path: Path) -> 'Bm25Index':
        with open(require(path, "run the index stage first"), 'r', encoding='utf-8') as fh:
            payload = json.load(fh)
        docs = payload['docs']
        term_freqs = tuple({int(t): c for t, c in doc['tf'].items()} for doc in docs)
        return _assemble([d['id'] for d in docs], term_freqs, [d['len'] for d in docs],
                         payload['k1'], payload['b'])


def _assemble(doc_ids, term_freqs, doc_lens, k1, b) -> Bm25Index:
    df = Counter()
    for tfs in term_freqs:
        df.update(tfs.keys())
    return Bm25Index(
        doc_ids=tuple(doc_ids),
        term_freqs=tuple(term_freqs),
        doc_lens=tuple(doc_lens),
        df=dict(df),
        avgdl=sum(doc_lens) / len(doc_lens),
        k1=k1,
        b=b,
    )


def build_index(docs: Sequence[Document], k1: float = 1.2, b: float = 0.75) -> Bm25Index:
    if not docs:
        raise InvalidInputError("Cannot index an empty corpus")
    if k1 <= 0 or not 0 <= b <= 1:
        raise InvalidInputError(f"BM25 parameters out of range: k1={k1}, b={b}")
    index = _assemble(
        [doc.id for doc in docs],
        [dict(Counter(doc.tokens)) for doc in docs],
        [len(doc.tokens) for doc in docs],
        k1, b,
    )
    logger.info("Indexed %d documents (avgdl %.2f, %d terms)", index.N, index.avgdl, len(index.df))
    return index


def _query_terms(query: Sequence[int]) -> List[int]:
    # unique, order-free; reserved ids never match
    return sorted(set(query) - set(RESERVED_IDS))


def bm25_score(index: Bm25Index, query: Sequence[int], doc_id: str) -> float:
    pos = index.position(doc_id)
    tfs = index.term_freqs[pos]
    norm = index.k1 * (1 - index.b + index.b * index.doc_lens[pos] / index.avgdl)
    score = 0.0
    for term in _query_terms(query):
        tf = tfs.get(term, 0)
        if tf:
            score += index.idf(term) * tf * (index.k1 + 1) / (tf + norm)
    return score


def score_all(index: Bm25Index, query: Sequence[int]) -> np.ndarray:
    """BM25 scores of one query against every document, in index order"""
    lens = np.asarray(index.doc_lens, dtype=np.float64)
    norms = index.k1 * (1 - index.b + index.b * lens / index.avgdl)
    scores = np.zeros(index.N, dtype=np.float64)
    for term in _query_terms(query):
        posting = index._postings.get(term)
        if posting is None:
            continue
        positions, tf = posting
        scores[positions] += index.idf(term) * tf * (index.k1 + 1) / (tf + norms[positions])
    return scores


def _top_for_query(index: Bm25Index, query: Sequence[int], top_n: int) -> List[Tuple[int, float]]:
    scores = score_all(index, query)
    positive = np.flatnonzero(scores > 0)
    ranked = sorted(positive.tolist(), key=lambda p: (-scores[p], index.doc_ids[p]))
    return [(p, float(scores[p])) for p in ranked[:top_n]]


def retrieve_candidates(
    index: Bm25Index,
    queries: Sequence[TaskExample],
    top_n: int,
    workers: int = 1,
) -> List[Tuple[str, float]]:
    """Union of each query's top_n positive-score documents.

    Returned as (doc id, best score across queries) ordered by best score
    descending, then id ascending.
    """
    if top_n < 1:
        raise InvalidInputError("top_n must be >= 1")

    def run(query: TaskExample):
        return _top_for_query(index, query.tokens, top_n)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_query = list(pool.map(run, queries))
    else:
        per_query = [run(q) for q in queries]

    best: Dict[int, float] = {}
    for hits in per_query:
        for pos, score in hits:
            if score > best.get(pos, 0.0):
                best[pos] = score
    ordered = sorted(best.items(), key=lambda item: (-item[1], index.doc_ids[item[0]]))
    logger.info("Retrieved %d candidates for %d queries", len(ordered), len(queries))
    return [(index.doc_ids[pos], score) for pos, score in ordered]


def write_pool(path: Path, pool: Sequence[Tuple[str, float]], index: Bm25Index, top_n: int) -> List[Path]:
    manifest_path = path.with_suffix('.manifest.json')
    atomic_write_text(path, ''.join(f"{doc_id}\n" for doc_id, _ in pool))
    atomic_write_json(manifest_path, {
        'k1': index.k1,
        'b': index.b,
        'top_n': top_n,
        'pool_size': len(pool),
    })
    return [path, manifest_path]


def read_ids(path: Path, hint: str = "") -> List[str]:
    with open(require(path, hint), 'r', encoding='utf-8') as fh:
        return [line.strip() for line in fh if line.strip()]
