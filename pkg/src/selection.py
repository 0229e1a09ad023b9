"""Influential subset selection over the BM25 candidate pool.

Per anchor, candidates are ranked by gradient-matching score and the top k are
added to the subset. Ties are broken by ascending id everywhere, and the final
member order is best score descending, then id ascending.
"""

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .artifacts import atomic_write_json, atomic_write_text, canonical_json, require
from .config import derive_seed
from .corpus import Document, TaskExample
from .errors import InvalidInputError
from .influence import InfluenceRecord
from .model import DEFAULT_MASK_PROB, LossKind, ModelState, last_layer_grads, sample_mask_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SelectionConfig:
    k: int = 8
    batch_pretrain: int = 1
    batch_task: int = 1
    use_minibatch: bool = False
    lr: float = 0.5
    seed: int = 0
    mask_prob: float = DEFAULT_MASK_PROB
    shuffle_batches: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.k < 1 or self.batch_pretrain < 1 or self.batch_task < 1:
            raise InvalidInputError("k, B_p and B_t must all be >= 1")
        if self.lr <= 0:
            raise InvalidInputError(f"selection learning rate must be > 0, got {self.lr}")

    def digest(self) -> str:
        payload = {k: v for k, v in self.__dict__.items() if k != 'workers'}
        return hashlib.sha256(canonical_json(payload).encode('utf-8')).hexdigest()


@dataclass
class Subset:
    members: List[str]
    provenance: Dict[str, List[Tuple[str, float]]] = field(default_factory=dict)
    manifest: Dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.members)

    def write(self, directory: Path, name: str = 'subset') -> List[Path]:
        directory = Path(directory)
        members_path = atomic_write_text(directory / f"{name}.txt",
                                         ''.join(f"{m}\n" for m in self.members))
        rows = [
            f"{anchor}\t{rank}\t{candidate}\t{score!r}\n"
            for anchor in sorted(self.provenance)
            for rank, (candidate, score) in enumerate(self.provenance[anchor], start=1)
        ]
        provenance_path = atomic_write_text(directory / f"{name}.provenance.tsv", ''.join(rows))
        manifest_path = atomic_write_json(directory / f"{name}.manifest.json", self.manifest)
        return [members_path, provenance_path, manifest_path]


def read_subset(path: Path) -> List[str]:
    with open(require(path, "run the select stage first"), 'r', encoding='utf-8') as fh:
        return [line.strip() for line in fh if line.strip()]


def _gradients(model: ModelState, samples: Sequence, kind: LossKind,
               seeds: Optional[List[int]], mask_prob: float, workers: int) -> np.ndarray:
    """Per-sample last-layer gradients, optionally computed over worker threads"""
    if workers <= 1 or len(samples) < 2 * workers:
        return last_layer_grads(model, samples, kind, seeds, mask_prob)
    bounds = np.linspace(0, len(samples), workers + 1).astype(int)
    chunks = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(
            lambda span: last_layer_grads(model, samples[span[0]:span[1]], kind,
                                          None if seeds is None else seeds[span[0]:span[1]],
                                          mask_prob),
            chunks,
        ))
    return np.vstack(parts)


def candidate_gradients(model: ModelState, candidates: Sequence[Document], cfg: SelectionConfig) -> np.ndarray:
    seeds = [sample_mask_seed(cfg.seed, doc.id) for doc in candidates]
    return _gradients(model, candidates, LossKind.PRETRAINING, seeds, cfg.mask_prob, cfg.workers)


def anchor_gradients(model: ModelState, anchors: Sequence[TaskExample], cfg: SelectionConfig) -> np.ndarray:
    return _gradients(model, anchors, LossKind.TASK, None, cfg.mask_prob, cfg.workers)


def score_candidates(
    model: ModelState,
    candidates: Sequence[Document],
    anchors: Sequence[TaskExample],
    cfg: SelectionConfig,
) -> List[InfluenceRecord]:
    """Full cross product of gradient-matching scores, candidate-major by id"""
    G_p = candidate_gradients(model, candidates, cfg)
    G_t = anchor_gradients(model, anchors, cfg)
    scores = cfg.lr * (G_t @ G_p.T)
    c_order = sorted(range(len(candidates)), key=lambda i: candidates[i].id)
    a_order = sorted(range(len(anchors)), key=lambda j: anchors[j].id)
    records = [
        InfluenceRecord(candidates[i].id, anchors[j].id, float(scores[j, i]))
        for i in c_order for j in a_order
    ]
    logger.info("Scored %d candidates against %d anchors", len(candidates), len(anchors))
    return records


def _rank(scored: Iterable[Tuple[str, float]]) -> List[Tuple[str, float]]:
    return sorted(scored, key=lambda item: (-item[1], item[0]))


def _union(provenance: Dict[str, List[Tuple[str, float]]]) -> List[str]:
    best: Dict[str, float] = {}
    for ranked in provenance.values():
        for candidate, score in ranked:
            if candidate not in best or score > best[candidate]:
                best[candidate] = score
    return [candidate for candidate, _ in _rank(best.items())]


def _per_anchor(records: Iterable[InfluenceRecord]) -> Dict[str, List[Tuple[str, float]]]:
    by_anchor: Dict[str, List[Tuple[str, float]]] = {}
    for rec in records:
        by_anchor.setdefault(rec.anchor, []).append((rec.candidate, rec.score))
    return {anchor: _rank(scored) for anchor, scored in by_anchor.items()}


def select_topk(records: Iterable[InfluenceRecord], k: int) -> Subset:
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    ranked = _per_anchor(records)
    provenance = {anchor: scored[:k] for anchor, scored in ranked.items()}
    members = _union(provenance)
    return Subset(members, provenance, {
        'k': k,
        'anchors': len(provenance),
        'size': len(members),
    })


def select_to_size(records: Iterable[InfluenceRecord], size: int) -> Subset:
    """Smallest k whose union reaches ``size`` members, truncated in subset order"""
    if size < 1:
        raise InvalidInputError("subset size must be >= 1")
    ranked = _per_anchor(records)
    max_k = max((len(scored) for scored in ranked.values()), default=0)
    provenance: Dict[str, List[Tuple[str, float]]] = {}
    members: List[str] = []
    k = 0
    for k in range(1, max_k + 1):
        provenance = {anchor: scored[:k] for anchor, scored in ranked.items()}
        members = _union(provenance)
        if len(members) >= size:
            break
    if len(members) < size:
        logger.warning("Only %d candidates available for a requested subset of %d", len(members), size)
    kept = set(members[:size])
    provenance = {anchor: [(c, s) for c, s in scored if c in kept] for anchor, scored in provenance.items()}
    return Subset(members[:size], provenance, {
        'k': k,
        'anchors': len(provenance),
        'size': len(kept),
        'requested_size': size,
    })


def _partition(n: int, batch: int, shuffle_seed: Optional[int]) -> List[np.ndarray]:
    order = np.arange(n)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(n)
    return [order[start:start + batch] for start in range(0, n, batch)]


def _batch_means(G: np.ndarray, batches: List[np.ndarray]) -> np.ndarray:
    return np.stack([G[idx].sum(axis=0) / idx.size for idx in batches])


def minibatch_select(
    model: ModelState,
    candidates: Sequence[Document],
    anchors: Sequence[TaskExample],
    cfg: SelectionConfig,
) -> Subset:
    """Score candidate batches against anchor batches by mean-gradient matching.

    Candidates are cut into contiguous batches of B_p (pool order), anchors
    into batches of B_t; each anchor batch keeps its top-k candidate batches
    and the subset is the union of their member documents.
    """
    if not cfg.use_minibatch:
        raise InvalidInputError("minibatch_select requires use_minibatch")
    G_p = candidate_gradients(model, candidates, cfg)
    G_t = anchor_gradients(model, anchors, cfg)
    shuffle = derive_seed(cfg.seed, 'batch-shuffle') if cfg.shuffle_batches else None
    p_batches = _partition(len(candidates), cfg.batch_pretrain, shuffle)
    t_batches = _partition(len(anchors), cfg.batch_task, None)
    scores = cfg.lr * (_batch_means(G_t, t_batches) @ _batch_means(G_p, p_batches).T)

    p_members = [sorted(candidates[i].id for i in idx) for idx in p_batches]
    p_keys = [members[0] for members in p_members]
    provenance: Dict[str, List[Tuple[str, float]]] = {}
    for row, idx in enumerate(t_batches):
        label = '|'.join(anchors[i].id for i in idx)
        ranked = sorted(range(len(p_batches)), key=lambda b: (-scores[row, b], p_keys[b]))
        provenance[label] = [
            (doc_id, float(scores[row, b])) for b in ranked[:cfg.k] for doc_id in p_members[b]
        ]
    members = _union(provenance)
    dot_products = len(p_batches) * len(t_batches)
    logger.info("Mini-batch selection: %d dot products instead of %d",
                dot_products, len(candidates) * len(anchors))
    return Subset(members, provenance, {
        'k': cfg.k,
        'anchors': len(provenance),
        'size': len(members),
        'batch_pretrain': cfg.batch_pretrain,
        'batch_task': cfg.batch_task,
        'dot_products': dot_products,
        'per_sample_dot_products': len(candidates) * len(anchors),
    })


def write_scores(path: Path, records: Sequence[InfluenceRecord], manifest: Dict) -> List[Path]:
    """Tab-separated candidate_id, anchor_id, score, sorted candidate-major"""
    ordered = sorted(records, key=lambda r: (r.candidate, r.anchor))
    text = ''.join(f"{r.candidate}\t{r.anchor}\t{r.score!r}\n" for r in ordered)
    scores_path = atomic_write_text(path, text)
    manifest_path = atomic_write_json(path.with_suffix('.manifest.json'), manifest)
    return [scores_path, manifest_path]


def read_scores(path: Path) -> List[InfluenceRecord]:
    records = []
    with open(require(path, "run the score stage first"), 'r', encoding='utf-8') as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip('\n').split('\t')
            if len(parts) != 3:
                raise InvalidInputError(f"{path}: malformed score line {line_no}")
            records.append(InfluenceRecord(parts[0], parts[1], float(parts[2])))
    return records
