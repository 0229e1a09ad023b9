"""Downstream pipeline and analyses.

Pretrain on a subset, finetune on the task, score with micro/macro F1, count
training compute, and compare word statistics between subsets.
"""

import itertools
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from .artifacts import atomic_write_text
from .config import derive_seed
from .corpus import RESERVED_IDS, Document, Sample, TaskExample
from .errors import InvalidInputError
from .model import (
    FINETUNE_PARAMS,
    PRETRAIN_PARAMS,
    LossKind,
    ModelState,
    TrainConfig,
    TrainResult,
    features,
    loss_and_grads,
    predict,
    sgd_step,
)
from .selection import Subset

logger = logging.getLogger(__name__)

UNDEFINED = float('-inf')
METRICS = ('micro', 'macro')


def flops(param_count: int, tokens: int) -> float:
    """Training compute convention: 6 x tokens x parameters"""
    if param_count < 0 or tokens < 0:
        raise InvalidInputError("FLOPs inputs must be nonnegative")
    return 6.0 * tokens * param_count


@dataclass
class PretrainResult(TrainResult):
    flops: float = 0.0


def _doc_stream(n: int, seed: int) -> Iterator[int]:
    """Endless index stream: successive seeded permutations of range(n)"""
    for epoch in itertools.count():
        yield from np.random.default_rng(derive_seed(seed, 'pretrain-order', epoch)).permutation(n).tolist()


def pretrain(
    model: ModelState,
    docs: Sequence[Document],
    cfg: TrainConfig,
    trainable: Sequence[str] = PRETRAIN_PARAMS,
) -> PretrainResult:
    """``cfg.steps`` SGD steps of l_p, each on exactly ``cfg.batch_size`` documents"""
    usable = [doc for doc in docs if len(doc.tokens) >= 2]
    if not usable:
        raise InvalidInputError("pretraining needs at least one document with 2+ tokens")
    if len(usable) < len(docs):
        logger.warning("Pretraining skips %d single-token documents", len(docs) - len(usable))

    result = PretrainResult(model)
    stream = _doc_stream(len(usable), cfg.seed)
    for step in range(cfg.steps):
        batch = [usable[next(stream)] for _ in range(cfg.batch_size)]
        seeds = [derive_seed(cfg.seed, 'pretrain-mask', step, slot) for slot in range(len(batch))]
        loss, grads = loss_and_grads(result.model, batch, LossKind.PRETRAINING, seeds, cfg.mask_prob)
        result.model = sgd_step(result.model, {name: grads[name] for name in trainable}, cfg.lr)
        result.tokens += sum(len(doc.tokens) for doc in batch)
        if step % 50 == 0 or step == cfg.steps - 1:
            result.history.append({'step': step, 'l_p': loss})
            logger.debug("pretrain step %d: l_p=%.4f", step, loss)
    result.flops = flops(model.param_count(), result.tokens)
    logger.info("Pretrained %d steps on %d documents (%.3g FLOPs)", cfg.steps, len(usable), result.flops)
    return result


def compute_f1(preds: Sequence[int], golds: Sequence[int], mode: str = 'macro') -> float:
    """Macro: mean per-class F1 over classes present in golds. Micro: pooled counts."""
    preds, golds = list(preds), list(golds)
    if len(preds) != len(golds):
        raise InvalidInputError(f"length mismatch: {len(preds)} predictions vs {len(golds)} golds")
    if not golds:
        raise InvalidInputError("F1 needs at least one example")
    if mode not in METRICS:
        raise InvalidInputError(f"unknown F1 mode {mode}")

    tp, fp, fn = Counter(), Counter(), Counter()
    for p, g in zip(preds, golds):
        if p == g:
            tp[g] += 1
        else:
            fp[p] += 1
            fn[g] += 1

    def f1(t: int, f_p: int, f_n: int) -> float:
        precision = t / (t + f_p) if t + f_p else 0.0
        recall = t / (t + f_n) if t + f_n else 0.0
        return 2 * precision * recall / (precision + recall) if precision + recall else 0.0

    if mode == 'micro':
        return f1(sum(tp.values()), sum(fp.values()), sum(fn.values()))
    classes = sorted(set(golds))
    return sum(f1(tp[c], fp[c], fn[c]) for c in classes) / len(classes)


@dataclass
class FinetuneResult:
    model: ModelState
    metric: str
    value: float
    flops: float
    tokens: int


def finetune_evaluate(
    model: ModelState,
    task_train: Sequence[TaskExample],
    task_test: Sequence[TaskExample],
    cfg: TrainConfig,
    metric: str = 'macro',
) -> FinetuneResult:
    """Finetune theta and the task head on l_t, then score argmax predictions"""
    overlap = {ex.id for ex in task_train} & {ex.id for ex in task_test}
    if overlap:
        raise InvalidInputError(f"train and test share ids: {sorted(overlap)[:5]}")
    if not task_train or not task_test:
        raise InvalidInputError("finetuning needs non-empty train and test splits")

    current, tokens = model, 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(derive_seed(cfg.seed, 'finetune-order', epoch)).permutation(len(task_train))
        for start in range(0, len(order), cfg.batch_size):
            batch = [task_train[i] for i in order[start:start + cfg.batch_size]]
            _, grads = loss_and_grads(current, batch, LossKind.TASK)
            current = sgd_step(current, {name: grads[name] for name in FINETUNE_PARAMS}, cfg.lr)
            tokens += sum(len(ex.tokens) for ex in batch)

    preds = predict(current, task_test)
    value = compute_f1(preds.tolist(), [ex.label for ex in task_test], metric)
    return FinetuneResult(current, metric, value, flops(model.param_count(), tokens), tokens)


@dataclass
class EvalReport:
    """Per-seed scores of one subset under one metric"""

    subset: str
    metric: str
    values: Dict[int, float] = field(default_factory=dict)
    subset_size: int = 0
    flops: float = 0.0
    finetune_flops: float = 0.0
    baselines: List[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.values.values()))) if self.values else 0.0

    @property
    def std(self) -> float:
        # sample standard deviation; a single seed reports 0
        if len(self.values) < 2:
            return 0.0
        return float(np.std(list(self.values.values()), ddof=1))


def run_protocol(
    name: str,
    docs: Optional[Sequence[Document]],
    make_model: Callable[[int], ModelState],
    task_train: Sequence[TaskExample],
    task_test: Sequence[TaskExample],
    pretrain_cfg: TrainConfig,
    finetune_cfg: TrainConfig,
    metric: str,
    seeds: Sequence[int],
    baselines: Sequence[str] = (),
) -> EvalReport:
    """Pretrain (unless ``docs`` is None) then finetune once per seed"""
    report = EvalReport(name, metric, subset_size=len(docs) if docs is not None else 0, baselines=list(baselines))
    pretrain_flops, finetune_flops = [], []
    for seed in seeds:
        model = make_model(seed)
        if docs is not None:
            cfg = replace(pretrain_cfg, seed=derive_seed(seed, 'pretrain', name))
            outcome = pretrain(model, docs, cfg)
            model = outcome.model
            pretrain_flops.append(outcome.flops)
        else:
            pretrain_flops.append(0.0)
        cfg = replace(finetune_cfg, seed=derive_seed(seed, 'finetune'))
        result = finetune_evaluate(model, task_train, task_test, cfg, metric)
        report.values[seed] = result.value
        finetune_flops.append(result.flops)
        logger.info("%s seed %d: %s-F1 %.4f", name, seed, metric, result.value)
    report.flops = float(np.mean(pretrain_flops))
    report.finetune_flops = float(np.mean(finetune_flops))
    return report


def pmi_from_counts(n_wy: int, n_w: int, n_y: int, n: int) -> float:
    if min(n_w, n_y, n) <= 0:
        raise InvalidInputError("PMI needs the word and the label to occur at least once")
    if n_wy == 0:
        return UNDEFINED
    return math.log2((n_wy * n) / (n_w * n_y))


def _example_counts(task: Sequence[TaskExample]):
    n_w, n_y, n_wy = Counter(), Counter(), Counter()
    for ex in task:
        words = set(ex.tokens) - set(RESERVED_IDS)
        n_y[ex.label] += 1
        n_w.update(words)
        n_wy.update((w, ex.label) for w in words)
    return n_w, n_y, n_wy


def pmi(task: Sequence[TaskExample], word: int, label: int) -> float:
    """Example-level PMI between a word and a label, base 2"""
    n_w, n_y, n_wy = _example_counts(task)
    return pmi_from_counts(n_wy[(word, label)], n_w[word], n_y[label], len(task))


def relative_frequency(docs: Sequence[Sample], word: int) -> float:
    total = sum(len(doc.tokens) for doc in docs)
    if total == 0:
        return 0.0
    return sum(doc.tokens.count(word) for doc in docs) / total


@dataclass(frozen=True)
class WordRow:
    word: int
    label: int
    pmi: float
    frequencies: Mapping[str, float]


def analyze_task_words(
    task: Sequence[TaskExample],
    subsets: Mapping[str, Sequence[Sample]],
    top_m: int,
    min_count: int = 1,
) -> List[WordRow]:
    """Top PMI words per label and their relative token frequency in each subset"""
    n_w, n_y, n_wy = _example_counts(task)
    counts = {name: Counter(tok for doc in docs for tok in doc.tokens) for name, docs in subsets.items()}
    totals = {name: sum(c.values()) for name, c in counts.items()}
    rows: List[WordRow] = []
    for label in sorted(n_y):
        scored = [
            (pmi_from_counts(n_wy[(w, label)], n_w[w], n_y[label], len(task)), w)
            for w in n_w if n_wy[(w, label)] > 0 and n_w[w] >= min_count
        ]
        scored.sort(key=lambda item: (-item[0], item[1]))
        for value, word in scored[:top_m]:
            freqs = {name: (counts[name][word] / totals[name] if totals[name] else 0.0) for name in subsets}
            rows.append(WordRow(word, label, value, freqs))
    return rows


def baseline_select(pool: Sequence[str], size: int, strategy: str = 'bm25_rank', seed: int = 0) -> Subset:
    """Equal-size comparison subsets: seeded random sample or BM25 prefix"""
    if size > len(pool):
        raise InvalidInputError(f"baseline size {size} exceeds pool size {len(pool)}")
    if size < 0:
        raise InvalidInputError("baseline size must be nonnegative")
    if strategy == 'bm25_rank':
        members = list(pool[:size])
    elif strategy == 'random':
        picked = np.sort(np.random.default_rng(seed).choice(len(pool), size=size, replace=False))
        members = [pool[i] for i in picked]
    else:
        raise InvalidInputError(f"unknown baseline strategy {strategy}")
    return Subset(members, {}, {'strategy': strategy, 'seed': seed, 'size': size, 'pool_size': len(pool)})


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) != len(y):
        raise InvalidInputError("x and y must have the same length")
    if len(x) < 2:
        return 0.0
    correlation = spearmanr(x, y)[0]
    return 0.0 if np.isnan(correlation) else float(correlation)


def export_features(model: ModelState, examples: Sequence[TaskExample], path: Path) -> Path:
    """Feature dump: example_id, label, f1..fh tab-separated"""
    matrix = features(model, examples) if examples else np.zeros((0, model.h))
    lines = [
        '\t'.join([ex.id, str(ex.label), *(repr(float(v)) for v in row)]) + '\n'
        for ex, row in zip(examples, matrix)
    ]
    return atomic_write_text(path, ''.join(lines))
