"""Small random fixtures shared by the numeric tests"""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.corpus import Document, TaskExample
from src.model import ModelState, init_model
from src.selection import SelectionConfig, score_candidates


def random_docs(rng: np.random.Generator, n: int, V: int, low: int = 3, high: int = 12, prefix: str = 'd'):
    return [
        Document(f"{prefix}{i:03d}", '', tuple(int(t) for t in rng.integers(2, V, size=rng.integers(low, high))))
        for i in range(n)
    ]


def random_examples(rng: np.random.Generator, n: int, V: int, C: int, low: int = 3, high: int = 10,
                    prefix: str = 't'):
    return [
        TaskExample(f"{prefix}{i:03d}", tuple(int(t) for t in rng.integers(2, V, size=rng.integers(low, high))),
                    int(rng.integers(C)))
        for i in range(n)
    ]


def random_model(seed: int, V: int = 30, d: int = 5, h: int = 4, C: int = 3, scale: float = 1.0) -> ModelState:
    """init_model with weights scaled up so gradients are not vanishingly small"""
    model = init_model(V, d, h, C, seed)
    if scale == 1.0:
        return model
    return ModelState(**{name: value * scale for name, value in model.params().items()}, seed=seed)


def mean_match_scores(model: ModelState, candidates, anchors, seed: int) -> np.ndarray:
    """Gradient-matching score of every candidate averaged over the anchors (learning rate 1)"""
    index = {doc.id: i for i, doc in enumerate(candidates)}
    scores = np.zeros(len(candidates))
    for rec in score_candidates(model, candidates, anchors, SelectionConfig(lr=1.0, seed=seed)):
        scores[index[rec.candidate]] += rec.score / len(anchors)
    return scores
