"""Gradient-matching influence and the oracles that check it.

Scores are oriented higher-is-better (predicted loss reduction at the anchor).
Only ``exact_influence`` returns the classical signed influence I, where a
more negative value means a more helpful candidate; ``benefit`` flips it.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .config import derive_seed
from .corpus import Document, Sample, TaskExample
from .errors import FactorizationError, InvalidInputError
from .model import (
    DEFAULT_MASK_PROB,
    LAST_LAYER,
    GradientVector,
    LossKind,
    ModelState,
    TrainConfig,
    last_layer_grad,
    last_layer_grads,
    loss_and_grads,
    sample_mask_seed,
    sgd_step,
    task_loss,
)

logger = logging.getLogger(__name__)

MAX_HESSIAN_DIM = 4096
MAX_LOO_TRAIN = 500
DEFAULT_DAMPING = 1e-3
FD_STEP = 1e-4

Vector = Union[GradientVector, np.ndarray, Sequence[float]]


@dataclass(frozen=True)
class InfluenceRecord:
    candidate: str
    anchor: str
    score: float


def _values(g: Vector) -> np.ndarray:
    return np.asarray(g.values if isinstance(g, GradientVector) else g, dtype=np.float64)


def influence_score(g_p: Vector, g_t: Vector, lr: float) -> float:
    """First-order predicted loss reduction at the anchor: lr * <g_t, g_p>"""
    p, t = _values(g_p), _values(g_t)
    if p.shape != t.shape:
        raise InvalidInputError(f"gradient length mismatch: {p.shape[0]} vs {t.shape[0]}")
    if lr < 0:
        raise InvalidInputError(f"learning rate must be >= 0, got {lr}")
    return float(lr * np.dot(t, p))


def one_step_loss_delta(
    loss_fn: Callable[[np.ndarray], float],
    grad_fn: Callable[[np.ndarray], np.ndarray],
    theta: np.ndarray,
    lr: float,
) -> float:
    """loss(theta) - loss(theta - lr * grad(theta)) for arbitrary callables"""
    theta = np.asarray(theta, dtype=np.float64)
    stepped = theta - lr * np.asarray(grad_fn(theta), dtype=np.float64)
    return float(loss_fn(theta) - loss_fn(stepped))


def step_delta_oracle(
    model: ModelState,
    z_p: Sample,
    z_t: TaskExample,
    lr: float,
    mask_seed: int,
    mask_prob: float = DEFAULT_MASK_PROB,
) -> float:
    """Actual anchor-loss reduction after one last-layer SGD step on l_p(z_p)"""
    if lr < 0:
        raise InvalidInputError(f"learning rate must be >= 0, got {lr}")
    return one_step_loss_delta(
        lambda theta: task_loss(model.with_last_layer(theta), z_t),
        lambda theta: last_layer_grad(model.with_last_layer(theta), z_p, LossKind.PRETRAINING,
                                      mask_seed, mask_prob).values,
        model.last_layer(),
        lr,
    )


def finite_difference_hessian(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    theta: np.ndarray,
    step: float = FD_STEP,
) -> np.ndarray:
    """Central differences of an analytic gradient, symmetrised"""
    theta = np.asarray(theta, dtype=np.float64)
    q = theta.size
    H = np.empty((q, q))
    for j in range(q):
        bump = np.zeros(q)
        bump[j] = step
        H[:, j] = (np.asarray(grad_fn(theta + bump)) - np.asarray(grad_fn(theta - bump))) / (2 * step)
    return 0.5 * (H + H.T)


@dataclass(frozen=True, eq=False)
class HessianEstimate:
    H: np.ndarray
    damping: float = DEFAULT_DAMPING
    built_from: str = ''

    def __post_init__(self):
        if self.damping < 0:
            raise InvalidInputError(f"damping must be >= 0, got {self.damping}")
        if self.H.ndim != 2 or self.H.shape[0] != self.H.shape[1]:
            raise InvalidInputError(f"Hessian must be square, got shape {self.H.shape}")
        if not np.allclose(self.H, self.H.T, rtol=0, atol=1e-9):
            raise InvalidInputError("Hessian is not symmetric")
        try:
            factor = cho_factor(self.H + self.damping * np.eye(self.H.shape[0]))
        except LinAlgError as e:
            raise FactorizationError(
                f"damped Hessian is not positive definite at damping={self.damping}; "
                f"retry with a larger damping"
            ) from e
        object.__setattr__(self, '_factor', factor)

    def solve(self, v: Vector) -> np.ndarray:
        return cho_solve(self._factor, _values(v))


def build_hessian(
    model: ModelState,
    candidate_set: Sequence[Sample],
    mask_seeds: Sequence[int],
    damping: float = DEFAULT_DAMPING,
    mask_prob: float = DEFAULT_MASK_PROB,
    step: float = FD_STEP,
) -> HessianEstimate:
    """Mean last-layer Hessian of l_p over the candidate set"""
    if not candidate_set:
        raise InvalidInputError("Hessian needs a non-empty candidate set")
    if model.q > MAX_HESSIAN_DIM:
        raise InvalidInputError(f"q={model.q} exceeds the exact-Hessian limit of {MAX_HESSIAN_DIM}")

    def mean_grad(theta: np.ndarray) -> np.ndarray:
        return last_layer_grads(model.with_last_layer(theta), candidate_set,
                                LossKind.PRETRAINING, mask_seeds, mask_prob).mean(axis=0)

    H = finite_difference_hessian(mean_grad, model.last_layer(), step)
    built_from = derive_seed(0, 'hessian', *sorted(s.id for s in candidate_set))
    logger.debug("Built %dx%d Hessian over %d candidates", H.shape[0], H.shape[1], len(candidate_set))
    return HessianEstimate(H, damping, f"{built_from:016x}")


def damped_influence(g_t: Vector, hessian: HessianEstimate, g_p: Vector) -> float:
    """I = -g_t^T (H + damping I)^-1 g_p"""
    return float(-np.dot(_values(g_t), hessian.solve(g_p)))


def benefit(influence: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Flip the classical sign so that higher means more helpful"""
    return -influence


def exact_influence(
    model: ModelState,
    candidate_set: Sequence[Document],
    z_p: Document,
    z_t: TaskExample,
    damping: float = DEFAULT_DAMPING,
    seed: int = 0,
    mask_prob: float = DEFAULT_MASK_PROB,
    hessian: Optional[HessianEstimate] = None,
) -> float:
    if hessian is None:
        seeds = [sample_mask_seed(seed, doc.id) for doc in candidate_set]
        hessian = build_hessian(model, candidate_set, seeds, damping, mask_prob)
    g_p = last_layer_grad(model, z_p, LossKind.PRETRAINING, sample_mask_seed(seed, z_p.id), mask_prob)
    g_t = last_layer_grad(model, z_t, LossKind.TASK)
    return damped_influence(g_t, hessian, g_p)


def exact_influence_matrix(
    model: ModelState,
    candidates: Sequence[Document],
    anchors: Sequence[TaskExample],
    damping: float = DEFAULT_DAMPING,
    seed: int = 0,
    mask_prob: float = DEFAULT_MASK_PROB,
) -> np.ndarray:
    """Signed influence for every (anchor, candidate) pair, Hessian factored once"""
    seeds = [sample_mask_seed(seed, doc.id) for doc in candidates]
    hessian = build_hessian(model, candidates, seeds, damping, mask_prob)
    G_p = last_layer_grads(model, candidates, LossKind.PRETRAINING, seeds, mask_prob)
    G_t = last_layer_grads(model, anchors, LossKind.TASK)
    # H is symmetric, so g_t^T H^-1 g_p = (H^-1 g_t)^T g_p
    solved = np.stack([hessian.solve(g) for g in G_t])
    return -(solved @ G_p.T)


def _train_pretraining(
    model: ModelState,
    train_set: Sequence[Sample],
    cfg: TrainConfig,
    skip_id: Optional[str],
    trainable: Sequence[str],
) -> ModelState:
    mask_seeds = {doc.id: sample_mask_seed(cfg.seed, doc.id) for doc in train_set}
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(derive_seed(cfg.seed, 'loo-order', epoch)).permutation(len(train_set))
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            batch = [doc for doc in batch if doc.id != skip_id]
            if not batch:
                continue
            _, grads = loss_and_grads(model, batch, LossKind.PRETRAINING,
                                      [mask_seeds[doc.id] for doc in batch], cfg.mask_prob)
            model = sgd_step(model, {name: grads[name] for name in trainable}, cfg.lr)
    return model


def loo_influence(
    cfg: TrainConfig,
    train_set: Sequence[Document],
    z_p: Document,
    z_t: TaskExample,
    model: ModelState,
    trainable: Sequence[str] = LAST_LAYER,
) -> float:
    """Leave-one-out: l_t(z_t) trained without z_p minus l_t(z_t) trained with it.

    Both runs start from ``model`` with the same seed, batch layout and masks;
    the second run drops z_p's slot. Positive means z_p helped.
    """
    ids = [doc.id for doc in train_set]
    if z_p.id not in ids:
        raise InvalidInputError(f"{z_p.id} is not in the training set")
    if len(train_set) > MAX_LOO_TRAIN:
        raise InvalidInputError(f"leave-one-out limited to {MAX_LOO_TRAIN} training documents")
    with_z = _train_pretraining(model, train_set, cfg, None, trainable)
    without_z = _train_pretraining(model, train_set, cfg, z_p.id, trainable)
    return task_loss(without_z, z_t) - task_loss(with_z, z_t)
