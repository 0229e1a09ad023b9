"""The tiny differentiable stack shared by warm-up, scoring and pretraining.

Feature extractor (theta): token embeddings E, mean pooling, then one encoder
layer ``tanh(x @ W + c)``. Two heads sit on the features: the pretraining head
(P, bp) scores the vocabulary for masked-token prediction and the task head
(T, bt) scores the task classes. Gradients are written out by hand.

Last-layer gradient vectors flatten (W row-major, then c), so q = d*h + h.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax

from .artifacts import atomic_write_bytes, atomic_write_json, require, sha256_bytes
from .config import derive_seed
from .corpus import MASK_ID, Sample
from .errors import DivergenceError, InvalidInputError

logger = logging.getLogger(__name__)

PARAM_ORDER = ('E', 'W', 'c', 'P', 'bp', 'T', 'bt')
LAST_LAYER = ('W', 'c')
ENCODER = ('E', 'W', 'c')
PRETRAIN_PARAMS = ENCODER + ('P', 'bp')
FINETUNE_PARAMS = ENCODER + ('T', 'bt')

DEFAULT_MASK_PROB = 0.15
INIT_SCALE = 0.1
_CHUNK = 512


class LossKind(str, Enum):
    PRETRAINING = 'pretraining'
    TASK = 'task'


@dataclass(frozen=True, eq=False)
class ModelState:
    E: np.ndarray   # V x d
    W: np.ndarray   # d x h
    c: np.ndarray   # h
    P: np.ndarray   # h x V
    bp: np.ndarray  # V
    T: np.ndarray   # h x C
    bt: np.ndarray  # C
    seed: int = 0

    @property
    def V(self) -> int:
        return self.E.shape[0]

    @property
    def d(self) -> int:
        return self.E.shape[1]

    @property
    def h(self) -> int:
        return self.W.shape[1]

    @property
    def C(self) -> int:
        return self.T.shape[1]

    @property
    def q(self) -> int:
        return self.d * self.h + self.h

    def params(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_ORDER}

    def param_count(self) -> int:
        return sum(arr.size for arr in self.params().values())

    def last_layer(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.c])

    def with_last_layer(self, flat: np.ndarray) -> 'ModelState':
        flat = np.asarray(flat, dtype=np.float64)
        return replace(self, W=flat[:self.d * self.h].reshape(self.d, self.h).copy(),
                       c=flat[self.d * self.h:].copy())

    def checksum(self) -> str:
        return sha256_bytes(_to_bytes(self))


@dataclass(frozen=True, eq=False)
class GradientVector:
    values: np.ndarray
    owner: str
    loss_kind: LossKind

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.5
    epochs: int = 5
    steps: int = 0
    batch_size: int = 8
    seed: int = 0
    mask_prob: float = DEFAULT_MASK_PROB
    task_weight: float = 1.0

    def __post_init__(self):
        if self.lr < 0:
            raise InvalidInputError(f"learning rate must be >= 0, got {self.lr}")
        if not 0 < self.mask_prob < 1:
            raise InvalidInputError(f"mask probability must be in (0, 1), got {self.mask_prob}")
        if self.batch_size < 1 or self.epochs < 0 or self.steps < 0:
            raise InvalidInputError("batch size must be >= 1 and epochs/steps >= 0")


@dataclass
class TrainResult:
    model: ModelState
    history: List[Dict[str, float]] = field(default_factory=list)
    tokens: int = 0


def init_model(V: int, d: int, h: int, C: int, seed: int, scale: float = INIT_SCALE) -> ModelState:
    """Uniform [-scale, scale] weights (default 0.1) from a seeded PCG64 generator, zero biases"""
    if min(V, d, h, C) < 1:
        raise InvalidInputError("all model dimensions must be >= 1")
    if scale <= 0:
        raise InvalidInputError(f"init scale must be positive, got {scale}")
    rng = np.random.default_rng(seed)
    uniform = lambda *shape: rng.uniform(-scale, scale, size=shape)
    return ModelState(
        E=uniform(V, d),
        W=uniform(d, h),
        c=np.zeros(h),
        P=uniform(h, V),
        bp=np.zeros(V),
        T=uniform(h, C),
        bt=np.zeros(C),
        seed=seed,
    )


def encode(model: ModelState, tokens: Sequence[int]) -> np.ndarray:
    if len(tokens) == 0:
        raise InvalidInputError("cannot encode an empty token sequence")
    x = model.E[np.asarray(tokens)].mean(axis=0)
    return np.tanh(x @ model.W + model.c)


def mask_positions(length: int, mask_prob: float, mask_seed: int) -> np.ndarray:
    count = math.ceil(round(mask_prob * length, 9))
    rng = np.random.default_rng(mask_seed)
    return np.sort(rng.choice(length, size=count, replace=False))


def sample_mask_seed(seed: int, sample_id: str) -> int:
    """Fixed masking seed for one sample under one run seed"""
    return derive_seed(seed, 'mask', sample_id)


def _head(model: ModelState, kind: LossKind) -> Tuple[np.ndarray, np.ndarray]:
    return (model.P, model.bp) if kind == LossKind.PRETRAINING else (model.T, model.bt)


def _inputs(
    model: ModelState,
    samples: Sequence[Sample],
    kind: LossKind,
    mask_seeds: Optional[Sequence[int]],
    mask_prob: float,
) -> Tuple[List[np.ndarray], np.ndarray]:
    """Input token sequences and target distributions for a batch"""
    kind = LossKind(kind)
    seqs: List[np.ndarray] = []
    if kind == LossKind.TASK:
        targets = np.zeros((len(samples), model.C))
        for i, sample in enumerate(samples):
            if not 0 <= sample.label < model.C:
                raise InvalidInputError(f"{sample.id}: label {sample.label} outside [0, {model.C})")
            seqs.append(np.asarray(sample.tokens))
            targets[i, sample.label] = 1.0
        return seqs, targets

    if mask_seeds is None or len(mask_seeds) != len(samples):
        raise InvalidInputError("pretraining loss needs one mask seed per sample")
    targets = np.zeros((len(samples), model.V))
    for i, (sample, mask_seed) in enumerate(zip(samples, mask_seeds)):
        tokens = np.asarray(sample.tokens)
        if tokens.size < 2:
            raise InvalidInputError(f"{sample.id}: pretraining loss needs at least 2 tokens")
        positions = mask_positions(tokens.size, mask_prob, mask_seed)
        np.add.at(targets[i], tokens[positions], 1.0 / positions.size)
        masked = tokens.copy()
        masked[positions] = MASK_ID
        seqs.append(masked)
    return seqs, targets


def _forward(model: ModelState, seqs: List[np.ndarray], kind: LossKind):
    X = np.stack([model.E[seq].mean(axis=0) for seq in seqs])
    F = np.tanh(X @ model.W + model.c)
    Hw, hb = _head(model, kind)
    logp = log_softmax(F @ Hw + hb, axis=1)
    return X, F, logp


def _check_finite(value, what: str) -> None:
    if not np.all(np.isfinite(value)):
        raise DivergenceError(f"divergence: non-finite {what}")


def losses(
    model: ModelState,
    samples: Sequence[Sample],
    kind: LossKind,
    mask_seeds: Optional[Sequence[int]] = None,
    mask_prob: float = DEFAULT_MASK_PROB,
) -> np.ndarray:
    """Per-sample losses"""
    out = []
    for start in range(0, len(samples), _CHUNK):
        chunk = samples[start:start + _CHUNK]
        seeds = None if mask_seeds is None else mask_seeds[start:start + _CHUNK]
        seqs, targets = _inputs(model, chunk, kind, seeds, mask_prob)
        _, _, logp = _forward(model, seqs, kind)
        out.append(-(targets * logp).sum(axis=1))
    result = np.concatenate(out) if out else np.zeros(0)
    _check_finite(result, "loss")
    return result


def pretrain_loss(model: ModelState, doc: Sample, mask_seed: int,
                  mask_prob: float = DEFAULT_MASK_PROB) -> float:
    """Mean cross-entropy of the true tokens at the masked positions"""
    return float(losses(model, [doc], LossKind.PRETRAINING, [mask_seed], mask_prob)[0])


def task_loss(model: ModelState, ex: Sample) -> float:
    return float(losses(model, [ex], LossKind.TASK)[0])


def loss_and_grads(
    model: ModelState,
    samples: Sequence[Sample],
    kind: LossKind,
    mask_seeds: Optional[Sequence[int]] = None,
    mask_prob: float = DEFAULT_MASK_PROB,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean loss over ``samples`` and its gradient for every parameter"""
    kind = LossKind(kind)
    n = len(samples)
    seqs, targets = _inputs(model, samples, kind, mask_seeds, mask_prob)
    X, F, logp = _forward(model, seqs, kind)
    loss = float(-(targets * logp).sum() / n)

    Hw, _ = _head(model, kind)
    dZ = (np.exp(logp) - targets) / n
    dA = (dZ @ Hw.T) * (1.0 - F ** 2)
    dX = dA @ model.W.T
    gE = np.zeros_like(model.E)
    for seq, dx in zip(seqs, dX):
        np.add.at(gE, seq, dx / seq.size)

    grads = {
        'E': gE,
        'W': X.T @ dA,
        'c': dA.sum(axis=0),
    }
    head_names = ('P', 'bp') if kind == LossKind.PRETRAINING else ('T', 'bt')
    grads[head_names[0]] = F.T @ dZ
    grads[head_names[1]] = dZ.sum(axis=0)
    _check_finite(loss, "loss")
    return loss, grads


def last_layer_grads(
    model: ModelState,
    samples: Sequence[Sample],
    kind: LossKind,
    mask_seeds: Optional[Sequence[int]] = None,
    mask_prob: float = DEFAULT_MASK_PROB,
) -> np.ndarray:
    """Per-sample gradients w.r.t. (W, c) as rows of an n x q matrix"""
    kind = LossKind(kind)
    Hw, _ = _head(model, kind)
    rows = []
    for start in range(0, len(samples), _CHUNK):
        chunk = samples[start:start + _CHUNK]
        seeds = None if mask_seeds is None else mask_seeds[start:start + _CHUNK]
        seqs, targets = _inputs(model, chunk, kind, seeds, mask_prob)
        X, F, logp = _forward(model, seqs, kind)
        dA = ((np.exp(logp) - targets) @ Hw.T) * (1.0 - F ** 2)
        gW = (X[:, :, None] * dA[:, None, :]).reshape(len(chunk), -1)
        rows.append(np.hstack([gW, dA]))
    grads = np.vstack(rows) if rows else np.zeros((0, model.q))
    _check_finite(grads, "gradient")
    return grads


def last_layer_grad(
    model: ModelState,
    sample: Sample,
    loss_kind: LossKind,
    mask_seed: Optional[int] = None,
    mask_prob: float = DEFAULT_MASK_PROB,
) -> GradientVector:
    kind = LossKind(loss_kind)
    seeds = [mask_seed] if kind == LossKind.PRETRAINING else None
    values = last_layer_grads(model, [sample], kind, seeds, mask_prob)[0]
    return GradientVector(values, sample.id, kind)


def sgd_step(model: ModelState, grads: Dict[str, np.ndarray], lr: float) -> ModelState:
    """One functional SGD update; parameters absent from ``grads`` are untouched"""
    if lr < 0:
        raise InvalidInputError(f"learning rate must be >= 0, got {lr}")
    updated = {}
    for name, grad in grads.items():
        if name not in PARAM_ORDER:
            raise InvalidInputError(f"unknown parameter {name}")
        value = getattr(model, name) - lr * grad
        _check_finite(value, f"parameter {name}")
        updated[name] = value
    return replace(model, **updated)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def warmup_train(model: ModelState, task_train: Sequence[Sample], cfg: TrainConfig) -> TrainResult:
    """Joint minimisation of l_p + w * l_t on the task training set.

    l_p treats the task texts as unlabeled documents (examples shorter than two
    tokens only contribute l_t); masks are redrawn each epoch from the seed.
    """
    if not task_train:
        raise InvalidInputError("warm-up needs a non-empty task training set")
    result = TrainResult(model)
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(derive_seed(cfg.seed, 'warmup-order', epoch))
        sums = {'l_p': 0.0, 'l_t': 0.0}
        counts = {'l_p': 0, 'l_t': 0}
        for batch_idx in _batches(len(task_train), cfg.batch_size, rng):
            batch = [task_train[i] for i in batch_idx]
            current = result.model
            loss_t, grads = loss_and_grads(current, batch, LossKind.TASK)
            grads = {name: cfg.task_weight * g for name, g in grads.items()}
            sums['l_t'] += loss_t * len(batch)
            counts['l_t'] += len(batch)

            docs = [s for s in batch if len(s.tokens) >= 2]
            if docs:
                seeds = [derive_seed(cfg.seed, 'warmup-mask', epoch, s.id) for s in docs]
                loss_p, grads_p = loss_and_grads(current, docs, LossKind.PRETRAINING,
                                                 seeds, cfg.mask_prob)
                for name, g in grads_p.items():
                    grads[name] = grads[name] + g if name in grads else g
                sums['l_p'] += loss_p * len(docs)
                counts['l_p'] += len(docs)
            result.model = sgd_step(current, grads, cfg.lr)
            result.tokens += sum(len(s.tokens) for s in batch)

        epoch_stats = {k: sums[k] / counts[k] if counts[k] else 0.0 for k in sums}
        result.history.append({'epoch': epoch, **epoch_stats})
        logger.info("warm-up epoch %d: l_p=%.4f l_t=%.4f", epoch, epoch_stats['l_p'], epoch_stats['l_t'])
    return result


def joint_objective(model: ModelState, samples: Sequence[Sample], mask_seeds: Sequence[int],
                    mask_prob: float = DEFAULT_MASK_PROB, task_weight: float = 1.0) -> float:
    """Mean of l_p + w * l_t over samples with fixed masks"""
    l_t = losses(model, samples, LossKind.TASK)
    l_p = losses(model, samples, LossKind.PRETRAINING, mask_seeds, mask_prob)
    return float(np.mean(l_p + task_weight * l_t))


def predict(model: ModelState, examples: Sequence[Sample]) -> np.ndarray:
    if not examples:
        return np.zeros(0, dtype=np.int64)
    X = np.stack([model.E[np.asarray(ex.tokens)].mean(axis=0) for ex in examples])
    F = np.tanh(X @ model.W + model.c)
    return np.argmax(F @ model.T + model.bt, axis=1)


def features(model: ModelState, examples: Sequence[Sample]) -> np.ndarray:
    return np.stack([encode(model, ex.tokens) for ex in examples])


def _to_bytes(model: ModelState) -> bytes:
    return b''.join(np.ascontiguousarray(getattr(model, name), dtype='<f8').tobytes()
                    for name in PARAM_ORDER)


def save_checkpoint(model: ModelState, stem: Path) -> List[Path]:
    """Write ``stem.bin`` (little-endian float64, PARAM_ORDER) and ``stem.json``"""
    stem = Path(stem)
    data = _to_bytes(model)
    bin_path = atomic_write_bytes(stem.with_suffix('.bin'), data)
    json_path = atomic_write_json(stem.with_suffix('.json'), {
        'V': model.V, 'd': model.d, 'h': model.h, 'C': model.C,
        'seed': model.seed,
        'order': list(PARAM_ORDER),
        'shapes': {name: list(getattr(model, name).shape) for name in PARAM_ORDER},
        'dtype': '<f8',
        'sha256': sha256_bytes(data),
    })
    return [bin_path, json_path]


def load_checkpoint(stem: Path) -> ModelState:
    stem = Path(stem)
    json_path = require(stem.with_suffix('.json'), "checkpoint manifest")
    bin_path = require(stem.with_suffix('.bin'), "checkpoint tensors")
    with open(json_path, 'r', encoding='utf-8') as fh:
        manifest = json.load(fh)
    data = bin_path.read_bytes()
    if sha256_bytes(data) != manifest['sha256']:
        raise InvalidInputError(f"checkpoint {bin_path} does not match its manifest checksum")
    flat = np.frombuffer(data, dtype='<f8')
    arrays, offset = {}, 0
    for name in manifest['order']:
        shape = tuple(manifest['shapes'][name])
        size = int(np.prod(shape))
        arrays[name] = flat[offset:offset + size].reshape(shape).astype(np.float64)
        offset += size
    if offset != flat.size:
        raise InvalidInputError(f"checkpoint {bin_path} has {flat.size - offset} trailing values")
    return ModelState(seed=manifest['seed'], **arrays)
