"""Run configuration.

A single flat KEY=VALUE file (dotenv syntax) configures every stage. Keys are
namespaced by section prefix, e.g. ``RETRIEVAL_TOP_N=50`` or ``WARMUP_LR=0.1``.
Environment variables with the same names override the file.
"""

import hashlib
import logging
import os
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .artifacts import canonical_json
from .errors import InvalidInputError, MissingInputError

logger = logging.getLogger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)


class CorpusSettings(_Section):
    path: Optional[str] = None
    task_train_path: Optional[str] = None
    task_val_path: Optional[str] = None
    task_test_path: Optional[str] = None
    min_freq: int = Field(2, ge=1)
    task_min_freq: int = Field(1, ge=1)


class RetrievalSettings(_Section):
    k1: float = Field(1.2, gt=0)
    b: float = Field(0.75, ge=0, le=1)
    top_n: int = Field(100, ge=1)
    query_source: Literal['train', 'val'] = 'train'


class ModelSettings(_Section):
    d: int = Field(16, ge=1)
    h: int = Field(8, ge=1)
    # weights uniform in [-init_scale, init_scale]
    init_scale: float = Field(1.0, gt=0)


class WarmupSettings(_Section):
    lr: float = Field(0.5, gt=0)
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(8, ge=1)
    mask_prob: float = Field(0.15, gt=0, lt=1)
    task_weight: float = Field(1.0, ge=0)


class SelectSettings(_Section):
    k: int = Field(8, ge=1)
    size: Optional[int] = Field(None, ge=1)
    batch_pretrain: int = Field(1, ge=1)
    batch_task: int = Field(1, ge=1)
    use_minibatch: bool = False
    shuffle_batches: bool = False
    lr: Optional[float] = Field(None, gt=0)
    anchors: Literal['val', 'train'] = 'val'

    @model_validator(mode='after')
    def _size_needs_per_sample_selection(self):
        # mini-batch selection takes whole batches per anchor and has no size target
        if self.use_minibatch and self.size is not None:
            raise ValueError("SELECT_SIZE cannot be combined with SELECT_USE_MINIBATCH=true")
        return self


class PretrainSettings(_Section):
    lr: float = Field(1.0, gt=0)
    steps: int = Field(3000, ge=0)
    batch_size: int = Field(8, ge=1)
    mask_prob: float = Field(0.15, gt=0, lt=1)
    init: Literal['scratch', 'checkpoint'] = 'scratch'
    checkpoint: Optional[str] = None


class FinetuneSettings(_Section):
    lr: float = Field(1.0, gt=0)
    epochs: int = Field(40, ge=0)
    batch_size: int = Field(8, ge=1)
    metric: Literal['micro', 'macro'] = 'macro'


class EvalSettings(_Section):
    num_seeds: int = Field(3, ge=1)
    random_source: Literal['corpus', 'pool'] = 'corpus'
    fractions: List[float] = Field(default_factory=list)

    @field_validator('fractions', mode='before')
    @classmethod
    def _split_fractions(cls, value):
        if isinstance(value, str):
            return [float(part) for part in value.split(',') if part.strip()]
        return value

    @field_validator('fractions')
    @classmethod
    def _check_fractions(cls, value):
        for fraction in value:
            if not 0 < fraction <= 1:
                raise ValueError(f"fraction {fraction} outside (0, 1]")
        return value


class AnalyzeSettings(_Section):
    top_m: int = Field(5, ge=1)
    min_count: int = Field(1, ge=1)


class SynthSettings(_Section):
    num_docs: int = Field(5000, ge=10)
    num_planted: int = Field(500, ge=1)
    num_distractors: int = Field(500, ge=0)
    num_classes: int = Field(4, ge=2)
    topic_words: int = Field(24, ge=2)
    topic_per_example: int = Field(2, ge=1)
    # share of each class's topic words that training examples may use
    train_topic_share: float = Field(0.5, gt=0, le=1)
    topic_fraction: float = Field(0.4, gt=0, le=1)
    shared_words: int = Field(200, ge=10)
    background_words: int = Field(1600, ge=10)
    doc_len: int = Field(20, ge=4)
    example_len: int = Field(12, ge=4)
    train_size: int = Field(64, ge=2)
    val_size: int = Field(64, ge=1)
    test_size: int = Field(200, ge=2)


SECTIONS = {
    'corpus': CorpusSettings,
    'retrieval': RetrievalSettings,
    'model': ModelSettings,
    'warmup': WarmupSettings,
    'select': SelectSettings,
    'pretrain': PretrainSettings,
    'finetune': FinetuneSettings,
    'eval': EvalSettings,
    'analyze': AnalyzeSettings,
    'synth': SynthSettings,
}


class Settings(_Section):
    corpus: CorpusSettings = CorpusSettings()
    retrieval: RetrievalSettings = RetrievalSettings()
    model: ModelSettings = ModelSettings()
    warmup: WarmupSettings = WarmupSettings()
    select: SelectSettings = SelectSettings()
    pretrain: PretrainSettings = PretrainSettings()
    finetune: FinetuneSettings = FinetuneSettings()
    eval: EvalSettings = EvalSettings()
    analyze: AnalyzeSettings = AnalyzeSettings()
    synth: SynthSettings = SynthSettings()

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.model_dump()).encode('utf-8')).hexdigest()


def _group(values: Mapping[str, Optional[str]], strict: bool) -> Dict[str, Dict[str, str]]:
    grouped: Dict[str, Dict[str, str]] = {name: {} for name in SECTIONS}
    for key, value in values.items():
        prefix, _, field = key.partition('_')
        section = prefix.lower()
        model = SECTIONS.get(section)
        if model is None or not field or field.lower() not in model.model_fields:
            if strict:
                raise InvalidInputError(f"Unknown configuration key: {key}")
            continue
        if value is None or value == '':
            continue
        grouped[section][field.lower()] = value
    return grouped


def load_settings(path: Optional[Path] = None, environ: Optional[Mapping[str, str]] = None) -> Settings:
    """Parse the config file (if any), apply environment overrides, validate"""
    values: Dict[str, Optional[str]] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingInputError(path, "configuration file")
        values.update(dotenv_values(path))
        logger.debug("Loaded %d configuration keys from %s", len(values), path)

    grouped = _group(values, strict=True)
    overrides = _group(os.environ if environ is None else environ, strict=False)
    for section, fields in overrides.items():
        if fields:
            logger.debug("Environment overrides for %s: %s", section, sorted(fields))
        grouped[section].update(fields)

    try:
        return Settings(**{name: SECTIONS[name](**fields) for name, fields in grouped.items()})
    except ValidationError as e:
        raise InvalidInputError(f"Invalid configuration: {e}") from e


def derive_seed(root: int, stage: str, *parts) -> int:
    """Expand the root seed into an independent, documented per-stage seed.

    seed = first 8 bytes of sha256("root:stage:part1:part2...") as a big-endian
    unsigned integer, truncated to 63 bits.
    """
    label = ':'.join([str(root), stage, *(str(p) for p in parts)])
    digest = hashlib.sha256(label.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'big') & ((1 << 63) - 1)
