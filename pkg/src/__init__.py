# src/__init__.py
__version__ = "0.1.0"

from .errors import DivergenceError, FactorizationError, InvalidInputError, IssError, MissingInputError
from .config import Settings, derive_seed, load_settings
from .corpus import Document, LabelMap, TaskExample, Vocabulary, build_vocabulary, ingest_corpus, ingest_task
from .retrieval import Bm25Index, bm25_score, build_index, retrieve_candidates
from .model import ModelState, TrainConfig, init_model, last_layer_grad, sgd_step, warmup_train
from .influence import exact_influence, influence_score, loo_influence, step_delta_oracle
from .selection import SelectionConfig, Subset, minibatch_select, score_candidates, select_topk
from .evaluation import EvalReport, analyze_task_words, baseline_select, compute_f1, flops, pmi
from .report_generator import ReportGenerator
from .pdf_generator import PDFGenerator
from .pipeline import StageRunner

__all__ = [
    '__version__',
    'IssError',
    'MissingInputError',
    'InvalidInputError',
    'DivergenceError',
    'FactorizationError',
    'Settings',
    'load_settings',
    'derive_seed',
    'Document',
    'TaskExample',
    'Vocabulary',
    'LabelMap',
    'build_vocabulary',
    'ingest_corpus',
    'ingest_task',
    'Bm25Index',
    'build_index',
    'bm25_score',
    'retrieve_candidates',
    'ModelState',
    'TrainConfig',
    'init_model',
    'last_layer_grad',
    'sgd_step',
    'warmup_train',
    'influence_score',
    'step_delta_oracle',
    'exact_influence',
    'loo_influence',
    'SelectionConfig',
    'Subset',
    'score_candidates',
    'select_topk',
    'minibatch_select',
    'EvalReport',
    'compute_f1',
    'flops',
    'pmi',
    'analyze_task_words',
    'baseline_select',
    'ReportGenerator',
    'PDFGenerator',
    'StageRunner',
]
