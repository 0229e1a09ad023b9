"""Stage orchestration.

Each stage reads earlier artifacts under the output directory, writes its own
outputs atomically and records a RunManifest in ``<out>/manifests/<stage>.json``.
Output files never carry timings, so re-running a stage on unchanged inputs
reproduces them byte for byte.
"""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from . import __version__
from .artifacts import RunManifest, atomic_write_json, atomic_write_text, require
from .config import Settings, derive_seed
from .corpus import (
    Document,
    LabelMap,
    TaskExample,
    Vocabulary,
    build_vocabulary,
    ingest_corpus,
    ingest_task,
    read_documents,
    read_examples,
    read_texts,
    validate_ids,
    write_tokens,
)
from .errors import InvalidInputError
from .evaluation import (
    EvalReport,
    analyze_task_words,
    baseline_select,
    export_features,
    finetune_evaluate,
    pretrain,
    run_protocol,
)
from .model import ModelState, TrainConfig, init_model, load_checkpoint, save_checkpoint, warmup_train
from .pdf_generator import PDFGenerator
from .report_generator import ReportGenerator, results_tsv, words_tsv
from .retrieval import Bm25Index, build_index, read_ids, retrieve_candidates, write_pool
from .selection import (
    SelectionConfig,
    minibatch_select,
    read_scores,
    read_subset,
    score_candidates,
    select_to_size,
    select_topk,
    write_scores,
)
from .synthetic import generate, summarize

logger = logging.getLogger(__name__)

STAGES = ('ingest', 'index', 'retrieve', 'warmup', 'score', 'select', 'pretrain', 'finetune', 'evaluate', 'analyze')
META_STAGES = ('pipeline', 'gen-synth')
SPLITS = ('train', 'val', 'test')

# (inputs, outputs, seeds, flops, notes)
StageOutcome = Tuple[List[Path], List[Path], Dict[str, int], float, Dict]


@dataclass(frozen=True)
class RunPaths:
    """Where every artifact lives under the output directory"""

    out: Path

    @property
    def data(self) -> Path:
        return self.out / 'data'

    def manifest(self, stage: str) -> Path:
        return self.out / 'manifests' / f"{stage}.json"

    @property
    def vocab(self) -> Path:
        return self.out / 'ingest' / 'vocab.json'

    @property
    def labels(self) -> Path:
        return self.out / 'ingest' / 'labels.json'

    @property
    def corpus_tokens(self) -> Path:
        return self.out / 'ingest' / 'corpus.tokens.jsonl'

    def task_tokens(self, split: str) -> Path:
        return self.out / 'ingest' / f"task_{split}.tokens.jsonl"

    @property
    def index(self) -> Path:
        return self.out / 'index' / 'bm25.json'

    @property
    def pool(self) -> Path:
        return self.out / 'retrieve' / 'pool.txt'

    @property
    def warm(self) -> Path:
        return self.out / 'warmup' / 'warm'

    @property
    def scores(self) -> Path:
        return self.out / 'score' / 'scores.tsv'

    def subset(self, name: str = 'subset') -> Path:
        return self.out / 'select' / f"{name}.txt"

    @property
    def pretrained(self) -> Path:
        return self.out / 'pretrain' / 'pretrained'

    @property
    def finetuned(self) -> Path:
        return self.out / 'finetune' / 'finetuned'

    @property
    def evaluate(self) -> Path:
        return self.out / 'evaluate'

    @property
    def analyze(self) -> Path:
        return self.out / 'analyze'


def _checkpoint_files(stem: Path) -> List[Path]:
    return [stem.with_suffix('.bin'), stem.with_suffix('.json')]


class StageRunner:
    """Runs named stages against one resolved configuration and root seed"""

    def __init__(
        self,
        settings: Settings,
        out_dir: Path,
        seed: int = 0,
        workers: int = 1,
        on_stage: Optional[Callable[[str], None]] = None,
    ):
        if workers < 1:
            raise InvalidInputError("workers must be >= 1")
        self.settings = settings
        self.paths = RunPaths(Path(out_dir))
        self.seed = seed
        self.workers = workers
        self.on_stage = on_stage or (lambda stage: None)
        self._handlers: Dict[str, Callable[[], StageOutcome]] = {
            'ingest': self._ingest,
            'index': self._index,
            'retrieve': self._retrieve,
            'warmup': self._warmup,
            'score': self._score,
            'select': self._select,
            'pretrain': self._pretrain,
            'finetune': self._finetune,
            'evaluate': self._evaluate,
            'analyze': self._analyze,
            'gen-synth': self._gen_synth,
        }

    def _new_manifest(self, stage: str) -> RunManifest:
        return RunManifest(
            stage=stage,
            tool_version=__version__,
            config_hash=self.settings.config_hash(),
            config=self.settings.model_dump(),
            seeds={'root': self.seed},
        )

    def run(self, stage: str) -> RunManifest:
        if stage == 'pipeline':
            return self.run_pipeline()
        handler = self._handlers.get(stage)
        if handler is None:
            raise InvalidInputError(f"unknown stage {stage}")
        self.on_stage(stage)
        logger.info("Running stage %s (seed %d)", stage, self.seed)
        started = time.perf_counter()
        inputs, outputs, seeds, flops, notes = handler()
        manifest = self._new_manifest(stage)
        manifest.timings['seconds'] = round(time.perf_counter() - started, 3)
        manifest.seeds.update(seeds)
        manifest.record_inputs(inputs)
        manifest.record_outputs(outputs)
        manifest.flops = flops
        manifest.notes = notes
        manifest.write(self.paths.manifest(stage))
        return manifest

    def run_pipeline(self) -> RunManifest:
        aggregate = self._new_manifest('pipeline')
        for stage in STAGES:
            aggregate.merge(self.run(stage))
        aggregate.write(self.paths.manifest('pipeline'))
        return aggregate

    # Shared loaders

    def _data_path(self, configured: Optional[str], default: str) -> Path:
        return Path(configured) if configured else self.paths.data / default

    def _raw_inputs(self) -> Dict[str, Path]:
        corpus = self.settings.corpus
        return {
            'corpus': self._data_path(corpus.path, 'corpus.jsonl'),
            'train': self._data_path(corpus.task_train_path, 'task_train.jsonl'),
            'val': self._data_path(corpus.task_val_path, 'task_val.jsonl'),
            'test': self._data_path(corpus.task_test_path, 'task_test.jsonl'),
        }

    def _documents(self) -> Dict[str, Document]:
        return {doc.id: doc for doc in read_documents(self.paths.corpus_tokens)}

    def _task(self, split: str) -> List[TaskExample]:
        return read_examples(self.paths.task_tokens(split))

    def _pool_documents(self) -> List[Document]:
        require(self.paths.pool, "run the retrieve stage first")
        docs = self._documents()
        pool = [docs[doc_id] for doc_id in read_ids(self.paths.pool)]
        usable = [doc for doc in pool if len(doc.tokens) >= 2]
        if len(usable) < len(pool):
            logger.warning("Dropping %d single-token candidates from scoring", len(pool) - len(usable))
        if not usable:
            raise InvalidInputError("the candidate pool holds no scorable documents")
        return usable

    def _selection_config(self) -> SelectionConfig:
        select = self.settings.select
        return SelectionConfig(
            k=select.k,
            batch_pretrain=select.batch_pretrain,
            batch_task=select.batch_task,
            use_minibatch=select.use_minibatch,
            lr=select.lr if select.lr is not None else self.settings.warmup.lr,
            seed=derive_seed(self.seed, 'select'),
            mask_prob=self.settings.warmup.mask_prob,
            shuffle_batches=select.shuffle_batches,
            workers=self.workers,
        )

    def _pretrain_config(self, seed: int) -> TrainConfig:
        cfg = self.settings.pretrain
        return TrainConfig(lr=cfg.lr, epochs=0, steps=cfg.steps, batch_size=cfg.batch_size,
                           seed=seed, mask_prob=cfg.mask_prob)

    def _finetune_config(self, seed: int) -> TrainConfig:
        cfg = self.settings.finetune
        return TrainConfig(lr=cfg.lr, epochs=cfg.epochs, batch_size=cfg.batch_size, seed=seed)

    def _model_factory(self) -> Tuple[Callable[[int], ModelState], List[Path]]:
        """Fresh initialisation per seed, or a fixed checkpoint to further-pretrain"""
        cfg = self.settings.pretrain
        if cfg.init == 'checkpoint':
            stem = Path(cfg.checkpoint) if cfg.checkpoint else self.paths.warm
            model = load_checkpoint(stem)
            return (lambda seed: model), _checkpoint_files(stem)
        vocab = Vocabulary.load(self.paths.vocab)
        labels = LabelMap.load(self.paths.labels)
        dims = self.settings.model
        make_model = lambda seed: init_model(vocab.size, dims.d, dims.h, labels.num_classes,
                                             derive_seed(seed, 'init'), dims.init_scale)
        return make_model, [self.paths.vocab, self.paths.labels]

    def _anchors(self) -> List[TaskExample]:
        return self._task(self.settings.select.anchors)

    # Stages

    def _ingest(self) -> StageOutcome:
        raw = self._raw_inputs()
        for name, path in raw.items():
            require(path, f"{name} input; set CORPUS_ paths or run gen-synth")
        task_texts = [text for split in ('train', 'val')
                      for text in read_texts(raw[split], ('id', 'text', 'label'))]
        cfg = self.settings.corpus
        vocab = build_vocabulary(read_texts(raw['corpus']), task_texts, cfg.min_freq, cfg.task_min_freq)
        corpus = ingest_corpus(raw['corpus'], vocab)
        if not corpus.documents:
            raise InvalidInputError(f"{raw['corpus']}: no documents left after tokenization")

        label_map = LabelMap()
        splits = {split: ingest_task(raw[split], vocab, label_map) for split in SPLITS}
        if label_map.num_classes < 2:
            raise InvalidInputError("the task needs at least two labels")
        for split, data in splits.items():
            if not data.examples:
                raise InvalidInputError(f"task {split} split is empty")
            validate_ids(data.examples, vocab.size, label_map.num_classes)

        outputs = [vocab.save(self.paths.vocab), label_map.save(self.paths.labels),
                   write_tokens(self.paths.corpus_tokens, corpus.documents)]
        outputs += [write_tokens(self.paths.task_tokens(split), splits[split].examples) for split in SPLITS]
        notes = {
            'vocab_size': vocab.size,
            'num_classes': label_map.num_classes,
            'documents': len(corpus.documents),
            'skipped_documents': corpus.skipped,
            **{f"task_{split}": len(splits[split].examples) for split in SPLITS},
        }
        return list(raw.values()), outputs, {}, 0.0, notes

    def _index(self) -> StageOutcome:
        require(self.paths.corpus_tokens, "run the ingest stage first")
        cfg = self.settings.retrieval
        index = build_index(read_documents(self.paths.corpus_tokens), cfg.k1, cfg.b)
        out = index.save(self.paths.index)
        return [self.paths.corpus_tokens], [out], {}, 0.0, {'documents': index.N, 'avgdl': index.avgdl}

    def _retrieve(self) -> StageOutcome:
        require(self.paths.index, "run the index stage first")
        cfg = self.settings.retrieval
        index = Bm25Index.load(self.paths.index)
        queries_path = self.paths.task_tokens(cfg.query_source)
        pool = retrieve_candidates(index, read_examples(queries_path), cfg.top_n, self.workers)
        if not pool:
            raise InvalidInputError("retrieval returned an empty candidate pool")
        outputs = write_pool(self.paths.pool, pool, index, cfg.top_n)
        return [self.paths.index, queries_path], outputs, {}, 0.0, {'pool_size': len(pool)}

    def _warmup(self) -> StageOutcome:
        vocab = Vocabulary.load(self.paths.vocab)
        labels = LabelMap.load(self.paths.labels)
        train = self._task('train')
        dims, cfg = self.settings.model, self.settings.warmup
        seeds = {'init': derive_seed(self.seed, 'init'), 'warmup': derive_seed(self.seed, 'warmup')}
        model = init_model(vocab.size, dims.d, dims.h, labels.num_classes, seeds['init'], dims.init_scale)
        result = warmup_train(model, train, TrainConfig(
            lr=cfg.lr, epochs=cfg.epochs, batch_size=cfg.batch_size, seed=seeds['warmup'],
            mask_prob=cfg.mask_prob, task_weight=cfg.task_weight,
        ))
        outputs = save_checkpoint(result.model, self.paths.warm)
        outputs.append(atomic_write_json(self.paths.warm.with_name('history.json'), result.history))
        inputs = [self.paths.vocab, self.paths.labels, self.paths.task_tokens('train')]
        return inputs, outputs, seeds, 0.0, {'param_count': result.model.param_count(), 'tokens': result.tokens}

    def _score(self) -> StageOutcome:
        model = load_checkpoint(self.paths.warm)
        candidates = self._pool_documents()
        anchors = self._anchors()
        cfg = self._selection_config()
        records = score_candidates(model, candidates, anchors, cfg)
        outputs = write_scores(self.paths.scores, records, {
            'selection_digest': cfg.digest(),
            'seed': cfg.seed,
            'model_checksum': model.checksum(),
            'candidates': len(candidates),
            'anchors': len(anchors),
            'lr': cfg.lr,
        })
        inputs = [*_checkpoint_files(self.paths.warm), self.paths.pool, self.paths.corpus_tokens,
                  self.paths.task_tokens(self.settings.select.anchors)]
        return inputs, outputs, {'select': cfg.seed}, 0.0, {'pairs': len(records)}

    def _select(self) -> StageOutcome:
        cfg = self._selection_config()
        size = self.settings.select.size
        if cfg.use_minibatch:
            model = load_checkpoint(self.paths.warm)
            subset = minibatch_select(model, self._pool_documents(), self._anchors(), cfg)
            inputs = [*_checkpoint_files(self.paths.warm), self.paths.pool, self.paths.corpus_tokens]
        else:
            records = read_scores(self.paths.scores)
            subset = select_to_size(records, size) if size else select_topk(records, cfg.k)
            inputs = [self.paths.scores, self.paths.pool]
        subset.manifest['selection_digest'] = cfg.digest()
        outputs = subset.write(self.paths.subset().parent)

        # equal-size comparison subsets
        pool_ids = read_ids(self.paths.pool, "run the retrieve stage first")
        random_seed = derive_seed(self.seed, 'baseline-random')
        random_source = pool_ids if self.settings.eval.random_source == 'pool' else sorted(self._documents())
        baselines = {
            'bm25_rank': baseline_select(pool_ids, len(subset), 'bm25_rank'),
            'random': baseline_select(random_source, len(subset), 'random', random_seed),
        }
        for name, baseline in baselines.items():
            outputs += baseline.write(self.paths.subset().parent, name)
        return inputs, outputs, {'select': cfg.seed, 'baseline-random': random_seed}, 0.0, {'size': len(subset)}

    def _subset_documents(self, name: str = 'subset') -> List[Document]:
        docs = self._documents()
        members = read_subset(self.paths.subset(name))
        missing = [m for m in members if m not in docs]
        if missing:
            raise InvalidInputError(f"subset {name} names unknown documents: {missing[:5]}")
        return [docs[m] for m in members]

    def _pretrain(self) -> StageOutcome:
        make_model, model_inputs = self._model_factory()
        seed = derive_seed(self.seed, 'pretrain', 'iss')
        result = pretrain(make_model(self.seed), self._subset_documents(), self._pretrain_config(seed))
        outputs = save_checkpoint(result.model, self.paths.pretrained)
        inputs = [*model_inputs, self.paths.subset(), self.paths.corpus_tokens]
        return inputs, outputs, {'pretrain': seed}, result.flops, {'tokens': result.tokens}

    def _finetune(self) -> StageOutcome:
        model = load_checkpoint(self.paths.pretrained)
        seed = derive_seed(self.seed, 'finetune')
        metric = self.settings.finetune.metric
        result = finetune_evaluate(model, self._task('train'), self._task('test'),
                                   self._finetune_config(seed), metric)
        outputs = save_checkpoint(result.model, self.paths.finetuned)
        outputs.append(atomic_write_json(self.paths.finetuned.with_name('metrics.json'), {
            'metric': f"{metric}-F1",
            'value': result.value,
            'finetune_flops': result.flops,
            'tokens': result.tokens,
        }))
        inputs = [*_checkpoint_files(self.paths.pretrained), self.paths.task_tokens('train'),
                  self.paths.task_tokens('test')]
        return inputs, outputs, {'finetune': seed}, result.flops, {'value': result.value}

    def _protocol(self, name: str, docs, make_model, seeds: Sequence[int]) -> EvalReport:
        return run_protocol(
            name, docs, make_model, self._task('train'), self._task('test'),
            self._pretrain_config(0), self._finetune_config(0),
            self.settings.finetune.metric, seeds,
            baselines=['bm25_rank', 'random', 'none'] if name.startswith('iss') else [],
        )

    def _evaluate(self) -> StageOutcome:
        make_model, model_inputs = self._model_factory()
        seeds = [self.seed + i for i in range(self.settings.eval.num_seeds)]
        subsets = {'iss': 'subset', 'bm25_rank': 'bm25_rank', 'random': 'random'}
        reports = [self._protocol(name, self._subset_documents(stem), make_model, seeds)
                   for name, stem in subsets.items()]
        reports.append(self._protocol('none', None, make_model, seeds))

        sweep = self._sweep(make_model, seeds)

        recall = None
        planted_path = self.paths.data / 'planted.txt'
        distractor_path = self.paths.data / 'distractors.txt'
        if planted_path.exists() and distractor_path.exists():
            planted, distractors = read_ids(planted_path), read_ids(distractor_path)
            recall = {name: summarize(read_subset(self.paths.subset(stem)), planted, distractors)
                      for name, stem in subsets.items()}

        metadata = {
            'config hash': self.settings.config_hash(),
            'root seed': self.seed,
            'seeds': ', '.join(str(s) for s in seeds),
            'tool version': __version__,
        }
        generator = ReportGenerator()
        report = generator.generate(reports, metadata, sweep, recall)
        out = self.paths.evaluate
        outputs = [
            atomic_write_text(out / 'report.txt', generator.to_text(report)),
            atomic_write_text(out / 'report.tsv', results_tsv([*reports, *sweep])),
            PDFGenerator(generator.title).create_pdf(report, out / 'report.pdf'),
            export_features(load_checkpoint(self.paths.warm), self._anchors(), out / 'features.tsv'),
        ]
        inputs = [*model_inputs, *(self.paths.subset(stem) for stem in subsets.values()),
                  self.paths.task_tokens('train'), self.paths.task_tokens('test'),
                  *_checkpoint_files(self.paths.warm)]
        if self.settings.eval.fractions:
            inputs += [self.paths.scores, self.paths.pool]
        flops = sum(r.flops * len(r.values) for r in [*reports, *sweep])
        notes = {r.subset: {'mean': r.mean, 'std': r.std} for r in [*reports, *sweep]}
        return inputs, outputs, {'eval': self.seed}, flops, notes

    def _sweep(self, make_model, seeds: Sequence[int]) -> List[EvalReport]:
        """ISS against the BM25-rank prefix at several fractions of the pool"""
        fractions = self.settings.eval.fractions
        if not fractions:
            return []
        docs = self._documents()
        pool_ids = read_ids(self.paths.pool, "run the retrieve stage first")
        records = read_scores(self.paths.scores)
        reports = []
        for fraction in sorted(fractions):
            size = max(1, round(fraction * len(pool_ids)))
            iss = select_to_size(records, size)
            bm25 = baseline_select(pool_ids, len(iss), 'bm25_rank')
            for name, subset in ((f"iss@{fraction:g}", iss), (f"bm25_rank@{fraction:g}", bm25)):
                reports.append(self._protocol(name, [docs[m] for m in subset.members], make_model, seeds))
        return reports

    def _analyze(self) -> StageOutcome:
        vocab = Vocabulary.load(self.paths.vocab)
        labels = LabelMap.load(self.paths.labels)
        subsets = {'iss': 'subset', 'bm25_rank': 'bm25_rank', 'random': 'random'}
        cfg = self.settings.analyze
        rows = analyze_task_words(self._task('train'),
                                  {name: self._subset_documents(stem) for name, stem in subsets.items()},
                                  cfg.top_m, cfg.min_count)
        generator = ReportGenerator("Task-influential words")
        table = generator.word_table(rows, lambda w: vocab.decode([w])[0], lambda y: labels.labels[y])
        report = {'Top PMI words per label': table,
                  'metadata': {'frequency': 'relative token frequency', 'top_m': cfg.top_m}}
        outputs = [
            atomic_write_text(self.paths.analyze / 'words.txt', generator.to_text(report)),
            atomic_write_text(self.paths.analyze / 'words.tsv', words_tsv(table)),
        ]
        inputs = [self.paths.vocab, self.paths.labels, self.paths.task_tokens('train'),
                  *(self.paths.subset(stem) for stem in subsets.values())]
        return inputs, outputs, {}, 0.0, {'rows': len(rows)}

    def _gen_synth(self) -> StageOutcome:
        seed = derive_seed(self.seed, 'synth')
        bench = generate(self.settings.synth, seed, self.paths.data)
        return [], bench.paths(), {'synth': seed}, 0.0, {}
