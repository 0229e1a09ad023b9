"""Slow end-to-end checks on the planted synthetic benchmark.

Run with ISS_RUN_ACCEPTANCE=1; each class builds its own runs under a
temporary directory.
"""

import json
import os
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.config import derive_seed, load_settings
from src.corpus import Vocabulary, read_documents, read_examples
from src.evaluation import analyze_task_words, spearman
from src.influence import DEFAULT_DAMPING, exact_influence_matrix, influence_score, loo_influence, step_delta_oracle
from src.model import LossKind, TrainConfig, last_layer_grad, load_checkpoint
from src.pipeline import StageRunner
from src.retrieval import read_ids
from src.selection import SelectionConfig, score_candidates
from src.synthetic import summarize
from tests.helpers import mean_match_scores, random_docs, random_examples, random_model

RUN_ACCEPTANCE = os.environ.get('ISS_RUN_ACCEPTANCE') == '1'
SCORING_STAGES = ('gen-synth', 'ingest', 'index', 'retrieve', 'warmup')


def prepared_run(out: Path, seed: int, stages, **overrides) -> StageRunner:
    runner = StageRunner(load_settings(environ=overrides), out, seed=seed)
    for stage in stages:
        runner.run(stage)
    return runner


def pool_and_anchors(runner: StageRunner):
    docs = {doc.id: doc for doc in read_documents(runner.paths.corpus_tokens)}
    pool = [docs[i] for i in read_ids(runner.paths.pool) if len(docs[i].tokens) >= 2]
    anchors = read_examples(runner.paths.task_tokens('val'))
    return pool, anchors


@unittest.skipUnless(RUN_ACCEPTANCE, "set ISS_RUN_ACCEPTANCE=1 to run the acceptance checks")
class TestTaylorFidelity(unittest.TestCase):
    def test_remainder_shrinks_quadratically(self):
        with tempfile.TemporaryDirectory() as tmp:
            runner = prepared_run(Path(tmp), 0, SCORING_STAGES)
            model = load_checkpoint(runner.paths.warm)
            pool, anchors = pool_and_anchors(runner)
        pairs = [(pool[i], anchors[i % len(anchors)]) for i in range(min(60, len(pool)))]
        self.assertGreaterEqual(len(pairs), 50)
        self.assertGreater(model.V, 1500)

        def mean_error(lr):
            errors = []
            for i, (doc, anchor) in enumerate(pairs):
                g_p = last_layer_grad(model, doc, LossKind.PRETRAINING, i)
                g_t = last_layer_grad(model, anchor, LossKind.TASK)
                predicted = influence_score(g_p, g_t, lr)
                errors.append(abs(step_delta_oracle(model, doc, anchor, lr, mask_seed=i) - predicted))
            return np.mean(errors)

        errors = [mean_error(lr) for lr in (1e-2, 5e-3, 2.5e-3)]
        for larger, smaller in zip(errors, errors[1:]):
            self.assertGreaterEqual(larger / smaller, 3.0)
            self.assertLessEqual(larger / smaller, 5.0)


@unittest.skipUnless(RUN_ACCEPTANCE, "set ISS_RUN_ACCEPTANCE=1 to run the acceptance checks")
class TestExactRankAgreement(unittest.TestCase):
    def test_gradient_matching_tracks_exact_influence(self):
        for instance in range(10):
            with self.subTest(instance=instance):
                # default +-0.1 init; q = h * d + h = 28
                model = random_model(instance, V=400, d=6, h=4, C=3)
                rng = np.random.default_rng(100 + instance)
                candidates = random_docs(rng, 150, model.V)
                anchors = random_examples(rng, 8, model.V, model.C)
                fast = mean_match_scores(model, candidates, anchors, seed=instance)
                signed = exact_influence_matrix(model, candidates, anchors, DEFAULT_DAMPING, seed=instance)
                benefit = (-signed).mean(axis=0)
                self.assertGreaterEqual(spearman(fast.tolist(), benefit.tolist()), 0.8)


@unittest.skipUnless(RUN_ACCEPTANCE, "set ISS_RUN_ACCEPTANCE=1 to run the acceptance checks")
class TestLeaveOneOutSanity(unittest.TestCase):
    SMALL = {'SYNTH_NUM_DOCS': '1000', 'SYNTH_NUM_PLANTED': '100', 'SYNTH_NUM_DISTRACTORS': '100'}

    def decile_gap(self, seed: int) -> float:
        with tempfile.TemporaryDirectory() as tmp:
            runner = prepared_run(Path(tmp), seed, SCORING_STAGES, **self.SMALL)
            model = load_checkpoint(runner.paths.warm)
            pool, anchors = pool_and_anchors(runner)
            select_seed = derive_seed(seed, 'select')
            mask_prob = runner.settings.warmup.mask_prob
        train_set = pool[:100]
        anchors = anchors[:4]
        records = score_candidates(model, train_set, anchors,
                                   SelectionConfig(seed=select_seed, mask_prob=mask_prob))
        mean_score = {}
        for rec in records:
            mean_score[rec.candidate] = mean_score.get(rec.candidate, 0.0) + rec.score / len(anchors)
        ranked = sorted(train_set, key=lambda doc: (-mean_score[doc.id], doc.id))
        decile = max(1, len(ranked) // 10)
        cfg = TrainConfig(lr=0.05, epochs=1, batch_size=1, seed=select_seed, mask_prob=mask_prob)

        def mean_loo(docs):
            return np.mean([loo_influence(cfg, train_set, doc, anchor, model)
                            for doc in docs for anchor in anchors])

        return mean_loo(ranked[:decile]) - mean_loo(ranked[-decile:])

    def test_top_decile_helps_more(self):
        wins = sum(self.decile_gap(seed) > 0 for seed in range(5))
        self.assertGreaterEqual(wins, 4)


@unittest.skipUnless(RUN_ACCEPTANCE, "set ISS_RUN_ACCEPTANCE=1 to run the acceptance checks")
class TestPlantedRecall(unittest.TestCase):
    def test_iss_beats_random(self):
        for seed in range(3):
            with self.subTest(seed=seed), tempfile.TemporaryDirectory() as tmp:
                runner = prepared_run(Path(tmp), seed, (*SCORING_STAGES, 'score', 'select'), SELECT_SIZE='500')
                planted = read_ids(runner.paths.data / 'planted.txt')
                distractors = read_ids(runner.paths.data / 'distractors.txt')
                iss = summarize(read_ids(runner.paths.subset()), planted, distractors)
                random = summarize(read_ids(runner.paths.subset('random')), planted, distractors)
                self.assertEqual(iss['size'], 500)
                self.assertGreaterEqual(iss['planted_recall'], 3 * random['planted_recall'])

                # planted topic words among the top-PMI task words, summed over rows
                vocab = Vocabulary.load(runner.paths.vocab)
                topics = json.loads((runner.paths.data / 'topics.json').read_text())
                topic_ids = {vocab.token_to_id[w] for parts in topics.values() for w in parts['train']
                             if w in vocab.token_to_id}
                docs = {doc.id: doc for doc in read_documents(runner.paths.corpus_tokens)}
                subsets = {name: [docs[m] for m in read_ids(runner.paths.subset(stem))]
                           for name, stem in (('iss', 'subset'), ('random', 'random'))}
                rows = [row for row in analyze_task_words(read_examples(runner.paths.task_tokens('train')),
                                                          subsets, top_m=5)
                        if row.word in topic_ids]
                self.assertTrue(rows)
                self.assertGreater(sum(row.frequencies['iss'] for row in rows),
                                   sum(row.frequencies['random'] for row in rows))


@unittest.skipUnless(RUN_ACCEPTANCE, "set ISS_RUN_ACCEPTANCE=1 to run the acceptance checks")
class TestDownstreamGain(unittest.TestCase):
    def test_pretraining_on_subset_helps(self):
        with tempfile.TemporaryDirectory() as tmp:
            runner = prepared_run(Path(tmp), 0, ('gen-synth',), SELECT_SIZE='500', EVAL_NUM_SEEDS='3',
                                  FINETUNE_METRIC='macro')
            runner.run('pipeline')
            notes = json.loads(runner.paths.manifest('evaluate').read_text())['notes']
        self.assertGreaterEqual(notes['iss']['mean'], notes['none']['mean'] + 0.02)
        self.assertGreaterEqual(notes['iss']['mean'], notes['bm25_rank']['mean'])


if __name__ == '__main__':
    unittest.main()
