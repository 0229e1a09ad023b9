import math
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.config import FinetuneSettings, ModelSettings
from src.corpus import Document, TaskExample
from src.errors import InvalidInputError
from src.evaluation import (
    EvalReport,
    analyze_task_words,
    baseline_select,
    compute_f1,
    export_features,
    finetune_evaluate,
    flops,
    pmi,
    pmi_from_counts,
    pretrain,
    relative_frequency,
    run_protocol,
    spearman,
)
from src.model import TrainConfig, init_model, predict
from tests.helpers import random_docs, random_examples, random_model


class TestComputeF1(unittest.TestCase):
    def test_perfect(self):
        self.assertEqual(compute_f1([0, 1, 2], [0, 1, 2], 'macro'), 1.0)
        self.assertEqual(compute_f1([0, 1, 2], [0, 1, 2], 'micro'), 1.0)

    def test_all_one_class(self):
        self.assertAlmostEqual(compute_f1([0, 0, 0, 0], [0, 0, 1, 1], 'macro'), 1 / 3)

    def test_hand_counted(self):
        self.assertAlmostEqual(compute_f1([0, 1, 1], [0, 0, 1], 'macro'), 2 / 3)
        self.assertAlmostEqual(compute_f1([0, 1, 1], [0, 0, 1], 'micro'), 2 / 3)

    def test_micro_is_accuracy(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            golds = rng.integers(0, 4, size=20)
            preds = rng.integers(0, 4, size=20)
            self.assertAlmostEqual(compute_f1(preds.tolist(), golds.tolist(), 'micro'), float(np.mean(preds == golds)))

    def test_consistent_relabeling(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            golds = rng.integers(0, 5, size=30).tolist()
            preds = rng.integers(0, 5, size=30).tolist()
            mapping = dict(enumerate((rng.permutation(5) + 10).tolist()))
            for mode in ('micro', 'macro'):
                self.assertAlmostEqual(
                    compute_f1([mapping[p] for p in preds], [mapping[g] for g in golds], mode),
                    compute_f1(preds, golds, mode),
                    places=12,
                )

    def test_errors(self):
        with self.assertRaises(InvalidInputError):
            compute_f1([0, 1], [0])
        with self.assertRaises(InvalidInputError):
            compute_f1([], [])
        with self.assertRaises(InvalidInputError):
            compute_f1([0], [0], 'weighted')


class TestFlops(unittest.TestCase):
    def test_formula(self):
        self.assertAlmostEqual(flops(109_000_000, 1000), 6.54e11, delta=1.0)
        self.assertEqual(flops(12345, 0), 0.0)

    def test_linear_in_each_argument(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            params = int(rng.integers(1, 10**6))
            tokens = int(rng.integers(1, 10**5))
            factor = int(rng.integers(2, 50))
            base = flops(params, tokens)
            self.assertEqual(flops(params * factor, tokens), base * factor)
            self.assertEqual(flops(params, tokens * factor), base * factor)
            self.assertEqual(flops(params, tokens + factor), base + flops(params, factor))

    def test_negative(self):
        with self.assertRaises(InvalidInputError):
            flops(-1, 10)


class TestPretrain(unittest.TestCase):
    def setUp(self):
        self.model = random_model(0)
        self.docs = random_docs(np.random.default_rng(0), 12, self.model.V, low=20, high=21)

    def test_zero_steps(self):
        result = pretrain(self.model, self.docs, TrainConfig(steps=0))
        self.assertEqual(result.model.checksum(), self.model.checksum())
        self.assertEqual(result.flops, 0.0)

    def test_token_counting(self):
        result = pretrain(self.model, self.docs, TrainConfig(steps=100, batch_size=8, lr=0.1))
        self.assertEqual(result.tokens, 16_000)
        self.assertEqual(result.flops, 6.0 * 16_000 * self.model.param_count())

    def test_deterministic(self):
        cfg = TrainConfig(steps=10, batch_size=4, lr=0.1, seed=5)
        a = pretrain(self.model, self.docs, cfg)
        b = pretrain(self.model, self.docs, cfg)
        self.assertEqual(a.model.checksum(), b.model.checksum())
        self.assertNotEqual(a.model.checksum(), self.model.checksum())

    def test_task_head_untouched(self):
        result = pretrain(self.model, self.docs, TrainConfig(steps=5, batch_size=4, lr=0.1))
        np.testing.assert_array_equal(result.model.T, self.model.T)
        np.testing.assert_array_equal(result.model.bt, self.model.bt)

    def test_needs_multi_token_docs(self):
        with self.assertRaises(InvalidInputError):
            pretrain(self.model, [Document('d0', '', (4,))], TrainConfig(steps=1))


class TestFinetuneEvaluate(unittest.TestCase):
    def setUp(self):
        self.model = random_model(1)
        rng = np.random.default_rng(1)
        self.train = random_examples(rng, 20, self.model.V, self.model.C, prefix='tr')
        self.test = random_examples(rng, 10, self.model.V, self.model.C, prefix='te')

    def test_score_in_range(self):
        result = finetune_evaluate(self.model, self.train, self.test, TrainConfig(epochs=2, lr=0.3))
        self.assertGreaterEqual(result.value, 0.0)
        self.assertLessEqual(result.value, 1.0)
        self.assertEqual(result.tokens, 2 * sum(len(ex.tokens) for ex in self.train))
        np.testing.assert_array_equal(result.model.P, self.model.P)

    def test_overlapping_ids(self):
        with self.assertRaises(InvalidInputError):
            finetune_evaluate(self.model, self.train, self.train[:3], TrainConfig())


def topic_task(rng: np.random.Generator, n: int, prefix: str, classes: int = 3, topic: int = 4, shared: int = 10):
    """Examples of two class-specific topic words among four shared words"""
    examples = []
    for i in range(n):
        label = i % classes
        topical = 2 + label * topic + rng.integers(0, topic, size=2)
        filler = 2 + classes * topic + rng.integers(0, shared, size=4)
        tokens = rng.permutation(np.concatenate([topical, filler]))
        examples.append(TaskExample(f"{prefix}{i:03d}", tuple(int(t) for t in tokens), label))
    return examples


class TestDefaultSettingsLearn(unittest.TestCase):
    def test_finetune_separates_classes(self):
        dims, tuned = ModelSettings(), FinetuneSettings()
        rng = np.random.default_rng(0)
        train, test = topic_task(rng, 30, 'tr'), topic_task(rng, 30, 'te')
        cfg = TrainConfig(lr=tuned.lr, epochs=tuned.epochs, batch_size=tuned.batch_size, seed=1)
        for seed in range(3):
            model = init_model(2 + 3 * 4 + 10, dims.d, dims.h, 3, seed, dims.init_scale)
            result = finetune_evaluate(model, train, test, cfg, 'macro')
            self.assertEqual(set(predict(result.model, test).tolist()), {0, 1, 2})
            self.assertGreaterEqual(result.value, 0.7)


class TestEvalReport(unittest.TestCase):
    def test_mean_and_std(self):
        report = EvalReport('iss', 'macro', {0: 0.5, 1: 0.7})
        self.assertAlmostEqual(report.mean, 0.6)
        self.assertAlmostEqual(report.std, math.sqrt(0.02))

    def test_single_seed(self):
        self.assertEqual(EvalReport('iss', 'macro', {3: 0.4}).std, 0.0)

    def test_protocol(self):
        model = random_model(2)
        rng = np.random.default_rng(2)
        docs = random_docs(rng, 8, model.V)
        train = random_examples(rng, 12, model.V, model.C, prefix='tr')
        test = random_examples(rng, 6, model.V, model.C, prefix='te')
        factory = lambda seed: random_model(seed)
        with_docs = run_protocol('iss', docs, factory, train, test, TrainConfig(steps=4, batch_size=2, lr=0.1),
                                 TrainConfig(epochs=1, lr=0.3), 'micro', [0, 1])
        self.assertEqual(sorted(with_docs.values), [0, 1])
        self.assertEqual(with_docs.subset_size, 8)
        self.assertGreater(with_docs.flops, 0.0)
        without = run_protocol('none', None, factory, train, test, TrainConfig(steps=4), TrainConfig(epochs=1),
                               'micro', [0])
        self.assertEqual(without.flops, 0.0)

    def test_protocol_empty_subset_is_an_error(self):
        model = random_model(2)
        rng = np.random.default_rng(2)
        train = random_examples(rng, 6, model.V, model.C, prefix='tr')
        test = random_examples(rng, 4, model.V, model.C, prefix='te')
        with self.assertRaises(InvalidInputError):
            run_protocol('iss', [], lambda seed: random_model(seed), train, test, TrainConfig(steps=2),
                         TrainConfig(epochs=1), 'micro', [0])


class TestPmi(unittest.TestCase):
    def test_counts(self):
        self.assertAlmostEqual(pmi_from_counts(10, 10, 50, 100), 1.0)
        self.assertAlmostEqual(pmi_from_counts(10, 20, 50, 100), 0.0)
        self.assertEqual(pmi_from_counts(0, 20, 50, 100), float('-inf'))
        with self.assertRaises(InvalidInputError):
            pmi_from_counts(0, 0, 50, 100)

    def test_example_level(self):
        # repeated tokens count once per example
        task = [TaskExample('a', (5, 5, 7), 0), TaskExample('b', (5, 8), 0),
                TaskExample('c', (6, 7), 1), TaskExample('d', (6, 9), 1)]
        self.assertAlmostEqual(pmi(task, 5, 0), 1.0)
        self.assertAlmostEqual(pmi(task, 7, 0), 0.0)
        self.assertEqual(pmi(task, 5, 1), float('-inf'))


class TestAnalyzeTaskWords(unittest.TestCase):
    def setUp(self):
        self.task = [TaskExample('a', (5, 7), 0), TaskExample('b', (5, 8), 0),
                     TaskExample('c', (6, 7), 1), TaskExample('d', (6, 9), 1)]

    def test_relative_frequency(self):
        self.assertAlmostEqual(relative_frequency([Document('x', '', (5, 5, 6))], 5), 2 / 3)
        self.assertEqual(relative_frequency([], 5), 0.0)

    def test_rows(self):
        subset = [Document('x', '', (5, 5, 6))]
        rows = analyze_task_words(self.task, {'iss': subset, 'random': subset}, top_m=1)
        self.assertEqual([(r.label, r.word) for r in rows], [(0, 5), (1, 6)])
        self.assertAlmostEqual(rows[0].pmi, 1.0)
        self.assertAlmostEqual(rows[0].frequencies['iss'], 2 / 3)
        self.assertEqual(rows[0].frequencies['iss'], rows[0].frequencies['random'])
        self.assertAlmostEqual(rows[1].frequencies['iss'], 1 / 3)

    def test_min_count_and_order(self):
        rows = analyze_task_words(self.task, {'iss': []}, top_m=5, min_count=2)
        self.assertEqual([r.word for r in rows if r.label == 0], [5, 7])
        self.assertEqual(rows[0].frequencies['iss'], 0.0)


class TestBaselines(unittest.TestCase):
    pool = [f"d{i}" for i in range(10)]

    def test_whole_pool(self):
        self.assertEqual(baseline_select(self.pool, 10, 'bm25_rank').members, self.pool)
        self.assertEqual(sorted(baseline_select(self.pool, 10, 'random', seed=3).members), sorted(self.pool))

    def test_bm25_prefix(self):
        self.assertEqual(baseline_select(self.pool, 3, 'bm25_rank').members, ['d0', 'd1', 'd2'])

    def test_random_seeded(self):
        a = baseline_select(self.pool, 4, 'random', seed=1).members
        self.assertEqual(a, baseline_select(self.pool, 4, 'random', seed=1).members)
        self.assertEqual(len(set(a)), 4)

    def test_errors(self):
        with self.assertRaises(InvalidInputError):
            baseline_select(self.pool, 11)
        with self.assertRaises(InvalidInputError):
            baseline_select(self.pool, 2, 'kmeans')


class TestMisc(unittest.TestCase):
    def test_spearman(self):
        self.assertAlmostEqual(spearman([1, 2, 3, 4], [2, 4, 9, 10]), 1.0)
        self.assertAlmostEqual(spearman([1, 2, 3], [3, 2, 1]), -1.0)
        self.assertEqual(spearman([1, 2, 3], [5, 5, 5]), 0.0)
        with self.assertRaises(InvalidInputError):
            spearman([1], [1, 2])

    def test_export_features(self):
        model = random_model(3)
        examples = random_examples(np.random.default_rng(3), 4, model.V, model.C)
        with tempfile.TemporaryDirectory() as tmp:
            path = export_features(model, examples, Path(tmp) / 'features.tsv')
            lines = path.read_text().splitlines()
        self.assertEqual(len(lines), 4)
        self.assertEqual(lines[0].split('\t')[0], examples[0].id)
        self.assertEqual(len(lines[0].split('\t')), 2 + model.h)


if __name__ == '__main__':
    unittest.main()
