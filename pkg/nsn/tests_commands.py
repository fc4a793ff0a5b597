import csv
import json
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from .data_io import load_checkpoint, read_runlog, save_checkpoint
from .layers import FULL, build_mlp, forward
from .linalg import seeded_rng

TINY_RUN = {
    'seed': 5,
    'dataset': {'kind': 'synthetic', 'num_classes': 3, 'dim': 8, 'train_per_class': 20, 'test_per_class': 10,
                'separation': 3.0},
    'model': {'hidden_dims': [8], 'max_rank': 4, 'layer_kind': 'nsn', 'activation': 'relu'},
    'training': {'epochs': 1, 'batch_size': 16, 'anchor_rank': 4, 'rank_pool': [1, 2],
                 'interpolated_eval_ranks': [3]},
    'baseline': {'ranks': [1, 2]},
    'ablation': {'modes': ['ce_only', 'two_ce'], 'seeds': [0]},
    'analysis': {'ranks': [1, 2, 4], 'lemma_samples': 200, 'bound_pairs': 20},
}


class CommandTestCase(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.config = self.write_config(TINY_RUN)

    def tearDown(self):
        self._tmp.cleanup()

    def write_config(self, document, name='run.json'):
        path = self.tmp / name
        path.write_text(json.dumps(document))
        return path

    def run_command(self, *args, **options):
        options.setdefault('quiet', True)
        stdout = StringIO()
        call_command(*args, stdout=stdout, **options)
        return stdout.getvalue()

    def assertExitCode(self, code, *args, **options):
        with self.assertRaises(CommandError) as ctx:
            self.run_command(*args, **options)
        self.assertEqual(ctx.exception.returncode, code)
        return ctx.exception


class TrainCommandTests(CommandTestCase):
    def test_writes_artifacts(self):
        out = self.tmp / 'run'
        output = self.run_command('train', config=str(self.config), out=str(out))
        self.assertIn('Trained two_ce for 1 epochs', output)
        checkpoint = load_checkpoint(out / 'model.nsnckpt')
        self.assertEqual(checkpoint.meta['seed'], 5)
        self.assertEqual(checkpoint.meta['anchor_rank'], 4)
        self.assertIn(4, checkpoint.uncertainty)
        self.assertLessEqual(set(checkpoint.uncertainty.snapshot()), {1, 2, 4})
        phases = {(r.phase, r.rank) for r in read_runlog(out / 'runlog.jsonl')}
        self.assertEqual(phases, {('train', 4), ('id_eval', 1), ('id_eval', 2), ('id_eval', 4), ('ood_eval', 3)})
        with open(out / 'frontier.csv', newline='') as handle:
            self.assertEqual([row['rank'] for row in csv.DictReader(handle)], ['1', '2', '3', '4'])

    def test_same_seed_same_bytes(self):
        for name in ('a', 'b'):
            self.run_command('train', config=str(self.config), out=str(self.tmp / name))
        for artifact in ('model.nsnckpt', 'runlog.jsonl', 'frontier.csv'):
            with self.subTest(artifact=artifact):
                self.assertEqual((self.tmp / 'a' / artifact).read_bytes(), (self.tmp / 'b' / artifact).read_bytes())

    def test_seed_flag_changes_the_run(self):
        self.run_command('train', config=str(self.config), out=str(self.tmp / 'a'))
        self.run_command('train', config=str(self.config), out=str(self.tmp / 'b'), seed=6)
        self.assertNotEqual(load_checkpoint(self.tmp / 'a' / 'model.nsnckpt').model,
                            load_checkpoint(self.tmp / 'b' / 'model.nsnckpt').model)

    def test_invalid_config(self):
        bad = self.write_config({**TINY_RUN, 'training': {'mode': 'three_ce'}}, 'bad.json')
        error = self.assertExitCode(2, 'train', config=str(bad), out=str(self.tmp / 'run'))
        self.assertIn('training.mode', str(error))

    def test_divergence_exits_with_numerical_code(self):
        document = {**TINY_RUN, 'training': {**TINY_RUN['training'], 'epochs': 3, 'learning_rate': 1e6}}
        error = self.assertExitCode(4, 'train', config=str(self.write_config(document, 'hot.json')),
                                    out=str(self.tmp / 'run'))
        self.assertIn('DivergenceError', str(error))

    def test_missing_dataset_file(self):
        document = {**TINY_RUN, 'dataset': {'kind': 'file', 'train_path': 'missing.csv'}}
        self.assertExitCode(2, 'train', config=str(self.write_config(document, 'file.json')))


class BaselineAndAblationTests(CommandTestCase):
    def test_native_baseline(self):
        out = self.tmp / 'native'
        self.run_command('baseline', 'native', config=str(self.config), out=str(out))
        with open(out / 'baseline_native.csv', newline='') as handle:
            rows = list(csv.DictReader(handle))
        self.assertEqual([row['rank'] for row in rows], ['1', '2'])
        self.assertEqual(int(rows[1]['flops']), 2 * 2 * (8 + 8) + 2 * 2 * (8 + 3))

    def test_truncation_baseline(self):
        out = self.tmp / 'truncate'
        self.run_command('baseline', 'truncate', config=str(self.config), out=str(out))
        self.assertTrue((out / 'baseline_truncate.csv').is_file())

    def test_ablation(self):
        out = self.tmp / 'ablation'
        self.run_command('ablate', config=str(self.config), out=str(out))
        with open(out / 'ablation.csv', newline='') as handle:
            rows = list(csv.DictReader(handle))
        self.assertEqual([row['mode'] for row in rows], ['ce_only', 'two_ce'])
        self.assertEqual([row['runs'] for row in rows], ['1', '1'])
        self.assertEqual(float(rows[0]['highest_std']), 0.0)
        self.assertTrue((out / 'ablation_runs.csv').is_file())


class SurgeryCommandTests(CommandTestCase):
    def setUp(self):
        super().setUp()
        self.dense = build_mlp(seeded_rng(0), [8, 8, 3], kind='dense')
        self.input = self.tmp / 'dense.nsnckpt'
        save_checkpoint(self.dense, None, {'seed': 5}, self.input)

    def test_full_rank_surgery_keeps_logits(self):
        output = self.tmp / 'out' / 'nsn.nsnckpt'
        self.run_command('surgery', str(self.input), str(output), layers=[0, 1])
        model = load_checkpoint(output).model
        self.assertEqual(model.nsn_indices(), [0, 1])
        x = seeded_rng(1).standard_normal((100, 8))
        np.testing.assert_allclose(forward(model, x, FULL), forward(self.dense, x), atol=1e-6)
        report = (output.parent / 'surgery_report.jsonl').read_text().splitlines()
        self.assertEqual([json.loads(line)['max_rank'] for line in report], [8, 3])

    def test_bad_layer_index(self):
        self.assertExitCode(2, 'surgery', str(self.input), str(self.tmp / 'x.nsnckpt'), layers=[5])

    def test_missing_input(self):
        self.assertExitCode(3, 'surgery', str(self.tmp / 'nope.nsnckpt'), str(self.tmp / 'x.nsnckpt'), layers=[0])


class AnalyzeCommandTests(CommandTestCase):
    def setUp(self):
        super().setUp()
        self.run_dir = self.tmp / 'run'
        self.run_command('train', config=str(self.config), out=str(self.run_dir))
        self.checkpoint = str(self.run_dir / 'model.nsnckpt')
        self.out = self.tmp / 'analysis'

    def analyze(self, which, checkpoint=None, **options):
        return self.run_command('analyze', checkpoint or self.checkpoint, which,
                                config=str(self.config), out=str(self.out), **options)

    def test_containment(self):
        self.analyze('containment')
        with open(self.out / 'containment_0.csv', newline='') as handle:
            rows = list(csv.reader(handle))
        self.assertEqual(rows[0], ['rank', '1', '2', '4'])
        for i, row in enumerate(rows[1:]):
            for j in range(i, 3):
                self.assertGreaterEqual(float(row[j + 1]), 1 - 1e-8)
        self.assertTrue((self.out / 'containment_1.csv').is_file())

    def test_lemma(self):
        self.analyze('lemma')
        record = json.loads((self.out / 'lemma.jsonl').read_text())
        self.assertEqual((record['samples'], record['violations']), (200, 0))

    def test_energy(self):
        self.analyze('energy')
        records = [json.loads(line) for line in (self.out / 'energy.jsonl').read_text().splitlines()]
        self.assertEqual([r['layer'] for r in records], [0, 1])

    def test_bound_needs_probe_on_deep_models(self):
        self.assertExitCode(2, 'analyze', self.checkpoint, 'bound', config=str(self.config), out=str(self.out))
        self.analyze('bound', probe=True, r1=1, r_int=3)
        records = [json.loads(line) for line in (self.out / 'bound.jsonl').read_text().splitlines()]
        self.assertEqual([r['kind'] for r in records], ['report', 'model_gap', 'fuzz'])
        self.assertTrue(records[0]['holds'])
        self.assertTrue(records[2]['all_dominated'])

    def test_frontier_on_dense_checkpoint(self):
        dense = self.tmp / 'dense.nsnckpt'
        save_checkpoint(build_mlp(seeded_rng(0), [8, 8, 3], kind='dense'), None, {}, dense)
        self.analyze('frontier', checkpoint=str(dense))
        with open(self.out / 'frontier.csv', newline='') as handle:
            rows = list(csv.DictReader(handle))
        self.assertEqual(len({row['accuracy'] for row in rows}), 1)

    def test_corrupted_checkpoint(self):
        corrupt = self.tmp / 'corrupt.nsnckpt'
        raw = bytearray(Path(self.checkpoint).read_bytes())
        raw[-1] ^= 0x01
        corrupt.write_bytes(bytes(raw))
        self.assertExitCode(3, 'analyze', str(corrupt), 'frontier', config=str(self.config), out=str(self.out))
