import json
import tempfile
from pathlib import Path

from django.conf import settings
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from .forms import TrainingForm, load_run_config, validate_run_config


class RunConfigTests(SimpleTestCase):
    def assertInvalid(self, document, message):
        with self.assertRaises(ValidationError) as ctx:
            validate_run_config(document)
        self.assertTrue(any(m.startswith(message) for m in ctx.exception.messages), ctx.exception.messages)

    def test_shipped_configs_validate(self):
        config = load_run_config(settings.NSN_DEFAULT_CONFIG)
        self.assertEqual(config.seed, 0)
        self.assertEqual(config.model['hidden_dims'], [128])
        self.assertEqual(config.training['anchor_rank'], 32)
        self.assertEqual(config.training['interpolated_eval_ranks'], [3, 6, 12, 24])
        self.assertEqual(config.training['epochs'], 60)
        self.assertEqual(config.training['schedule'], [(0, 1), (3, 2), (6, 3), (9, 4), (12, 5)])
        self.assertEqual(config.surgery['layers'], [])
        ablation = load_run_config(Path(settings.BASE_DIR) / 'configs' / 'ablation.json')
        self.assertEqual(len(ablation.ablation['modes']), 6)

    def test_empty_document_takes_defaults(self):
        config = validate_run_config({})
        self.assertEqual(config.dataset['num_classes'], 10)
        self.assertIsNone(config.training['anchor_rank'])
        self.assertEqual(config.training['mode'], 'two_ce')
        self.assertIs(config.training['use_uncertainty'], True)

    def test_seed_override(self):
        config = validate_run_config({'seed': 3}, seed=9)
        self.assertEqual((config.seed, config.document['seed']), (9, 9))

    def test_unknown_key_and_section(self):
        self.assertInvalid({'training': {'epoch': 3}}, 'training.epoch: unknown key')
        self.assertInvalid({'trainin': {}}, 'trainin: unknown section')

    def test_bad_values(self):
        self.assertInvalid({'seed': -1}, 'seed:')
        self.assertInvalid({'seed': 2 ** 64}, 'seed:')
        self.assertInvalid({'training': {'mode': 'three_ce'}}, 'training.mode:')
        self.assertInvalid({'training': {'epochs': 1.5}}, 'training.epochs:')
        self.assertInvalid({'training': {'momentum': 1.0}}, 'training.momentum:')
        self.assertInvalid({'training': {'use_uncertainty': 'yes'}}, 'training.use_uncertainty:')
        self.assertInvalid({'baseline': {'ranks': []}}, 'baseline.ranks:')
        self.assertInvalid({'ablation': {'modes': ['ce_only', 'x']}}, 'ablation.modes:')

    def test_rank_relations(self):
        self.assertInvalid({'training': {'anchor_rank': 16}}, 'training.rank_pool: Variant ranks [16]')
        self.assertInvalid(
            {'training': {'anchor_rank': 32, 'interpolated_eval_ranks': [3, 8]}},
            'training.interpolated_eval_ranks:',
        )
        self.assertInvalid({'training': {'rank_pool': []}}, 'training.rank_pool:')
        validate_run_config({'training': {'rank_pool': [], 'mode': 'ce_only'}})

    def test_dataset_source(self):
        self.assertInvalid({'dataset': {'num_classes': 10, 'dim': 4}}, 'dataset.num_classes:')
        self.assertInvalid({'dataset': {'kind': 'file'}}, 'dataset.train_path:')
        self.assertInvalid({'dataset': {'kind': 'file', 'train_path': '/no/such/file.csv'}}, 'dataset.train_path:')

    def test_every_error_is_reported(self):
        with self.assertRaises(ValidationError) as ctx:
            validate_run_config({'seed': -1, 'model': {'max_rank': 0}, 'analysis': {'r1': 4, 'r_int': 2}})
        prefixes = sorted(m.split(':')[0] for m in ctx.exception.messages)
        self.assertEqual(prefixes, ['analysis.r_int', 'model.max_rank', 'seed'])

    def test_surgery_ranks(self):
        config = validate_run_config({'surgery': {'layers': [0, 2], 'max_rank': {'0': 4, '2': None}}})
        self.assertEqual(config.surgery['max_rank'], {0: 4, 2: None})
        self.assertInvalid({'surgery': {'max_rank': 'half'}}, 'surgery.max_rank:')
        self.assertInvalid({'surgery': {'layers': [-1]}}, 'surgery.layers:')


class ScheduleTests(SimpleTestCase):
    def test_schedule_is_sorted_pairs(self):
        cleaned = TrainingForm.validate({'schedule': {'3': 2, '0': 1}})
        self.assertEqual(cleaned['schedule'], [(0, 1), (3, 2)])

    def test_decreasing_schedule(self):
        with self.assertRaises(ValidationError) as ctx:
            TrainingForm.validate({'schedule': {'0': 3, '5': 1}})
        self.assertTrue(ctx.exception.messages[0].startswith('training.schedule:'))


class ConfigFileTests(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test_relative_paths_resolve_against_config(self):
        (self.tmp / 'train.csv').write_text('x,label\n1,0\n')
        path = self.tmp / 'run.json'
        path.write_text(json.dumps({'dataset': {'kind': 'file', 'train_path': 'train.csv'}}))
        config = load_run_config(path)
        self.assertEqual(Path(config.dataset['train_path']), self.tmp / 'train.csv')

    def test_invalid_json(self):
        path = self.tmp / 'run.json'
        path.write_text('{"seed": 1,}')
        with self.assertRaises(ValidationError) as ctx:
            load_run_config(path)
        self.assertIn('not valid JSON', ctx.exception.messages[0])
