import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from .data_io import (
    CHECKPOINT_MAGIC,
    DATASET_HEADER,
    DATASET_MAGIC,
    FRONTIER_HEADER,
    RunLogWriter,
    config_digest,
    load_checkpoint,
    load_dataset,
    read_runlog,
    save_checkpoint,
    save_dataset_rawf32,
    synth_clusters,
    synth_train_test,
    write_frontier_csv,
    write_runlog,
)
from .exceptions import CheckpointError, ConfigurationError, DataFormatError
from .layers import FULL, build_mlp, forward
from .linalg import seeded_rng
from .training import MetricRecord, UncertaintyParams


class TempDirMixin:
    def setUp(self):
        super().setUp()
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()
        super().tearDown()


class CsvDatasetTests(TempDirMixin, SimpleTestCase):
    def test_label_column_anywhere(self):
        path = self.tmp / 'd.csv'
        path.write_text('x0,label,x1\n0.5,1,2\n-1,0,3.25\n')
        dataset = load_dataset(path)
        np.testing.assert_array_equal(dataset.features, [[0.5, 2.0], [-1.0, 3.25]])
        np.testing.assert_array_equal(dataset.labels, [1, 0])
        self.assertEqual(dataset.num_classes, 2)

    def test_missing_label_column(self):
        path = self.tmp / 'd.csv'
        path.write_text('a,b\n1,2\n')
        with self.assertRaises(DataFormatError) as ctx:
            load_dataset(path)
        self.assertEqual(ctx.exception.offset, 0)

    def test_bad_row_reports_byte_offset(self):
        path = self.tmp / 'd.csv'
        path.write_text('x,label\n1,0\nnope,1\n')
        with self.assertRaises(DataFormatError) as ctx:
            load_dataset(path)
        self.assertEqual(ctx.exception.offset, len('x,label\n1,0\n'))

    def test_label_outside_declared_classes(self):
        path = self.tmp / 'd.csv'
        path.write_text('x,label\n1,0\n2,3\n')
        with self.assertRaises(DataFormatError):
            load_dataset(path, num_classes=3)

    def test_invalid_utf8_reports_byte_offset(self):
        path = self.tmp / 'd.csv'
        path.write_bytes(b'x,label\n\xff,0\n')
        with self.assertRaises(DataFormatError) as ctx:
            load_dataset(path)
        self.assertEqual(ctx.exception.offset, 8)
        self.assertEqual(ctx.exception.exit_code, 3)


class RawF32Tests(TempDirMixin, SimpleTestCase):
    def dataset(self):
        data = synth_clusters(1, 3, 5, 4, 2.0)
        data.features = data.features.astype(np.float32).astype(np.float64)
        return data

    def test_round_trip_is_bit_exact(self):
        data, path = self.dataset(), self.tmp / 'd.bin'
        save_dataset_rawf32(data, path)
        self.assertEqual(path.stat().st_size, DATASET_HEADER.size + 4 * 12 * 5 + 4 * 12)
        loaded = load_dataset(path, format='rawf32')
        np.testing.assert_array_equal(loaded.features, data.features)
        np.testing.assert_array_equal(loaded.labels, data.labels)
        self.assertEqual(loaded.num_classes, 3)

    def test_truncated_file(self):
        path = self.tmp / 'd.bin'
        save_dataset_rawf32(self.dataset(), path)
        path.write_bytes(path.read_bytes()[:-3])
        with self.assertRaisesMessage(DataFormatError, 'expected'):
            load_dataset(path, format='rawf32')

    def test_bad_magic(self):
        path = self.tmp / 'd.bin'
        path.write_bytes(DATASET_HEADER.pack(b'XXXX', 1, 1, 1) + bytes(8))
        with self.assertRaises(DataFormatError) as ctx:
            load_dataset(path, format='rawf32')
        self.assertEqual(ctx.exception.offset, 0)

    def test_label_offset(self):
        path = self.tmp / 'd.bin'
        features = np.zeros((2, 2), dtype='<f4')
        labels = np.array([1, 7], dtype='<u4')
        path.write_bytes(DATASET_HEADER.pack(DATASET_MAGIC, 2, 2, 2) + features.tobytes() + labels.tobytes())
        with self.assertRaises(DataFormatError) as ctx:
            load_dataset(path, format='rawf32')
        self.assertEqual(ctx.exception.offset, DATASET_HEADER.size + 16 + 4)

    def test_unknown_format(self):
        with self.assertRaises(ConfigurationError):
            load_dataset(self.tmp / 'd.bin', format='parquet')


class SyntheticTests(SimpleTestCase):
    def test_deterministic_and_balanced(self):
        a, b = synth_clusters(4, 5, 16, 30, 3.0), synth_clusters(4, 5, 16, 30, 3.0)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.class_counts(), [30] * 5)

    def test_train_split_matches_synth_clusters(self):
        train, test = synth_train_test(4, 5, 16, 30, 10, 3.0)
        np.testing.assert_array_equal(train.features, synth_clusters(4, 5, 16, 30, 3.0).features)
        self.assertEqual((test.size, test.split), (50, 'test'))

    def test_more_classes_than_dims(self):
        with self.assertRaises(ConfigurationError):
            synth_clusters(0, 5, 4, 10, 1.0)

    def nearest_centroid_accuracy(self, data):
        centroids = np.stack([data.features[data.labels == c].mean(axis=0) for c in range(data.num_classes)])
        distances = ((data.features[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        return np.mean(np.argmin(distances, axis=1) == data.labels)

    def test_wide_separation_is_separable(self):
        self.assertGreater(self.nearest_centroid_accuracy(synth_clusters(0, 10, 64, 200, 10.0)), 0.99)

    def test_zero_separation_is_chance(self):
        train, test = synth_train_test(0, 4, 16, 500, 500, 0.0)
        centroids = np.stack([train.features[train.labels == c].mean(axis=0) for c in range(4)])
        distances = ((test.features[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        accuracy = np.mean(np.argmin(distances, axis=1) == test.labels)
        self.assertLess(abs(accuracy - 0.25), 0.05)


class CheckpointTests(TempDirMixin, SimpleTestCase):
    def setUp(self):
        super().setUp()
        self.model = build_mlp(seeded_rng(3), [6, 7, 3], max_rank=4)
        self.u = UncertaintyParams({4: 0.25, 1: -1.5})
        self.meta = {'seed': 3, 'config_digest': config_digest({'a': 1})}
        self.path = self.tmp / 'm.nsnckpt'
        save_checkpoint(self.model, self.u, self.meta, self.path)

    def test_round_trip(self):
        loaded = load_checkpoint(self.path)
        self.assertEqual(loaded.model, self.model)
        self.assertEqual(loaded.uncertainty, self.u)
        self.assertEqual(loaded.meta, self.meta)
        x = seeded_rng(9).standard_normal((5, 6))
        for r in (1, 3, FULL):
            np.testing.assert_array_equal(forward(loaded.model, x, r), forward(self.model, x, r))

    def test_resave_is_byte_identical(self):
        loaded = load_checkpoint(self.path)
        again = self.tmp / 'again.nsnckpt'
        save_checkpoint(loaded.model, loaded.uncertainty, loaded.meta, again)
        self.assertEqual(again.read_bytes(), self.path.read_bytes())

    def test_dense_checkpoint_without_uncertainty(self):
        model = build_mlp(seeded_rng(0), [3, 2], kind='dense')
        save_checkpoint(model, None, None, self.path)
        loaded = load_checkpoint(self.path)
        self.assertEqual(loaded.model, model)
        self.assertIsNone(loaded.uncertainty)
        self.assertEqual(loaded.meta, {})

    def test_truncated(self):
        self.path.write_bytes(self.path.read_bytes()[:-8])
        with self.assertRaisesMessage(CheckpointError, 'size mismatch'):
            load_checkpoint(self.path)

    def test_corrupted_payload(self):
        raw = bytearray(self.path.read_bytes())
        raw[-1] ^= 0xFF
        self.path.write_bytes(bytes(raw))
        with self.assertRaisesMessage(CheckpointError, 'digest'):
            load_checkpoint(self.path)

    def test_corrupted_header(self):
        raw = self.path.read_bytes()
        self.path.write_bytes(CHECKPOINT_MAGIC + b'{not json' + raw[raw.find(b'\n', len(CHECKPOINT_MAGIC)):])
        with self.assertRaisesMessage(CheckpointError, 'corrupted header'):
            load_checkpoint(self.path)

    def rewrite_header(self, edit):
        raw = self.path.read_bytes()
        end = raw.find(b'\n', len(CHECKPOINT_MAGIC))
        header = json.loads(raw[len(CHECKPOINT_MAGIC):end])
        edit(header)
        self.path.write_bytes(CHECKPOINT_MAGIC + json.dumps(header).encode('utf-8') + raw[end:])

    def test_corrupted_layer_descriptions(self):
        edits = {
            'unknown activation': lambda h: h['layers'][0].update(activation='tanh'),
            'missing dimension': lambda h: h['layers'][0].pop('d_in'),
            'activated logits': lambda h: h['layers'][-1].update(activation='relu'),
            'bad uncertainty': lambda h: h.update(uncertainty={'four': 0.25}),
        }
        self.rewrite_header(lambda h: None)
        pristine = self.path.read_bytes()
        for name, edit in edits.items():
            with self.subTest(name):
                self.path.write_bytes(pristine)
                self.rewrite_header(edit)
                with self.assertRaises(CheckpointError) as ctx:
                    load_checkpoint(self.path)
                self.assertEqual(ctx.exception.exit_code, 3)

    def test_future_version(self):
        raw = self.path.read_bytes()
        self.path.write_bytes(b'NSNCKPT 2\n' + raw[len(CHECKPOINT_MAGIC):])
        with self.assertRaisesMessage(CheckpointError, 'unsupported checkpoint version 2'):
            load_checkpoint(self.path)

    def test_bad_magic(self):
        self.path.write_bytes(b'PK\x03\x04')
        with self.assertRaises(CheckpointError) as ctx:
            load_checkpoint(self.path)
        self.assertEqual(ctx.exception.exit_code, 3)


class RunLogTests(TempDirMixin, SimpleTestCase):
    records = [
        MetricRecord(0, 'train', 8, 1.25, 0.5, {8: 0.1, 2: -0.3}),
        MetricRecord(0, 'id_eval', 2, 0.1 + 0.2, 1 / 3),
    ]

    def test_round_trip(self):
        path = self.tmp / 'runlog.jsonl'
        write_runlog(self.records, path)
        self.assertEqual(read_runlog(path), self.records)

    def test_empty_log(self):
        path = self.tmp / 'runlog.jsonl'
        write_runlog([], path)
        self.assertEqual(path.read_bytes(), b'')
        self.assertEqual(read_runlog(path), [])

    def test_writer_appends_and_is_deterministic(self):
        a, b = self.tmp / 'a.jsonl', self.tmp / 'b.jsonl'
        with RunLogWriter(a) as writer:
            writer.write(self.records[:1])
            writer.flush()
        with RunLogWriter(a, append=True) as writer:
            writer.write(self.records[1:])
        write_runlog(self.records, b)
        self.assertEqual(a.read_bytes(), b.read_bytes())

    def test_bad_line_offset(self):
        path = self.tmp / 'runlog.jsonl'
        write_runlog(self.records[:1], path)
        good = path.read_bytes()
        path.write_bytes(good + b'{"epoch": 1}\n')
        with self.assertRaises(DataFormatError) as ctx:
            read_runlog(path)
        self.assertEqual(ctx.exception.offset, len(good))


class CsvExportTests(TempDirMixin, SimpleTestCase):
    def test_frontier_csv(self):
        class Row:
            rank, flops, loss, accuracy = 2, 120, 0.1, 0.75

        path = self.tmp / 'frontier.csv'
        write_frontier_csv([Row()], path)
        self.assertEqual(path.read_text(), ','.join(FRONTIER_HEADER) + '\n2,120,0.1,0.75\n')
