"""
On-disk formats: datasets (CSV and rawf32), the single-file checkpoint
container, JSON-lines run logs and the CSV/JSON-lines analysis exports.

All binary data is little-endian; byte layouts are documented in FORMATS.md.
"""
import csv
import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .exceptions import CheckpointError, ConfigurationError, DataFormatError, LabelError
from .layers import Activation, Block, DenseLayer, Model, NsnLayer
from .linalg import Matrix, seeded_rng
from .training import MetricRecord, UncertaintyParams

logger = logging.getLogger(__name__)

DATASET_MAGIC = b'NSND'
DATASET_HEADER = struct.Struct('<4sIII')

CHECKPOINT_MAGIC = b'NSNCKPT 1\n'
CHECKPOINT_VERSION = 1

SPLITS = ('train', 'val', 'test')


# ============= DATASETS =============

@dataclass
class Dataset:
    features: Matrix
    labels: np.ndarray
    num_classes: int
    split: str = 'train'

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataFormatError(f'features must be a non-empty N x d matrix, got shape {self.features.shape}')
        if self.labels.shape != (self.features.shape[0],):
            raise DataFormatError(f'{self.labels.shape[0]} labels for {self.features.shape[0]} rows')
        if not np.all(np.isfinite(self.features)):
            raise DataFormatError('features contain non-finite values')
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise LabelError(f'labels must lie in [0, {self.num_classes}), found {self.labels.min()}..{self.labels.max()}')
        if self.split not in SPLITS:
            raise ConfigurationError(f'unknown split {self.split!r}')

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def _load_csv(path: Path, num_classes: Optional[int], split: str) -> Dataset:
    raw = path.read_bytes()
    offsets, pos = [], 0
    for line in raw.splitlines(keepends=True):
        offsets.append(pos)
        pos += len(line)
    try:
        text = raw.decode('utf-8')
    except UnicodeDecodeError as exc:
        raise DataFormatError(f'{path} is not valid UTF-8', offset=exc.start) from None
    reader = csv.reader(io.StringIO(text, newline=''))
    try:
        header = next(reader)
    except StopIteration:
        raise DataFormatError(f'{path} is empty', offset=0) from None
    header = [name.strip() for name in header]
    if 'label' not in header:
        raise DataFormatError(f'{path} has no "label" column', offset=0)
    label_col = header.index('label')
    width = len(header)
    if width < 2:
        raise DataFormatError(f'{path} has no feature columns', offset=0)

    features, labels = [], []
    for line_no, row in enumerate(reader, start=1):
        offset = offsets[line_no] if line_no < len(offsets) else pos
        if not row:
            continue
        if len(row) != width:
            raise DataFormatError(f'row {line_no} has {len(row)} fields, header has {width}', offset=offset)
        try:
            label = int(row[label_col])
            values = [float(v) for i, v in enumerate(row) if i != label_col]
        except ValueError as exc:
            raise DataFormatError(f'row {line_no}: {exc}', offset=offset) from None
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise DataFormatError(f'row {line_no}: label {label} outside [0, {num_classes})', offset=offset)
        labels.append(label)
        features.append(values)
    if not labels:
        raise DataFormatError(f'{path} has a header but no rows', offset=pos)
    if num_classes is None:
        num_classes = max(labels) + 1
    return Dataset(np.array(features), np.array(labels), num_classes, split)


def _load_rawf32(path: Path, split: str) -> Dataset:
    raw = path.read_bytes()
    if len(raw) < DATASET_HEADER.size:
        raise DataFormatError(
            f'expected a {DATASET_HEADER.size}-byte header, file has {len(raw)} bytes', offset=len(raw)
        )
    magic, n, d, num_classes = DATASET_HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise DataFormatError(f'bad magic {magic!r}, expected {DATASET_MAGIC!r}', offset=0)
    if n < 1 or d < 1 or num_classes < 1:
        raise DataFormatError(f'header declares N={n}, d={d}, classes={num_classes}', offset=4)
    expected = DATASET_HEADER.size + 4 * n * d + 4 * n
    if len(raw) != expected:
        raise DataFormatError(
            f'expected {expected} bytes for N={n}, d={d}, file has {len(raw)}', offset=min(len(raw), expected)
        )
    start = DATASET_HEADER.size
    features = np.frombuffer(raw, dtype='<f4', count=n * d, offset=start).reshape(n, d).astype(np.float64)
    label_start = start + 4 * n * d
    labels = np.frombuffer(raw, dtype='<u4', count=n, offset=label_start).astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(
            f'label {labels[i]} of row {i} outside [0, {num_classes})', offset=label_start + 4 * i
        )
    if not np.all(np.isfinite(features)):
        row = int(np.flatnonzero(~np.all(np.isfinite(features), axis=1))[0])
        raise DataFormatError(f'row {row} has non-finite features', offset=start + 4 * d * row)
    return Dataset(features, labels, int(num_classes), split)


def load_dataset(path, format: str = 'csv', num_classes: Optional[int] = None, split: str = 'train') -> Dataset:
    """
    Read a dataset file. CSV: header row, a ``label`` column and feature
    columns. rawf32: the binary layout in FORMATS.md.
    """
    path = Path(path)
    if format == 'csv':
        dataset = _load_csv(path, num_classes, split)
    elif format == 'rawf32':
        dataset = _load_rawf32(path, split)
        if num_classes is not None and num_classes != dataset.num_classes:
            raise DataFormatError(
                f'{path} declares {dataset.num_classes} classes, config expects {num_classes}', offset=12
            )
    else:
        raise ConfigurationError(f'unknown dataset format {format!r}')
    logger.info('loaded %s: N=%d, d=%d, classes=%d', path, dataset.size, dataset.dim, dataset.num_classes)
    return dataset


def save_dataset_rawf32(dataset: Dataset, path):
    features = dataset.features.astype('<f4')
    labels = dataset.labels.astype('<u4')
    with open(path, 'wb') as handle:
        handle.write(DATASET_HEADER.pack(DATASET_MAGIC, dataset.size, dataset.dim, dataset.num_classes))
        handle.write(features.tobytes(order='C'))
        handle.write(labels.tobytes())


def _cluster_centers(rng, num_classes: int, d: int, separation: float) -> Matrix:
    if min(num_classes, d) < 1:
        raise ConfigurationError(f'num_classes and d must be positive, got {num_classes}, {d}')
    if num_classes > d:
        raise ConfigurationError(
            f'cannot place {num_classes} orthonormal class centers in {d} dimensions'
        )
    if separation < 0:
        raise ConfigurationError(f'separation must be >= 0, got {separation}')
    q, _ = np.linalg.qr(rng.standard_normal((d, num_classes)))
    return separation * q.T


def _sample_clusters(rng, centers: Matrix, n_per_class: int, split: str) -> Dataset:
    if n_per_class < 1:
        raise ConfigurationError(f'n_per_class must be >= 1, got {n_per_class}')
    num_classes, d = centers.shape
    labels = np.repeat(np.arange(num_classes), n_per_class)
    features = centers[labels] + rng.standard_normal((labels.size, d))
    return Dataset(features, labels, num_classes, split)


def synth_clusters(seed: int, num_classes: int, d: int, n_per_class: int, separation: float) -> Dataset:
    """Gaussian blobs around ``separation`` times orthonormal random directions."""
    rng = seeded_rng(seed)
    centers = _cluster_centers(rng, num_classes, d, separation)
    return _sample_clusters(rng, centers, n_per_class, 'train')


def synth_train_test(seed, num_classes, d, train_per_class, test_per_class, separation):
    """Train and test splits sharing one set of centers; the train split equals synth_clusters."""
    rng = seeded_rng(seed)
    centers = _cluster_centers(rng, num_classes, d, separation)
    train = _sample_clusters(rng, centers, train_per_class, 'train')
    test = _sample_clusters(rng, centers, test_per_class, 'test')
    return train, test


# ============= CHECKPOINTS =============

@dataclass
class Checkpoint:
    model: Model
    uncertainty: Optional[UncertaintyParams] = None
    meta: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION


def canonical_json(document) -> str:
    return json.dumps(document, sort_keys=True, separators=(',', ':'))


def config_digest(document) -> str:
    return hashlib.sha256(canonical_json(document).encode('utf-8')).hexdigest()


def _layer_arrays(layer) -> List[np.ndarray]:
    if isinstance(layer, NsnLayer):
        return [layer.a, layer.b, layer.bias]
    return [layer.w, layer.bias]


def _layer_header(block: Block) -> dict:
    layer = block.layer
    return {
        'kind': layer.kind,
        'd_in': layer.d_in,
        'd_out': layer.d_out,
        'max_rank': layer.max_rank if isinstance(layer, NsnLayer) else None,
        'activation': block.activation.value,
    }


def save_checkpoint(model: Model, u: Optional[UncertaintyParams], meta: Optional[dict], path):
    payload = b''.join(
        np.ascontiguousarray(arr, dtype='<f8').tobytes() for layer in model.layers for arr in _layer_arrays(layer)
    )
    header = {
        'format_version': CHECKPOINT_VERSION,
        'layers': [_layer_header(block) for block in model.blocks],
        'uncertainty': None if u is None else {str(k): v for k, v in u.snapshot().items()},
        'meta': meta or {},
        'payload_bytes': len(payload),
        'payload_digest': hashlib.sha256(payload).hexdigest(),
    }
    with open(path, 'wb') as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(canonical_json(header).encode('utf-8') + b'\n')
        handle.write(payload)


def _shapes(spec: dict):
    d_in, d_out = int(spec['d_in']), int(spec['d_out'])
    if spec['kind'] == 'nsn':
        r = int(spec['max_rank'])
        return [(r, d_in), (d_out, r), (d_out,)]
    if spec['kind'] == 'dense':
        return [(d_out, d_in), (d_out,)]
    raise CheckpointError(f'unknown layer kind {spec["kind"]!r}')


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        if raw.startswith(b'NSNCKPT '):
            version = raw[8:raw.find(b'\n')].decode('ascii', 'replace')
            raise CheckpointError(f'{path}: unsupported checkpoint version {version}')
        raise CheckpointError(f'{path}: not an NSN checkpoint (bad magic)')
    end = raw.find(b'\n', len(CHECKPOINT_MAGIC))
    if end < 0:
        raise CheckpointError(f'{path}: header is not terminated')
    try:
        header = json.loads(raw[len(CHECKPOINT_MAGIC):end].decode('utf-8'))
        version = header['format_version']
        layer_specs = header['layers']
        declared = int(header['payload_bytes'])
        digest = header['payload_digest']
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f'{path}: corrupted header ({exc})') from None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f'{path}: unsupported checkpoint version {version}')

    payload = raw[end + 1:]
    try:
        shapes = [_shapes(spec) for spec in layer_specs]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f'{path}: corrupted layer description ({exc})') from None
    expected = 8 * sum(int(np.prod(s)) for layer in shapes for s in layer)
    if len(payload) != expected or declared != expected:
        raise CheckpointError(
            f'{path}: payload size mismatch, topology needs {expected} bytes, '
            f'header declares {declared}, file holds {len(payload)}'
        )
    if hashlib.sha256(payload).hexdigest() != digest:
        raise CheckpointError(f'{path}: payload digest mismatch')

    values = np.frombuffer(payload, dtype='<f8').astype(np.float64)
    try:
        blocks, pos = [], 0
        for spec, layer_shapes in zip(layer_specs, shapes):
            arrays = []
            for shape in layer_shapes:
                size = int(np.prod(shape))
                arrays.append(values[pos:pos + size].reshape(shape).copy())
                pos += size
            layer = NsnLayer(*arrays) if spec['kind'] == 'nsn' else DenseLayer(*arrays)
            blocks.append(Block(layer, Activation(spec['activation'])))
        model = Model(blocks)
        u = header.get('uncertainty')
        uncertainty = None if u is None else UncertaintyParams({int(k): float(v) for k, v in u.items()})
        meta = header.get('meta') or {}
        if not isinstance(meta, dict):
            raise TypeError(f'meta must be an object, got {type(meta).__name__}')
    except (KeyError, TypeError, ValueError, AttributeError, ConfigurationError) as exc:
        raise CheckpointError(f'{path}: corrupted header ({exc})') from None
    return Checkpoint(model=model, uncertainty=uncertainty, meta=meta, format_version=version)


# ============= RUN LOGS AND EXPORTS =============

def _record_line(record) -> str:
    data = record.to_dict() if isinstance(record, MetricRecord) else record
    return json.dumps(data, sort_keys=True) + '\n'


class RunLogWriter:
    """Append-only JSON-lines writer; call ``flush`` once per epoch."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        self._handle = open(self.path, 'a' if append else 'w', encoding='utf-8', newline='\n')

    def write(self, records: Iterable):
        for record in records:
            self._handle.write(_record_line(record))

    def flush(self):
        self._handle.flush()

    def close(self):
        if not self._handle.closed:
            self._handle.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_runlog(records: Iterable[MetricRecord], path):
    with RunLogWriter(path) as writer:
        writer.write(records)


def read_runlog(path) -> List[MetricRecord]:
    records, offset = [], 0
    with open(path, 'rb') as handle:
        for line in handle:
            if line.strip():
                try:
                    records.append(MetricRecord.from_dict(json.loads(line)))
                except (ValueError, KeyError, TypeError) as exc:
                    raise DataFormatError(f'{path}: bad run-log record ({exc})', offset=offset) from None
            offset += len(line)
    return records


def format_cell(value) -> str:
    """repr for floats so exports round-trip exactly."""
    if value is None:
        return ''
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]):
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])


FRONTIER_HEADER = ('rank', 'flops', 'loss', 'accuracy')


def write_frontier_csv(rows: Iterable, path):
    """Rows are anything with rank, flops, loss and accuracy attributes."""
    write_csv(path, FRONTIER_HEADER, ((r.rank, r.flops, r.loss, r.accuracy) for r in rows))


def write_grid_csv(grid, path):
    """Square grid with the ranks as first row and first column."""
    write_csv(
        path,
        ['rank'] + [str(r) for r in grid.ranks],
        ([r] + list(row) for r, row in zip(grid.ranks, grid.scores)),
    )


def write_records_jsonl(records: Iterable[dict], path):
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        for record in records:
            handle.write(_record_line(_jsonable(record)))


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value
