"""
Training for NSN models: reverse-mode gradients, the multi-rank uncertainty
objective and its ablations, curriculum rank sampling and the SGD loop.

Each step optimizes an anchor rank and (for the joint modes) one variant rank
below it:

    L = exp(-s_anchor) CE(anchor) + s_anchor + exp(-s_r) CE(r) + s_r

with s_k = log sigma_k^2 learned per rank and shared by all layers.
"""
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax

from .exceptions import ConfigurationError, DimensionError, DivergenceError, LabelError, RankError, RankOrderError
from .layers import FULL, DenseLayer, Model, NsnLayer, RankSpec, forward, layer_forward
from .linalg import Matrix, seeded_rng

if TYPE_CHECKING:
    from .data_io import Dataset

logger = logging.getLogger(__name__)


# ============= LOSS TERMS =============

class CrossEntropy(NamedTuple):
    loss: float
    dlogits: Matrix
    correct: int


def cross_entropy(logits: Matrix, labels: np.ndarray) -> CrossEntropy:
    """Mean softmax cross-entropy and its gradient (softmax - one_hot) / batch."""
    labels = np.asarray(labels)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f'{labels.shape[0] if labels.ndim else 0} labels for {n} rows of logits')
    if n and (labels.min() < 0 or labels.max() >= classes):
        bad = labels[(labels < 0) | (labels >= classes)][0]
        raise LabelError(f'label {bad} outside [0, {classes})')
    rows = np.arange(n)
    log_p = log_softmax(logits, axis=1)
    loss = -float(np.mean(log_p[rows, labels]))
    dlogits = np.exp(log_p)
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    correct = int(np.count_nonzero(np.argmax(logits, axis=1) == labels))
    return CrossEntropy(loss, dlogits, correct)


class SurrogateTerm(NamedTuple):
    value: float
    d_loss_coeff: float
    ds: float


def surrogate_term(loss_ce: float, s_k: float) -> SurrogateTerm:
    """exp(-s) L + s, its multiplier on the CE cotangent and d/ds."""
    with np.errstate(over='ignore'):
        weight = float(np.exp(-s_k))
    return SurrogateTerm(weight * loss_ce + s_k, weight, 1.0 - weight * loss_ce)


class UncertaintyParams:
    """Per-rank log-variances s_k, created at 0 on first use."""

    def __init__(self, values: Optional[Mapping[int, float]] = None):
        self._s: Dict[int, float] = {int(k): float(v) for k, v in (values or {}).items()}

    def __getitem__(self, rank: int) -> float:
        return self._s.setdefault(int(rank), 0.0)

    def __setitem__(self, rank: int, value: float):
        self._s[int(rank)] = float(value)

    def __contains__(self, rank) -> bool:
        return int(rank) in self._s

    def __len__(self):
        return len(self._s)

    def __eq__(self, other):
        return isinstance(other, UncertaintyParams) and self._s == other._s

    def snapshot(self) -> Dict[int, float]:
        return {k: self._s[k] for k in sorted(self._s)}

    def copy(self) -> 'UncertaintyParams':
        return UncertaintyParams(self._s)


class AblationMode(str, enum.Enum):
    CE_ONLY = 'ce_only'
    CE_HARD_ORTHO = 'ce_hard_ortho'
    TWO_CE = 'two_ce'
    TWO_CE_LOGITS_REG = 'two_ce_logits_reg'
    TWO_CE_RESIDUAL_ORTHO = 'two_ce_residual_ortho'
    TWO_CE_HIDDEN_REG = 'two_ce_hidden_reg'

    @classmethod
    def parse(cls, value) -> 'AblationMode':
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ConfigurationError(
                f'unknown ablation mode {value!r}; expected one of {[m.name for m in cls]}'
            ) from None

    @property
    def uses_variant(self) -> bool:
        return self.value.startswith('two_ce')


# ============= CONFIGURATION =============

def _rank_tuple(values) -> Tuple[int, ...]:
    return tuple(sorted({int(v) for v in values}))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    mode: AblationMode = AblationMode.TWO_CE
    use_uncertainty: bool = True
    anchor_rank: int = 32
    rank_pool: Tuple[int, ...] = (1, 2, 4, 8, 16)
    eval_ranks: Optional[Tuple[int, ...]] = None
    interpolated_eval_ranks: Tuple[int, ...] = ()
    reg_weight: float = 1.0
    curriculum: bool = True
    schedule: Optional[Tuple[Tuple[int, int], ...]] = None

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, 'mode', AblationMode.parse(self.mode))
        set_(self, 'rank_pool', _rank_tuple(self.rank_pool))
        ids = self.rank_pool + (self.anchor_rank,) if self.eval_ranks is None else self.eval_ranks
        set_(self, 'eval_ranks', _rank_tuple(ids))
        set_(self, 'interpolated_eval_ranks', _rank_tuple(self.interpolated_eval_ranks))
        if self.schedule is not None:
            items = self.schedule.items() if isinstance(self.schedule, Mapping) else self.schedule
            set_(self, 'schedule', tuple(sorted((int(e), int(h)) for e, h in items)))

        if self.epochs < 0:
            raise ConfigurationError(f'epochs must be >= 0, got {self.epochs}')
        if self.batch_size < 1:
            raise ConfigurationError(f'batch_size must be >= 1, got {self.batch_size}')
        if not self.learning_rate > 0:
            raise ConfigurationError(f'learning_rate must be > 0, got {self.learning_rate}')
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f'momentum must lie in [0, 1), got {self.momentum}')
        if self.reg_weight < 0:
            raise ConfigurationError(f'reg_weight must be >= 0, got {self.reg_weight}')
        if self.anchor_rank < 1:
            raise RankError(self.anchor_rank, None, f'anchor_rank must be >= 1, got {self.anchor_rank}')
        if any(r < 1 or r >= self.anchor_rank for r in self.rank_pool):
            raise RankOrderError(
                f'rank_pool {list(self.rank_pool)} must hold ranks in [1, {self.anchor_rank - 1}]'
            )
        if any(r < 1 or r > self.anchor_rank for r in self.eval_ranks):
            raise RankError(
                None, self.anchor_rank,
                f'eval_ranks {list(self.eval_ranks)} must lie in [1, {self.anchor_rank}]',
            )
        clash = set(self.interpolated_eval_ranks) & (set(self.rank_pool) | {self.anchor_rank})
        if clash:
            raise ConfigurationError(
                f'interpolated_eval_ranks {sorted(clash)} are also trained ranks'
            )
        if any(r < 1 for r in self.interpolated_eval_ranks):
            raise RankError(None, None, 'interpolated_eval_ranks must be positive')
        if self.mode.uses_variant and not self.rank_pool:
            raise ConfigurationError(f'mode {self.mode.name} needs a non-empty rank_pool')


# ============= CURRICULUM =============

@dataclass
class CurriculumSampler:
    """
    Draws (anchor, variant) pairs. The pool is unlocked from the highest rank
    downwards: at epoch e the ``horizon(e)`` largest pool ranks are admissible,
    growing to the whole pool by the middle of training.
    """

    anchor_rank: int
    rank_pool: Sequence[int]
    epochs: int
    seed: int = 0
    curriculum: bool = True
    schedule: Optional[Sequence[Tuple[int, int]]] = None
    calls: int = field(default=0, init=False)

    def __post_init__(self):
        self.rank_pool = _rank_tuple(self.rank_pool)
        if not self.rank_pool:
            raise ConfigurationError('the variant rank pool is empty')
        if self.rank_pool[-1] >= self.anchor_rank or self.rank_pool[0] < 1:
            raise RankOrderError(
                f'variant ranks {list(self.rank_pool)} must lie in [1, {self.anchor_rank - 1}]'
            )
        if self.schedule is not None:
            self.schedule = tuple(sorted((int(e), int(h)) for e, h in (
                self.schedule.items() if isinstance(self.schedule, Mapping) else self.schedule
            )))
            horizons = [h for _, h in self.schedule]
            if horizons != sorted(horizons):
                raise ConfigurationError(f'schedule horizons must be non-decreasing, got {horizons}')

    def horizon(self, epoch: int) -> int:
        size = len(self.rank_pool)
        if self.schedule:
            active = [h for e, h in self.schedule if e <= epoch]
            if not active:
                raise ConfigurationError(f'schedule admits no variant rank at epoch {epoch}')
            return max(1, min(size, active[-1]))
        if not self.curriculum or self.epochs <= 0:
            return size
        # ceil(size * min(1, (e + 1) / (epochs / 2))) in integer arithmetic
        return min(size, -(-(2 * size * (epoch + 1)) // self.epochs))

    def admissible(self, epoch: int) -> Tuple[int, ...]:
        return tuple(reversed(self.rank_pool))[: self.horizon(epoch)]

    def sample(self, epoch: int) -> Tuple[int, int]:
        if epoch < 0:
            raise ConfigurationError(f'epoch must be >= 0, got {epoch}')
        pool = self.admissible(epoch)
        if not pool:
            raise ConfigurationError(f'no admissible variant rank at epoch {epoch}')
        rng = np.random.Generator(np.random.PCG64([self.seed, self.calls]))
        self.calls += 1
        return self.anchor_rank, pool[int(rng.integers(len(pool)))]


def sample_ranks(sampler: CurriculumSampler, epoch: int) -> Tuple[int, int]:
    return sampler.sample(epoch)


# ============= REVERSE MODE =============

@dataclass
class GradientSet:
    """Cotangents shaped like each layer's params(), plus d/ds per rank."""

    layers: List[Dict[str, np.ndarray]]
    ds: Dict[int, float] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, model: Model) -> 'GradientSet':
        return cls([{name: np.zeros_like(p) for name, p in layer.params().items()} for layer in model.layers])

    def add_ds(self, rank: int, value: float):
        self.ds[rank] = self.ds.get(rank, 0.0) + value

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for grads in self.layers for g in grads.values()) and all(
            math.isfinite(v) for v in self.ds.values()
        )


@dataclass
class Trace:
    """Everything backward() needs from one forward pass at one rank."""

    inputs: List[Matrix]
    codes: List[Optional[Matrix]]
    pre: List[Matrix]
    outputs: List[Matrix]
    ranks: List[Optional[int]]

    @property
    def logits(self) -> Matrix:
        return self.outputs[-1]


def forward_trace(model: Model, x: Matrix, r: RankSpec) -> Trace:
    trace = Trace([], [], [], [], [])
    h = x
    for block in model.blocks:
        layer = block.layer
        y, code = layer_forward(layer, h, r)
        trace.inputs.append(h)
        trace.codes.append(code)
        trace.pre.append(y)
        trace.ranks.append(layer.resolve(r, clamp=True) if isinstance(layer, NsnLayer) else None)
        h = block.activation.apply(y)
        trace.outputs.append(h)
    return trace


def backward(
    model: Model,
    trace: Trace,
    d_logits: Matrix,
    grads: GradientSet,
    hidden_cotangents: Optional[Mapping[int, Matrix]] = None,
):
    """
    Accumulate parameter cotangents of one traced pass into ``grads``.
    An NSN layer at rank r only touches rows 1..r of A and columns 1..r of B.
    """
    g = d_logits
    for i in reversed(range(len(model.blocks))):
        block = model.blocks[i]
        if hidden_cotangents and i in hidden_cotangents:
            g = g + hidden_cotangents[i]
        dy = g * block.activation.derivative(trace.pre[i])
        layer, x, target = block.layer, trace.inputs[i], grads.layers[i]
        target['bias'] += dy.sum(axis=0)
        if isinstance(layer, DenseLayer):
            target['w'] += dy.T @ x
            g = dy @ layer.w
        else:
            r = trace.ranks[i]
            target['b'][:, :r] += dy.T @ trace.codes[i]
            dz = dy @ layer.b[:, :r]
            target['a'][:r] += dz.T @ x
            g = dz @ layer.a[:r]


# ============= OBJECTIVE =============

class ObjectiveResult(NamedTuple):
    loss: float
    grads: GradientSet
    diagnostics: dict


def penalty_targets(model: Model, x: Matrix, anchor: int) -> dict:
    """Anchor-side outputs the logits/hidden penalties pull the variant towards."""
    trace = forward_trace(model, x, anchor)
    return {'logits': trace.logits, 'hidden': trace.outputs[:-1]}


def _hard_ortho(model: Model, anchor: int, grads: GradientSet, weight: float) -> float:
    penalty = 0.0
    for i in model.nsn_indices():
        layer = model.layers[i]
        r = layer.resolve(anchor, clamp=True)
        a = layer.a[:r]
        gram = a @ a.T - np.eye(r)
        penalty += float(np.sum(gram * gram))
        grads.layers[i]['a'][:r] += weight * 4.0 * gram @ a
    return penalty


def _residual_ortho(model: Model, anchor: int, variant: int, grads: GradientSet, weight: float) -> float:
    penalty = 0.0
    for i in model.nsn_indices():
        layer = model.layers[i]
        ra, rv = layer.resolve(anchor, clamp=True), layer.resolve(variant, clamp=True)
        if rv >= ra:
            continue
        kept, residual = layer.a[:rv], layer.a[rv:ra]
        cross = kept @ residual.T
        penalty += float(np.sum(cross * cross))
        grads.layers[i]['a'][:rv] += weight * 2.0 * cross @ residual
        grads.layers[i]['a'][rv:ra] += weight * 2.0 * cross.T @ kept
    return penalty


def total_objective(
    model: Model,
    batch: Tuple[Matrix, np.ndarray],
    anchor: int,
    variant: Optional[int],
    u: UncertaintyParams,
    mode: AblationMode = AblationMode.TWO_CE,
    use_uncertainty: bool = True,
    reg_weight: float = 1.0,
    targets: Optional[dict] = None,
) -> ObjectiveResult:
    """
    Loss and analytic gradients for one step.

    The logits and hidden penalties treat the anchor side as a constant: pass
    ``targets`` (see ``penalty_targets``) to pin it explicitly, otherwise the
    live anchor outputs of this batch are used.
    """
    mode = AblationMode.parse(mode)
    x, labels = batch
    n = x.shape[0]
    if mode.uses_variant and (variant is None or variant >= anchor):
        raise RankOrderError(f'variant rank {variant} must be below anchor rank {anchor}')

    grads = GradientSet.zeros_like(model)
    diagnostics = {'anchor': anchor, 'variant': variant if mode.uses_variant else None}
    loss = 0.0

    traces = [(anchor, forward_trace(model, x, anchor))]
    if mode.uses_variant:
        traces.append((variant, forward_trace(model, x, variant)))

    coefficients, ce_terms = {}, {}
    for rank, trace in traces:
        ce = cross_entropy(trace.logits, labels)
        ce_terms[rank] = ce
        if use_uncertainty:
            term = surrogate_term(ce.loss, u[rank])
            loss += term.value
            coefficients[rank] = term.d_loss_coeff
            grads.add_ds(rank, term.ds)
        else:
            loss += ce.loss
            coefficients[rank] = 1.0

    anchor_trace = traces[0][1]
    variant_trace = traces[1][1] if mode.uses_variant else None
    if targets is None and mode in (AblationMode.TWO_CE_LOGITS_REG, AblationMode.TWO_CE_HIDDEN_REG):
        targets = {'logits': anchor_trace.logits, 'hidden': anchor_trace.outputs[:-1]}

    penalty = 0.0
    d_variant_logits = None
    hidden_cotangents = {}
    if mode is AblationMode.CE_HARD_ORTHO:
        penalty = _hard_ortho(model, anchor, grads, reg_weight)
    elif mode is AblationMode.TWO_CE_RESIDUAL_ORTHO:
        penalty = _residual_ortho(model, anchor, variant, grads, reg_weight)
    elif mode is AblationMode.TWO_CE_LOGITS_REG:
        diff = variant_trace.logits - targets['logits']
        penalty = float(np.sum(diff * diff)) / n
        d_variant_logits = reg_weight * 2.0 * diff / n
    elif mode is AblationMode.TWO_CE_HIDDEN_REG:
        for i, target in enumerate(targets['hidden']):
            diff = variant_trace.outputs[i] - target
            penalty += float(np.sum(diff * diff)) / n
            hidden_cotangents[i] = reg_weight * 2.0 * diff / n
    loss += reg_weight * penalty

    ce_a = ce_terms[anchor]
    backward(model, anchor_trace, coefficients[anchor] * ce_a.dlogits, grads)
    if variant_trace is not None:
        d_logits = coefficients[variant] * ce_terms[variant].dlogits
        if d_variant_logits is not None:
            d_logits = d_logits + d_variant_logits
        backward(model, variant_trace, d_logits, grads, hidden_cotangents)

    diagnostics.update(
        ce_anchor=ce_a.loss,
        ce_variant=ce_terms[variant].loss if mode.uses_variant else None,
        anchor_correct=ce_a.correct,
        penalty=penalty,
        coefficients=coefficients,
    )
    return ObjectiveResult(loss, grads, diagnostics)


# ============= OPTIMIZER =============

class SgdMomentum:
    """v <- momentum * v + g; p <- p - lr * v, for layer params and every s_k."""

    def __init__(self, learning_rate: float, momentum: float = 0.9):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self._velocity = {}

    def _velocity_for(self, key, grad):
        v = self._velocity.get(key)
        if v is None:
            v = grad.copy() if isinstance(grad, np.ndarray) else grad
        else:
            v = self.momentum * v + grad
        self._velocity[key] = v
        return v

    def step(self, model: Model, grads: GradientSet, u: Optional[UncertaintyParams] = None):
        for i, layer in enumerate(model.layers):
            for name, param in layer.params().items():
                param -= self.learning_rate * self._velocity_for((i, name), grads.layers[i][name])
        if u is not None:
            for rank in sorted(grads.ds):
                u[rank] = u[rank] - self.learning_rate * self._velocity_for(('s', rank), grads.ds[rank])


# ============= EVALUATION AND LOGGING =============

class Evaluation(NamedTuple):
    loss: float
    accuracy: float


def evaluate(model: Model, dataset: 'Dataset', r: RankSpec = FULL, batch_size: int = 4096) -> Evaluation:
    """Mean cross-entropy and top-1 accuracy over a dataset at rank r."""
    total_loss, correct, n = 0.0, 0, dataset.size
    for start in range(0, n, batch_size):
        x = dataset.features[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        ce = cross_entropy(forward(model, x, r), y)
        total_loss += ce.loss * x.shape[0]
        correct += ce.correct
    return Evaluation(total_loss / n, correct / n)


PHASES = ('train', 'id_eval', 'ood_eval')


@dataclass(frozen=True)
class MetricRecord:
    epoch: int
    phase: str
    rank: int
    loss: float
    accuracy: float
    s: Dict[int, float] = field(default_factory=dict)

    def sort_key(self):
        return self.epoch, PHASES.index(self.phase), self.rank

    def to_dict(self) -> dict:
        return {
            'epoch': self.epoch,
            'phase': self.phase,
            'rank': self.rank,
            'loss': self.loss,
            'accuracy': self.accuracy,
            's': {str(k): v for k, v in sorted(self.s.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'MetricRecord':
        return cls(
            epoch=int(data['epoch']),
            phase=str(data['phase']),
            rank=int(data['rank']),
            loss=float(data['loss']),
            accuracy=float(data['accuracy']),
            s={int(k): float(v) for k, v in data.get('s', {}).items()},
        )


class AccuracySummary(NamedTuple):
    highest: float
    avg_id: float
    avg_ood: float


class MetricsLog:
    """Evaluation records keyed by (epoch, phase, rank); iteration order is canonical."""

    def __init__(self, records: Sequence[MetricRecord] = ()):
        self._records: Dict[tuple, MetricRecord] = {}
        for record in records:
            self.add(record)

    def add(self, record: MetricRecord):
        if record.phase not in PHASES:
            raise ValueError(f'unknown phase {record.phase!r}')
        self._records[(record.epoch, record.phase, record.rank)] = record

    @property
    def records(self) -> List[MetricRecord]:
        return sorted(self._records.values(), key=MetricRecord.sort_key)

    def __len__(self):
        return len(self._records)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other):
        return isinstance(other, MetricsLog) and self.records == other.records

    def final(self, phase: str) -> Dict[int, MetricRecord]:
        rows = [r for r in self._records.values() if r.phase == phase]
        if not rows:
            return {}
        last = max(r.epoch for r in rows)
        return {r.rank: r for r in sorted(rows, key=MetricRecord.sort_key) if r.epoch == last}

    def summary(self, config: TrainConfig) -> AccuracySummary:
        """Final-epoch anchor accuracy and mean accuracy over ID and OOD ranks."""
        ids, oods = self.final('id_eval'), self.final('ood_eval')
        anchor = ids.get(config.anchor_rank)
        return AccuracySummary(
            highest=anchor.accuracy if anchor else float('nan'),
            avg_id=float(np.mean([r.accuracy for r in ids.values()])) if ids else float('nan'),
            avg_ood=float(np.mean([r.accuracy for r in oods.values()])) if oods else float('nan'),
        )


class TrainResult(NamedTuple):
    model: Model
    uncertainty: UncertaintyParams
    metrics: MetricsLog


# ============= TRAINING LOOP =============

def train(
    model: Model,
    dataset: 'Dataset',
    config: TrainConfig,
    eval_dataset: Optional['Dataset'] = None,
    uncertainty: Optional[UncertaintyParams] = None,
    on_epoch: Optional[Callable[[List[MetricRecord]], None]] = None,
) -> TrainResult:
    """
    SGD with momentum over A, B, bias and s. The input model is not modified.
    After every epoch the model is evaluated on ``eval_dataset`` (default: the
    training set) at the ID and OOD ranks; ``on_epoch`` receives that epoch's
    records.
    """
    if dataset.dim != model.input_dim:
        raise DimensionError(f'dataset has {dataset.dim} features, model expects {model.input_dim}')
    if dataset.num_classes > model.output_dim:
        raise DimensionError(f'dataset has {dataset.num_classes} classes, model emits {model.output_dim} logits')
    if model.nsn_indices() and config.anchor_rank > model.max_rank:
        raise RankError(config.anchor_rank, model.max_rank, f'anchor rank {config.anchor_rank} exceeds max rank {model.max_rank}')

    model = model.copy()
    u = uncertainty.copy() if uncertainty is not None else UncertaintyParams()
    metrics = MetricsLog()
    eval_dataset = eval_dataset if eval_dataset is not None else dataset

    rng = seeded_rng(config.seed)
    optimizer = SgdMomentum(config.learning_rate, config.momentum)
    sampler = None
    if config.mode.uses_variant:
        sampler = CurriculumSampler(
            anchor_rank=config.anchor_rank,
            rank_pool=config.rank_pool,
            epochs=config.epochs,
            seed=config.seed,
            curriculum=config.curriculum,
            schedule=config.schedule,
        )

    n = dataset.size
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses, correct = [], 0
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            anchor, variant = sampler.sample(epoch) if sampler else (config.anchor_rank, None)
            logger.debug('epoch %d step %d: anchor %d, variant %s', epoch, step, anchor, variant)
            result = total_objective(
                model,
                (dataset.features[idx], dataset.labels[idx]),
                anchor,
                variant,
                u,
                mode=config.mode,
                use_uncertainty=config.use_uncertainty,
                reg_weight=config.reg_weight,
            )
            if not math.isfinite(result.loss) or not result.grads.is_finite():
                raise DivergenceError(epoch, step, result.loss)
            optimizer.step(model, result.grads, u if config.use_uncertainty else None)
            losses.append(result.loss * len(idx))
            correct += result.diagnostics['anchor_correct']

        snapshot = u.snapshot()
        epoch_records = [
            MetricRecord(epoch, 'train', config.anchor_rank, sum(losses) / n, correct / n, snapshot)
        ]
        for phase, ranks in (('id_eval', config.eval_ranks), ('ood_eval', config.interpolated_eval_ranks)):
            for r in ranks:
                ev = evaluate(model, eval_dataset, r)
                epoch_records.append(MetricRecord(epoch, phase, r, ev.loss, ev.accuracy, snapshot))
        for record in epoch_records:
            metrics.add(record)

        anchor_eval = next((rec for rec in epoch_records if rec.phase == 'id_eval' and rec.rank == config.anchor_rank), None)
        logger.info(
            'epoch %d/%d: train loss %.4f, anchor accuracy %s, s=%s',
            epoch + 1, config.epochs, epoch_records[0].loss,
            f'{anchor_eval.accuracy:.4f}' if anchor_eval else 'n/a',
            {k: round(v, 4) for k, v in snapshot.items()},
        )
        if on_epoch is not None:
            on_epoch(epoch_records)

    return TrainResult(model, u, metrics)
