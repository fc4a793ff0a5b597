"""
Diagnostics over trained models: subspace containment, factor energy decay,
adjacent-rank perturbation and interpolation bounds, weight similarity and
compute/accuracy frontiers.

Every function here is read-only over its model arguments.
"""
import itertools
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from .exceptions import AnalysisError, DimensionError, RankError
from .layers import FULL, Activation, Block, DenseLayer, Model, NsnLayer, RankSpec, effective_weight, layer_forward, model_flops
from .linalg import Matrix, RandomStream, svd
from .training import UncertaintyParams, cross_entropy, evaluate

logger = logging.getLogger(__name__)

CONTAINMENT_TOLERANCE = 1e-8
LEMMA_TOLERANCE = 1e-9
# l2 bound on the logit gradient of per-example softmax cross-entropy.
CROSS_ENTROPY_LIPSCHITZ = math.sqrt(2.0)


# ============= CONTAINMENT =============

def containment_score(w_small: Matrix, w_large: Matrix, r_small: int, r_large: int) -> float:
    """(1 / r_small) ||U_large^T U_small||_F^2 over the leading left singular vectors."""
    if w_small.shape != w_large.shape:
        raise DimensionError(f'containment needs equal shapes, got {w_small.shape} and {w_large.shape}')
    limit = min(w_small.shape)
    for r in (r_small, r_large):
        if not 1 <= r <= limit:
            raise RankError(r, limit)
    u_small = svd(w_small).u[:, :r_small]
    u_large = svd(w_large).u[:, :r_large]
    overlap = u_large.T @ u_small
    return float(np.sum(overlap * overlap)) / r_small


@dataclass
class ContainmentGrid:
    ranks: List[int]
    scores: np.ndarray

    def upper_triangle(self) -> np.ndarray:
        return self.scores[np.triu_indices(len(self.ranks))]

    def lower_triangle(self) -> np.ndarray:
        return self.scores[np.tril_indices(len(self.ranks), k=-1)]

    def nested(self, tol: float = CONTAINMENT_TOLERANCE) -> bool:
        return bool(np.all(self.upper_triangle() >= 1.0 - tol))


def containment_grid(layer: NsnLayer, ranks: Sequence[int]) -> ContainmentGrid:
    ranks = sorted({int(r) for r in ranks})
    limit = min(layer.max_rank, layer.d_in, layer.d_out)
    for r in ranks:
        if not 1 <= r <= limit:
            raise RankError(r, limit)
    bases = {r: svd(effective_weight(layer, r)).u[:, :r] for r in ranks}
    scores = np.empty((len(ranks), len(ranks)))
    for i, j in itertools.product(range(len(ranks)), repeat=2):
        overlap = bases[ranks[j]].T @ bases[ranks[i]]
        scores[i, j] = np.sum(overlap * overlap) / ranks[i]
    grid = ContainmentGrid(ranks, scores)
    logger.info('containment grid over %s: min upper-triangle score %.12f', ranks, grid.upper_triangle().min())
    return grid


# ============= ENERGY DECAY =============

@dataclass
class EnergyAudit:
    a_norms: np.ndarray
    b_norms: np.ndarray
    products: np.ndarray
    violations: List[dict] = field(default_factory=list)

    @property
    def violation_count(self) -> int:
        return len(self.violations)

    @property
    def violation_fraction(self) -> float:
        checks = 3 * max(len(self.products) - 1, 0)
        return self.violation_count / checks if checks else 0.0

    def to_dict(self) -> dict:
        return {
            'a_norms': self.a_norms.tolist(),
            'b_norms': self.b_norms.tolist(),
            'products': self.products.tolist(),
            'violations': self.violations,
            'violation_count': self.violation_count,
            'violation_fraction': self.violation_fraction,
        }


def energy_decay_audit(layer: NsnLayer, rtol: float = 1e-9) -> EnergyAudit:
    """
    Per-index ||a_i||, ||b_i|| and their product, with every index where one
    of them grows over its predecessor. Diagnostic only.
    """
    a_norms = np.linalg.norm(layer.a, axis=1)
    b_norms = np.linalg.norm(layer.b, axis=0)
    audit = EnergyAudit(a_norms, b_norms, a_norms * b_norms)
    for name, values in (('a', a_norms), ('b', b_norms), ('product', audit.products)):
        for i in range(1, len(values)):
            increase = values[i] - values[i - 1]
            if increase > rtol * max(values[i - 1], 1.0):
                audit.violations.append({'index': i + 1, 'factor': name, 'increase': float(increase)})
    if audit.violations:
        logger.warning(
            'energy decay violated at %d places (fraction %.3f)', audit.violation_count, audit.violation_fraction
        )
    return audit


# ============= PERTURBATION BOUNDS =============

@dataclass(frozen=True)
class PerturbationCheck:
    lhs: float
    rhs: float

    @property
    def satisfied(self) -> bool:
        return self.lhs <= self.rhs + LEMMA_TOLERANCE


def adjacent_perturbation_check(layer: NsnLayer, x: np.ndarray, r: int) -> PerturbationCheck:
    """||f(x; r+1) - f(x; r)|| against ||b_{r+1}|| ||a_{r+1}|| ||x||."""
    if not 1 <= r < layer.max_rank:
        raise RankError(r, layer.max_rank - 1, f'rank {r} outside [1, {layer.max_rank - 1}]')
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != layer.d_in:
        raise DimensionError(f'x has {x.shape[0]} entries, layer expects {layer.d_in}')
    step = effective_weight(layer, r + 1) @ x - effective_weight(layer, r) @ x
    rhs = np.linalg.norm(layer.b[:, r]) * np.linalg.norm(layer.a[r]) * np.linalg.norm(x)
    return PerturbationCheck(float(np.linalg.norm(step)), float(rhs))


@dataclass(frozen=True)
class LemmaFuzzReport:
    samples: int
    violations: int
    worst_slack: float

    def to_dict(self) -> dict:
        return asdict(self)


def lemma_fuzz(layers: Sequence[NsnLayer], rng: RandomStream, samples: int = 10_000) -> LemmaFuzzReport:
    """Adjacent-rank checks over random (layer, x, r); slack is rhs - lhs."""
    layers = [layer for layer in layers if layer.max_rank >= 2]
    if not layers:
        raise AnalysisError('lemma fuzzing needs at least one NSN layer with max rank >= 2')
    violations, worst = 0, math.inf
    for _ in range(samples):
        layer = layers[int(rng.integers(len(layers)))]
        r = int(rng.integers(1, layer.max_rank))
        x = rng.standard_normal(layer.d_in) * float(np.exp(rng.uniform(-3.0, 3.0)))
        check = adjacent_perturbation_check(layer, x, r)
        violations += not check.satisfied
        worst = min(worst, check.rhs - check.lhs)
    logger.info('lemma fuzz: %d samples, %d violations, worst slack %.3e', samples, violations, worst)
    return LemmaFuzzReport(samples, violations, float(worst))


@dataclass(frozen=True)
class BoundReport:
    r1: int
    r_int: int
    empirical_gap: float
    bound: float
    constant: float
    lipschitz: float
    energies: Tuple[float, ...]

    @property
    def holds(self) -> bool:
        return self.bound >= self.empirical_gap - 1e-12

    def to_dict(self) -> dict:
        data = asdict(self)
        data['energies'] = list(self.energies)
        data['holds'] = self.holds
        return data


def probe_layer(model: Model, features: Matrix, probe: bool = False) -> Tuple[NsnLayer, Matrix]:
    """The final NSN layer and its inputs, with any prefix run at full rank."""
    last = model.blocks[-1].layer
    if not isinstance(last, NsnLayer):
        raise AnalysisError('the interpolation bound needs an NSN output layer')
    if len(model.blocks) == 1:
        return last, features
    if not probe:
        raise AnalysisError(
            f'the interpolation bound applies to a single NSN layer; this model has {len(model.blocks)} layers '
            '(use the probe option to bound the output layer on full-rank features)'
        )
    hidden = features
    for block in model.blocks[:-1]:
        y, _ = layer_forward(block.layer, hidden, FULL)
        hidden = block.activation.apply(y)
    return last, hidden


def _mean_ce(layer: NsnLayer, inputs: Matrix, labels: np.ndarray, r: int) -> float:
    logits = inputs @ effective_weight(layer, r).T + layer.bias
    return cross_entropy(logits, labels).loss


def interpolation_bound_report(
    model: Model,
    dataset,
    r1: int,
    r_int: int,
    lipschitz: float = CROSS_ENTROPY_LIPSCHITZ,
    probe: bool = False,
) -> BoundReport:
    """
    |E(r_int) - E(r1)| against L E[||x||] sum_{i=r1+1}^{r_int} ||b_i|| ||a_i||,
    where E is the mean cross-entropy of the output layer on its inputs.
    """
    layer, inputs = probe_layer(model, dataset.features, probe)
    if not 1 <= r1 <= r_int <= layer.max_rank:
        raise RankError(None, layer.max_rank, f'need 1 <= r1 <= r_int <= {layer.max_rank}, got r1={r1}, r_int={r_int}')
    if lipschitz < 0:
        raise AnalysisError(f'lipschitz constant must be >= 0, got {lipschitz}')
    gap = abs(_mean_ce(layer, inputs, dataset.labels, r_int) - _mean_ce(layer, inputs, dataset.labels, r1))
    energies = np.linalg.norm(layer.b[:, r1:r_int], axis=0) * np.linalg.norm(layer.a[r1:r_int], axis=1)
    constant = lipschitz * float(np.mean(np.linalg.norm(inputs, axis=1)))
    return BoundReport(
        r1=r1,
        r_int=r_int,
        empirical_gap=float(gap),
        bound=constant * float(np.sum(energies)),
        constant=constant,
        lipschitz=float(lipschitz),
        energies=tuple(float(e) for e in energies),
    )


def interpolation_gap(model: Model, dataset, r1: RankSpec, r_int: RankSpec) -> float:
    """Descriptive |E(r_int) - E(r1)| through the whole model; no bound is claimed."""
    return abs(evaluate(model, dataset, r_int).loss - evaluate(model, dataset, r1).loss)


@dataclass(frozen=True)
class BoundFuzzReport:
    pairs: int
    dominated: int
    worst_margin: float

    @property
    def all_dominated(self) -> bool:
        return self.dominated == self.pairs

    def to_dict(self) -> dict:
        data = asdict(self)
        data['all_dominated'] = self.all_dominated
        return data


def bound_fuzz(
    layer: NsnLayer,
    dataset,
    rng: RandomStream,
    pairs: int = 500,
    lipschitz: float = CROSS_ENTROPY_LIPSCHITZ,
) -> BoundFuzzReport:
    """Interpolation-bound checks over random r1 < r_int on a single-layer probe."""
    if layer.max_rank < 2:
        raise AnalysisError('bound fuzzing needs max rank >= 2')
    model = Model([Block(layer, Activation.IDENTITY)])
    dominated, worst = 0, math.inf
    for _ in range(pairs):
        r1, r_int = sorted(int(r) for r in rng.choice(np.arange(1, layer.max_rank + 1), size=2, replace=False))
        report = interpolation_bound_report(model, dataset, r1, r_int, lipschitz)
        dominated += report.holds
        worst = min(worst, report.bound - report.empirical_gap)
    logger.info('bound fuzz: %d/%d pairs dominated, worst margin %.3e', dominated, pairs, worst)
    return BoundFuzzReport(pairs, dominated, float(worst))


# ============= WEIGHT SIMILARITY =============

def _cosine(x: Matrix, y: Matrix) -> float:
    x, y = x.reshape(-1), y.reshape(-1)
    norm = np.linalg.norm(x) * np.linalg.norm(y)
    return float(x @ y / norm) if norm > 0 else 0.0


def _weight(layer, r: RankSpec) -> Matrix:
    if isinstance(layer, DenseLayer):
        return layer.w
    return effective_weight(layer, layer.resolve(r, clamp=True))


@dataclass(frozen=True)
class SimilarityReport:
    rank: RankSpec
    similarity: float
    layers: Tuple[int, ...]
    excluded: Tuple[int, ...]


def inter_layer_similarity(model: Model, r: RankSpec = FULL) -> SimilarityReport:
    """Mean pairwise cosine similarity of flattened effective weights at rank r."""
    shapes = [(layer.d_out, layer.d_in) for layer in model.layers]
    common, count = Counter(shapes).most_common(1)[0]
    if count < 2:
        raise AnalysisError('similarity needs at least two layers with the same weight shape')
    chosen = tuple(i for i, s in enumerate(shapes) if s == common)
    excluded = tuple(i for i in range(len(shapes)) if i not in chosen)
    weights = {i: _weight(model.layers[i], r) for i in chosen}
    values = [_cosine(weights[i], weights[j]) for i, j in itertools.combinations(chosen, 2)]
    if excluded:
        logger.info('similarity excludes layers %s (shape differs from %s)', list(excluded), common)
    return SimilarityReport(r, float(np.mean(values)), chosen, excluded)


def similarity_curve(model: Model, ranks: Sequence[int]) -> List[SimilarityReport]:
    return [inter_layer_similarity(model, r) for r in sorted(set(ranks))]


@dataclass(frozen=True)
class GroupSimilarity:
    start: int
    stop: int
    similarity: float


def convergence_similarity(
    nsn_model: Model,
    reference: Model,
    r: RankSpec,
    depth_groups: Optional[Sequence[Tuple[int, int]]] = None,
) -> List[GroupSimilarity]:
    """
    Cosine similarity of each layer's rank-r weight with the reference model's
    full weight, averaged over half-open layer ranges [start, stop).
    """
    if len(nsn_model.layers) != len(reference.layers):
        raise DimensionError(
            f'models have {len(nsn_model.layers)} and {len(reference.layers)} layers'
        )
    for i, (a, b) in enumerate(zip(nsn_model.layers, reference.layers)):
        if (a.d_in, a.d_out) != (b.d_in, b.d_out):
            raise DimensionError(f'layer {i}: shapes {(a.d_out, a.d_in)} and {(b.d_out, b.d_in)} differ')
    count = len(nsn_model.layers)
    groups = depth_groups or [(i, i + 1) for i in range(count)]
    result = []
    for start, stop in groups:
        if not 0 <= start < stop <= count:
            raise AnalysisError(f'depth group [{start}, {stop}) outside [0, {count})')
        values = [
            _cosine(_weight(nsn_model.layers[i], r), _weight(reference.layers[i], FULL)) for i in range(start, stop)
        ]
        result.append(GroupSimilarity(start, stop, float(np.mean(values))))
    return result


# ============= FRONTIER =============

@dataclass(frozen=True)
class FrontierRow:
    rank: int
    flops: int
    loss: float
    accuracy: float
    s: Optional[float] = None


@dataclass
class FrontierTable:
    rows: List[FrontierRow] = field(default_factory=list)

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> List:
        return [getattr(row, name) for row in self.rows]

    def accuracy_at(self, rank: int) -> float:
        for row in self.rows:
            if row.rank == rank:
                return row.accuracy
        raise KeyError(rank)


def frontier_sweep(model: Model, dataset, ranks: Sequence[int], u: Optional[UncertaintyParams] = None) -> FrontierTable:
    """Loss, accuracy and linear-layer FLOPs of one model at each rank."""
    ranks = sorted({int(r) for r in ranks})
    limit = model.max_rank
    for r in ranks:
        if r < 1 or (limit and r > limit):
            raise RankError(r, limit or None)
    rows = []
    for r in ranks:
        result = evaluate(model, dataset, r)
        s = u.snapshot().get(r) if u is not None else None
        rows.append(FrontierRow(r, model_flops(model, r), result.loss, result.accuracy, s))
        logger.info('rank %d: flops %d, accuracy %.4f', r, rows[-1].flops, result.accuracy)
    table = FrontierTable(rows)
    drop = monotonicity_violation(table.column('accuracy'))
    if drop > 0.02:
        logger.warning('accuracy drops by %.4f below its running maximum across ranks', drop)
    return table


def monotonicity_violation(values: Sequence[float]) -> float:
    """Largest drop below the running maximum; 0 for a non-decreasing sequence."""
    worst, best = 0.0, -math.inf
    for v in values:
        best = max(best, v)
        worst = max(worst, best - v)
    return float(worst)


def uncertainty_rank_correlation(u: UncertaintyParams, ranks: Optional[Sequence[int]] = None) -> float:
    """Spearman correlation between rank k and learned s_k."""
    snapshot: Dict[int, float] = u.snapshot()
    ranks = sorted(snapshot) if ranks is None else sorted(set(ranks))
    missing = [r for r in ranks if r not in snapshot]
    if missing:
        raise AnalysisError(f'no learned s_k for ranks {missing}')
    if len(ranks) < 2:
        raise AnalysisError('correlation needs at least two ranks')
    rho, _ = spearmanr(ranks, [snapshot[r] for r in ranks])
    return float(rho)
