"""
Surgical replacement of pre-trained dense layers with NSN layers.

A dense W = U S V^T becomes B = U_R sqrt(S_R), A = sqrt(S_R) V_R^T, so every
prefix B_r A_r is the best rank-r approximation of W and the factor norms
decay with the singular values.
"""
import logging
from dataclasses import dataclass
from typing import FrozenSet, List, Mapping, NamedTuple, Optional, Tuple, Union

import numpy as np

from .data_io import Checkpoint
from .exceptions import PlanError, RankError
from .layers import FULL, Block, DenseLayer, Model, NsnLayer, flops_linear
from .linalg import Matrix, as_matrix, frobenius, relative_error, svd

logger = logging.getLogger(__name__)

NEAR_ZERO = 1e-12


def svd_init(w: Matrix, max_rank: int) -> Tuple[Matrix, Matrix]:
    """Factors (A, B) from the top ``max_rank`` singular triplets of W."""
    w = as_matrix(w)
    limit = min(w.shape)
    if not 1 <= max_rank <= limit:
        raise RankError(max_rank, limit, f'surgery rank {max_rank} outside [1, {limit}] for a {w.shape} weight')
    result = svd(w)
    root = np.sqrt(result.singular_values[:max_rank])
    a = root[:, None] * result.vt[:max_rank]
    b = result.u[:, :max_rank] * root
    return np.ascontiguousarray(a), np.ascontiguousarray(b)


@dataclass(frozen=True)
class SurgeryPlan:
    """
    Layers to replace and their target max rank. A rank of None means
    min(d_in, d_out), the lossless choice.
    """

    layer_indices: FrozenSet[int] = frozenset()
    target_max_rank: Union[None, int, Mapping[int, Optional[int]]] = None

    def __post_init__(self):
        object.__setattr__(self, 'layer_indices', frozenset(int(i) for i in self.layer_indices))
        ranks = self.target_max_rank
        if isinstance(ranks, Mapping):
            ranks = {int(k): v for k, v in ranks.items()}
            stray = set(ranks) - self.layer_indices
            if stray:
                raise PlanError(f'ranks given for layers {sorted(stray)} that the plan does not replace')
            object.__setattr__(self, 'target_max_rank', ranks)
            values = [v for v in ranks.values() if v is not None]
        else:
            values = [] if ranks is None else [ranks]
        if any(int(v) < 1 for v in values):
            raise PlanError(f'target max rank must be >= 1, got {values}')

    def rank_for(self, index: int, d_in: int, d_out: int) -> int:
        rank = self.target_max_rank
        if isinstance(rank, Mapping):
            rank = rank.get(index)
        limit = min(d_in, d_out)
        if rank is None:
            return limit
        if rank > limit:
            raise PlanError(f'layer {index}: target max rank {rank} exceeds min(d_in, d_out) = {limit}')
        return int(rank)


class SurgeryResult(NamedTuple):
    checkpoint: Checkpoint
    report: List[dict]


def surgical_replace(checkpoint: Checkpoint, plan: SurgeryPlan) -> SurgeryResult:
    """Replace the planned dense layers; biases and all other layers are kept as-is."""
    model = checkpoint.model
    count = len(model.blocks)
    bad = sorted(i for i in plan.layer_indices if not 0 <= i < count)
    if bad:
        raise PlanError(f'layer indices {bad} out of range for a {count}-layer model')
    already = sorted(i for i in plan.layer_indices if not isinstance(model.layers[i], DenseLayer))
    if already:
        raise PlanError(f'layers {already} are already NSN layers')

    blocks, report = [], []
    for index, block in enumerate(model.blocks):
        if index not in plan.layer_indices:
            blocks.append(Block(block.layer, block.activation))
            continue
        dense = block.layer
        rank = plan.rank_for(index, dense.d_in, dense.d_out)
        a, b = svd_init(dense.w, rank)
        layer = NsnLayer(a=a, b=b, bias=dense.bias.copy())
        blocks.append(Block(layer, block.activation))

        sigma = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=0)
        near_zero = int(np.count_nonzero(sigma <= NEAR_ZERO * max(sigma[0], 1e-300)))
        entry = {
            'index': index,
            'd_in': dense.d_in,
            'd_out': dense.d_out,
            'max_rank': rank,
            'relative_truncation_error': relative_error(b @ a, dense.w),
            'flops_dense': flops_linear(dense.d_in, dense.d_out, FULL),
            'flops_at_max_rank': flops_linear(dense.d_in, dense.d_out, rank),
            'flops_at_half_rank': flops_linear(dense.d_in, dense.d_out, max(1, rank // 2)),
            'near_zero_singular_values': near_zero,
        }
        report.append(entry)
        logger.info(
            'layer %d: dense %dx%d -> NSN rank %d, relative error %.3e',
            index, dense.d_out, dense.d_in, rank, entry['relative_truncation_error'],
        )
        if near_zero:
            logger.warning('layer %d: %d near-zero singular values kept as zero components', index, near_zero)

    meta = dict(checkpoint.meta)
    if report:
        meta['surgery'] = {str(e['index']): e['max_rank'] for e in report}
    result = Checkpoint(
        model=Model(blocks).copy(),
        uncertainty=None if checkpoint.uncertainty is None else checkpoint.uncertainty.copy(),
        meta=meta,
        format_version=checkpoint.format_version,
    )
    return SurgeryResult(result, report)


class TruncationError(NamedTuple):
    rank: int
    actual: float
    predicted: float


def truncation_errors(w: Matrix, a: Matrix, b: Matrix) -> List[TruncationError]:
    """||W - B_r A_r||_F next to the Eckart-Young residual, for r = 1..R."""
    spectrum = svd(w)
    return [
        TruncationError(r, frobenius(w - b[:, :r] @ a[:r]), spectrum.tail_energy(r))
        for r in range(1, a.shape[0] + 1)
    ]
