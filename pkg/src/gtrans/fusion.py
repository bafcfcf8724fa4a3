"""Layer grouping and the three fusion operators.

Layers are grouped into contiguous blocks of ``T``. The encoder keeps only the
last state of each block, gates it with a sigmoid weight, averages over blocks
and layer-normalizes. The decoder sums sigmoid-gated states inside each block
(no averaging, no normalization) and the per-block output distributions are
mixed with temperature-softmax weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import ParameterError, ShapeError, Tensor, sigmoid, softmax
from .layers import LNParams, init_ln, zeros


@dataclass(frozen=True)
class GroupScheme:
    """Partition of ``total_layers`` into blocks of ``group_size``.

    ``boundaries`` holds the 1-based index of the last layer of each block.
    """

    total_layers: int
    group_size: int
    boundaries: tuple[int, ...]

    @property
    def num_groups(self) -> int:
        return len(self.boundaries)

    def members(self, k: int) -> range:
        """0-based layer indices of group ``k`` (1-based)."""
        start = (k - 1) * self.group_size
        return range(start, self.boundaries[k - 1])


def group_boundaries(total_layers: int, group_size: int) -> GroupScheme:
    if total_layers < 1 or group_size < 1:
        raise ParameterError(
            f"layer count and group size must be >= 1, got L={total_layers}, T={group_size}")
    m = -(-total_layers // group_size)
    bounds = tuple(min(i * group_size, total_layers) for i in range(1, m + 1))
    return GroupScheme(total_layers, group_size, bounds)


@dataclass
class FusionParams:
    enc_weights: Tensor  # (M,)
    dec_rep_weights: Tensor  # (L_d,)
    dec_prob_weights: Tensor  # (N,)
    ln: LNParams
    tau: float


def init_fusion(num_enc_groups: int, dec_layers: int, num_dec_groups: int, d_model: int,
                tau: float | None = None, eps: float = 1e-5) -> FusionParams:
    # zeros: sigmoid gates start at 0.5 and the mixture weights start uniform
    return FusionParams(
        zeros(num_enc_groups), zeros(dec_layers), zeros(num_dec_groups),
        init_ln(d_model, eps), math.sqrt(d_model) if tau is None else float(tau))


def encoder_group_fuse(states: Sequence[Tensor], weights: Tensor, ln: LNParams,
                       scheme: GroupScheme) -> Tensor:
    """``LN(mean_i sigmoid(w_i) * states[alpha_i])`` over group boundaries."""
    if len(states) != scheme.total_layers:
        raise ShapeError(f"expected {scheme.total_layers} encoder states, got {len(states)}")
    m = scheme.num_groups
    if weights.shape != (m,):
        raise ShapeError(f"expected {m} encoder fusion weights, got shape {weights.shape}")
    gates = sigmoid(weights)
    total = None
    for i, layer in enumerate(scheme.boundaries):
        term = gates[i] * states[layer - 1]
        total = term if total is None else total + term
    return ln(total * (1.0 / m))


def decoder_group_fuse(states: Sequence[Tensor], weights: Tensor, scheme: GroupScheme) -> list[Tensor]:
    """Per group ``k``: sum of ``sigmoid(w_i) * states[i]`` over its member layers."""
    if len(states) != scheme.total_layers:
        raise ShapeError(f"expected {scheme.total_layers} decoder states, got {len(states)}")
    if weights.shape != (scheme.total_layers,):
        raise ShapeError(f"expected {scheme.total_layers} decoder fusion weights, got {weights.shape}")
    gates = sigmoid(weights)
    fused = []
    for k in range(1, scheme.num_groups + 1):
        total = None
        for i in scheme.members(k):
            term = gates[i] * states[i]
            total = term if total is None else total + term
        fused.append(total)
    return fused


def fusion_prob_weights(weights: Tensor, tau: float) -> Tensor:
    """Temperature-softmax mixture weights over decoder groups."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    return softmax(weights, tau=tau)


def probability_fuse(group_probs: Sequence[Tensor], psi: Tensor, tol: float = 1e-5) -> Tensor:
    """Convex combination ``sum_i psi_i * P_i`` of per-group distributions."""
    if len(group_probs) != psi.shape[0]:
        raise ShapeError(f"{len(group_probs)} distributions but {psi.shape[0]} weights")
    if abs(float(psi.data.sum()) - 1.0) > tol or (psi.data < 0).any():
        raise ValueError("mixture weights are not a probability vector")
    for i, p in enumerate(group_probs):
        if (p.data < 0).any() or np.abs(p.data.sum(axis=-1) - 1.0).max() > tol:
            raise ValueError(f"group {i + 1} distribution is not normalized")
    total = None
    for i, p in enumerate(group_probs):
        term = psi[i] * p
        total = term if total is None else total + term
    return total
