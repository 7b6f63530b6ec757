"""
Kinematics Prior Attention (KPA) and Trajectory Prior Attention (TPA).

Both modules contract a learnable, symmetrised affinity matrix over the token
axis (joints for KPA, frames for TPA) after a linear embedding and an
elementwise modulation. Channels never mix through the affinity matrix.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import numerics as nx
from .exceptions import ShapeMismatchError
from .topology import AffinityPair, combine

logger = logging.getLogger(__name__)


@dataclass
class KPAParams:
    embed: nx.Tensor              # W, 2 x d_m
    global_affinity: nx.Tensor    # Â_N, N x N
    modulation: nx.Tensor         # M_N, N x d_m
    spatial_pos: nx.Tensor        # N x d_m


@dataclass
class TPABlockParams:
    transform: nx.Tensor          # d_m x d_m
    global_affinity: nx.Tensor    # Â_T, T x T
    modulation: nx.Tensor         # M_T, T x d_m


@dataclass
class TPAParams:
    blocks: List[TPABlockParams]
    temporal_pos: nx.Tensor       # T x d_m


def linear_embedding(seq: nx.Tensor, params: KPAParams) -> nx.Tensor:
    """seq·W: lift every 2D keypoint to a d_m-dimensional token."""
    seq = nx.as_tensor(seq)
    if seq.ndim != 3 or seq.shape[-1] != params.embed.shape[0]:
        raise ShapeMismatchError("embedding: expected T x N x 2 input", seq.shape, params.embed.shape)
    return nx.matmul(seq, params.embed)


def kpa_forward(seq: nx.Tensor, params: KPAParams, local_spatial: np.ndarray,
                embedded: Optional[nx.Tensor] = None) -> nx.Tensor:
    """
    H_TN = (M_N ⊙ (seq·W)) contracted with A_K over joints, plus the spatial
    positional embedding broadcast over frames.

    Args:
        seq: 2D pose sequence, T x N x 2
        params: KPA parameters
        local_spatial: fixed skeleton affinity A_N, N x N
        embedded: precomputed seq·W, when the caller already has it

    Returns:
        Spatial tokens, T x N x d_m
    """
    if embedded is None:
        embedded = linear_embedding(seq, params)
    joints = embedded.shape[1]
    if params.modulation.shape != embedded.shape[1:] or params.spatial_pos.shape != embedded.shape[1:]:
        raise ShapeMismatchError("kpa: modulation/positional embedding do not match tokens",
                                 embedded.shape, params.modulation.shape, params.spatial_pos.shape)
    if params.global_affinity.shape != (joints, joints):
        raise ShapeMismatchError("kpa: affinity does not match joint count",
                                 embedded.shape, params.global_affinity.shape)
    kinematics = combine(AffinityPair(local_spatial, params.global_affinity))
    modulated = nx.mul(params.modulation, embedded)
    return nx.add(nx.matmul(kinematics, modulated), params.spatial_pos)


def tpa_block(tokens: nx.Tensor, block: TPABlockParams, local_temporal: np.ndarray,
              use_prior: bool = True) -> nx.Tensor:
    """
    One TPA: (M_T ⊙ (tokens·transform)) contracted with A_R over frames.

    With ``use_prior=False`` the block is the bare linear transform.
    """
    tokens = nx.as_tensor(tokens)
    if tokens.ndim != 3 or tokens.shape[-1] != block.transform.shape[0]:
        raise ShapeMismatchError("tpa: expected N x T x d_m tokens", tokens.shape, block.transform.shape)
    frames = tokens.shape[1]
    if block.modulation.shape != tokens.shape[1:] or block.global_affinity.shape != (frames, frames):
        raise ShapeMismatchError("tpa: block parameters do not match tokens",
                                 tokens.shape, block.modulation.shape, block.global_affinity.shape)
    transformed = nx.matmul(tokens, block.transform)
    if not use_prior:
        return transformed
    trajectory = combine(AffinityPair(local_temporal, block.global_affinity))
    return nx.matmul(trajectory, nx.mul(block.modulation, transformed))


def tpa_stack(tokens: nx.Tensor, params: TPAParams, local_temporal: np.ndarray,
              use_prior: bool = True) -> nx.Tensor:
    """H_NT = TPA(TPA(tokens)) + tokens, then the temporal positional embedding."""
    tokens = nx.as_tensor(tokens)
    if params.temporal_pos.shape != tokens.shape[1:]:
        raise ShapeMismatchError("tpa: temporal positional embedding does not match tokens",
                                 tokens.shape, params.temporal_pos.shape)
    out = tokens
    for block in params.blocks:
        out = tpa_block(out, block, local_temporal, use_prior=use_prior)
    return nx.add(nx.add(out, tokens), params.temporal_pos)
