"""
Vanilla multi-head self-attention and the encoder block shared by the spatial
and temporal paths.

Block ordering follows the two residual equations literally:
    y   = MHSA(x) + x
    out = MLP(LN(y)) + y
There is no normalisation in front of the attention.
"""

import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import numerics as nx
from .exceptions import ConfigurationError, ShapeMismatchError

logger = logging.getLogger(__name__)

MLP_RATIO = 2


@dataclass
class MHSAParams:
    qkv_transform: nx.Tensor      # d_m x 3 d_m, fused Q/K/V
    out_transform: nx.Tensor      # d_m x d_m
    head_count: int


@dataclass
class EncoderParams:
    mhsa: MHSAParams
    ln_gain: nx.Tensor
    ln_bias: nx.Tensor
    fc1_weight: nx.Tensor         # d_m x d_ff
    fc1_bias: nx.Tensor
    fc2_weight: nx.Tensor         # d_ff x d_m
    fc2_bias: nx.Tensor


def check_heads(channels: int, heads: int) -> int:
    if heads < 1 or channels % heads:
        raise ConfigurationError(f"head count {heads} does not divide channel width {channels}")
    return channels // heads


def mhsa(tokens: nx.Tensor, params: MHSAParams) -> Tuple[nx.Tensor, nx.Tensor]:
    """
    Multi-head self-attention over the S axis of a B x S x d_m batch.

    Returns:
        (output B x S x d_m, attention probabilities B x h x S x S)
    """
    tokens = nx.as_tensor(tokens)
    if tokens.ndim != 3:
        raise ShapeMismatchError("mhsa: expected B x S x d_m tokens", tokens.shape)
    batch, seq_len, channels = tokens.shape
    if params.qkv_transform.shape != (channels, 3 * channels):
        raise ShapeMismatchError("mhsa: qkv transform does not match tokens",
                                 tokens.shape, params.qkv_transform.shape)
    heads = params.head_count
    width = check_heads(channels, heads)

    qkv = nx.reshape(nx.matmul(tokens, params.qkv_transform), (batch, seq_len, 3, heads, width))
    qkv = nx.permute(qkv, (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]

    scores = nx.scale(nx.matmul(q, nx.swap_last(k)), 1.0 / math.sqrt(width))
    attn = nx.softmax_lastaxis(scores)
    heads_out = nx.permute(nx.matmul(attn, v), (0, 2, 1, 3))
    merged = nx.reshape(heads_out, (batch, seq_len, channels))
    return nx.matmul(merged, params.out_transform), attn


def mlp(x: nx.Tensor, params: EncoderParams) -> nx.Tensor:
    hidden = nx.gelu(nx.add(nx.matmul(x, params.fc1_weight), params.fc1_bias))
    return nx.add(nx.matmul(hidden, params.fc2_weight), params.fc2_bias)


def encoder_block(tokens: nx.Tensor, params: EncoderParams,
                  eps: float = 1e-5) -> Tuple[nx.Tensor, nx.Tensor]:
    """
    One encoder layer.

    Returns:
        (output with the input's shape, attention probabilities of its MHSA)
    """
    attended, attn = mhsa(tokens, params.mhsa)
    y = nx.add(attended, tokens)
    out = nx.add(mlp(nx.layer_norm(y, params.ln_gain, params.ln_bias, eps), params), y)
    return out, attn


def reshape_spatial_temporal(x: nx.Tensor) -> nx.Tensor:
    """Swap the first two axes: T x N x d_m <-> N x T x d_m."""
    x = nx.as_tensor(x)
    if x.ndim != 3:
        raise ShapeMismatchError("reshape: expected a rank-3 token array", x.shape)
    return nx.permute(x, (1, 0, 2))


def init_matrix(shape: Tuple[int, ...], channels: int, rng: np.random.Generator) -> np.ndarray:
    bound = 1.0 / math.sqrt(channels)
    return rng.uniform(-bound, bound, size=shape)
