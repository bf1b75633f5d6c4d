"""Bi-directional cross-interaction decoder.

Every visible feature in a batch is paired with every infrared feature
(B^2 pairs, visible-index-major). An initial cross-attention exchange is
followed by T residual two-stream blocks; within a block both streams
read the stage-t inputs, so the update is parallel, not sequential.
The aggregation contrastive loss regularizes pooled outputs of both
streams across the expanded batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import nn
from .encoder import LN_EPS


@dataclass
class PairBatch:
    """All B^2 visible/infrared feature pairs of a batch.

    Pair p pairs visible image vis_idx[p] with infrared image ir_idx[p],
    with p = vis_idx * B + ir_idx. ``y`` flags same-identity pairs.
    """

    f_v0: dc.Tensor
    f_i0: dc.Tensor
    y: np.ndarray
    vis_idx: np.ndarray
    ir_idx: np.ndarray
    vis_identity: np.ndarray
    ir_identity: np.ndarray

    @property
    def num_pairs(self) -> int:
        return self.f_v0.shape[0]


def expand_pairs(f_v: dc.Tensor, f_i: dc.Tensor, vis_identities,
                 ir_identities) -> PairBatch:
    """Expand (B, N, C) per-modality features into B^2 pairs.

    Each visible feature is repeated B times consecutively; the infrared
    block is tiled B times, so pair p = vis*B + ir.
    """
    if f_v.shape != f_i.shape or f_v.ndim != 3:
        raise dc.ShapeMismatch("expand_pairs", f_v.shape, f_i.shape)
    b = f_v.shape[0]
    vis_identities = np.asarray(vis_identities)
    ir_identities = np.asarray(ir_identities)
    if len(vis_identities) != b or len(ir_identities) != b:
        raise dc.ShapeMismatch("expand_pairs", (len(vis_identities),),
                               (b,))
    vis_idx = np.repeat(np.arange(b), b)
    ir_idx = np.tile(np.arange(b), b)
    return PairBatch(
        f_v0=dc.repeat_interleave0(f_v, b),
        f_i0=dc.tile0(f_i, b),
        y=vis_identities[vis_idx] == ir_identities[ir_idx],
        vis_idx=vis_idx,
        ir_idx=ir_idx,
        vis_identity=vis_identities[vis_idx],
        ir_identity=ir_identities[ir_idx],
    )


def cross_attention(params: nn.AttentionParams, q_in: dc.Tensor,
                    kv_in: dc.Tensor) -> dc.Tensor:
    """One modality queries the other's keys and values."""
    return nn.attention_forward(params, q_in, kv_in)


@dataclass
class BciStream:
    ln1_gamma: dc.Tensor
    ln1_beta: dc.Tensor
    attn: nn.AttentionParams
    ln2_gamma: dc.Tensor
    ln2_beta: dc.Tensor
    ffn: nn.FeedForwardBlock


@dataclass
class BciBlock:
    """Two independent streams; no parameters are shared between them."""

    vis: BciStream
    ir: BciStream


@dataclass
class BciStack:
    init_v: nn.AttentionParams
    init_i: nn.AttentionParams
    blocks: list[BciBlock]
    params: nn.ParameterSet

    @property
    def depth(self) -> int:
        return len(self.blocks)


def _build_stream(params: nn.ParameterSet, name: str,
                  rng: np.random.Generator, c: int, heads: int) -> BciStream:
    stream = BciStream(
        ln1_gamma=params.add(f"{name}.ln1.gamma", dc.ones(c)),
        ln1_beta=params.add(f"{name}.ln1.beta", dc.zeros(c)),
        attn=nn.init_attention(rng, c, heads=heads),
        ln2_gamma=params.add(f"{name}.ln2.gamma", dc.ones(c)),
        ln2_beta=params.add(f"{name}.ln2.beta", dc.zeros(c)),
        ffn=nn.init_ffn(rng, c),
    )
    nn.register_attention(params, f"{name}.attn", stream.attn)
    nn.register_ffn(params, f"{name}.ffn", stream.ffn)
    return stream


def build_bci_stack(depth: int, c: int, seed: int, heads: int = 1) -> BciStack:
    """T stacked blocks plus a dedicated init attention per direction."""
    if depth < 0:
        raise ValueError("depth must be >= 0")
    rng = np.random.default_rng([seed, 0xBC1])
    params = nn.ParameterSet()
    init_v = nn.init_attention(rng, c, heads=heads)
    init_i = nn.init_attention(rng, c, heads=heads)
    nn.register_attention(params, "init_v", init_v)
    nn.register_attention(params, "init_i", init_i)
    blocks = []
    for t in range(depth):
        blocks.append(BciBlock(
            vis=_build_stream(params, f"block{t}.vis", rng, c, heads),
            ir=_build_stream(params, f"block{t}.ir", rng, c, heads),
        ))
    return BciStack(init_v=init_v, init_i=init_i, blocks=blocks, params=params)


def bci_init(stack: BciStack, f_v0: dc.Tensor, f_i0: dc.Tensor):
    """Initial mutual enhancement: each side cross-attends to the other."""
    return (cross_attention(stack.init_v, f_v0, f_i0),
            cross_attention(stack.init_i, f_i0, f_v0))


def bci_block_forward(block: BciBlock, f_v: dc.Tensor, f_i: dc.Tensor):
    """One residual refinement stage.

    Both streams read the stage-t inputs: the normalized counterpart seen
    by the visible stream is the infrared input before its own update,
    and vice versa.
    """
    v_norm = dc.layer_norm(f_v, block.vis.ln1_gamma, block.vis.ln1_beta, LN_EPS)
    i_norm = dc.layer_norm(f_i, block.ir.ln1_gamma, block.ir.ln1_beta, LN_EPS)

    v_hat = dc.add(f_v, cross_attention(block.vis.attn, v_norm, i_norm))
    i_hat = dc.add(f_i, cross_attention(block.ir.attn, i_norm, v_norm))

    v_out = dc.add(v_hat, nn.ffn_forward(
        block.vis.ffn,
        dc.layer_norm(v_hat, block.vis.ln2_gamma, block.vis.ln2_beta, LN_EPS)))
    i_out = dc.add(i_hat, nn.ffn_forward(
        block.ir.ffn,
        dc.layer_norm(i_hat, block.ir.ln2_gamma, block.ir.ln2_beta, LN_EPS)))
    return v_out, i_out


def bci_stack_forward(stack: BciStack, f_v0: dc.Tensor, f_i0: dc.Tensor):
    """Init exchange followed by the T refinement blocks."""
    f_v, f_i = bci_init(stack, f_v0, f_i0)
    for block in stack.blocks:
        f_v, f_i = bci_block_forward(block, f_v, f_i)
    return f_v, f_i


def zero_block(block: BciBlock):
    """Zero every block weight; the block becomes an exact identity map."""
    for stream in (block.vis, block.ir):
        for t in (stream.attn.wq, stream.attn.wk, stream.attn.wv,
                  stream.ffn.lin1.weight, stream.ffn.lin1.bias,
                  stream.ffn.lin2.weight, stream.ffn.lin2.bias):
            t.data[:] = 0.0


def aggregation_contrastive_loss(pooled: dc.Tensor, labels,
                                 tau: float) -> dc.Tensor:
    """Mean per-anchor log-ratio loss over positives vs negatives.

    For anchor i with positives P_i and negatives N_i:
      -(1/|P_i|) sum_p log( e^{s_ip} / (e^{s_ip} + sum_{j in N_i} e^{s_ij}) )
    with s = pooled . pooled^T / tau, stabilized by a per-row max shift.
    Anchors without positives are skipped; if none has a positive the
    call is a usage error. Rows are expected to be L2-normalized.
    """
    labels = np.asarray(labels)
    m = pooled.shape[0]
    if m < 2:
        raise dc.GradientUsageError("contrastive loss needs at least 2 rows")
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(m, dtype=bool)
    neg_mask = ~same
    valid = pos_mask.any(axis=1)
    if not valid.any():
        raise dc.GradientUsageError("every anchor is positive-free")

    sim = dc.scale(dc.matmul(pooled, dc.transpose(pooled)), 1.0 / tau)
    shift = sim.data.max(axis=1)
    z = dc.add_colvec(sim, dc.tensor(-shift))
    e = dc.exp(z)
    neg_sum = dc.sum_last(dc.mul(e, dc.tensor(neg_mask.astype(float))))
    denom = dc.log(dc.add_colvec(e, neg_sum))
    log_ratio = dc.sub(z, denom)

    counts = pos_mask.sum(axis=1).astype(float)
    counts[~valid] = 1.0  # avoid 0/0; those rows have zero weight anyway
    weights = pos_mask.astype(float) / counts[:, None] / valid.sum()
    return dc.neg(dc.reduce_sum(dc.mul(log_ratio, dc.tensor(weights))))


def pooled_pair_features(f_v: dc.Tensor, f_i: dc.Tensor,
                         pair: PairBatch):
    """Pooled, L2-normalized vectors of both streams with identity labels.

    Gives 2*B^2 rows: the visible stream's pooled outputs followed by the
    infrared stream's, each labeled by its source image identity.
    """
    pooled = dc.concat0([dc.mean_pool_rows(f_v), dc.mean_pool_rows(f_i)])
    normalized = dc.l2_normalize(pooled, eps=1e-12)
    labels = np.concatenate([pair.vis_identity, pair.ir_identity])
    return normalized, labels
