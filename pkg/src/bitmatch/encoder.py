"""Toy shared backbone and the stage-1 metric-learning losses.

Patch projection + positional table + a small pre-norm self-attention
stack. One parameter set serves both modalities; the modality tag of a
sample never routes to different weights. Stage 1 trains this backbone
on identity cross-entropy plus batch-hard triplet loss over mean-pooled
patch embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import nn
from .synthdata import SynthSample

LN_EPS = 1e-5
TRIPLET_MARGIN = 0.3


@dataclass
class EncoderConfig:
    raw_dim: int
    embed_dim: int
    num_train_identities: int
    self_attn_depth: int = 2
    heads: int = 1

    def validate(self) -> "EncoderConfig":
        if self.raw_dim < 1 or self.embed_dim < 1:
            raise ValueError("dims must be positive")
        if self.self_attn_depth < 0:
            raise ValueError("self_attn_depth must be >= 0")
        if self.num_train_identities < 1:
            raise ValueError("num_train_identities must be positive")
        if self.embed_dim % self.heads != 0:
            raise ValueError("heads must divide embed_dim")
        return self


@dataclass
class SelfAttnBlock:
    ln1_gamma: dc.Tensor
    ln1_beta: dc.Tensor
    attn: nn.AttentionParams
    ln2_gamma: dc.Tensor
    ln2_beta: dc.Tensor
    ffn: nn.FeedForwardBlock


@dataclass
class EncoderModel:
    config: EncoderConfig
    proj: nn.LinearLayer
    pos: dc.Tensor
    blocks: list[SelfAttnBlock]
    classifier: nn.LinearLayer
    params: nn.ParameterSet


def build_encoder(cfg: EncoderConfig, num_patches: int,
                  seed: int) -> EncoderModel:
    """Construct a seeded encoder; identical seeds give identical weights."""
    cfg.validate()
    rng = np.random.default_rng([seed, 0x0E])
    c = cfg.embed_dim
    params = nn.ParameterSet()

    proj = nn.init_linear(rng, cfg.raw_dim, c)
    nn.register_linear(params, "proj", proj)
    pos = params.add("pos", dc.Tensor(rng.standard_normal((num_patches, c)) * 0.02))

    blocks = []
    for i in range(cfg.self_attn_depth):
        block = SelfAttnBlock(
            ln1_gamma=params.add(f"block{i}.ln1.gamma", dc.ones(c)),
            ln1_beta=params.add(f"block{i}.ln1.beta", dc.zeros(c)),
            attn=nn.init_attention(rng, c, heads=cfg.heads),
            ln2_gamma=params.add(f"block{i}.ln2.gamma", dc.ones(c)),
            ln2_beta=params.add(f"block{i}.ln2.beta", dc.zeros(c)),
            ffn=nn.init_ffn(rng, c),
        )
        nn.register_attention(params, f"block{i}.attn", block.attn)
        nn.register_ffn(params, f"block{i}.ffn", block.ffn)
        blocks.append(block)

    classifier = nn.init_linear(rng, c, cfg.num_train_identities)
    nn.register_linear(params, "classifier", classifier)
    return EncoderModel(config=cfg, proj=proj, pos=pos, blocks=blocks,
                        classifier=classifier, params=params)


def encode_patches(model: EncoderModel, patches: dc.Tensor) -> dc.Tensor:
    """(..., N, raw_dim) -> (..., N, C) patch embeddings."""
    if patches.shape[-1] != model.config.raw_dim:
        raise dc.ShapeMismatch("encode", patches.shape, model.proj.weight.shape)
    x = nn.linear_forward(model.proj, patches)
    x = dc.badd(x, model.pos)
    for block in model.blocks:
        normed = dc.layer_norm(x, block.ln1_gamma, block.ln1_beta, LN_EPS)
        x = dc.add(x, nn.attention_forward(block.attn, normed, normed))
        normed2 = dc.layer_norm(x, block.ln2_gamma, block.ln2_beta, LN_EPS)
        x = dc.add(x, nn.ffn_forward(block.ffn, normed2))
    return x


def encode(model: EncoderModel, sample: SynthSample) -> dc.Tensor:
    return encode_patches(model, dc.tensor(sample.patches))


def encode_batch(model: EncoderModel, samples: list[SynthSample]) -> dc.Tensor:
    stacked = np.stack([s.patches for s in samples])
    return encode_patches(model, dc.tensor(stacked))


def pool(embeddings: dc.Tensor) -> dc.Tensor:
    """Mean over the patch axis, the pooling used everywhere downstream."""
    return dc.mean_pool_rows(embeddings)


def id_loss(model: EncoderModel, pooled: dc.Tensor, labels) -> dc.Tensor:
    """Mean cross-entropy of the identity classifier over pooled features."""
    labels = np.asarray(labels, dtype=np.intp)
    num_classes = model.classifier.weight.shape[1]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"label outside [0, {num_classes}): {labels.min()}..{labels.max()}")
    logits = nn.linear_forward(model.classifier, pooled)
    return cross_entropy(logits, labels)


def cross_entropy(logits: dc.Tensor, labels: np.ndarray) -> dc.Tensor:
    """Stabilized mean of logsumexp(row) - row[label]."""
    b = logits.shape[0]
    row_max = logits.data.max(axis=1)
    shifted = dc.add_colvec(logits, dc.tensor(-row_max))
    lse = dc.add(dc.log(dc.sum_last(dc.exp(shifted))), dc.tensor(row_max))
    picked = dc.take_pairs(logits, np.arange(b), labels)
    return dc.scale(dc.reduce_sum(dc.sub(lse, picked)), 1.0 / b)


def pairwise_distances(feats: dc.Tensor) -> dc.Tensor:
    """Euclidean distance matrix, clamped at 1e-12 before the square root."""
    gram = dc.matmul(feats, dc.transpose(feats))
    sq = dc.take_pairs(gram, np.arange(feats.shape[0]), np.arange(feats.shape[0]))
    d2 = dc.add_colvec(dc.badd(dc.scale(gram, -2.0), sq), sq)
    return dc.sqrt(dc.clamp_min(d2, 1e-12))


def triplet_loss(pooled: dc.Tensor, labels, margin: float = TRIPLET_MARGIN) -> dc.Tensor:
    """Batch-hard triplet: hardest positive vs hardest negative per anchor.

    Anchors without a positive or a negative are skipped; a batch with no
    valid anchor at all is a usage error.
    """
    labels = np.asarray(labels)
    b = pooled.shape[0]
    dist = pairwise_distances(pooled)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same

    anchors, hardest_pos, hardest_neg = [], [], []
    for i in range(b):
        if not pos_mask[i].any() or not neg_mask[i].any():
            continue
        row = dist.data[i]
        pos_row = np.where(pos_mask[i], row, -np.inf)
        neg_row = np.where(neg_mask[i], row, np.inf)
        anchors.append(i)
        hardest_pos.append(int(np.argmax(pos_row)))
        hardest_neg.append(int(np.argmin(neg_row)))
    if not anchors:
        raise dc.GradientUsageError("triplet loss needs >= 2 identities in batch")

    d_ap = dc.take_pairs(dist, anchors, hardest_pos)
    d_an = dc.take_pairs(dist, anchors, hardest_neg)
    hinge = dc.relu(dc.add_scalar(dc.sub(d_ap, d_an), margin))
    return dc.scale(dc.reduce_sum(hinge), 1.0 / len(anchors))


def base_loss(model: EncoderModel, batch: list[SynthSample]):
    """Stage-1 objective: identity CE + batch-hard triplet (unit weights)."""
    embeddings = encode_batch(model, batch)
    pooled = pool(embeddings)
    labels = np.array([s.identity for s in batch])
    ce = id_loss(model, pooled, labels)
    tri = triplet_loss(pooled, labels)
    return dc.add(ce, tri), ce, tri


def stage1_step(model: EncoderModel, batch: list[SynthSample],
                opt_cfg: nn.OptimizerConfig, step: int) -> dict:
    """One optimizer update on the stage-1 objective."""
    lr_t = nn.cosine_lr(opt_cfg, step)
    with dc.fresh_tape():
        total, ce, tri = base_loss(model, batch)
        loss_values = {"id_loss": ce.item(), "triplet_loss": tri.item(),
                       "total": total.item()}
        model.params.zero_grads()
        dc.backward(total)
    if lr_t > 0:
        nn.adamw_step(model.params, opt_cfg, lr_t)
    model.params.zero_grads()
    return loss_values
