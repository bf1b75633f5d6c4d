"""Two-stage training protocol.

Stage 1 optimizes the shared backbone on identity cross-entropy plus
batch-hard triplet loss. Stage 2 freezes the backbone bit-for-bit and
optimizes the interaction decoder and scoring head on the pairwise
matching loss plus the weighted aggregation contrastive term. Both
stages draw identity-balanced batches deterministically from
(seed, step), so a rerun reproduces every update exactly.
"""

from __future__ import annotations

import numpy as np

from . import bci
from . import diffcore as dc
from . import encoder as enc
from . import nn
from . import qascore as qa
from . import synthdata as sd
from .config import RunConfig
from .retrieval import Models

CONTRASTIVE_TAU = 1.0 / 16.0

# sub-stream tags mixed into the master seed
TAG_STAGE1_BATCH = 101
TAG_STAGE2_BATCH = 202


def derive_seed(master: int, tag: int) -> int:
    return int(np.random.SeedSequence([master, tag]).generate_state(1)[0])


def steps_per_epoch(ds: sd.Dataset, p: int, k: int) -> int:
    return max(1, len(ds.indices(split=sd.TRAIN)) // (2 * p * k))


def build_models(cfg: RunConfig, num_train_identities: int) -> Models:
    e_cfg = enc.EncoderConfig(
        raw_dim=cfg.gen_config().raw_dim,
        embed_dim=cfg.embed_dim,
        num_train_identities=num_train_identities,
        self_attn_depth=int(cfg.raw["encoder"]["self_attn_depth"]),
        heads=cfg.heads,
    )
    num_patches = cfg.gen_config().num_patches
    return Models(
        encoder=enc.build_encoder(e_cfg, num_patches=num_patches,
                                  seed=cfg.seed),
        stack=bci.build_bci_stack(cfg.bci_depth, cfg.embed_dim,
                                  seed=cfg.seed, heads=cfg.heads),
        head=qa.build_casm_head(num_patches=num_patches, seed=cfg.seed),
        qa_cfg=cfg.qa_config(),
    )


def _optimizer(cfg: RunConfig, stage: int, total_steps: int) -> nn.OptimizerConfig:
    opt = cfg.optim(stage)
    return nn.OptimizerConfig(
        lr=opt["lr"], weight_decay=opt["weight_decay"], beta1=opt["beta1"],
        beta2=opt["beta2"], eps=opt["eps"], total_steps=total_steps,
        min_lr=opt["min_lr"],
    ).validate()


def train_stage1(cfg: RunConfig, ds: sd.Dataset, models: Models):
    """Backbone training; returns one JSON-ready log record per epoch."""
    per_epoch = steps_per_epoch(ds, cfg.batch_p, cfg.batch_k)
    total_steps = cfg.stage1_epochs * per_epoch
    opt = _optimizer(cfg, 1, total_steps)
    batch_seed = derive_seed(cfg.seed, TAG_STAGE1_BATCH)

    log = []
    step = 0
    for epoch in range(cfg.stage1_epochs):
        sums = {"id_loss": 0.0, "triplet_loss": 0.0, "total": 0.0}
        for _ in range(per_epoch):
            batch = sd.sample_pk_batch(ds, cfg.batch_p, cfg.batch_k,
                                       seed=batch_seed, step=step)
            losses = enc.stage1_step(models.encoder, batch, opt, step)
            for key in sums:
                sums[key] += losses[key]
            step += 1
        log.append({"stage": 1, "epoch": epoch,
                    **{k: v / per_epoch for k, v in sums.items()}})
    return log


def stage2_loss(models: Models, batch: list[sd.SynthSample], lam: float):
    """Total stage-2 objective for one identity-balanced batch.

    The backbone runs untaped: its outputs enter the pair graph as
    constants, which is what keeps it frozen during this stage.
    """
    vis = [s for s in batch if s.modality == sd.VIS]
    ir = [s for s in batch if s.modality == sd.IR]
    with dc.no_grad():
        f_v_raw = enc.encode_batch(models.encoder, vis)
        f_i_raw = enc.encode_batch(models.encoder, ir)
    pair = bci.expand_pairs(dc.tensor(f_v_raw.data), dc.tensor(f_i_raw.data),
                            [s.identity for s in vis],
                            [s.identity for s in ir])
    f_v, f_i = bci.bci_stack_forward(models.stack, pair.f_v0, pair.f_i0)
    psi, _, _ = qa.qa_forward_batch(f_v, f_i, models.qa_cfg, models.head)
    pair_mean = dc.mean_full(qa.pair_loss(psi, pair.y))
    pooled, labels = bci.pooled_pair_features(f_v, f_i, pair)
    l_ac = bci.aggregation_contrastive_loss(pooled, labels, CONTRASTIVE_TAU)
    return qa.total_loss(pair_mean, l_ac, lam), pair_mean, l_ac


def train_stage2(cfg: RunConfig, ds: sd.Dataset, models: Models):
    """Decoder + head training with the backbone frozen."""
    per_epoch = steps_per_epoch(ds, cfg.batch_p, cfg.batch_k)
    total_steps = cfg.stage2_epochs * per_epoch
    opt = _optimizer(cfg, 2, total_steps)
    batch_seed = derive_seed(cfg.seed, TAG_STAGE2_BATCH)
    lam = cfg.qa_config().lam

    trainable = nn.ParameterSet()
    for name, p in models.stack.params.items():
        trainable.add(f"bci.{name}", p)
    for name, p in models.head.params.items():
        trainable.add(f"head.{name}", p)

    log = []
    step = 0
    for epoch in range(cfg.stage2_epochs):
        sums = {"pair_loss": 0.0, "l_ac": 0.0, "total": 0.0}
        for _ in range(per_epoch):
            batch = sd.sample_pk_batch(ds, cfg.batch_p, cfg.batch_k,
                                       seed=batch_seed, step=step)
            lr_t = nn.cosine_lr(opt, step)
            with dc.fresh_tape():
                total, pair_mean, l_ac = stage2_loss(models, batch, lam)
                sums["pair_loss"] += pair_mean.item()
                sums["l_ac"] += l_ac.item()
                sums["total"] += total.item()
                trainable.zero_grads()
                dc.backward(total)
            if lr_t > 0:
                nn.adamw_step(trainable, opt, lr_t)
            trainable.zero_grads()
            step += 1
        log.append({"stage": 2, "epoch": epoch,
                    **{k: v / per_epoch for k, v in sums.items()}})
    return log


def encoder_params(models: Models) -> dict[str, dc.Tensor]:
    return {f"encoder.{n}": p for n, p in models.encoder.params.items()}


def all_params(models: Models) -> dict[str, dc.Tensor]:
    out = encoder_params(models)
    out.update({f"bci.{n}": p for n, p in models.stack.params.items()})
    out.update({f"casm.{n}": p for n, p in models.head.params.items()})
    return out


def restore_params(models: Models, stored: dict[str, dc.Tensor],
                   require_all: bool):
    """Copy checkpoint buffers over freshly built model parameters."""
    target = all_params(models)
    for name, tensor in stored.items():
        if name not in target:
            raise ValueError(f"checkpoint parameter {name!r} has no home")
        if target[name].shape != tensor.shape:
            raise ValueError(
                f"checkpoint parameter {name!r} shape {tensor.shape} does "
                f"not match model shape {target[name].shape}")
        target[name].data = tensor.data.copy()
    if require_all:
        missing = set(target) - set(stored)
        if missing:
            raise ValueError(
                f"checkpoint is missing parameters: {sorted(missing)[:4]}...")
