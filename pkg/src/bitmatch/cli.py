"""Command-line surface: gen-data, train, eval, imbalance, gradcheck,
debug-matches.

Every command is deterministic given (config, seed) and emits JSON to
stdout or --out. Exit codes: 0 success, 1 check failure, 2 usage or
config error. The BIT_SEED environment variable overrides the config
seed; an explicit --seed flag overrides both.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import diffcore as dc
from . import gradsuite
from . import qascore as qa
from . import synthdata as sd
from . import train as tr
from .bci import bci_stack_forward
from .checkpoint import (CheckpointError, load_checkpoint, params_bytes,
                         save_checkpoint)
from .config import RunConfig, default_config, load_config
from .encoder import encode_batch
from .retrieval import InferenceConfig, Models, evaluate
from .synthdata import ConfigError, DatasetFormatError


class CheckFailure(RuntimeError):
    """A verification failed; maps to exit code 1."""


def _emit(doc, out_path):
    text = json.dumps(doc, sort_keys=True, indent=2)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _effective_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else default_config()
    env_seed = os.environ.get("BIT_SEED")
    if env_seed is not None:
        cfg = cfg.with_seed(int(env_seed))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg.validate()


def _load_dataset(args) -> sd.Dataset:
    if not getattr(args, "data", None):
        raise ConfigError("--data is required for this command")
    return sd.load(args.data)


def cmd_gen_data(args) -> int:
    cfg = _effective_config(args)
    if not args.out:
        raise ConfigError("--out is required for gen-data")
    ds = sd.generate(cfg.gen_config())
    sd.save(ds, args.out)
    train_vis = len(ds.indices(split=sd.TRAIN, modality=sd.VIS))
    train_ir = len(ds.indices(split=sd.TRAIN, modality=sd.IR))
    _emit({
        "num_identities": cfg.gen_config().num_identities,
        "train_identities": len(ds.train_identities()),
        "train_vis": train_vis,
        "train_ir": train_ir,
        "vis_ir_ratio": train_vis / train_ir,
        "num_queries": len(ds.indices(split=sd.QUERY)),
        "num_gallery": len(ds.indices(split=sd.GALLERY)),
        "seed": cfg.seed,
        "path": args.out,
    }, None)
    return 0


def _write_log(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    ckpt_config = None
    stored = None
    if args.checkpoint:
        stored, ckpt_config, in_stage = load_checkpoint(args.checkpoint)
        if args.stage == 2 and in_stage != 1:
            raise ConfigError(
                f"stage 2 requires a stage-1 checkpoint, got stage {in_stage}")
    elif args.stage == 2:
        raise ConfigError("stage 2 requires --checkpoint with stage-1 weights")
    if args.config:
        cfg = _effective_config(args)
    elif ckpt_config is not None:
        cfg = ckpt_config
        env_seed = os.environ.get("BIT_SEED")
        if env_seed is not None:
            cfg = cfg.with_seed(int(env_seed))
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    else:
        cfg = _effective_config(args)
    if not args.out:
        raise ConfigError("--out is required for train")

    ds = _load_dataset(args)
    models = tr.build_models(cfg, len(ds.train_identities()))
    if stored is not None:
        tr.restore_params(models, stored, require_all=False)

    if args.stage == 1:
        log = tr.train_stage1(cfg, ds, models)
        save_checkpoint(args.out, tr.encoder_params(models), cfg, stage=1)
    else:
        frozen = params_bytes(tr.encoder_params(models))
        log = tr.train_stage2(cfg, ds, models)
        if params_bytes(tr.encoder_params(models)) != frozen:
            raise CheckFailure("stage-2 freeze contract violated: encoder "
                               "parameters changed")
        save_checkpoint(args.out, tr.all_params(models), cfg, stage=2)

    log_path = args.out + ".log"
    _write_log(log_path, log)
    _emit({
        "stage": args.stage,
        "epochs": len(log),
        "final": log[-1],
        "checkpoint": args.out,
        "log": log_path,
        "seed": cfg.seed,
    }, None)
    return 0


def _models_from_checkpoint(path, ds, *, need_stage2: bool):
    stored, cfg, stage = load_checkpoint(path)
    if need_stage2 and stage != 2:
        raise ConfigError(
            f"this command needs a stage-2 checkpoint, got stage {stage}")
    models = tr.build_models(cfg, len(ds.train_identities()))
    tr.restore_params(models, stored, require_all=(stage == 2))
    return models, cfg, stage


def cmd_eval(args) -> int:
    ds = _load_dataset(args)
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for eval")
    models, _, _ = _models_from_checkpoint(args.checkpoint, ds,
                                           need_stage2=not args.baseline)
    inf_cfg = InferenceConfig(top_k_candidates=args.top_k,
                              use_bit_head=not args.baseline)
    report = evaluate(ds, models, inf_cfg)
    report["method"] = "baseline" if args.baseline else "bit"
    _emit(report, args.out)
    return 0


def cmd_imbalance(args) -> int:
    cfg = _effective_config(args)
    ds = _load_dataset(args)
    try:
        fractions = [float(tok) for tok in args.fractions.split(",") if tok]
    except ValueError as exc:
        raise ConfigError(f"bad --fractions value: {exc}") from exc
    if not fractions:
        raise ConfigError("--fractions must name at least one fraction")
    modality = {"vis": sd.VIS, "ir": sd.IR}[args.modality]

    rows = []
    for fraction in fractions:
        reduced = sd.reduce_modality(
            ds, modality, fraction,
            seed=tr.derive_seed(cfg.seed, 300 + round(fraction * 1000)))
        models = tr.build_models(cfg, len(reduced.train_identities()))
        tr.train_stage1(cfg, reduced, models)
        tr.train_stage2(cfg, reduced, models)
        for baseline in (False, True):
            inf_cfg = InferenceConfig(top_k_candidates=args.top_k,
                                      use_bit_head=not baseline)
            report = evaluate(reduced, models, inf_cfg)
            rows.append({
                "setting": f"{args.modality}-reduce-{fraction:g}",
                "model": "baseline" if baseline else "bit",
                "rank1": report["cmc"][0],
                "mAP": report["mAP"],
            })
    _emit({"modality": args.modality, "fractions": fractions, "rows": rows,
           "seed": cfg.seed}, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    results = gradsuite.run_suite(corrupt=args.corrupt)
    for result in results:
        print(json.dumps(result, sort_keys=True))
    failing = [r["op"] for r in results if not r["pass"]]
    if failing:
        print(f"gradient check failed for: {', '.join(failing)}",
              file=sys.stderr)
        return 1
    return 0


def cmd_debug_matches(args) -> int:
    ds = _load_dataset(args)
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for debug-matches")
    models, _, _ = _models_from_checkpoint(args.checkpoint, ds,
                                           need_stage2=True)
    queries = ds.subset(split=sd.QUERY)
    gallery = ds.subset(split=sd.GALLERY)
    records = []
    with dc.no_grad():
        gallery_feats = encode_batch(models.encoder, gallery)
        for query in queries:
            if len(records) >= args.limit:
                break
            query_feats = encode_batch(models.encoder, [query])
            for g in range(len(gallery)):
                if len(records) >= args.limit:
                    break
                f_v, f_i = bci_stack_forward(
                    models.stack,
                    dc.tensor(gallery_feats.data[g]),
                    dc.tensor(query_feats.data[0]))
                psi, ms, s_hat = qa.qa_forward(f_v, f_i, models.qa_cfg,
                                               models.head)
                records.append({
                    "mutual": sorted([int(p), int(q)] for p, q in ms.mutual),
                    "complementary": sorted([int(p), int(q)]
                                            for p, q in ms.complementary),
                    "S_hat": [float(v) for v in s_hat.data],
                    "psi": float(psi.item()),
                })
    _emit(records, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bitmatch",
        description="Cross-modality patch-matching retrieval pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, config=True, data=False, checkpoint=False, out=False):
        if config:
            p.add_argument("--config", help="run config JSON")
        if data:
            p.add_argument("--data", help="dataset file")
        if checkpoint:
            p.add_argument("--checkpoint", help="input checkpoint")
        if out:
            p.add_argument("--out", help="output path")
        p.add_argument("--seed", type=int, help="override config seed")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p, out=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    common(p, data=True, checkpoint=True, out=True)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate retrieval quality")
    common(p, config=False, data=True, checkpoint=True, out=True)
    p.add_argument("--top-K", dest="top_k", type=int, default=50)
    p.add_argument("--baseline", action="store_true",
                   help="cosine ranking only, no rescoring")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("imbalance", help="modality-reduction study")
    common(p, data=True, out=True)
    p.add_argument("--fractions", default="0.0,0.1,0.2",
                   help="comma-separated reduction fractions")
    p.add_argument("--modality", choices=("vis", "ir"), default="ir")
    p.add_argument("--top-K", dest="top_k", type=int, default=50)
    p.set_defaults(func=cmd_imbalance)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("debug-matches", help="dump per-pair match sets")
    common(p, config=False, data=True, checkpoint=True, out=True)
    p.add_argument("--limit", type=int, default=8)
    p.set_defaults(func=cmd_debug_matches)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        return args.func(args)
    except CheckFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DatasetFormatError, CheckpointError, ValueError,
            FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
