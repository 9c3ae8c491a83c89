"""`svlb` command line: data generation, pretraining, alignment, evaluation and reporting.

Exit codes: 0 success, 1 validation, 2 missing artifact, 3 empty result.
"""
from __future__ import annotations
import argparse
import logging
import os
import sys
from typing import List, Optional

import numpy as np
from dotenv import load_dotenv

from svlb.align import Stage, encode_qa, images_to_patches, init_vlm, train_stage
from svlb.checkpoint import load_checkpoint, load_meta, meta_path, save_checkpoint
from svlb.config import RunConfig, architecture_hash, load_config
from svlb.dataset import SPLITS, load_images, load_split, make_splits
from svlb.errors import ConfigurationError, ContractError, NonFiniteLossError, SvlbError
from svlb.evaluate import evaluate
from svlb.manifest import RunManifest, artifact, write_manifest
from svlb.optim import ParamSet
from svlb.pretrain import build_model, caption_ids, caption_pairs, curve_csv, pretrain_encoder
from svlb.renderers.html_renderer import render_html
from svlb.renderers.xlsx_renderer import render_xlsx
from svlb.report import collect_rows, report_csv, report_table
from svlb.runs import (
    CURVE_FILE, ENCODER_CKPT, EVAL_FILE, LAST_GOOD_SUFFIX, STAGE_CKPTS, check_vocab, checkpoint_meta, load_answerer,
    manifest_path,
)
from svlb.scene import read_ppm
from svlb.storage import BASE, ensure_dir, write_json, write_text
from svlb.tensor import default_dtype, precision
from svlb.validators.checkpoint_validator import validate_checkpoint
from svlb.validators.dataset_validator import validate_jsonl
from svlb.validators.ppm_validator import validate_ppm
from svlb.verify import format_table, run_all
from svlb.vocab import Vocabulary

logger = logging.getLogger("svlb")


def _load(args: argparse.Namespace) -> RunConfig:
    return load_config(args.config, overrides={"seed": getattr(args, "seed", None)})


def _gate(ok_reason: tuple, what: str) -> None:
    ok, reason = ok_reason
    if not ok:
        raise ContractError(f"{what}: {reason}")


def _split_path(cfg: RunConfig, split: str) -> str:
    return os.path.join(cfg.data.out_dir, f"{split}.jsonl")


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _load(args)
    out = args.out or cfg.data.out_dir
    try:
        ensure_dir(out)
    except OSError as exc:
        raise ConfigurationError(f"cannot write to {out}: {exc}") from None
    files = make_splits(cfg.data.n_train, cfg.data.n_eval, cfg.seed, out, cfg.scene_config())
    artifacts = []
    for split in SPLITS:
        _gate(validate_jsonl(files.jsonl[split], files.counts[split]), files.jsonl[split])
        artifacts.append(artifact(out, files.jsonl[split], "jsonl", primary=True))
        for path in files.images[split]:
            _gate(validate_ppm(path), path)
            artifacts.append(artifact(out, path, "ppm"))
    manifest = RunManifest(id=f"{cfg.experiment}/gen-data", command="gen-data", seed=cfg.seed,
                           config=cfg.data.model_dump(mode="json"), counts=files.counts, artifacts=artifacts)
    write_manifest(os.path.join(out, "manifest.json"), manifest)
    print(manifest.content_hash)
    return 0


def _save_last_good(run_dir: str, name: str, exc: NonFiniteLossError, config_hash: str, meta: dict) -> None:
    path = os.path.join(run_dir, name + LAST_GOOD_SUFFIX)
    save_checkpoint(path, exc.snapshot, config_hash, {**meta, "step": exc.step, "status": "aborted"})
    logger.error("non-finite loss at step %d; last finite parameters written to %s", exc.step, path)


def cmd_pretrain_encoder(args: argparse.Namespace) -> int:
    cfg = _load(args)
    run_dir = cfg.run_dir(args.out)
    vocab = Vocabulary.default()
    records = load_split(_split_path(cfg, "train"))
    records = [records[i] for i in caption_pairs(records)]
    config_hash = architecture_hash(cfg, "encoder")
    with precision(cfg.precision):
        patches = images_to_patches(load_images(records, cfg.data.out_dir), cfg.encoder.patch_size)
        ids, pad = caption_ids(records, vocab, cfg.text.max_len)
        model = build_model(cfg, vocab, np.random.default_rng([cfg.seed, 0]))
        ensure_dir(run_dir)
        logger.info("pretraining %s encoder on %d pairs", cfg.encoder.objective.value, len(records))
        try:
            curve = pretrain_encoder(cfg, model, patches, ids, pad)
        except NonFiniteLossError as exc:
            _save_last_good(run_dir, "encoder", exc, config_hash, checkpoint_meta(cfg, "pretrain", 0, vocab))
            raise
    ckpt = os.path.join(run_dir, ENCODER_CKPT)
    save_checkpoint(ckpt, model.params, config_hash, checkpoint_meta(cfg, "pretrain", cfg.pretrain.steps, vocab))
    _gate(validate_checkpoint(ckpt), ckpt)
    curve_path = os.path.join(run_dir, CURVE_FILE)
    write_text(curve_path, curve_csv(cfg.encoder.objective, curve))
    manifest = RunManifest(id=f"{cfg.experiment}/pretrain-encoder", command="pretrain-encoder", seed=cfg.seed,
                           config=cfg.model_dump(mode="json"), counts={"pairs": len(records), "steps": len(curve)},
                           artifacts=[artifact(run_dir, ckpt, "checkpoint", primary=True),
                                      artifact(run_dir, meta_path(ckpt), "json"),
                                      artifact(run_dir, curve_path, "csv")])
    write_manifest(manifest_path(run_dir, "pretrain-encoder"), manifest)
    return 0


def cmd_align(args: argparse.Namespace) -> int:
    cfg = _load(args)
    run_dir = cfg.run_dir(args.out)
    vocab = Vocabulary.default()
    enc_path = args.encoder or cfg.paths.encoder_ckpt or os.path.join(run_dir, ENCODER_CKPT)
    # every input is checked before anything is written
    enc = load_checkpoint(enc_path, architecture_hash(cfg, "encoder"), force=args.force)
    check_vocab(load_meta(enc_path), vocab, enc_path)
    records = load_split(_split_path(cfg, "train"))
    vlm_cfg = cfg.vlm_config(len(vocab))
    config_hash = architecture_hash(cfg, "vlm")
    stages = [Stage.PROJECTION_PRETRAIN] if args.stage1_only else [Stage.PROJECTION_PRETRAIN, Stage.FULL_FINETUNE]

    with precision(cfg.precision):
        encoder = ParamSet.from_arrays({k: v.astype(default_dtype()) for k, v in enc.arrays.items()
                                        if k.startswith("enc.")})
        params = init_vlm(vlm_cfg, np.random.default_rng([cfg.seed, 3]), encoder)
        patches = images_to_patches(load_images(records, cfg.data.out_dir), cfg.encoder.patch_size)
        sequences = [encode_qa(vocab, r.question, r.answer) for r in records]
        ensure_dir(run_dir)
        artifacts = []
        for k, stage in enumerate(stages):
            sc = cfg.stage_config(stage)
            meta = checkpoint_meta(cfg, stage.value, sc.steps, vocab, encoder_config_hash=enc.config_hash_hex)
            try:
                train_stage(sc, params, patches, sequences, vlm_cfg, np.random.default_rng([cfg.seed, 4 + k]))
            except NonFiniteLossError as exc:
                _save_last_good(run_dir, STAGE_CKPTS[stage].removesuffix(".ckpt"), exc, config_hash, meta)
                raise
            path = os.path.join(run_dir, STAGE_CKPTS[stage])
            save_checkpoint(path, params, config_hash, meta)
            _gate(validate_checkpoint(path), path)
            artifacts += [artifact(run_dir, path, "checkpoint", primary=stage == stages[-1]),
                          artifact(run_dir, meta_path(path), "json")]
    manifest = RunManifest(id=f"{cfg.experiment}/align", command="align", seed=cfg.seed,
                           config=cfg.model_dump(mode="json"), counts={"examples": len(records)}, artifacts=artifacts)
    write_manifest(manifest_path(run_dir, "align"), manifest)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _load(args)
    run_dir = cfg.run_dir(args.out)
    answerer = load_answerer(cfg, run_dir, force=args.force)
    row = evaluate(answerer, _split_path(cfg, "eval"), variant=cfg.variant,
                   position_mode=cfg.encoder.position_mode.value, objective=cfg.encoder.objective.value)
    write_json(os.path.join(run_dir, EVAL_FILE), row.model_dump(mode="json"))
    print(report_table([row]), end="")
    return 0


def cmd_grid_report(args: argparse.Namespace) -> int:
    rows = collect_rows(args.config)
    out = args.out or BASE
    ensure_dir(out)
    write_text(os.path.join(out, "report.csv"), report_csv(rows))
    table = report_table(rows)
    write_text(os.path.join(out, "report.txt"), table)
    render_xlsx(rows, os.path.join(out, "report.xlsx"))
    write_text(os.path.join(out, "report.html"), render_html(rows))
    print(table, end="")
    return 0


def cmd_ask(args: argparse.Namespace) -> int:
    cfg = _load(args)
    answerer = load_answerer(cfg, cfg.run_dir(args.out))
    _gate(validate_ppm(args.image), args.image)
    print(answerer.answer(read_ppm(args.image), args.question))
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    results = run_all(args.trials)
    print(format_table(results))
    return 0 if all(r.ok for r in results) else 1


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from svlb.app import create_app

    cfg = _load(args)
    uvicorn.run(create_app(cfg.paths.runs_dir), host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svlb", description="Spatial vision-language laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_text: str, seed: bool = True, out: bool = True, force: bool = False,
            config_help: str = "flat YAML run config"):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help=config_help)
        if seed:
            p.add_argument("--seed", type=int, default=None)
        if out:
            p.add_argument("--out", default=None)
        if force:
            p.add_argument("--force", action="store_true", help="load checkpoints despite a config hash mismatch")
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, "generate train/eval splits")
    add("pretrain-encoder", cmd_pretrain_encoder, "pretrain the image encoder")
    p = add("align", cmd_align, "two-stage alignment", force=True)
    p.add_argument("--encoder", default=None, help="encoder checkpoint (default: <run>/encoder.ckpt)")
    p.add_argument("--stage1-only", action="store_true")
    add("evaluate", cmd_evaluate, "exact-match evaluation on the eval split", seed=False, force=True)
    add("grid-report", cmd_grid_report, "aggregate evaluated runs", seed=False, config_help="glob of run configs")
    p = add("ask", cmd_ask, "answer one question about one image", seed=False)
    p.add_argument("--image", required=True)
    p.add_argument("--question", required=True)
    p = sub.add_parser("verify", help="gradient and rotary-embedding self-checks")
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(func=cmd_verify)
    p = add("serve", cmd_serve, "read-only HTTP service over run directories", seed=False, out=False)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=os.getenv("SVLB_LOG_LEVEL", "INFO").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SvlbError as exc:
        logger.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
