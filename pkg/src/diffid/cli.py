"""Command-line entry point.

Subcommands: validate, run, stats, cdf, filter, pretrain, eval, toydata.
All outputs are the text formats owned by the respective modules; `run`
exits nonzero iff any identity failed.
"""

import argparse
import hashlib
import sys
from pathlib import Path

from .assembly import compute_identity_cdf, format_cdf, format_stats, stats_report
from .config import serialize_config, validate_config_file
from .errors import ConfigValidationError, DiffidError
from .filters import (
    FilterTrainConfig,
    apply_threshold,
    calibrate_threshold,
    score_samples,
    train_id_classifier,
    train_reid_embedder,
)
from .images import load_png
from .manifest import read_manifest, write_manifest
from .metrics import format_retrieval_report
from .pipeline import run_pipeline
from .pretrain import (
    FinetuneEvalConfig,
    PretrainCheckpoint,
    PretrainConfig,
    append_run_ledger,
    finetune_eval,
    pretrain,
)
from .samples import GeneratedSample


def _cmd_validate(args):
    try:
        cfg = validate_config_file(args.config)
    except ConfigValidationError as exc:
        for violation in exc.violations:
            print(f"invalid: {violation}", file=sys.stderr)
        return 2
    print(serialize_config(cfg), end="")
    return 0


def _cmd_run(args):
    cfg = validate_config_file(args.config)
    result = run_pipeline(cfg, base_dir=Path(args.config).parent)
    print(f"manifest: {result.manifest_path}")
    print(f"identities: {len(result.manifest.identities)}  images: {len(result.manifest)}")
    for key, stage in sorted(result.failures.items()):
        print(f"failed: {key} at stage {stage}", file=sys.stderr)
    return result.exit_code


def _cmd_stats(args):
    manifest = read_manifest(args.manifest)
    print(format_stats(stats_report(manifest)), end="")
    return 0


def _cmd_cdf(args):
    manifest = read_manifest(args.manifest)
    thresholds = [float(t) for t in args.thresholds.split(",")]
    print(format_cdf(compute_identity_cdf(manifest, thresholds)), end="")
    return 0


def _cmd_filter(args):
    target = read_manifest(args.manifest)
    source = read_manifest(args.source)
    src_root = Path(args.source).parent
    train = [r for r in source.records if r.split == "train"] or list(source.records)
    images = [load_png(src_root / r.path) for r in train]
    labels = [r.identity for r in train]
    cfg = FilterTrainConfig(seed=args.seed)
    if args.kind == "reid_ctf":
        model, _ = train_reid_embedder(images, labels, cfg)
    elif args.kind == "cctf":
        model = train_id_classifier(images, labels, cfg)
    else:
        print("filter: the clip kind needs no source training; use reid_ctf or cctf",
              file=sys.stderr)
        return 2

    tgt_root = Path(args.manifest).parent
    probes = [GeneratedSample(image=load_png(tgt_root / r.path), identity=r.identity,
                              source=r.source, seed=i, sample_id=r.path)
              for i, r in enumerate(target.records)]
    result = score_samples(model, probes)
    if args.tau is not None:
        tau = args.tau
    else:
        held = [r for r in source.records if r.split != "train"] or train
        held_probes = [GeneratedSample(image=load_png(src_root / r.path), identity=r.identity,
                                       source=r.source, seed=i)
                       for i, r in enumerate(held)]
        held_scores = [s.scores[args.kind]
                       for s in score_samples(model, held_probes).scored]
        tau = calibrate_threshold(held_scores, args.calibrate)
    report = apply_threshold(result.scored, tau, kind=args.kind)
    kept_paths = {s.sample_id for s in report.kept}
    filtered = target.filtered(lambda r: r.path in kept_paths)
    out = Path(args.out) if args.out else Path(args.manifest).with_suffix(".filtered.tsv")
    write_manifest(filtered, out)
    print(f"tau={tau!r} kept={len(report.kept)} discarded={len(report.discarded)}")
    print(f"filtered manifest: {out}")
    for err in result.errors:
        print(f"score error: {err.sample_id}: {err.message}", file=sys.stderr)
    return 0


def _pretrain_config(args) -> PretrainConfig:
    if args.config:
        cfg = validate_config_file(args.config)
        return PretrainConfig(
            epochs=cfg.pretrain_epochs, learning_rate=cfg.pretrain_lr,
            weight_decay=cfg.pretrain_weight_decay, warmup_epochs=cfg.pretrain_warmup_epochs,
            batch_size=cfg.pretrain_batch, seed=cfg.seed, hidden_dim=cfg.pretrain_hidden,
            pool=cfg.pretrain_pool, augmentations=cfg.augmentations)
    return PretrainConfig()


def _cmd_pretrain(args):
    manifest = read_manifest(args.manifest)
    cfg = _pretrain_config(args)
    ckpt = pretrain(manifest, cfg, image_root=Path(args.manifest).parent)
    out = Path(args.out)
    ckpt.save(out)
    print(f"checkpoint: {out}")
    print(f"final_loss={ckpt.config['final_loss']:.6f} "
          f"train_accuracy={ckpt.config['train_accuracy']:.4f}")
    return 0


def _cmd_eval(args):
    checkpoint = PretrainCheckpoint.load(args.checkpoint) if args.checkpoint != "random" else None
    manifest = read_manifest(args.manifest)
    ft_cfg = FinetuneEvalConfig(epochs=args.epochs, seed=args.seed)
    result, trace = finetune_eval(checkpoint, manifest, ft_cfg,
                                  image_root=Path(args.manifest).parent)
    print(format_retrieval_report(result), end="")
    if trace:
        print("map_trace=" + ",".join(f"{m:.6f}" for m in trace))
    if args.ledger:
        blob = f"{args.checkpoint}|{args.manifest}|{ft_cfg}".encode()
        run_id = hashlib.sha256(blob).hexdigest()[:12]
        append_run_ledger(args.ledger, run_id, hashlib.sha256(repr(ft_cfg).encode()).hexdigest()[:12],
                          result)
    return 0


def _cmd_toydata(args):
    from .toydata import generate_sprite_dataset

    path = generate_sprite_dataset(args.out_dir, n_identities=args.identities,
                                   images_per_identity=args.images, seed=args.seed)
    print(f"source manifest: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffid",
                                     description="Identity-conditioned synthetic data pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="validate a pipeline config file")
    p.add_argument("config")
    p.set_defaults(fn=_cmd_validate)

    p = sub.add_parser("run", help="run the full pipeline")
    p.add_argument("config")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("stats", help="summary statistics of a manifest")
    p.add_argument("manifest")
    p.set_defaults(fn=_cmd_stats)

    p = sub.add_parser("cdf", help="identity-count distribution curve")
    p.add_argument("manifest")
    p.add_argument("--thresholds", default="10,30,50,70,90,110,130,150,170,190,210")
    p.set_defaults(fn=_cmd_cdf)

    p = sub.add_parser("filter", help="score and threshold a manifest against a source")
    p.add_argument("manifest")
    p.add_argument("--source", required=True, help="source manifest to train the scorer on")
    p.add_argument("--kind", default="reid_ctf", choices=["reid_ctf", "cctf"])
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--calibrate", type=float, default=0.75,
                   help="target keep fraction when --tau is not given")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_filter)

    p = sub.add_parser("pretrain", help="pre-train the toy backbone on a manifest")
    p.add_argument("manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="backbone.ckpt")
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("eval", help="fine-tune/evaluate a checkpoint on a target manifest")
    p.add_argument("checkpoint", help="checkpoint path, or 'random' for random init")
    p.add_argument("manifest")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ledger", default=None, help="append (run id, config hash, mAP, rank1)")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("toydata", help="generate a sprite source dataset for demos")
    p.add_argument("out_dir")
    p.add_argument("--identities", type=int, default=3)
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_toydata)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigValidationError as exc:
        for violation in exc.violations:
            print(f"invalid: {violation}", file=sys.stderr)
        return 2
    except DiffidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
