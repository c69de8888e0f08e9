"""Command-line entry point: ``udcsim <subcommand> --config FILE --seed N``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import plotting
from .checkpoint import load_module, save_checkpoint
from .config import load_config
from .dwformer import freeze_bn, is_frozen
from .errors import ConfigError, IntegrityError, TrainingAborted, UdcError
from .generator import MPGNet
from .imaging import save_image
from .overhead import count_macs, count_params
from .rng import RngStream
from .training import PairSet, train_generator, train_restorer

log = logging.getLogger("udcsim")

EXIT_CODES = ((ConfigError, 2), (IntegrityError, 3), (TrainingAborted, 4), (UdcError, 1), (OSError, 5))


def _emit(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    print(text)
    if path:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as f:
            f.write(text + "\n")


def _load_pairs(manifest_dir) -> PairSet:
    from .bench.dataset import DatasetManifest

    manifest = DatasetManifest.load(manifest_dir)
    manifest.verify()
    pairs = [manifest.load_pair(e) for e in manifest.entries]
    return PairSet.from_images([p[0] for p in pairs], [p[1] for p in pairs])


def cmd_gen_dataset(args, cfg, rng):
    from .bench.dataset import synthesize_dataset
    from .bench.pipeline import build_corpus

    clean_dir = args.clean_dir or cfg.data.clean_dir
    if clean_dir is None:
        clean_dir = os.path.join(args.out, "scenes")
        os.makedirs(clean_dir, exist_ok=True)
        for i, img in enumerate(build_corpus(cfg.data, rng)):
            save_image(img, os.path.join(clean_dir, f"scene_{i:04d}.png"))
    degrader = cfg.sgm
    if args.generator:
        degrader, _ = load_module(args.generator)
        if not isinstance(degrader, MPGNet):
            raise ConfigError(f"{args.generator} is not a generator checkpoint")
    manifest = synthesize_dataset(clean_dir, degrader, args.out, rng.split("dataset"))
    _emit({"manifest": manifest.path, "pairs": len(manifest), "config_hash": manifest.entries[0]["config_hash"],
           "seed": rng.seed})


def cmd_train_restore(args, cfg, rng):
    pairs = _load_pairs(args.data)
    os.makedirs(args.out, exist_ok=True)
    sched = cfg.schedule["restorer"]
    model, history = train_restorer(pairs, sched, rng, model_cfg=cfg.restorer, out_dir=args.out,
                                    history_path=os.path.join(args.out, "history.jsonl"))
    freeze_bn(model)
    ckpt = os.path.join(args.out, "restorer.ckpt")
    save_checkpoint(ckpt, model, "restorer", model.cfg.to_dict(), sched.total_iters,
                    {"seed": rng.seed, "config_hash": cfg.config_hash()})
    plotting.plot_curves({"loss": history.series("loss")}, os.path.join(args.out, "history.png"), "restorer L1",
                         log_y=True)
    losses = history.series("loss")
    _emit({"checkpoint": ckpt, "first_loss": losses[0], "final_loss": losses[-1], "seed": rng.seed,
           "config_hash": cfg.config_hash()})


def cmd_train_gen(args, cfg, rng):
    pairs = _load_pairs(args.data)
    os.makedirs(args.out, exist_ok=True)
    if args.restorer:
        restorer, _ = load_module(args.restorer)
        if not is_frozen(restorer):
            freeze_bn(restorer)
    else:
        restorer, _ = train_restorer(pairs, cfg.schedule["pretrain"], rng.split("pretrain"), model_cfg=cfg.restorer)
        freeze_bn(restorer)
    sched = cfg.schedule["gan"]
    G, D, history = train_generator(pairs, restorer, sched, rng.split("gan"), gen_cfg=cfg.generator,
                                    disc_cfg=cfg.discriminator, out_dir=args.out,
                                    history_path=os.path.join(args.out, "history.jsonl"))
    meta = {"seed": rng.seed, "config_hash": cfg.config_hash()}
    save_checkpoint(os.path.join(args.out, "generator.ckpt"), G, "generator", G.cfg.to_dict(), sched.total_iters, meta)
    save_checkpoint(os.path.join(args.out, "discriminator.ckpt"), D, "discriminator", D.cfg.to_dict(),
                    sched.total_iters, meta)
    plotting.plot_curves({k: history.series(k) for k in ("loss_d", "loss_g_adv", "loss_sup")},
                         os.path.join(args.out, "history.png"), "adversarial training")
    last = history[-1]
    _emit({"checkpoint": os.path.join(args.out, "generator.ckpt"), "d_steps": last["d_steps"],
           "g_steps": last["g_steps"], "final": {k: v for k, v in last.items() if k.startswith("loss")}, **meta})


def cmd_eval(args, cfg, rng):
    from .bench.dataset import DatasetManifest
    from .bench.evaluate import evaluate

    model, header = load_module(args.checkpoint)
    if header["kind"] != "restorer":
        raise ConfigError(f"{args.checkpoint} is not a restorer checkpoint")
    report = evaluate(model, DatasetManifest.load(args.data), seed=rng.seed)
    _emit(report.to_dict(), args.report)
    if args.report:
        plotting.plot_eval(report.to_dict(), os.path.splitext(args.report)[0] + ".png")


def cmd_ablate(args, cfg, rng):
    from .bench.ablation import AblationSpec
    from .bench.experiments import run_ablation

    spec = AblationSpec.parse(args.spec)
    report = run_ablation(spec, cfg, rng, out_dir=args.out)
    path = os.path.join(args.out, "report.json") if args.out else None
    _emit(report.to_dict(), path)
    if args.out:
        plotting.plot_eval(report.to_dict(), os.path.join(args.out, "report.png"))


def cmd_closed_loop(args, cfg, rng):
    from .bench.experiments import closed_loop_experiment

    report = closed_loop_experiment(cfg, rng, self_check=args.self_check, out_dir=args.out)
    if args.out:
        _emit(report, os.path.join(args.out, "report.json"))
        plotting.closed_loop_figures(report, args.out)
    else:
        _emit(report)


def cmd_count(args, cfg, rng):
    res = args.resolution
    _emit({"params": count_params(cfg.restorer), "macs": count_macs(cfg.restorer, res), "resolution": res,
           "restorer": cfg.restorer.to_dict(), "config_hash": cfg.config_hash(), "seed": rng.seed})


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML experiment config (defaults: desk scale)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="udcsim", description="Degradation generator and restorer toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-dataset", parents=[common], help="write degraded partners and a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--clean-dir", default=None)
    s.add_argument("--generator", default=None, help="generator checkpoint (default: closed-form degradation)")
    s.set_defaults(func=cmd_gen_dataset)

    s = sub.add_parser("train-gen", parents=[common], help="adversarial generator training on a dataset")
    s.add_argument("--data", required=True, help="dataset directory or manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--restorer", default=None, help="pre-trained restorer checkpoint")
    s.set_defaults(func=cmd_train_gen)

    s = sub.add_parser("train-restore", parents=[common], help="L1 restorer training on a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_restore)

    s = sub.add_parser("eval", parents=[common], help="score a restorer checkpoint on a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="train and score one ablation variant")
    s.add_argument("--spec", required=True, help="e.g. generator/no-nq/adv+sup/lam=10.0")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("closed-loop", parents=[common], help="fit a generator to oracle pairs and probe it")
    s.add_argument("--out", default=None)
    s.add_argument("--self-check", action="store_true", help="use the oracle in place of the generator")
    s.set_defaults(func=cmd_closed_loop)

    s = sub.add_parser("count", parents=[common], help="restorer parameter and MAC counts")
    s.add_argument("--resolution", type=int, default=256)
    s.set_defaults(func=cmd_count)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        args.func(args, cfg, RngStream(args.seed))
    except tuple(e for e, _ in EXIT_CODES) as e:
        code = next(c for cls, c in EXIT_CODES if isinstance(e, cls))
        print(f"error: {e}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
