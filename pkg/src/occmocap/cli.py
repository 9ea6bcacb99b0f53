"""Command-line interface.

Subcommands: synth-data, train-prior, train-lifting, eval, infer, sweep.

Exit codes:
  0  success
  2  configuration problems (bad flags, malformed config file, incompatible
     checkpoint/config combinations); argparse usage errors also exit 2
  3  data problems (missing/malformed datasets, detection files, checkpoints)
  4  numerical failures (degenerate rotations, unsolvable projections,
     non-finite values)
  1  anything unexpected
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import torch
import yaml

from . import harness
from .body_model import BodyModel
from .data_pipeline import (
    DEFAULT_THRESHOLD,
    generate_dataset,
    ingest_detections,
    load_dataset,
    save_dataset,
)
from .errors import (
    ConfigError,
    DataError,
    InvalidBboxError,
    NumericalError,
    OccMocapError,
    ProjectionError,
    ShapeMismatchError,
    SingularRotationError,
    TranslationSolveError,
)
from .metrics import format_report
from .harness import (
    TrainConfig,
    config_echo,
    lifting_from_checkpoint,
    load_checkpoint,
    load_config_file,
    prior_from_checkpoint,
    save_checkpoint,
    set_determinism,
)
from .lifting_net import LiftingNet, LossWeights
from .prior_net import PriorNet

log = logging.getLogger("occmocap")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _load_sections(args):
    """Config sections from --config (defaults when absent), CLI overrides
    applied on top."""
    if getattr(args, "config", None):
        cfg = load_config_file(args.config)
    else:
        cfg = {
            "seed": 0,
            "_present": frozenset(),
            "data": harness.GenerationConfig(),
            "prior": harness.PriorConfig(),
            "lifting": harness.LiftingConfig(),
            "train_prior": TrainConfig(),
            "train_lifting": TrainConfig(),
            "loss_weights": LossWeights(),
        }
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    for section, attr in (("train_prior", "train_prior"), ("train_lifting", "train_lifting")):
        tc = cfg[section]
        for field in ("epochs", "batch_size", "lr"):
            override = getattr(args, field, None)
            if override is not None:
                tc = dataclasses.replace(tc, **{field: override})
        cfg[section] = dataclasses.replace(tc, seed=cfg["seed"])
    return cfg


def _echo_comment(echo):
    """Config echo rendered as # comment lines for report files."""
    text = yaml.safe_dump(echo, default_flow_style=True, width=10_000).strip()
    return "".join(f"# config {line}\n" for line in text.splitlines())


def cmd_synth_data(args):
    cfg = _load_sections(args)
    gen = cfg["data"]
    if args.frames is not None:
        gen = dataclasses.replace(gen, num_frames=args.frames)
    if args.target_ratio is not None:
        occ = dataclasses.replace(gen.occlusion or harness.OcclusionConfig(),
                                  target_ratio=args.target_ratio)
        gen = dataclasses.replace(gen, occlusion=occ)
    samples = generate_dataset(gen, args.num_samples, seed=cfg["seed"])
    out = Path(args.out)
    save_dataset(out, samples)
    log.info("wrote %d samples to %s", len(samples), out)
    return 0


def cmd_train_prior(args):
    cfg = _load_sections(args)
    tcfg = cfg["train_prior"]
    samples = load_dataset(args.data)
    set_determinism(cfg["seed"])
    prior_cfg = cfg["prior"]
    if args.zero_fill_token:
        prior_cfg = dataclasses.replace(prior_cfg, use_token=False)
    prior_cfg = dataclasses.replace(
        prior_cfg,
        num_frames=samples[0].num_frames,
        num_joints=samples[0].clean2d.shape[1],
    )
    net = PriorNet(prior_cfg)
    echo = config_echo(prior=prior_cfg, train_prior=tcfg, seed=cfg["seed"])
    optimizer, start_epoch, history = None, 0, None
    if args.resume:
        ckpt = load_checkpoint(args.resume, expected_kind="prior")
        if ckpt["config"].get("prior") != echo["prior"]:
            raise ConfigError(
                f"resume checkpoint {args.resume} was trained with a different prior config")
        net.load_state_dict(ckpt["model_state"])
        optimizer = torch.optim.AdamW(net.parameters(), lr=tcfg.lr,
                                      weight_decay=tcfg.weight_decay)
        if ckpt["optimizer_state"] is not None:
            optimizer.load_state_dict(ckpt["optimizer_state"])
        start_epoch = ckpt["epoch"]
        history = ckpt["history"]
    optimizer, history = harness.train_prior_model(
        samples, net, tcfg, optimizer=optimizer, start_epoch=start_epoch,
        history=history)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "prior.pt", "prior", net, optimizer, echo,
                    history, epoch=tcfg.epochs)
    harness.write_loss_log(out / "prior_loss.txt", history)
    log.info("saved prior checkpoint to %s", out / "prior.pt")
    return 0


def cmd_train_lifting(args):
    cfg = _load_sections(args)
    tcfg = cfg["train_lifting"]
    samples = load_dataset(args.data)
    set_determinism(cfg["seed"])
    if args.no_prior and args.prior:
        raise ConfigError("--no-prior and --prior are mutually exclusive")
    if args.freeze_prior and not args.prior:
        raise ConfigError("--freeze-prior requires a pretrained --prior checkpoint")
    if args.prior:
        ckpt = load_checkpoint(args.prior, expected_kind="prior")
        if "prior" in cfg["_present"]:
            if dataclasses.asdict(cfg["prior"]) != ckpt["config"].get("prior"):
                raise ConfigError(
                    f"prior checkpoint {args.prior} is incompatible with the "
                    "'prior' section of the config file")
        prior = prior_from_checkpoint(ckpt)
        prior_cfg = prior.cfg
    elif args.no_prior:
        prior_cfg = dataclasses.replace(
            cfg["prior"],
            num_frames=samples[0].num_frames,
            num_joints=samples[0].clean2d.shape[1],
        )
        prior = PriorNet(prior_cfg)
    else:
        raise ConfigError("provide a pretrained --prior checkpoint or pass --no-prior")
    if (prior_cfg.num_frames != samples[0].num_frames
            or prior_cfg.num_joints != samples[0].clean2d.shape[1]):
        raise ConfigError(
            f"prior expects {prior_cfg.num_frames} frames x {prior_cfg.num_joints} "
            f"joints, dataset has {samples[0].num_frames} x {samples[0].clean2d.shape[1]}")
    net = LiftingNet(prior, cfg["lifting"])
    body = BodyModel()
    weights = cfg["loss_weights"]
    if args.no_smoothness:
        weights = dataclasses.replace(weights, smo=0.0)
    echo = config_echo(prior=prior_cfg, lifting=cfg["lifting"],
                       train_lifting=tcfg, loss_weights=weights,
                       seed=cfg["seed"], freeze_prior=args.freeze_prior,
                       pretrained_prior=bool(args.prior))
    optimizer, history = harness.train_lifting_model(
        samples, net, body, tcfg, weights=weights, freeze_prior=args.freeze_prior)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "lifting.pt", "lifting", net, optimizer, echo,
                    history, epoch=tcfg.epochs)
    harness.write_loss_log(out / "lifting_loss.txt", history)
    log.info("saved lifting checkpoint to %s", out / "lifting.pt")
    return 0


def cmd_eval(args):
    cfg = _load_sections(args)
    samples = load_dataset(args.data)
    set_determinism(cfg["seed"])
    ckpt = load_checkpoint(args.ckpt, expected_kind="lifting")
    net = lifting_from_checkpoint(ckpt)
    body = BodyModel()
    per_seq, aggregate = harness.evaluate_lifting(net, samples, body)
    report = _echo_comment(ckpt["config"]) + format_report(per_seq, aggregate)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report)
    log.info("aggregate: %s", " ".join(f"{k} {v:.3f}" for k, v in aggregate.items()))
    return 0


def cmd_infer(args):
    cfg = _load_sections(args)
    set_determinism(cfg["seed"])
    det = ingest_detections(args.detections, threshold=args.threshold)
    ckpt = load_checkpoint(args.ckpt, expected_kind="lifting")
    net = lifting_from_checkpoint(ckpt)
    body = BodyModel()
    result = harness.run_inference(det, net, body)
    harness.save_motion_output(args.out, result, args.threshold)
    log.info("wrote motion output to %s (translation %s)", args.out,
             "solved" if result["translations"] is not None else "local frame only")
    return 0


def cmd_sweep(args):
    cfg = _load_sections(args)
    samples = load_dataset(args.data)
    set_determinism(cfg["seed"])
    variants = {}
    for spec_arg in args.ckpt:
        label, _, path = spec_arg.partition("=")
        if not path:
            label, path = Path(spec_arg).stem, spec_arg
        ckpt = load_checkpoint(path, expected_kind="lifting")
        variants[label] = lifting_from_checkpoint(ckpt)
    ratios = [float(r) for r in args.ratios.split(",")]
    if any(not 0.0 <= r <= 0.5 for r in ratios):
        raise ConfigError(f"sweep ratios must lie in [0, 0.5], got {ratios}")
    body = BodyModel()
    rows = harness.sensitivity_sweep(variants, samples, body, ratios=ratios,
                                     seed=cfg["seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_sweep_table(out / "sweep.txt", rows)
    harness.plot_sweep(out / "sweep.png", rows)
    log.info("wrote sweep table and plot to %s", out)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="occmocap",
        description="Occlusion-robust motion capture: synthetic data, prior and "
                    "lifting training, evaluation, inference, sensitivity sweeps.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None, metavar="N")

    p = sub.add_parser("synth-data", help="generate a synthetic motion dataset")
    common(p)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--num-samples", type=int, default=2000, metavar="N")
    p.add_argument("--frames", type=int, default=None, metavar="N")
    p.add_argument("--target-ratio", type=float, default=None, metavar="R",
                   help="occlusion ratio to calibrate to (0..0.5)")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-prior", help="train the masked-completion motion prior")
    common(p)
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--epochs", type=int, default=None, metavar="N")
    p.add_argument("--batch-size", type=int, default=None, metavar="N")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--resume", metavar="CKPT", help="continue from a prior checkpoint")
    p.add_argument("--zero-fill-token", action="store_true",
                   help="replace the learned occlusion token with fixed zeros")
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("train-lifting", help="train the 3D lifting network")
    common(p)
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--prior", metavar="CKPT", help="pretrained prior checkpoint")
    p.add_argument("--freeze-prior", action="store_true",
                   help="keep prior weights fixed during lifting training")
    p.add_argument("--no-prior", action="store_true",
                   help="train from scratch without a pretrained prior")
    p.add_argument("--no-smoothness", action="store_true",
                   help="drop the temporal smoothness loss term")
    p.add_argument("--epochs", type=int, default=None, metavar="N")
    p.add_argument("--batch-size", type=int, default=None, metavar="N")
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_train_lifting)

    p = sub.add_parser("eval", help="evaluate a lifting checkpoint on a dataset")
    common(p)
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--ckpt", required=True, metavar="CKPT")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run the full pipeline on a detection file")
    common(p)
    p.add_argument("--detections", required=True, metavar="FILE")
    p.add_argument("--ckpt", required=True, metavar="CKPT")
    p.add_argument("--out", required=True, metavar="FILE")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD,
                   help="confidence below this marks a joint occluded (default 0.6)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("sweep", help="occlusion-ratio sensitivity sweep")
    common(p)
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--ckpt", required=True, action="append", metavar="LABEL=CKPT",
                   help="lifting checkpoint to include; repeat for multiple variants")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--ratios", default="0,0.1,0.2,0.3,0.4,0.5",
                   help="comma-separated occlusion ratios")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    if not log.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, ShapeMismatchError, InvalidBboxError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (NumericalError, TranslationSolveError, SingularRotationError,
            ProjectionError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except OccMocapError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
