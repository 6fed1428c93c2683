"""Command-line interface.

Subcommands: gen-data (synthesize a paired dataset), train, eval, derain
(single image), grad-check (finite-difference audit), and ablate (variant /
loss-weight comparison over seeds). Every command writes an
effective-config.yaml snapshot alongside its outputs and is deterministic
given that snapshot. Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.
"""

import argparse
import json
import math
import os
import statistics
import sys

import yaml

from . import gradcheck, losses, network, rain, training
from .config import ConfigError, RunConfig, load_config, save_config


def _resolve(flag_value, path_value, label):
    value = flag_value if flag_value is not None else path_value
    if value is None:
        raise ConfigError(f"no {label} given (flag or paths.{label} in the "
                          f"config)")
    return value


def _manifest_path(data):
    """Accept either a dataset directory or a manifest file."""
    path = os.path.join(data, "manifest.json") if os.path.isdir(data) else data
    if not os.path.exists(path):
        raise ConfigError(f"dataset manifest not found: {path}")
    return path


def _snapshot(out_dir, cfg=None, extra=None):
    """Write effective-config.yaml: the materialized RunConfig for commands
    that take one, or the resolved arguments for the rest."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "effective-config.yaml")
    if cfg is not None:
        save_config(path, cfg)
    else:
        with open(path, "w") as f:
            yaml.safe_dump(extra or {}, f, sort_keys=True)
    return path


def _load_model(path):
    """Load a model from either a model or a trainer checkpoint."""
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(8)
    if magic == training.TRAINER_MAGIC:
        return training.load_train_state(path).model
    return network.load_checkpoint(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.data.seed = args.seed
    out = _resolve(args.out, cfg.paths.out, "out")
    os.makedirs(out, exist_ok=True)
    manifest = rain.generate_dataset(cfg.data.n_pairs, cfg.data.image_size,
                                     cfg.data.ranges, cfg.data.seed, out,
                                     model=cfg.data.model)
    _snapshot(out, cfg=cfg)
    print(manifest)
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    data = _manifest_path(_resolve(args.data, cfg.paths.data, "data"))
    out = _resolve(args.out, cfg.paths.out, "out")
    os.makedirs(out, exist_ok=True)
    _snapshot(out, cfg=cfg)

    if args.resume:
        if not os.path.exists(args.resume):
            raise ConfigError(f"resume checkpoint not found: {args.resume}")
        state = training.load_train_state(args.resume)
    else:
        model = network.build(cfg.model, seed=cfg.train.seed)
        state = training.init_train_state(model, cfg.schedule,
                                          cfg.loss.weights(), cfg.train.seed)
    trace = training.train(
        state, data, epochs=cfg.train.epochs, batch=cfg.train.batch,
        patch=cfg.train.patch, hflip=cfg.train.hflip,
        extractor=cfg.loss.extractor(), grad_clip=cfg.train.grad_clip,
        checkpoint_dir=out, checkpoint_every=cfg.train.checkpoint_every,
        trace_path=os.path.join(out, "trace.jsonl"))
    final = os.path.join(out, "model_final.ckpt")
    network.save_checkpoint(final, state.model)
    last = trace[-1]["loss_total"] if trace else float("nan")
    print(f"trained to epoch {state.epoch} ({state.step} steps), "
          f"last loss {last:.6f}")
    print(final)
    return 0


def cmd_eval(args):
    if args.checkpoint is None and not args.identity:
        raise ConfigError("eval needs --checkpoint or --identity")
    data = _manifest_path(args.data)
    model = None if args.identity else _load_model(args.checkpoint)
    report = training.evaluate(model, data)
    os.makedirs(args.out, exist_ok=True)
    _snapshot(args.out, extra={"command": "eval", "checkpoint": args.checkpoint,
                               "identity": bool(args.identity), "data": data})
    report_path = os.path.join(args.out, "metrics.json")
    with open(report_path, "w") as f:
        f.write(training.report_to_json(report) + "\n")
    print(f"pairs {report['count']}  psnr mean {report['psnr']['mean']:.3f} "
          f"median {report['psnr']['median']:.3f}  ssim mean "
          f"{report['ssim']['mean']:.4f} median {report['ssim']['median']:.4f}")
    print(report_path)
    return 0


def cmd_derain(args):
    model = _load_model(args.checkpoint)
    if not os.path.exists(args.input):
        raise ConfigError(f"input image not found: {args.input}")
    rainy = rain.load_png(args.input)
    restored = training.infer_padded(model, rainy)
    out_dir = os.path.dirname(os.path.abspath(args.output)) or "."
    os.makedirs(out_dir, exist_ok=True)
    rain.save_png(args.output, restored)
    _snapshot(out_dir, extra={"command": "derain", "checkpoint": args.checkpoint,
                              "input": args.input, "output": args.output})
    shift = losses.psnr(restored, rainy)
    shift_text = "inf" if math.isinf(shift) else f"{shift:.3f}"
    print(f"wrote {args.output} ({restored.shape[0]}x{restored.shape[1]}), "
          f"psnr vs input {shift_text} dB")
    return 0


def cmd_grad_check(args):
    if args.scope == "all":
        results = gradcheck.run_all()
    else:
        try:
            results = {args.scope: gradcheck.run_check(args.scope)}
        except KeyError as exc:
            raise ConfigError(f"unknown gradient-check scope {args.scope!r}; "
                              f"choose from {sorted(gradcheck.CHECKS)} or "
                              f"'all'") from exc
    width = max(len(n) for n in results)
    ok = True
    for name, res in results.items():
        status = "pass" if res["passed"] else "FAIL"
        ok = ok and res["passed"]
        print(f"{name:<{width}}  rel_err {res['rel_err']:.3e}  "
              f"tol {res['tolerance']:.0e}  {status}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _snapshot(args.out, extra={"command": "grad-check", "scope": args.scope})
        with open(os.path.join(args.out, "gradcheck.json"), "w") as f:
            json.dump(results, f, indent=2, sort_keys=True)
    return 0 if ok else 1


def _parse_weight_sets(text):
    sets = []
    for chunk in text.split(";"):
        parts = [float(x) for x in chunk.split(",")]
        if len(parts) != 3:
            raise ConfigError(f"weight set {chunk!r} must be w_mse,w_ssim,w_perp")
        sets.append(losses.LossWeights(*parts))
    return sets


def _holdout_split(pairs, fraction):
    n_eval = max(1, round(len(pairs) * fraction))
    if n_eval >= len(pairs):
        raise ConfigError(f"holdout fraction {fraction} leaves no training "
                          f"pairs out of {len(pairs)}")
    return pairs[:-n_eval], pairs[-n_eval:]


def cmd_ablate(args):
    cfg = load_config(args.config)
    data = _manifest_path(_resolve(args.data, cfg.paths.data, "data"))
    out = _resolve(args.out, cfg.paths.out, "out")
    seeds = [int(s) for s in args.seeds.split(",")]
    variants = [v.strip() for v in args.variants.split(",")] if args.variants \
        else [cfg.model.variant]
    weight_sets = _parse_weight_sets(args.weights) if args.weights else None

    if weight_sets and len(variants) > 1:
        raise ConfigError("vary either variants or loss weights, not both")
    if weight_sets:
        rows_axis = [(f"w={w.w_mse:g},{w.w_ssim:g},{w.w_perp:g}", None, w)
                     for w in weight_sets]
    else:
        for v in variants:
            if v not in network.VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; choose from "
                                  f"{sorted(network.VARIANTS)}")
        rows_axis = [(v, v, cfg.loss.weights()) for v in variants]
    if len(rows_axis) < 2:
        raise ConfigError("ablation needs at least 2 variants or 2 weight sets")

    pairs = training.load_data(data)
    train_pairs, eval_pairs = _holdout_split(pairs, args.holdout)
    os.makedirs(out, exist_ok=True)
    _snapshot(out, cfg=cfg)

    rows = []
    for label, variant, weights in rows_axis:
        model_cfg = cfg.model if variant is None else \
            network.ModelConfig.from_dict({**cfg.model.to_dict(),
                                           "variant": variant})
        for seed in seeds:
            model = network.build(model_cfg, seed=seed)
            state = training.init_train_state(model, cfg.schedule, weights,
                                              seed)
            extractor = losses.PerceptualExtractor(
                tap=cfg.loss.perceptual_tap,
                seed=cfg.loss.perceptual_seed) if weights.w_perp > 0 else None
            training.train(state, train_pairs, epochs=cfg.train.epochs,
                           batch=cfg.train.batch, patch=cfg.train.patch,
                           hflip=cfg.train.hflip, extractor=extractor,
                           grad_clip=cfg.train.grad_clip)
            report = training.evaluate(state.model, eval_pairs)
            rows.append({"label": label, "seed": seed,
                         "psnr": report["psnr"]["mean"],
                         "ssim": report["ssim"]["mean"]})
            print(f"{label:<24} seed {seed}  psnr {rows[-1]['psnr']:.3f}  "
                  f"ssim {rows[-1]['ssim']:.4f}")

    summary = []
    for label, _, _ in rows_axis:
        own = [r for r in rows if r["label"] == label]
        summary.append({"label": label,
                        "median_psnr": statistics.median(r["psnr"] for r in own),
                        "median_ssim": statistics.median(r["ssim"] for r in own)})
        print(f"{label:<24} median  psnr {summary[-1]['median_psnr']:.3f}  "
              f"ssim {summary[-1]['median_ssim']:.4f}")
    table_path = os.path.join(out, "ablation.json")
    with open(table_path, "w") as f:
        f.write(training.report_to_json({"rows": rows, "summary": summary,
                                         "seeds": seeds,
                                         "holdout": args.holdout}) + "\n")
    print(table_path)
    return 0


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="dpaf",
        description="Dual-path attention-fusion deraining toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a paired rain dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="dataset directory (default paths.out)")
    p.add_argument("--seed", type=int, help="override data.seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="dataset dir or manifest (default paths.data)")
    p.add_argument("--out", help="run directory (default paths.out)")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--resume", help="trainer checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PSNR/SSIM report over a dataset")
    p.add_argument("--checkpoint", help="model or trainer checkpoint")
    p.add_argument("--identity", action="store_true",
                   help="score the rainy inputs unchanged (baseline)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("derain", help="restore a single PNG image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_derain)

    p = sub.add_parser("grad-check", help="finite-difference gradient audit")
    p.add_argument("--scope", default="all",
                   help="one registered check name, or 'all'")
    p.add_argument("--out", help="also write gradcheck.json here")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", help="compare variants or loss weights")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="dataset dir or manifest (default paths.data)")
    p.add_argument("--out", help="table directory (default paths.out)")
    p.add_argument("--variants", default="additive_fusion,full",
                   help="comma-separated model variants")
    p.add_argument("--weights", default=None,
                   help="semicolon-separated w_mse,w_ssim,w_perp triples")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--holdout", type=float, default=0.2,
                   help="fraction of pairs held out for evaluation")
    p.set_defaults(func=cmd_ablate)
    return parser


def entry(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure, not a usage problem
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(entry())
