"""``msa2net`` command line.

Exit codes: 0 success, 1 usage/config error, 2 data or file-format error,
3 numerical failure. ``MSA2NET_THREADS`` caps BLAS/FFT worker threads
(1 gives bit-reproducible runs).
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .errors import ConfigError, DataError, Msa2NetError, UsageError
from .formats import read_json, read_msat, read_pgm, write_json, write_msat, write_pgm
from .network import NetworkConfig, build_model, load_checkpoint, save_checkpoint
from .tensor import Tensor, no_grad
from .training import (adam_state, evaluate, generate_synthetic_dataset, load_dataset,
                       save_dataset, score_masks, sgd_state, train)

log = logging.getLogger("msa2net")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message} (see {self.prog} --help)")


# ---------------------------------------------------------------------------
# helpers

def _config(args):
    data = read_json(args.config) if args.config else {}
    if not isinstance(data, dict):
        raise ConfigError("--config must hold a JSON object")
    cfg = NetworkConfig.from_dict(data)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _model(args):
    if getattr(args, "checkpoint", None):
        return load_checkpoint(args.checkpoint)
    return build_model(_config(args))


def _seed(args, default=0):
    return default if args.seed is None else args.seed


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def read_input(path):
    """MSAT tensor as-is, or an 8-bit PGM scaled to [0, 1] as ``[1, 1, H, W]``."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"input file not found: {p}")
    head = p.read_bytes()[:4]
    if head == b"MSAT":
        return read_msat(p)
    if head[:2] == b"P5":
        return (read_pgm(p).astype(np.float32) / 255.0)[None, None]
    suffix = p.suffix.lower()
    if suffix == ".pgm":
        return read_pgm(p)   # raises with the offending offset
    return read_msat(p)


def _optimizer(args):
    if args.optimizer == "adam":
        return adam_state(lr=args.lr if args.lr is not None else 1e-3)
    return sgd_state(lr=args.lr if args.lr is not None else 0.05)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args):
    cfg = _config(args)
    size = args.size or cfg.image_size
    classes = args.classes or cfg.num_classes
    samples = generate_synthetic_dataset(_seed(args), args.n, size, classes)
    save_dataset(samples, args.out, {"seed": _seed(args), "size": size, "num_classes": classes})
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_train(args):
    cfg = _config(args)
    samples, index = load_dataset(args.data)
    if index.get("num_classes") not in (None, cfg.num_classes):
        raise ConfigError(f"dataset has {index['num_classes']} classes, config {cfg.num_classes}")
    model = build_model(cfg)
    out = _out(args)

    def progress(epoch, loss):
        log.info("epoch %d loss %.5f", epoch + 1, loss)

    _, curve = train(model, samples, args.epochs, _optimizer(args), seed=cfg.seed,
                     batch_size=args.batch_size, on_epoch=progress)
    analysis.write_csv(out / "loss_curve.csv", ["epoch", "loss"],
                       [[i + 1, repr(v)] for i, v in enumerate(curve)])
    save_checkpoint(model, out / "checkpoint")
    print(f"final loss {curve[-1]:.5f}; checkpoint at {out / 'checkpoint'}" if curve
          else f"checkpoint at {out / 'checkpoint'}")


def cmd_eval(args):
    samples, index = load_dataset(args.data)
    if args.predictions:
        num_classes = index.get("num_classes") or 1 + max(int(s.mask.max()) for s in samples)
        pred_dir = Path(args.predictions)
        preds = [read_pgm(pred_dir / e["mask"]).astype(np.int64) for e in index["samples"]]
        rep = score_masks(preds, [s.mask for s in samples], num_classes)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --predictions")
        rep = evaluate(load_checkpoint(args.checkpoint), samples)
    out = _out(args)
    write_json(out / "metrics.json", rep.as_dict())
    hd = "n/a" if rep.mean_hd95 is None else f"{rep.mean_hd95:.3f}"
    print(f"mean DSC {rep.mean_dsc:.4f}  mean HD95 {hd}  (HD95 excluded: {rep.hd95_excluded})")


def cmd_forward(args):
    model = _model(args)
    x = read_input(args.input)
    with no_grad():
        logits = model(Tensor(x.astype(model.head.weight.dtype))).data
    masks = logits.argmax(axis=1).astype(np.uint8)
    out = _out(args)
    write_msat(out / "logits.msat", logits)
    write_msat(out / "mask.msat", masks[:, None].astype(np.float32))
    if len(masks) == 1:
        write_pgm(out / "mask.pgm", masks[0])
    else:
        for i, m in enumerate(masks):
            write_pgm(out / f"mask_{i:04d}.pgm", m)
    print(f"logits {list(logits.shape)} -> {out}")


def _counts(args, what):
    model = _model(args)
    rep = analysis.count_table(model)
    print(analysis.format_count_table(rep, what))
    if args.out:
        analysis.write_count_table(rep, args.out, what)


def cmd_params(args):
    _counts(args, "params")


def cmd_flops(args):
    _counts(args, "flops")


def cmd_freq(args):
    x = read_input(args.input)
    layers = [s for s in args.layers.split(",") if s] if args.layers else None
    labels = (args.labels.split(",") + ["a", "b"])[:2] if args.labels else ["a", "b"]
    rep = analysis.freq_report(load_checkpoint(args.checkpoint), x, layers, args.bins, labels[0])
    reports, comparison = [rep], None
    if args.compare:
        other = analysis.freq_report(load_checkpoint(args.compare), x, layers, args.bins, labels[1])
        reports.append(other)
        comparison = analysis.compare_freq(rep, other)
    analysis.write_freq_reports(reports, _out(args), comparison)
    for r in reports:
        for e in r.layers:
            print(f"{r.label:>8} {e.layer:<6} hf_ratio {e.hf_ratio:.4f}  parseval_rel_err {e.parseval_rel_err:.2e}")
    if comparison and comparison["headline_layer"]:
        print(f"hf-ratio delta ({labels[0]} - {labels[1]}) at {comparison['headline_layer']}: "
              f"{comparison['headline_hf_ratio_delta']:+.4f}")


def cmd_gradcam(args):
    model = load_checkpoint(args.checkpoint)
    x = read_input(args.input)
    cam = analysis.gradcam(model, x, args.class_index, args.layer)
    pgm, _ = analysis.write_cam(cam, _out(args))
    print(f"GradCAM {cam.layer} class {cam.class_index} -> {pgm}")


def cmd_ablate(args):
    base = _config(args)
    train_set, index = load_dataset(args.data)
    if args.eval_data:
        eval_set, _ = load_dataset(args.eval_data)
    else:
        # held-out draw from the generator at seed + 1 with the dataset's own settings
        size = index.get("size", base.image_size)
        classes = index.get("num_classes", base.num_classes)
        eval_set = generate_synthetic_dataset(index.get("seed", 0) + 1, args.eval_n, size, classes)
    rows = [int(r) for r in args.rows.split(",")] if args.rows else None
    results = analysis.run_ablation(base, train_set, eval_set, args.epochs, seed=_seed(args, base.seed),
                                    lr=args.lr if args.lr is not None else 1e-3,
                                    batch_size=args.batch_size, rows=rows)
    analysis.write_ablation(results, _out(args))
    print(analysis.format_ablation(results))
    if any(r.error for r in results):
        failed = [r for r in results if r.error]
        raise analysis.AblationFailed([r.row for r in failed], failed[0].exit_code)


# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="network config JSON (fields of NetworkConfig)")
    common.add_argument("--seed", type=int, help="random seed (u64)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="msa2net", description="Desk-scale MSA2Net toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic shape dataset")
    s.add_argument("--n", type=int, default=200, help="number of samples")
    s.add_argument("--size", type=int, help="image side (default: config image_size)")
    s.add_argument("--classes", type=int, help="labels incl. background (default: config)")
    s.set_defaults(func=cmd_gen_data, need_out=True)

    s = sub.add_parser("train", parents=[common], help="train and write checkpoint + loss curve")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--batch-size", type=int, default=4)
    s.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    s.add_argument("--lr", type=float, help="learning rate (adam 1e-3, sgd 0.05)")
    s.set_defaults(func=cmd_train, need_out=True)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint or saved masks")
    s.add_argument("--data", required=True, help="dataset directory with ground truth")
    s.add_argument("--checkpoint", help="checkpoint directory")
    s.add_argument("--predictions", help="directory holding predicted masks under the dataset's mask paths")
    s.set_defaults(func=cmd_eval, need_out=True)

    s = sub.add_parser("forward", parents=[common], help="logits and argmax mask for an input")
    s.add_argument("--checkpoint", help="checkpoint directory (default: fresh model from --config)")
    s.add_argument("--input", required=True, help="MSAT tensor or P5 PGM image")
    s.set_defaults(func=cmd_forward, need_out=True)

    for name, fn in (("params", cmd_params), ("flops", cmd_flops)):
        s = sub.add_parser(name, parents=[common], help=f"grouped {name} table")
        s.add_argument("--checkpoint", help="checkpoint directory (default: model from --config)")
        s.set_defaults(func=fn, need_out=False)

    s = sub.add_parser("freq", parents=[common], help="radial spectra of feature maps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="MSAT tensor or P5 PGM image")
    s.add_argument("--layers", help="comma-separated feature names (default: all)")
    s.add_argument("--bins", type=int, default=16)
    s.add_argument("--compare", help="second checkpoint for a joined report")
    s.add_argument("--labels", help="two comma-separated labels for the reports")
    s.set_defaults(func=cmd_freq, need_out=True)

    s = sub.add_parser("gradcam", parents=[common], help="Grad-CAM heatmap")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="MSAT tensor [1, C, H, W] or P5 PGM image")
    s.add_argument("--class", dest="class_index", type=int, required=True)
    s.add_argument("--layer", default="dec4")
    s.set_defaults(func=cmd_gradcam, need_out=True)

    s = sub.add_parser("ablate", parents=[common], help="train and score the six ablation rows")
    s.add_argument("--data", required=True, help="training dataset directory")
    s.add_argument("--eval-data", help="held-out dataset (default: regenerated at dataset seed + 1)")
    s.add_argument("--eval-n", type=int, default=50)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--batch-size", type=int, default=4)
    s.add_argument("--lr", type=float)
    s.add_argument("--rows", help="comma-separated subset of rows 1..6")
    s.set_defaults(func=cmd_ablate, need_out=True)
    return p


def _threads():
    raw = os.environ.get("MSA2NET_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MSA2NET_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"MSA2NET_THREADS must be a positive integer, got {raw!r}")
    return n


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.need_out and not args.out:
        raise UsageError(f"{args.command} needs --out")
    threads = _threads()
    if threads is None:
        args.func(args)
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=threads):
        args.func(args)


def main(argv=None):
    try:
        run(argv)
    except Msa2NetError as exc:
        print(f"msa2net: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"msa2net: numerical error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"msa2net: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
