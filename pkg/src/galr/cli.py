"""Command-line driver: ``galr <subcommand> ...``.

Every failure exits nonzero with a single stderr line ``error[<kind>]: ...``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cost as costmod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .errors import GALRError, InputError, UsageError
from .frontend import Waveform
from .gradcheck import check_model, run_op_suite
from .separator import TOY, SeparatorModel, attention_dump
from .training import evaluate, gen_synthetic, jsonl_logger, si_snr_improvement, train
from .wav import wav_read, wav_write

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _data(cfg: RunConfig, seed_offset: int, count: int):
    d = cfg.data
    return list(gen_synthetic(d.seed + seed_offset, count, d.length_s, d.kind, (d.snr_low, d.snr_high),
                              n_sources=cfg.hyperparams.C))


def _run_training(cfg: RunConfig, out=None, model=None):
    t = cfg.training
    model = model or SeparatorModel(cfg.hyperparams, seed=t.seed)
    train_data = _data(cfg, 0, cfg.data.train_count)
    val_data = _data(cfg, 1, cfg.data.val_count) if cfg.data.val_count else None
    return train(model, train_data, val_data, epochs=t.epochs, batch_size=t.batch_size, seed=t.seed,
                 patience=t.patience, lr=t.lr, weight_decay=t.weight_decay, clip_norm=t.clip_norm,
                 zero_mean=t.zero_mean, log=jsonl_logger(out) if out else None, max_seconds=t.max_seconds)


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.toy:
        cfg = replace(cfg, hyperparams=TOY)
    if args.epochs is not None:
        cfg = replace(cfg, training=replace(cfg.training, epochs=args.epochs))
    target = Path(args.checkpoint or cfg.paths.checkpoint)
    metrics = cfg.paths.metrics
    if metrics:
        with open(metrics, "w") as stream:
            result = _run_training(cfg, stream)
    else:
        result = _run_training(cfg, sys.stdout)
    save_checkpoint(result.model, target)
    print(f"saved {target} epochs={result.epochs_run} best_val_loss={result.best_val_loss:.4f}", file=sys.stderr)
    return 0


def cmd_separate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    wave = wav_read(args.input)
    sources = model.separate(wave.samples)
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.input).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    for c, src in enumerate(sources, 1):
        path = out_dir / f"{stem}_src{c}.wav"
        wav_write(path, Waveform(src, wave.sample_rate))
        print(path)
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    mixture = wav_read(args.mixture).samples
    refs = [wav_read(p).samples for p in args.references]
    if len(refs) != model.hp.C:
        raise InputError(f"model separates C={model.hp.C} sources, got {len(refs)} references")
    if any(len(r) != len(mixture) for r in refs):
        raise InputError("references and mixture differ in length")
    est = np.stack(model.separate(mixture))
    gain = si_snr_improvement(est, np.stack(refs), mixture, zero_mean=args.zero_mean)
    print(json.dumps({"si_snri": gain}))
    return 0


def cmd_cost(args) -> int:
    dims = {k: getattr(args, k) for k in ("D", "M", "K", "Q", "H", "J", "N")}
    arch = args.arch.upper() if args.arch.lower() != "dptnet" else "DPTNet"
    hp = costmod.arch_hyperparams(arch, **dims)
    report = costmod.flops_estimate(hp, args.seconds)
    print(report.to_text())
    if args.csv:
        text = report.to_csv()
        if args.csv == "-":
            sys.stdout.write(text)
        else:
            Path(args.csv).write_text(text)
    return 0


def cmd_gradcheck(args) -> int:
    worst_op = 0.0
    for name, err in run_op_suite(args.seed).items():
        worst_op = max(worst_op, err)
        print(f"{name:24s} max_rel_err={err:.3e}")
    ok = worst_op <= OP_TOLERANCE
    if not args.skip_model:
        err = check_model(seed=args.seed)
        print(f"{'model(N=1 toy)':24s} max_rel_err={err:.3e}")
        ok = ok and err <= MODEL_TOLERANCE
    if not ok:
        raise GALRError(f"gradient check above tolerance (ops {OP_TOLERANCE:g}, model {MODEL_TOLERANCE:g})")
    return 0


VARIANTS = [("recurrent", "attentive"), ("recurrent", "recurrent"),
            ("attentive", "attentive"), ("attentive", "recurrent")]


def cmd_ablate(args) -> int:
    if not args.toy:
        raise UsageError("ablate only supports the toy scale; pass --toy")
    base = RunConfig()
    data = replace(base.data, train_count=args.train_count, val_count=args.val_count, seed=args.seed)
    training = replace(base.training, epochs=args.epochs, seed=args.seed)
    test = list(gen_synthetic(args.seed + 2, args.test_count, data.length_s, data.kind))
    for local, glob in VARIANTS:
        hp = TOY.replace(local_model=local, global_model=glob)
        cfg = RunConfig(hp, training, data, base.paths)
        result = _run_training(cfg)
        score = evaluate(result.model, test)["si_snri"]
        print(f"local={local:9s} global={glob:9s} params={result.model.num_params():6d} "
              f"test_si_snri={score:7.3f} dB epochs={result.epochs_run}")
    return 0


def cmd_attn_dump(args) -> int:
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = SeparatorModel(TOY, seed=args.seed)
    if args.input:
        samples = wav_read(args.input).samples
    else:
        samples = next(gen_synthetic(args.seed, 1, 1.0, n_sources=model.hp.C)).mixture
    weights = attention_dump(model, samples, args.block, args.head, args.layer)
    out = open(args.out, "w", newline="") if args.out != "-" else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["sequence", "query", "key", "weight"])
        for seq, matrix in enumerate(weights):
            for i, row in enumerate(matrix):
                for j, w in enumerate(row):
                    writer.writerow([seq, i, j, f"{w:.8g}"])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="galr", description="GALR speech separation toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train on seeded synthetic mixtures")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--toy", action="store_true", help="use the toy hyperparameters")
    p.add_argument("--epochs", type=int)
    p.add_argument("--checkpoint", help="output checkpoint (overrides the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", help="split a mixture WAV into C source WAVs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("input")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("eval", help="SI-SNRi of a separated mixture against reference WAVs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mixture", required=True)
    p.add_argument("--references", nargs="+", required=True)
    p.add_argument("--zero-mean", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cost", help="analytic FLOPs / parameters / activation memory")
    p.add_argument("--arch", default="galr", choices=["galr", "dprnn", "GALR", "DPRNN"])
    for name, default in (("D", 64), ("M", 16), ("K", 100), ("Q", 32), ("H", 128), ("J", 8), ("N", 6)):
        p.add_argument(f"--{name}", type=int, default=default)
    p.add_argument("--seconds", type=float, default=1.0)
    p.add_argument("--csv", help="also write the table as CSV ('-' for stdout)")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the toy model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-model", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train the four local/global variants on the same data")
    p.add_argument("--toy", action="store_true")
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--train-count", type=int, default=32)
    p.add_argument("--val-count", type=int, default=8)
    p.add_argument("--test-count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("attn-dump", help="write one head's softmax matrices as CSV")
    p.add_argument("--checkpoint", help="model to inspect (default: freshly initialized toy model)")
    p.add_argument("--input", help="mixture WAV (default: one synthetic mixture)")
    p.add_argument("--block", type=int, default=0)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--layer", default="global", choices=["local", "global"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_attn_dump)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except GALRError as exc:
        print(f"error[{exc.kind}]: {exc}", file=sys.stderr)
        return 1 if exc.kind != "usage" else 2
    except OSError as exc:
        print(f"error[io]: {exc.strerror or exc}: {exc.filename or ''}".rstrip(": "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
