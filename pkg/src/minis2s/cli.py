"""Command line front end.

Subcommands cover the whole loop: gen-data, train, decode, eval,
avg-ckpt, synth, report. Exit codes: 0 success, 1 configuration or
usage error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .config import (dump_experiment_config, load_experiment_config,
                     load_toy_spec)
from .data import (Vocab, gen_toy, load_dataset, save_dataset, toy_vocab,
                   write_feature_file)
from .decoding import beam_search
from .errors import ConfigError, DataError, NumericError
from .metrics import bleu, cer, wer
from .models import RnnLm, build_model
from .training import (LOG_COLUMNS, average_checkpoints, load_checkpoint,
                       load_into_model, save_checkpoint, train_lm, train_loop)


def _emit(lines: List[str], out_path: Optional[str]) -> None:
    text = "\n".join(lines) + ("\n" if lines else "")
    if out_path is None:
        sys.stdout.write(text)
    else:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise DataError(f"no such {what}: {path}")
    return path


def cmd_gen_data(args) -> int:
    spec = load_toy_spec(args.spec)
    splits = gen_toy(spec)
    vocab = toy_vocab(spec)
    save_dataset(args.out, splits, vocab)
    counts = ", ".join(f"{k}={len(v)}" for k, v in splits.items())
    print(f"wrote {spec.task} dataset to {args.out} ({counts})")
    return 0


def _train_language_model(cfg, args) -> int:
    utts, vocab = load_dataset(args.data, "train")
    sequences = [list(u.tokens) for u in utts]
    lm = RnnLm(len(vocab), d_lm=cfg.model.d_att, seed=cfg.model.seed)
    losses = train_lm(lm, sequences, epochs=cfg.train.epochs,
                      seed=cfg.train.seed)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "lm.esc"), lm,
                    epoch=cfg.train.epochs)
    vocab.save(os.path.join(args.out, "vocab.txt"))
    with open(os.path.join(args.out, "model.cfg"), "w",
              encoding="utf-8") as fh:
        fh.write(dump_experiment_config(cfg))
    print(f"lm loss: {losses[0]:.4f} -> {losses[-1]:.4f} "
          f"over {len(losses)} epochs")
    print(f"wrote {os.path.join(args.out, 'lm.esc')}")
    return 0


def cmd_train(args) -> int:
    cfg = load_experiment_config(args.config)
    if cfg.model.task == "lm":
        return _train_language_model(cfg, args)
    train_utts, vocab = load_dataset(args.data, "train")
    dev_utts, _ = load_dataset(args.data, "dev", vocab=vocab)
    if not train_utts:
        raise DataError("empty training split")
    # resolve data-dependent sizes before the snapshot is written
    cfg.model.vocab_size = len(vocab)
    cfg.model.feat_dim = int(train_utts[0].feats.shape[1])
    model = build_model(cfg.model)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "model.cfg"), "w",
              encoding="utf-8") as fh:
        fh.write(dump_experiment_config(cfg))
    vocab.save(os.path.join(args.out, "vocab.txt"))
    result = train_loop(model, train_utts, dev_utts, cfg.train, args.out)
    print(f"trained {len(result.ckpt_paths)} epochs; "
          f"dev loss {result.dev_losses[0]:.4f} -> {result.dev_losses[-1]:.4f}")
    if result.stopped_early:
        print("stopped early")
    print(f"averaged checkpoint: {result.avg_path}")
    return 0


def _load_model_from(ckpt_path: str, config_override: Optional[str]):
    _require_file(ckpt_path, "checkpoint")
    ckpt_dir = os.path.dirname(os.path.abspath(ckpt_path))
    cfg_path = config_override or os.path.join(ckpt_dir, "model.cfg")
    cfg = load_experiment_config(cfg_path)
    model = build_model(cfg.model)
    load_into_model(model, load_checkpoint(ckpt_path))
    model.eval()
    vocab_path = os.path.join(ckpt_dir, "vocab.txt")
    vocab = Vocab.load(vocab_path) if os.path.isfile(vocab_path) else None
    return model, cfg, vocab


def _load_lm(path: str) -> RnnLm:
    _require_file(path, "language model checkpoint")
    ckpt = load_checkpoint(path)
    if "embed.table" not in ckpt.params:
        raise DataError(f"{path} is not a language model checkpoint")
    vocab_size, d_lm = ckpt.params["embed.table"].shape
    lm = RnnLm(int(vocab_size), d_lm=int(d_lm), seed=0)
    load_into_model(lm, ckpt)
    lm.eval()
    return lm


def cmd_decode(args) -> int:
    model, cfg, vocab = _load_model_from(args.ckpt, args.config)
    if model.config.task == "tts":
        raise ConfigError("decode handles recognition and translation; "
                          "use synth for tts checkpoints")
    if vocab is None:
        raise DataError("no vocab.txt beside the checkpoint")
    if args.beam is not None:
        cfg.beam.beam_size = args.beam
    if args.lam is not None:
        cfg.beam.lam = args.lam
    if args.gamma is not None:
        cfg.beam.gamma = args.gamma
    cfg.beam.validate()
    lm = _load_lm(args.lm) if args.lm else None
    utts, _ = load_dataset(args.data, args.split, vocab=vocab)
    lines = []
    for utt in utts:
        with T.no_grad(), T.Graph(seed=0):
            enc = model.encode(T.Tensor(utt.feats))
            result = beam_search(enc, model, lm=lm, config=cfg.beam)
        ranked = result.nbest[:args.nbest] if args.nbest > 1 else [result.best]
        for hyp in ranked:
            text = " ".join(vocab.decode(list(hyp.tokens)))
            lines.append(f"{utt.utt_id}\t{text}\t{hyp.combined!r}")
    _emit(lines, args.out)
    if args.out is not None:
        print(f"decoded {len(utts)} utterances to {args.out}")
    return 0


def _read_hyp_file(path: str) -> Dict[str, str]:
    _require_file(path, "transcript file")
    out: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise DataError(f"{path} line {line_no}: expected "
                                "utt_id<TAB>text")
            if parts[0] in out:
                raise DataError(f"{path} line {line_no}: duplicate id "
                                f"{parts[0]!r}")
            out[parts[0]] = parts[1]
    if not out:
        raise DataError(f"{path} holds no transcripts")
    return out


def cmd_eval(args) -> int:
    refs = _read_hyp_file(args.ref)
    hyps = _read_hyp_file(args.hyp)
    if set(refs) != set(hyps):
        missing = sorted(set(refs) ^ set(hyps))[:5]
        raise DataError(f"utterance ids differ between ref and hyp "
                        f"(first few: {missing})")
    ids = sorted(refs)
    ref_list = [refs[i] for i in ids]
    hyp_list = [hyps[i] for i in ids]
    fn = {"wer": wer, "cer": cer, "bleu": bleu}[args.metric]
    value = fn(ref_list, hyp_list)
    print(f"{args.metric} = {float(value)!r}")
    return 0


def cmd_avg_ckpt(args) -> int:
    for path in args.inputs:
        _require_file(path, "checkpoint")
    ckpt = average_checkpoints(args.inputs)
    save_checkpoint(args.out, ckpt.params, epoch=ckpt.epoch)
    print(f"averaged {len(args.inputs)} checkpoints into {args.out}")
    return 0


def cmd_synth(args) -> int:
    model, cfg, vocab = _load_model_from(args.ckpt, args.config)
    if model.config.task != "tts":
        raise ConfigError("synth needs a tts checkpoint")
    if vocab is None:
        raise DataError("no vocab.txt beside the checkpoint")
    tokens = args.text.split()
    if not tokens:
        raise DataError("empty input text")
    ids = vocab.encode(tokens)
    frames, reason = model.infer(ids, eos_threshold=args.eos_threshold,
                                 max_frames=args.max_frames,
                                 seed=cfg.model.seed)
    write_feature_file(args.out, np.asarray(frames))
    print(f"wrote {frames.shape[0]} frames to {args.out} (stop={reason})")
    return 0


def cmd_report(args) -> int:
    _require_file(args.log, "training log")
    with open(args.log, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LOG_COLUMNS:
            raise DataError(f"{args.log} is not a training log "
                            f"(columns {reader.fieldnames})")
        rows = list(reader)
    if not rows:
        raise DataError(f"{args.log} holds no steps")
    totals = [float(r["total"]) for r in rows]
    best = min(range(len(totals)), key=lambda i: totals[i])
    print(f"steps: {len(rows)}  epochs: {rows[-1]['epoch']}")
    print(f"total loss: first {totals[0]:.6f}  last {totals[-1]:.6f}  "
          f"min {totals[best]:.6f} (step {rows[best]['step']})")
    if args.per_epoch:
        by_epoch: Dict[str, List[float]] = {}
        for r in rows:
            by_epoch.setdefault(r["epoch"], []).append(float(r["total"]))
        print("epoch  steps  mean_total")
        for epoch in sorted(by_epoch, key=int):
            vals = by_epoch[epoch]
            print(f"{epoch:>5}  {len(vals):>5}  {sum(vals)/len(vals):.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="minis2s",
        description="speech sequence-to-sequence toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a toy dataset")
    p.add_argument("--spec", required=True, help="toy spec config file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="beam-search decode a split")
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test")
    p.add_argument("--config", default=None,
                   help="override the model.cfg beside the checkpoint")
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="attention/ctc interpolation weight")
    p.add_argument("--gamma", type=float, default=None,
                   help="language model fusion weight")
    p.add_argument("--lm", default=None, help="language model checkpoint")
    p.add_argument("--nbest", type=int, default=1)
    p.add_argument("--out", default=None, help="hypothesis file (stdout "
                   "when omitted)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="score hypotheses against references")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--metric", required=True, choices=("wer", "cer", "bleu"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("avg-ckpt", help="average checkpoints")
    p.add_argument("--out", required=True)
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_avg_ckpt)

    p = sub.add_parser("synth", help="synthesize features from text")
    p.add_argument("--ckpt", required=True, help="tts checkpoint")
    p.add_argument("--text", required=True, help="space separated tokens")
    p.add_argument("--out", required=True, help="output feature file")
    p.add_argument("--config", default=None)
    p.add_argument("--eos-threshold", type=float, default=0.5)
    p.add_argument("--max-frames", type=int, default=400)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="summarize a training log")
    p.add_argument("--log", required=True, help="training CSV log")
    p.add_argument("--per-epoch", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        # unreadable/unwritable paths surface here, not as DataError
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
