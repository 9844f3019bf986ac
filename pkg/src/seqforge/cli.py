"""``seqforge`` command line: train, generate, score.

Structured output is one ``key=value`` line per event on stdout. Diagnostics
go to stderr through :mod:`logging`, at the level named by ``SEQFORGE_LOG``.

Exit status: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from seqforge.checkpoint import CheckpointError
from seqforge.data import PAD, collate, encode, make_batches, make_pairs, read_lines
from seqforge.distributed.scaler import DivergenceError
from seqforge.generation import format_hypothesis, generate
from seqforge.models.transformer import CapacityError
from seqforge.numerics.ops import log_softmax_array
from seqforge.numerics.rng import RngStream, derive_stream_id
from seqforge.registry import USER, ConfigError, UnknownComponent, _coerce, parse_config_text
from seqforge.session import TrainingSession, gen_config, load_inference_model, resolve_training_config

logger = logging.getLogger("seqforge")

USAGE, RUNTIME = 1, 2

# flag -> (config key, type); booleans are switches
FLAGS: dict[str, tuple[str, type]] = {
    "--seed": ("seed", int),
    "--arch": ("arch", str),
    "--max-tokens": ("max_tokens", int),
    "--max-sentences": ("max_sentences", int),
    "--workers": ("workers", int),
    "--accum": ("accum", int),
    "--fp16": ("fp16", bool),
    "--lr": ("lr", float),
    "--scheduler": ("scheduler", str),
    "--warmup": ("warmup", int),
    "--criterion": ("criterion", str),
    "--label-smoothing": ("label_smoothing", float),
    "--max-steps": ("max_steps", int),
    "--max-epochs": ("max_epochs", int),
    "--save-interval": ("save_interval", int),
    "--save-dir": ("save_dir", str),
    "--beam": ("beam", int),
    "--lenpen": ("lenpen", float),
    "--diverse-groups": ("diverse_groups", int),
    "--diverse-strength": ("diverse_strength", float),
    "--sampling": ("sampling", bool),
    "--topk": ("topk", int),
    "--temperature": ("temperature", float),
    "--max-len": ("max_len", int),
    "--nbest": ("nbest", int),
}

SAMPLING_STREAM = derive_stream_id(0x5A4D, 0x1E)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seqforge", description="Train and decode sequence-to-sequence models.")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", help="file of 'key = value' lines; flags override it")
        for flag, (key, typ) in FLAGS.items():
            if typ is bool:
                sp.add_argument(flag, dest=key, action="store_true", default=None)
            else:
                sp.add_argument(flag, dest=key, type=typ, default=None)

    t = sub.add_parser("train", help="train a model on DATA/train.{src,tgt}")
    t.add_argument("data", help="directory with train.src/train.tgt (and optional valid.src/valid.tgt)")
    common(t)
    g = sub.add_parser("generate", help="decode one source sentence per input line")
    g.add_argument("checkpoint")
    g.add_argument("input")
    common(g)
    s = sub.add_parser("score", help="per-line NLL per token and corpus perplexity")
    s.add_argument("checkpoint")
    s.add_argument("source")
    s.add_argument("reference")
    common(s)
    return p


def _user_values(args) -> dict:
    values: dict = {}
    if args.config:
        try:
            values.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
        except OSError as e:
            raise ConfigError(f"cannot read config file {args.config}: {e.strerror}") from e
    for key, _ in FLAGS.values():
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return values


def emit(out, **fields) -> None:
    parts = []
    for k, v in fields.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        parts.append(f"{k}={v}")
    print(" ".join(parts), file=out, flush=True)


# -- train ---------------------------------------------------------------------


def cmd_train(args, out) -> int:
    data = Path(args.data)
    for name in ("train.src", "train.tgt"):
        if not (data / name).is_file():
            logger.error("missing corpus file %s", data / name)
            print(f"error: missing corpus file {data / name}", file=sys.stderr)
            return RUNTIME
    user = _user_values(args)
    user["data"] = str(data)
    cfg = resolve_training_config(user)
    session = TrainingSession(cfg)
    save_dir = Path(cfg["save_dir"])
    save_dir.mkdir(parents=True, exist_ok=True)
    emit(out, event="start", arch=cfg["arch"], params=session.model.num_params(),
         batches=len(session.iterator.plan), workers=cfg["workers"], accum=cfg["accum"], fp16=cfg["fp16"])
    t0 = time.perf_counter()
    while session.step < cfg["max_steps"] and session.epoch <= cfg["max_epochs"]:
        epoch = session.epoch
        log = session.train_step()
        emit(out, step=log.step + 1, epoch=epoch, loss=log.loss_per_token(), lr=log.lr, ntokens=log.ntokens,
             scale=log.scale, skipped=int(log.skipped), wall=round(time.perf_counter() - t0, 3))
        if cfg["save_interval"] > 0 and session.step % cfg["save_interval"] == 0:
            path = session.save(save_dir / f"checkpoint_{session.step}.sqfg")
            emit(out, event="save", step=session.step, path=path)
    path = session.save(save_dir / "checkpoint_last.sqfg")
    emit(out, event="save", step=session.step, path=path)
    if session.task.pairs("valid"):
        ev = session.evaluate()
        emit(out, event="valid", step=session.step, accuracy=ev["accuracy"], nll=ev["nll"], ntokens=ev["ntokens"])
    emit(out, event="done", step=session.step, epoch=session.epoch)
    return 0


# -- generate / score ------------------------------------------------------------


def _inference_config(state_cfg, user: dict):
    unknown = sorted(set(user) - set(state_cfg.keys()))
    if unknown:
        raise ConfigError(f"unknown config key(s): {unknown}")
    return state_cfg.updated({k: _coerce(v, state_cfg[k]) for k, v in user.items()}, USER)


def _read_text_lines(path) -> list[list[str]]:
    try:
        return read_lines(path)
    except FileNotFoundError as e:
        raise FileNotFoundError(f"no such file: {path}") from e


def cmd_generate(args, out) -> int:
    user = _user_values(args)
    fp16 = bool(user.pop("fp16", False))
    model, src_dict, tgt_dict, state = load_inference_model(args.checkpoint, fp16=fp16)
    cfg = _inference_config(state.config, user)
    gcfg = gen_config(cfg)
    lines = _read_text_lines(args.input)
    sources = [encode(src_dict, toks) for toks in lines]
    if cfg["sampling"]:
        search = "sample"
    elif gcfg.groups > 1:
        search = "diverse"
    else:
        search = "beam"
    rng = RngStream(int(cfg["seed"]), SAMPLING_STREAM)
    results = generate(model, sources, gcfg, search, rng)
    for i, nbest in enumerate(results):
        for hyp in nbest[: max(1, int(cfg["nbest"]))]:
            print(format_hypothesis(i, hyp, tgt_dict), file=out)
    out.flush()
    return 0


def cmd_score(args, out) -> int:
    user = _user_values(args)
    fp16 = bool(user.pop("fp16", False))
    model, src_dict, tgt_dict, state = load_inference_model(args.checkpoint, fp16=fp16)
    cfg = _inference_config(state.config, user)
    src = _read_text_lines(args.source)
    ref = _read_text_lines(args.reference)
    if len(src) != len(ref):
        print(f"error: {args.source} has {len(src)} lines but {args.reference} has {len(ref)}", file=sys.stderr)
        return RUNTIME
    if not src:
        print("error: perplexity is undefined for an empty corpus", file=sys.stderr)
        return RUNTIME
    pairs = make_pairs(src_dict, tgt_dict, src, ref)
    nll = np.zeros(len(pairs))
    ntok = np.zeros(len(pairs), dtype=np.int64)
    plan = make_batches(pairs, int(cfg["max_tokens"]))
    for members in plan.batches:
        batch = collate(pairs, members)
        lp = log_softmax_array(model.forward(batch).data)
        gold = batch.target_out
        picked = np.take_along_axis(lp, gold[..., None], axis=-1)[..., 0]
        live = gold != PAD
        for r, idx in enumerate(batch.indices):
            nll[idx] = -float(picked[r][live[r]].sum())
            ntok[idx] = int(live[r].sum())
    for i in range(len(pairs)):
        print(f"{i}\t{nll[i] / ntok[i]:.6f}", file=out)
    total = float(nll.sum()) / int(ntok.sum())
    emit(out, event="score", lines=len(pairs), ntokens=int(ntok.sum()), nll=total, perplexity=math.exp(total))
    return 0


COMMANDS = {"train": cmd_train, "generate": cmd_generate, "score": cmd_score}


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = out or sys.stdout
    level = os.environ.get("SEQFORGE_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.verb](args, out)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return USAGE
    except (ConfigError, UnknownComponent) as e:
        print(f"config error: {e}", file=sys.stderr)
        return USAGE
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return RUNTIME
    except (CapacityError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME


if __name__ == "__main__":
    sys.exit(main())
