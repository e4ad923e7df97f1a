"""Command-line entry point: gen-data, train, eval, decode, stream, inspect-routing."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import config as cfgmod
from . import experiment as ex
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .data import Corpus, generate_corpus, read_corpus, switch_rate, write_corpus
from .encoder import ChunkSpec
from .model import NumericError, ModelConfig, streaming_decode

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("scmoe")


class DataError(RuntimeError):
    pass


def emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _corpus(cfg: RunConfig) -> Corpus:
    root = Path(cfg.data.corpus_dir)
    if not (root / "manifest.json").exists():
        raise DataError(f"no corpus at {root} (run gen-data first)")
    try:
        return read_corpus(root)
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"cannot read corpus at {root}: {e}") from e


def _check_compat(model_cfg: ModelConfig, corpus: Corpus) -> None:
    if model_cfg.input_dim != corpus.spec.feature_dim:
        raise ConfigError(f"model expects {model_cfg.input_dim}-dim features, corpus has {corpus.spec.feature_dim}")
    if model_cfg.vocab_size != corpus.spec.vocab_size:
        raise ConfigError(f"model vocabulary {model_cfg.vocab_size} != corpus vocabulary {corpus.spec.vocab_size}")


def _load_checkpoint(path, cfg: RunConfig):
    if path is None:
        raise ConfigError("--checkpoint is required")
    if not Path(path).exists():
        raise DataError(f"checkpoint {path} not found")
    try:
        model, meta = ex.load_model(path)
    except CheckpointError as e:
        raise DataError(str(e)) from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"checkpoint config rejected: {e}") from e
    if asdict(model.config) != asdict(cfg.model):
        diff = sorted(k for k, v in asdict(cfg.model).items() if asdict(model.config)[k] != v)
        raise ConfigError(f"checkpoint model differs from the run config in: {', '.join(diff)}")
    return model, meta


def _spec(cfg: RunConfig, args) -> ChunkSpec:
    chunk = cfg.decode.chunk if args.chunk is None else args.chunk
    left = cfg.decode.left_chunks if args.left_chunks is None else args.left_chunks
    try:
        return ChunkSpec(chunk, left)
    except ValueError as e:
        raise ConfigError(str(e)) from e


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: RunConfig, args) -> int:
    d = cfg.data
    corpus = generate_corpus(d.spec, d.n_train, d.n_dev, d.n_test, d.switch_prob, d.seed)
    try:
        manifest = write_corpus(corpus, d.corpus_dir)
    except OSError as e:
        raise DataError(f"cannot write corpus to {d.corpus_dir}: {e}") from e
    emit({
        "corpus_dir": str(d.corpus_dir),
        "counts": {k: v["count"] for k, v in manifest["splits"].items()},
        "sha256": {k: v["sha256"] for k, v in manifest["splits"].items()},
        "switch_prob": d.switch_prob,
        "switch_rate": {k: switch_rate(corpus.split(k)) for k in ("train", "dev", "test")},
        "tokens": {k: sum(len(u.tokens) for u in corpus.split(k)) for k in ("train", "dev", "test")},
    })
    return EXIT_OK


def run_dir_for(cfg: RunConfig, explicit: str | None) -> Path:
    if explicit:
        path = Path(explicit)
    else:
        path = Path(cfg.output_dir) / f"{cfg.digest()}-{time.strftime('%Y%m%d-%H%M%S')}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_train(cfg: RunConfig, args) -> int:
    corpus = _corpus(cfg)
    _check_compat(cfg.model, corpus)
    run = run_dir_for(cfg, args.run_dir)
    (run / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    if args.resume:
        try:
            state = ex.load_state(args.resume, cfg.optim, expect=cfg.model)
        except CheckpointError as e:
            raise ConfigError(f"cannot resume from {args.resume}: {e}") from e
        log.info("resumed from %s at step %d", args.resume, state.opt.step_count)
    else:
        state = ex.new_state(cfg.model, cfg.optim, cfg.seed)
        if cfg.train.init_from:
            try:
                filled = ex.init_from_checkpoint(state.model, cfg.train.init_from)
            except (OSError, CheckpointError) as e:
                raise ConfigError(f"cannot initialize from {cfg.train.init_from}: {e}") from e
            log.info("initialized %d tensors from %s", len(filled), cfg.train.init_from)
    metrics = run / "metrics.jsonl"

    def on_step(rec):
        ex.write_jsonl(metrics, rec)
        if "dev_loss" in rec:
            log.info("step %d loss %.4f dev %.4f", rec["step"], rec["total"], rec["dev_loss"])

    ex.train(state, corpus, cfg.optim, cfg.weights, cfg.train.chunk_policy, cfg.train.eval_every,
             cfg.train.checkpoint_every, run, on_step)
    emit({"run_dir": str(run), "steps": state.opt.step_count,
          "final_loss": state.history[-1]["total"] if state.history else None,
          "best_dev_loss": state.best_dev if state.best_dev != float("inf") else None})
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    model, _ = _load_checkpoint(args.checkpoint, cfg)
    corpus = _corpus(cfg)
    _check_compat(model.config, corpus)
    report = ex.evaluate(model, corpus, args.split or cfg.decode.split, _spec(cfg, args), cfg.decode.beam,
                         cfg.decode_weights)
    emit(report)
    return EXIT_OK


def cmd_decode(cfg: RunConfig, args) -> int:
    from .model import decode_batch

    model, _ = _load_checkpoint(args.checkpoint, cfg)
    corpus = _corpus(cfg)
    _check_compat(model.config, corpus)
    if args.utt:
        try:
            utts = [corpus.find(u) for u in args.utt]
        except KeyError as e:
            raise DataError(f"unknown utterance id {e}") from e
    else:
        utts = corpus.split(args.split or cfg.decode.split)
    results = decode_batch(model, utts, _spec(cfg, args), cfg.decode.beam, cfg.decode_weights)
    for u, r in zip(utts, results):
        print(json.dumps({"id": u.id, "hyp": r.tokens, "ref": u.tokens, "fused_score": r.best.fused_score,
                          "ctc_score": r.best.ctc_score, "l2r_score": r.best.l2r_score,
                          "r2l_score": r.best.r2l_score}, sort_keys=True))
    return EXIT_OK


def cmd_stream(cfg: RunConfig, args) -> int:
    model, _ = _load_checkpoint(args.checkpoint, cfg)
    corpus = _corpus(cfg)
    _check_compat(model.config, corpus)
    if not args.utt:
        raise ConfigError("stream needs --utt ID")
    try:
        utt = corpus.find(args.utt[0])
    except KeyError as e:
        raise DataError(f"unknown utterance id {e}") from e
    spec = _spec(cfg, args)
    partials, final = streaming_decode(model, utt.features, spec, cfg.decode.beam, cfg.decode_weights)
    step = spec.chunk_size * model.config.subsampling if not spec.is_full else len(utt.features)
    for i, partial in enumerate(partials, start=1):
        print(json.dumps({"chunk": i, "end_frame": min(i * step, len(utt.features)), "partial": partial}))
    print(json.dumps({"final": final.tokens, "fused_score": final.best.fused_score, "id": utt.id}))
    return EXIT_OK


def cmd_inspect_routing(cfg: RunConfig, args) -> int:
    model, _ = _load_checkpoint(args.checkpoint, cfg)
    corpus = _corpus(cfg)
    _check_compat(model.config, corpus)
    stats = ex.inspect_routing(model, corpus.split(args.split or cfg.decode.split), _spec(cfg, args))
    emit(stats)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "decode": cmd_decode,
    "stream": cmd_stream,
    "inspect-routing": cmd_inspect_routing,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field by dotted path, e.g. optim.steps=100")
    common.add_argument("--checkpoint")
    common.add_argument("--chunk", type=int, help="decoding chunk size (-1 = full context)")
    common.add_argument("--left-chunks", type=int, help="left chunks of history (-1 = unlimited)")
    common.add_argument("--split", choices=["train", "dev", "test"])
    common.add_argument("--utt", action="append", help="utterance id (repeatable)")
    common.add_argument("--run-dir", help="train: write here instead of <output_dir>/<hash>-<time>")
    common.add_argument("--resume", help="train: continue from this checkpoint")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="scmoe", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = cfgmod.load(args.config, args.set)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
