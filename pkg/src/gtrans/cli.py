"""Command-line entry point: ``gtrans {gen-data,train,translate,eval-bleu,analyze}``.

Exit codes: 0 ok, 2 usage or config error, 3 data error, 4 training diverged,
5 unreadable checkpoint.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .analysis import bleu4, gradient_csv, gradient_norm_report
from .checkpoint import CheckpointError, load_checkpoint
from .data import TASKS, DataError, Vocabulary, gen_synthetic, load_tsv, make_batches, write_tsv
from .inference import PruneError, PruneSpec, apply_prune, beam_search, parse_group_range
from .model import EOS_ID, ConfigError, ModelConfig, VocabError, build_model
from .training import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 2, 3, 4, 5
SCHEMA_VERSION = 1

logger = logging.getLogger("gtrans")


class UsageError(Exception):
    pass


# run configuration


@dataclasses.dataclass(kw_only=True)
class DataConfig:
    train: str | None = None
    valid: str | None = None
    valid_fraction: float = 0.1
    max_vocab: int | None = None


_MODEL_KEYS = [f.name for f in dataclasses.fields(ModelConfig) if f.name not in ("src_vocab", "tgt_vocab")]
_TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig) if f.name != "seed"]


def _defaults(cls) -> dict[str, Any]:
    return {f.name: f.default for f in dataclasses.fields(cls)
            if f.default is not dataclasses.MISSING}


def default_run_config() -> dict[str, Any]:
    """The full run-config document with every default filled in."""
    model = _defaults(ModelConfig)
    train_cfg = _defaults(TrainConfig)
    seed = train_cfg.pop("seed")
    train_cfg["betas"] = list(train_cfg["betas"])
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "model": {k: model[k] for k in _MODEL_KEYS},
        "train": train_cfg,
        "data": dataclasses.asdict(DataConfig()),
    }


def load_run_config(path: str | Path | None) -> dict[str, Any]:
    """Merge a JSON run config over the defaults, rejecting unknown keys."""
    cfg = default_run_config()
    if path is None:
        return cfg
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError([f"cannot read config {path}: {err}"]) from None
    if not isinstance(doc, dict):
        raise ConfigError(["config must be a JSON object"])
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError([f"schema_version {version} unsupported (expected {SCHEMA_VERSION})"])
    problems = [f"unknown top-level key {k!r}" for k in sorted(set(doc) - set(cfg))]
    for section in ("model", "train", "data"):
        part = doc.get(section, {})
        if not isinstance(part, dict):
            problems.append(f"section {section!r} must be an object")
            continue
        problems += [f"unknown {section} key {k!r}" for k in sorted(set(part) - set(cfg[section]))]
        cfg[section].update(part)
    if problems:
        raise ConfigError(problems)
    cfg["seed"] = doc.get("seed", cfg["seed"])
    return cfg


# argument parsing


def _model_flags(p: argparse.ArgumentParser) -> None:
    d = _defaults(ModelConfig)
    g = p.add_argument_group("model (flags override the config file)")
    g.add_argument("--enc-layers", type=int, help=f"encoder layers L_e (default: {d['enc_layers']})")
    g.add_argument("--dec-layers", type=int, help=f"decoder layers L_d (default: {d['dec_layers']})")
    g.add_argument("--enc-group", type=int, help=f"encoder layers per group T_e (default: {d['enc_group']})")
    g.add_argument("--dec-group", type=int, help=f"decoder layers per group T_d (default: {d['dec_group']})")
    g.add_argument("--d-model", type=int, help=f"model dimension (default: {d['d_model']})")
    g.add_argument("--ffn-dim", type=int, help=f"feed-forward dimension (default: {d['ffn_dim']})")
    g.add_argument("--heads", type=int, help=f"attention heads (default: {d['heads']})")
    g.add_argument("--dropout", type=float, help=f"dropout rate (default: {d['dropout']})")
    g.add_argument("--norm-style", choices=("post", "pre"), help=f"residual style (default: {d['norm_style']})")
    g.add_argument("--fusion", choices=("on", "off"), help="group fusion (default: on)")
    g.add_argument("--tau", type=float, help="probability-weight temperature (default: sqrt(d_model))")
    g.add_argument("--max-len", type=int, help=f"maximum sequence length (default: {d['max_len']})")


def _train_flags(p: argparse.ArgumentParser) -> None:
    d = _defaults(TrainConfig)
    g = p.add_argument_group("training (flags override the config file)")
    g.add_argument("--epochs", type=int, help=f"(default: {d['epochs']})")
    g.add_argument("--batch-tokens", type=int, help=f"padded target tokens per batch (default: {d['batch_tokens']})")
    g.add_argument("--warmup-steps", type=int, help=f"(default: {d['warmup_steps']})")
    g.add_argument("--lr-scale", type=float, help=f"multiplier on the warmup schedule (default: {d['lr_scale']})")
    g.add_argument("--clip-norm", type=float, help=f"global gradient-norm clip, 0 disables (default: {d['clip_norm']})")
    g.add_argument("--label-smoothing", type=float, help=f"(default: {d['label_smoothing']})")
    g.add_argument("--log-every", type=int, help=f"steps between gradient/weight logs (default: {d['log_every']})")
    g.add_argument("--seed", type=int, help=f"seed for init, dropout and shuffling (default: {d['seed']})")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="gtrans", description="Group-fusion Transformer toolkit",
                                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="write a synthetic parallel corpus", formatter_class=fmt)
    p.add_argument("task", choices=TASKS, help="target rule")
    p.add_argument("--vocab", type=int, default=20, help="vocabulary size including 4 reserved tokens")
    p.add_argument("--min-len", type=int, default=2)
    p.add_argument("--max-len", type=int, default=12)
    p.add_argument("--n", type=int, default=10000, help="number of pairs")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", default="-", help="output TSV path ('-' for stdout)")

    # train flags default to None so the config file can fill them; defaults are spelled out in help
    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON run config (schema_version, seed, model, train, data)")
    p.add_argument("--data", help="training TSV (overrides data.train)")
    p.add_argument("--valid", help="validation TSV (overrides data.valid)")
    p.add_argument("--valid-fraction", type=float, default=None,
                   help="held-out tail fraction when no validation file is given (default: 0.1)")
    p.add_argument("--out-dir", required=True, help="directory for checkpoints and logs")
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("translate", help="decode sentences with a checkpoint", formatter_class=fmt)
    p.add_argument("checkpoint")
    p.add_argument("input", help="one source sentence per line ('-' for stdin)")
    p.add_argument("--out", default="-", help="output path ('-' for stdout)")
    p.add_argument("--beam", type=int, default=8, help="beam width (1 = greedy)")
    p.add_argument("--length-penalty", type=float, default=1.0)
    p.add_argument("--max-len", type=int, default=None, help="generation limit; None means 2*src+10")
    p.add_argument("--encoder-keep", type=int, default=None, help="use only the bottom K encoder layers")
    p.add_argument("--decoder-groups", default=None, metavar="A:B",
                   help="mix only decoder groups A..B (1-based, inclusive)")

    p = sub.add_parser("eval-bleu", help="corpus BLEU-4 of hypotheses against references",
                       formatter_class=fmt)
    p.add_argument("hyp")
    p.add_argument("ref")

    p = sub.add_parser("analyze", help="per-layer gradient norms of a checkpoint on a corpus",
                       formatter_class=fmt)
    p.add_argument("checkpoint")
    p.add_argument("data", help="TSV corpus")
    p.add_argument("--batch-tokens", type=int, default=1024)
    p.add_argument("--label-smoothing", type=float, default=0.0)
    p.add_argument("--out", default="-", help="output CSV path ('-' for stdout)")
    return parser


# commands


def _write_text(path: str, text: str) -> None:
    if path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _read_lines(path: str) -> list[str]:
    try:
        if path == "-":
            return sys.stdin.read().splitlines()
        return Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from None


def cmd_gen_data(args) -> int:
    pairs = gen_synthetic(args.task, args.vocab, args.min_len, args.max_len, args.n, args.seed)
    vocab = Vocabulary.synthetic(args.vocab)
    if args.out == "-":
        for p in pairs:
            sys.stdout.write(" ".join(vocab.decode(p.src)) + "\t" + " ".join(vocab.decode(p.tgt)) + "\n")
    else:
        write_tsv(pairs, vocab, args.out)
    return EXIT_OK


def _apply_overrides(cfg: dict, args) -> None:
    for key in _MODEL_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            cfg["model"][key] = (value == "on") if key == "fusion" else value
    for key in _TRAIN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            cfg["train"][key] = value
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.data is not None:
        cfg["data"]["train"] = args.data
    if args.valid is not None:
        cfg["data"]["valid"] = args.valid
    if args.valid_fraction is not None:
        cfg["data"]["valid_fraction"] = args.valid_fraction


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    _apply_overrides(cfg, args)
    data_cfg = DataConfig(**cfg["data"])
    train_dict = dict(cfg["train"], seed=cfg["seed"])
    train_dict["betas"] = tuple(train_dict["betas"])
    train_cfg = TrainConfig.from_dict(train_dict).validate()
    # schema checks on the model section run before touching any data
    ModelConfig.from_dict(dict(cfg["model"], src_vocab=5, tgt_vocab=5)).validate()
    if data_cfg.train is None:
        raise UsageError("no training data: pass --data or set data.train")
    pairs, vocab = load_tsv(data_cfg.train, cfg["model"]["max_len"], max_vocab=data_cfg.max_vocab)
    if data_cfg.valid is not None:
        valid, _ = load_tsv(data_cfg.valid, cfg["model"]["max_len"], vocab=vocab)
        train_pairs = pairs
    else:
        if not 0 < data_cfg.valid_fraction < 1:
            raise ConfigError(["data.valid_fraction must be in (0, 1)"])
        cut = len(pairs) - max(1, round(len(pairs) * data_cfg.valid_fraction))
        if cut < 1:
            raise DataError("corpus too small to hold out a validation split")
        train_pairs, valid = pairs[:cut], pairs[cut:]
    model_cfg = ModelConfig.from_dict(dict(cfg["model"], src_vocab=len(vocab), tgt_vocab=len(vocab)))
    model = build_model(model_cfg.validate(), seed=cfg["seed"])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    result = train(model, train_pairs, valid, train_cfg, out_dir=out, vocab=vocab)
    if result.diverged:
        d = result.divergence
        print(f"training diverged at step {d.step}: {d.reason}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _prune_from_args(args) -> PruneSpec:
    groups = parse_group_range(args.decoder_groups) if args.decoder_groups is not None else None
    return PruneSpec(encoder_keep=args.encoder_keep, decoder_groups=groups)


def cmd_translate(args) -> int:
    if args.beam < 1:
        raise UsageError("--beam must be >= 1")
    prune = _prune_from_args(args)
    model, _, tokens = load_checkpoint(args.checkpoint)
    if tokens is None:
        raise CheckpointError(f"{args.checkpoint}: checkpoint carries no vocabulary")
    vocab = Vocabulary(tokens)
    view = apply_prune(model, prune)
    out = []
    for lineno, line in enumerate(_read_lines(args.input), 1):
        ids = vocab.encode(line.split()) + [EOS_ID]
        if len(ids) > model.config.max_len:
            raise DataError(f"{args.input}:{lineno}: sentence longer than max_len {model.config.max_len}")
        hyp = beam_search(view, ids, width=args.beam, max_len=args.max_len,
                          length_penalty=args.length_penalty)
        out.append(" ".join(vocab.decode(hyp.tokens)) + "\n")
    _write_text(args.out, "".join(out))
    return EXIT_OK


def cmd_eval_bleu(args) -> int:
    hyps, refs = _read_lines(args.hyp), _read_lines(args.ref)
    if len(hyps) != len(refs):
        raise DataError(f"line count mismatch: {args.hyp} has {len(hyps)} lines, "
                        f"{args.ref} has {len(refs)}")
    report = bleu4([h.split() for h in hyps], [r.split() for r in refs])
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_analyze(args) -> int:
    model, _, tokens = load_checkpoint(args.checkpoint)
    if tokens is None:
        raise CheckpointError(f"{args.checkpoint}: checkpoint carries no vocabulary")
    pairs, _ = load_tsv(args.data, model.config.max_len, vocab=Vocabulary(tokens))
    batches = make_batches(pairs, args.batch_tokens, shuffle=False)
    reports = [gradient_norm_report(model, b, label_smoothing=args.label_smoothing, step=i)
               for i, b in enumerate(batches, 1)]
    _write_text(args.out, gradient_csv(reports, model.config.enc_layers, model.config.dec_layers))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "translate": cmd_translate,
    "eval-bleu": cmd_eval_bleu,
    "analyze": cmd_analyze,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, PruneError, ConfigError) as err:
        parser.exit(EXIT_USAGE, f"gtrans {args.command}: error: {err}\n")
    except (DataError, VocabError) as err:
        print(f"gtrans {args.command}: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as err:
        print(f"gtrans {args.command}: checkpoint error: {err}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except FileNotFoundError as err:
        print(f"gtrans {args.command}: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
