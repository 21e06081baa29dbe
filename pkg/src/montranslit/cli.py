"""Command-line pipeline: train, convert, eval and sweep.

Configs are flat ``key = value`` files with ``#`` comments; every key is
validated against the chosen model kind and unknown keys are rejected.
Checkpoints carry the direction and model kind, so convert/eval need no
redundant flags.  Exit codes are a stable contract: 0 success, 2 config
error, 3 data error, 4 training or checkpoint failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import codec, joint_ngram, training
from .codec import CodecError, encode_ids
from .corpus import Corpus, SplitSpec, build_vocabulary, parse_corpus, split_corpus
from .decoding import BeamConfig, beam_decode, default_max_len, greedy_decode
from .joint_ngram import DecodeFailure, decode_joint
from .metrics import DuplicateLabel, evaluate, sweep_report
from .rnn import RnnConfig, RnnModel
from .transformer import TransformerConfig, TransformerModel

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4

MODEL_KINDS = ("joint", "rnn", "rnn_att", "transformer")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


COMMON_DEFAULTS: dict = {
    "direction": "C2T",
    "model": "joint",
    "seed": 0,
    "corpus": "",
    "table": "",
    "checkpoint": "",
    "report": "",
    "train_count": 0,
    "test_count": 0,
    "batch_size": 32,
    "batch_unit": "sequences",
    "eval_every": 0,
    "beam_width": 1,
}

KIND_DEFAULTS: dict[str, dict] = {
    "joint": {
        "ngram_order": 3,
        "em_iterations": 10,
        "discount": 0.5,
        "trim_min_count": 1.0,
        "prune_eps": 1e-6,
        "max_graphone_source": 2,
        "max_graphone_target": 2,
        "allow_epsilon": True,
        "decode_max_expand": 100_000,
    },
    "rnn": {
        "embed_dim": 128,
        "hidden_units": 512,
        "layers": 1,
        "dropout": 0.0,
        "epochs": 100,
        "learning_rate": 5e-4,
        "decay_factor": 0.9,
        "decay_every_epochs": 20,
        "grad_clip": 5.0,
        "stop_at_train_wer": -1.0,
    },
    "transformer": {
        "d_model": 128,
        "heads": 2,
        "layers": 2,
        "ffn_dim": 0,
        "dropout": 0.0,
        "train_steps": 100_000,
        "learning_rate": 0.2,
        "warmup_steps": 8000,
        "grad_clip": 5.0,
        "label_smoothing": 0.0,
        "stop_at_train_wer": -1.0,
    },
}
KIND_DEFAULTS["rnn_att"] = dict(KIND_DEFAULTS["rnn"])


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _convert_value(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from exc


def resolve_config(raw: dict[str, str]) -> dict:
    """Merge defaults with file values, rejecting unknown keys."""
    kind = raw.get("model", COMMON_DEFAULTS["model"])
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}")
    merged = dict(COMMON_DEFAULTS)
    merged["model"] = kind
    merged.update(KIND_DEFAULTS[kind])
    for key, value in raw.items():
        if key not in merged:
            raise ConfigError(f"unknown config key {key!r} for model {kind!r}")
        merged[key] = _convert_value(key, value, merged[key])
    if merged["direction"] not in ("C2T", "T2C"):
        raise ConfigError(f"direction must be C2T or T2C, got {merged['direction']!r}")
    return merged


def _load_table(path_str: str):
    path = Path(path_str) if path_str else codec.default_table_path()
    if not path.exists():
        raise DataError(f"table file not found: {path}")
    return codec.load_table(path.read_text(encoding="utf-8"))


def _load_corpus(path_str: str, direction: str, table) -> Corpus:
    if not path_str:
        raise DataError("no corpus file given")
    path = Path(path_str)
    if not path.exists():
        raise DataError(f"corpus file not found: {path}")
    try:
        corpus = parse_corpus(path.read_text(encoding="utf-8"), direction, table)
    except CodecError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not len(corpus):
        raise DataError(f"{path}: corpus is empty")
    return corpus


def _split(corpus: Corpus, cfg: dict) -> tuple[Corpus, Corpus | None]:
    if cfg["train_count"] and cfg["test_count"]:
        from .corpus import SplitSizeError

        try:
            return split_corpus(
                corpus, SplitSpec(cfg["train_count"], cfg["test_count"], cfg["seed"])
            )
        except SplitSizeError as exc:
            raise DataError(str(exc)) from exc
    return corpus, None


def _build_neural_model(cfg: dict, n_src: int, n_tgt: int, rng):
    if cfg["model"] in ("rnn", "rnn_att"):
        model_cfg = RnnConfig(
            embed_dim=cfg["embed_dim"],
            hidden_units=cfg["hidden_units"],
            layers=cfg["layers"],
            attention=cfg["model"] == "rnn_att",
            dropout=cfg["dropout"],
        )
        return RnnModel(model_cfg, n_src, n_tgt, rng)
    model_cfg = TransformerConfig(
        d_model=cfg["d_model"],
        heads=cfg["heads"],
        layers=cfg["layers"],
        ffn_dim=cfg["ffn_dim"],
        dropout=cfg["dropout"],
        label_smoothing=cfg["label_smoothing"],
    )
    return TransformerModel(model_cfg, n_src, n_tgt, rng)


def _train_one(cfg: dict, corpus: Corpus, test_corpus: Corpus | None, checkpoint: str):
    """Train per config and persist to ``checkpoint``; returns a report."""
    if not checkpoint:
        raise ConfigError("no checkpoint path given")
    if cfg["model"] == "joint":
        align = joint_ngram.em_train(
            corpus,
            cfg["max_graphone_source"],
            cfg["max_graphone_target"],
            cfg["em_iterations"],
            cfg["prune_eps"],
            cfg["allow_epsilon"],
        )
        sequences = [
            joint_ngram.viterbi_segment(s, t, align) for s, t in corpus.pairs()
        ]
        lm = joint_ngram.estimate_ngram(
            sequences,
            cfg["ngram_order"],
            cfg["discount"],
            cfg["trim_min_count"],
            tuple(sorted(align.log_probs)),
        )
        meta = {
            "kind": "joint",
            "direction": cfg["direction"],
            "beam_width": max(cfg["beam_width"], 8),
            "decode_max_expand": cfg["decode_max_expand"],
        }
        joint_ngram.save_joint_model(checkpoint, align, lm, meta)
        report = training.TrainReport()
        report.log(ll_history=align.ll_history)
        return report
    src_vocab = build_vocabulary(corpus, corpus.source_side)
    tgt_vocab = build_vocabulary(corpus, corpus.target_side)
    model = _build_neural_model(
        cfg, src_vocab.size, tgt_vocab.size, np.random.default_rng(cfg["seed"])
    )
    if cfg["model"] in ("rnn", "rnn_att"):
        schedule = training.ScheduleSpec(
            "step_decay",
            base_lr=cfg["learning_rate"],
            decay_factor=cfg["decay_factor"],
            decay_every_epochs=cfg["decay_every_epochs"],
        )
        train_cfg = training.TrainConfig(
            batch_size=cfg["batch_size"],
            epochs=cfg["epochs"],
            grad_clip=cfg["grad_clip"],
            eval_every=cfg["eval_every"],
            batch_unit=cfg["batch_unit"],
            stop_at_train_wer=cfg["stop_at_train_wer"] if cfg["stop_at_train_wer"] >= 0 else None,
        )
    else:
        schedule = training.ScheduleSpec(
            "warmup",
            base_lr=cfg["learning_rate"],
            warmup_steps=cfg["warmup_steps"],
            d_model=cfg["d_model"],
        )
        train_cfg = training.TrainConfig(
            batch_size=cfg["batch_size"],
            epochs=10**9,  # step bound terminates
            train_steps=cfg["train_steps"],
            grad_clip=cfg["grad_clip"],
            eval_every=cfg["eval_every"],
            batch_unit=cfg["batch_unit"],
            stop_at_train_wer=cfg["stop_at_train_wer"] if cfg["stop_at_train_wer"] >= 0 else None,
        )
    report = training.train_loop(
        model, corpus, train_cfg, schedule, cfg["seed"], src_vocab, tgt_vocab, test_corpus
    )
    training.save_checkpoint(model, checkpoint, cfg["direction"], src_vocab, tgt_vocab)
    return report


def _sniff_kind(path: Path) -> str:
    head = path.read_bytes()[:32]
    if head.startswith(joint_ngram.JOINT_MAGIC.encode()):
        return "joint"
    return "neural"


class _LoadedModel:
    """Uniform prediction surface over joint and neural checkpoints."""

    def __init__(self, checkpoint: str):
        path = Path(checkpoint)
        if not path.exists():
            raise training.CorruptCheckpoint(f"checkpoint not found: {path}")
        if _sniff_kind(path) == "joint":
            self.align, self.lm, self.meta = joint_ngram.load_joint_model(path)
            self.kind = "joint"
        else:
            self.model, self.meta, self.src_vocab, self.tgt_vocab = training.load_checkpoint(path)
            self.kind = self.meta["kind"]

    @property
    def direction(self) -> str:
        return self.meta["direction"]

    def predict_tokens(self, source) -> tuple[str, ...]:
        if self.kind == "joint":
            return decode_joint(
                source, self.align, self.lm,
                beam=self.meta.get("beam_width", 8),
                max_expand=self.meta.get("decode_max_expand", 100_000),
            )
        ids = encode_ids(source, self.src_vocab)
        out = greedy_decode(self.model, ids, default_max_len(len(ids)))
        return tuple(self.tgt_vocab.token_of(i) for i in out)


def _tokenize_source(word: str, direction: str, table):
    if direction == "C2T":
        return codec.tokenize(word, codec.CYRILLIC)
    if not word.isascii():
        word = codec.traditional_to_latin(word, table)
    return codec.tokenize(word, codec.LATIN)


def cmd_train(args) -> int:
    raw = parse_config_text(Path(args.config).read_text(encoding="utf-8"))
    cfg = resolve_config(raw)
    for key in ("corpus", "table", "checkpoint", "report"):
        flag = getattr(args, key if key != "report" else "out", None)
        if flag:
            cfg[key] = flag
    if args.seed is not None:
        cfg["seed"] = args.seed
    table = _load_table(cfg["table"])
    corpus = _load_corpus(cfg["corpus"], cfg["direction"], table)
    train_corpus, test_corpus = _split(corpus, cfg)
    report = _train_one(cfg, train_corpus, test_corpus, cfg["checkpoint"])
    if cfg["report"]:
        Path(cfg["report"]).write_text(report.to_jsonl(), encoding="utf-8")
    return EXIT_OK


def cmd_convert(args) -> int:
    loaded = _LoadedModel(args.checkpoint)
    table = _load_table(args.table or "")
    direction = loaded.direction
    status = EXIT_OK
    for lineno, raw in enumerate(sys.stdin, start=1):
        word = raw.strip()
        if not word:
            continue
        try:
            source = _tokenize_source(word, direction, table)
            tokens = loaded.predict_tokens(source)
            text = "".join(tokens)
            if direction == "C2T":
                text = codec.latin_to_traditional(text, table)
            print(text)
        except (CodecError, DecodeFailure) as exc:
            print(f"line {lineno}: {type(exc).__name__}: {exc}", file=sys.stderr)
    return status


def cmd_eval(args) -> int:
    loaded = _LoadedModel(args.checkpoint)
    table = _load_table(args.table or "")
    corpus = _load_corpus(args.corpus, loaded.direction, table)
    predictions = []
    for group in corpus.groups:
        try:
            predictions.append(loaded.predict_tokens(group.source))
        except DecodeFailure:
            predictions.append(())
    report = evaluate(predictions, corpus.groups)
    payload = {
        "wer": report.wer,
        "cer": report.cer,
        "n_total": report.n_total,
        "n_correct": report.n_correct,
    }
    print(json.dumps(payload, sort_keys=True))
    return EXIT_OK


def parse_sweep_text(text: str) -> tuple[dict[str, str], list[tuple[str, dict[str, str]]]]:
    """Common keys, then a ``[grid]`` section of ``label<TAB>key=value ...``."""
    lines = text.splitlines()
    try:
        grid_at = next(i for i, l in enumerate(lines) if l.strip() == "[grid]")
    except StopIteration:
        raise ConfigError("sweep config needs a [grid] section")
    common = parse_config_text("\n".join(lines[:grid_at]))
    points: list[tuple[str, dict[str, str]]] = []
    for lineno, raw in enumerate(lines[grid_at + 1 :], start=grid_at + 2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        label, _, rest = line.partition("\t")
        label = label.strip()
        if not label:
            raise ConfigError(f"sweep line {lineno}: missing label")
        overrides: dict[str, str] = {}
        for item in rest.split():
            if "=" not in item:
                raise ConfigError(f"sweep line {lineno}: expected key=value, got {item!r}")
            key, _, value = item.partition("=")
            overrides[key] = value
        points.append((label, overrides))
    labels = [label for label, _ in points]
    for label in labels:
        if labels.count(label) > 1:
            raise DuplicateLabel(f"sweep label {label!r} appears more than once")
    if not points:
        raise ConfigError("sweep grid is empty")
    return common, points


def cmd_sweep(args) -> int:
    common, points = parse_sweep_text(Path(args.config).read_text(encoding="utf-8"))
    if args.seed is not None:
        common["seed"] = str(args.seed)
    if args.corpus:
        common["corpus"] = args.corpus
    if args.table:
        common["table"] = args.table
    checkpoint_dir = Path(args.checkpoint or "sweep_checkpoints")
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, overrides in points:
        merged_raw = dict(common)
        merged_raw.update(overrides)
        cfg = resolve_config(merged_raw)
        table = _load_table(cfg["table"])
        corpus = _load_corpus(cfg["corpus"], cfg["direction"], table)
        train_corpus, test_corpus = _split(corpus, cfg)
        eval_corpus = test_corpus if test_corpus is not None else train_corpus
        ckpt = checkpoint_dir / f"{label}.ckpt"
        if not ckpt.exists():  # resume: completed points are not retrained
            _train_one(cfg, train_corpus, test_corpus, str(ckpt))
        loaded = _LoadedModel(str(ckpt))
        predictions = []
        for group in eval_corpus.groups:
            try:
                predictions.append(loaded.predict_tokens(group.source))
            except DecodeFailure:
                predictions.append(())
        report = evaluate(predictions, eval_corpus.groups)
        rows.append((label, report.wer, report.cer))
        print(f"{label}: wer={report.wer:.4f} cer={report.cer:.4f}", file=sys.stderr)
    csv_text = sweep_report(rows).to_csv()
    if args.out:
        Path(args.out).write_text(csv_text, encoding="utf-8")
    else:
        sys.stdout.write(csv_text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="montranslit",
        description="Bidirectional Cyrillic/Traditional Mongolian word conversion",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("train", cmd_train),
        ("convert", cmd_convert),
        ("eval", cmd_eval),
        ("sweep", cmd_sweep),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--checkpoint", help="model checkpoint path (directory for sweep)")
        p.add_argument("--corpus", help="corpus file, source<TAB>ref1|ref2|...")
        p.add_argument("--table", help="transliteration table (default: shipped)")
        p.add_argument("--out", help="output path (report / CSV)")
        p.add_argument("--seed", type=int, default=None)
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("train", "sweep") and not args.config:
            raise ConfigError(f"{args.command} requires --config")
        if args.command in ("convert", "eval") and not args.checkpoint:
            raise ConfigError(f"{args.command} requires --checkpoint")
        return args.fn(args)
    except (ConfigError, DuplicateLabel, codec.AmbiguousTable) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError,) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (
        training.NanGradientError,
        training.CorruptCheckpoint,
        training.UnsupportedVersion,
        training.ConfigMismatch,
        joint_ngram.CorruptModel,
        joint_ngram.UnalignablePair,
        joint_ngram.EmptyModel,
    ) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
