"""Command-line interface: ``semparse {preprocess,train,sweep,predict,eval}``."""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from collections import Counter
from pathlib import Path

from . import checkpoint as ckptmod
from . import nn
from .evaluation import evaluate, predict, write_attention, write_verdicts
from .lf import ParseError
from .pipeline import Pipeline
from .text import AmbiguityError, DataError, load_lexicon, read_dataset
from .training import (
    SweepRow,
    TrainConfig,
    TrainingError,
    apply_settings,
    grid_points,
    kfold,
    make_model,
    make_pipeline,
    select_best,
    split_dev,
    train,
)

log = logging.getLogger("semparse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3

# keys a config file may carry besides TrainConfig fields; paths are relative to the file
PATH_KEYS = ("train_path", "dev_path", "lexicon_path", "checkpoint_path", "report_path")
EXTRA_KEYS = PATH_KEYS + ("grid", "kfold", "precision")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# config and data helpers


def load_config(path) -> tuple[TrainConfig, dict]:
    """Parse a JSON config; every problem is reported in one error."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must be a JSON object")
    extras = {k: raw.pop(k) for k in EXTRA_KEYS if k in raw}
    for k in PATH_KEYS:
        if extras.get(k) is not None:
            extras[k] = str((path.parent / extras[k]).resolve())
    errors = []
    known = set(TrainConfig.__dataclass_fields__)
    unknown = sorted(set(raw) - known)
    if unknown:
        errors.append(f"unknown config keys: {', '.join(unknown)}")
    try:
        config = TrainConfig(**{k: v for k, v in raw.items() if k in known})
        errors.extend(config.errors())
    except TypeError as e:
        errors.append(str(e))
        config = None
    if extras.get("precision", "standard") not in ("standard", "high"):
        errors.append(f"precision must be standard or high (got {extras['precision']!r})")
    if errors:
        raise UsageError("invalid config:\n  " + "\n  ".join(errors))
    return config, extras


def _lexicon(path):
    if path is None:
        return None
    try:
        return load_lexicon(path)
    except OSError as e:
        raise DataError(f"cannot read lexicon {path}: {e}") from e


def prepare_training_data(config: TrainConfig, extras: dict):
    """Fit a pipeline on the training split and encode train and dev sets."""
    if not extras.get("train_path"):
        raise UsageError("config needs train_path")
    pairs = read_dataset(extras["train_path"])
    if extras.get("dev_path"):
        dev_pairs = read_dataset(extras["dev_path"])
    elif config.dev_fraction > 0:
        if len(pairs) < 2:
            raise DataError("need at least 2 examples to split off a dev set")
        pairs, dev_pairs = split_dev(pairs, config.dev_fraction, config.seed)
    else:
        dev_pairs = None
    pipeline = make_pipeline(config, _lexicon(extras.get("lexicon_path")))
    return pipeline, *encode_split(pipeline, pairs, dev_pairs)


def encode_split(pipeline: Pipeline, pairs, dev_pairs):
    try:
        prepared = pipeline.fit(pairs)
        train_data = [pipeline.encode(p) for p in prepared]
        dev_data = None
        if dev_pairs is not None:
            dev_data = [pipeline.encode(pipeline.prepare(u, a, i)) for i, (u, a) in enumerate(dev_pairs)]
    except (ParseError, AmbiguityError) as e:
        raise DataError(f"malformed example: {e}") from e
    return train_data, dev_data


def run_training(config: TrainConfig, pipeline, train_data, dev_data):
    params = make_model(config, pipeline)
    best, report = train(params, pipeline, train_data, config, dev_data if dev_data else None)
    return best, report


# --------------------------------------------------------------------------
# commands


def cmd_preprocess(args) -> int:
    pairs = read_dataset(args.dataset)
    lexicon = _lexicon(args.lexicon)
    pipeline = Pipeline(
        mode=args.mode, lexicon=lexicon, use_arguments=not args.no_arguments, stem=args.stem,
        lf_format=args.lf_format, input_min_count=args.min_count,
    )
    try:
        prepared = pipeline.fit(pairs)
    except (ParseError, AmbiguityError) as e:
        raise DataError(f"malformed example: {e}") from e
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    types = Counter()
    with open(out / "masked.tsv", "w", encoding="utf-8") as f, open(out / "arguments.tsv", "w", encoding="utf-8") as g:
        g.write("id\tmarker\tconstant\n")
        for p in prepared:
            f.write(" ".join(p.utterance.tokens) + "\t" + pipeline.write(p.logical_form) + "\n")
            for marker, const in p.utterance.argument_table.items():
                g.write(f"{p.id}\t{marker}\t{const}\n")
                types[re.sub(r"\d+$", "", marker)] += 1
    for name, vocab in (("input_vocab.txt", pipeline.src_vocab), ("output_vocab.txt", pipeline.tgt_vocab)):
        (out / name).write_text("\n".join(vocab.index_to_token) + "\n", encoding="utf-8")
    n_in = sum(len(p.utterance.tokens) for p in prepared)
    n_out = sum(len(pipeline.write(p.logical_form).split()) for p in prepared)
    print(f"examples\t{len(prepared)}")
    print(f"input_tokens\t{n_in}")
    print(f"output_tokens\t{n_out}")
    print(f"input_vocab\t{len(pipeline.src_vocab)}")
    print(f"output_vocab\t{len(pipeline.tgt_vocab)}")
    for t in sorted(types):
        print(f"masked\t{t}\t{types[t]}")
    return EXIT_OK


def cmd_train(args) -> int:
    config, extras = load_config(args.config)
    ckpt_path = args.out or extras.get("checkpoint_path")
    if not ckpt_path:
        raise UsageError("no checkpoint path: pass --out or set checkpoint_path")
    with nn.precision(extras.get("precision", "standard")):
        pipeline, train_data, dev_data = prepare_training_data(config, extras)
        best, report = run_training(config, pipeline, train_data, dev_data)
        ckptmod.save(ckpt_path, ckptmod.Checkpoint(best, pipeline, config.to_dict(), config.seed))
    report_path = args.report or extras.get("report_path") or str(ckpt_path) + ".report.json"
    summary = report.to_dict()
    for e in summary["epochs"]:
        e.pop("seconds")
    Path(report_path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"best_epoch\t{report.best_epoch}\nbest_dev_accuracy\t{report.best_dev_accuracy:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config, extras = load_config(args.config)
    grid = extras.get("grid")
    if grid is None:
        grid = {"dropout_rate": [0.2, 0.3, 0.4, 0.5], "hidden_dim": [150, 200, 250], "learning_rate": [config.learning_rate]}
    if not isinstance(grid, dict):
        raise UsageError("grid must be an object mapping config keys to lists")
    points = grid_points(grid)
    bad = sorted(set(grid) - set(TrainConfig.__dataclass_fields__))
    if bad:
        raise UsageError(f"grid keys are not config fields: {', '.join(bad)}")
    k = args.kfold or extras.get("kfold") or 0
    rows = []
    with nn.precision(extras.get("precision", "standard")):
        if not extras.get("train_path"):
            raise UsageError("config needs train_path")
        pairs = read_dataset(extras["train_path"])
        lexicon = _lexicon(extras.get("lexicon_path"))
        for settings in points:
            cfg = apply_settings(config, settings).validate()
            if k > 1:
                folds = kfold(pairs, k, cfg.seed)
            elif extras.get("dev_path"):
                folds = [(pairs, read_dataset(extras["dev_path"]))]
            else:
                folds = [split_dev(pairs, cfg.dev_fraction or 0.1, cfg.seed)]
            accs, epochs = [], []
            for tr, dv in folds:
                pipeline = make_pipeline(cfg, lexicon)
                train_data, dev_data = encode_split(pipeline, tr, dv)
                _, report = run_training(cfg, pipeline, train_data, dev_data)
                accs.append(report.best_dev_accuracy)
                epochs.append(report.best_epoch)
            row = SweepRow(settings, sum(accs) / len(accs), max(epochs))
            rows.append(row)
            log.info("sweep %s dev_acc %.4f", settings, row.dev_accuracy)
    best = select_best(rows, config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = sorted(grid)
    with open(out / "sweep.tsv", "w", encoding="utf-8") as f:
        f.write("\t".join(keys + ["dev_accuracy", "best_epoch", "selected"]) + "\n")
        for r in rows:
            cells = [str(r.settings[key]) for key in keys] + [f"{r.dev_accuracy:.4f}", str(r.best_epoch), str(int(r is best))]
            f.write("\t".join(cells) + "\n")
    best_cfg = apply_settings(config, best.settings).to_dict()
    for key in PATH_KEYS:
        if extras.get(key):
            best_cfg[key] = extras[key]
    (out / "best_config.json").write_text(json.dumps(best_cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"best\t{json.dumps(best.settings, sort_keys=True)}\tdev_accuracy\t{best.dev_accuracy:.4f}")
    return EXIT_OK


def _load_checkpoint(args):
    try:
        ckpt = ckptmod.load(args.checkpoint)
    except OSError as e:
        raise DataError(f"cannot read checkpoint {args.checkpoint}: {e}") from e
    except ckptmod.CheckpointError as e:
        raise DataError(str(e)) from e
    if getattr(args, "lexicon", None):
        lex = Pipeline(lexicon=_lexicon(args.lexicon), src_vocab=ckpt.pipeline.src_vocab,
                       tgt_vocab=ckpt.pipeline.tgt_vocab).to_dict()
        if ckptmod.lexicon_hash(lex) != ckptmod.lexicon_hash(ckpt.pipeline.to_dict()):
            raise UsageError("lexicon does not match the one the checkpoint was trained with")
    return ckpt


def cmd_predict(args) -> int:
    ckpt = _load_checkpoint(args)
    if args.utterance is not None:
        utterances = [args.utterance]
    else:
        try:
            lines = Path(args.input).read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise DataError(f"cannot read {args.input}: {e}") from e
        utterances = [line.split("\t", 1)[0] for line in lines if line.strip()]
    if args.dump_attention:
        Path(args.dump_attention).mkdir(parents=True, exist_ok=True)
    for i, utt in enumerate(utterances):
        pred = predict(ckpt.params, ckpt.pipeline, utt, beam=args.beam, max_len=args.max_len)
        print(pred.text)
        if args.dump_attention and ckpt.params.attention_enabled:
            write_attention(Path(args.dump_attention) / f"attention_{i:04d}.tsv", pred)
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args)
    pairs = read_dataset(args.test)
    try:
        examples = [ckpt.pipeline.prepare(u, a, i) for i, (u, a) in enumerate(pairs)]
    except ParseError as e:
        raise DataError(f"malformed logical form: {e}") from e
    result = evaluate(ckpt.params, examples, ckpt.pipeline, beam=args.beam, max_len=args.max_len)
    verdicts = args.verdicts or str(args.checkpoint) + ".verdicts.tsv"
    write_verdicts(verdicts, result)
    print(f"model\t{ckpt.params.mode}\t{ckpt.ablation}")
    print(result.summary())
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semparse", description="Neural semantic parser (sequence and tree decoders).")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("preprocess", help="mask arguments and build vocabularies")
    s.add_argument("dataset")
    s.add_argument("--lexicon")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--mode", choices=("seq2seq", "seq2tree"), default="seq2seq")
    s.add_argument("--no-arguments", action="store_true", help="skip argument identification")
    s.add_argument("--stem", action="store_true")
    s.add_argument("--lf-format", choices=("auto", "sexpr", "prolog"), default="auto")
    s.add_argument("--min-count", type=int, default=2, help="input words rarer than this become <unk>")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train a model from a JSON config")
    s.add_argument("config")
    s.add_argument("--out", help="checkpoint path (overrides checkpoint_path)")
    s.add_argument("--report", help="training summary JSON path")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="grid search over dropout, size and learning rate")
    s.add_argument("config")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--kfold", type=int, default=0, help="cross-validate with k folds instead of one dev split")
    s.set_defaults(func=cmd_sweep)

    for name, fn, helptext in (("predict", cmd_predict, "decode utterances"), ("eval", cmd_eval, "score a test set")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("checkpoint")
        if name == "predict":
            src = s.add_mutually_exclusive_group(required=True)
            src.add_argument("--input", help="file with one utterance per line")
            src.add_argument("--utterance")
            s.add_argument("--dump-attention", metavar="DIR", help="write one attention TSV per utterance")
        else:
            s.add_argument("test")
            s.add_argument("--verdicts", help="per-example TSV path")
        s.add_argument("--lexicon", help="refuse to run unless it matches the checkpoint's lexicon")
        s.add_argument("--beam", type=int, default=1)
        s.add_argument("--max-len", type=int, default=100)
        s.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if getattr(args, "beam", 1) < 1:
            raise UsageError("--beam must be >= 1")
        return args.func(args)
    except (UsageError, nn.ConfigurationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as e:
        print(f"training failed: {e}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
