"""Exact-match accuracy and production-level balanced F1."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Sequence

from . import lf as lfmod
from .lf import LfTree
from .model import ModelParameters, beam_decode_seq, decode_tree, greedy_decode_seq
from .pipeline import ExamplePair, Pipeline
from .text import UnknownMarkerWarning


def _as_tree(x) -> LfTree | None:
    if isinstance(x, LfTree):
        return x
    if not isinstance(x, str):
        x = " ".join(x)
    try:
        return lfmod.parse(x)
    except lfmod.ParseError:
        return None


def exact_match(pred, gold) -> bool:
    """Tree equality after parsing; byte equality when either side is unparsable."""
    tp, tg = _as_tree(pred), _as_tree(gold)
    if tp is None or tg is None:
        norm = lambda x: x if isinstance(x, str) else " ".join(x)
        return tp is None and tg is None and norm(pred) == norm(gold)
    return tp == tg


def balanced_f1(pred: LfTree | None, gold: LfTree | None) -> float:
    if pred is None or gold is None:
        return 0.0
    p, g = lfmod.extract_productions(pred), lfmod.extract_productions(gold)
    common = len(p & g)
    if common == 0:
        return 0.0
    precision, recall = common / len(p), common / len(g)
    return 2 * precision * recall / (precision + recall)


@dataclass
class Verdict:
    id: int
    gold: str
    prediction: str
    exact: bool
    f1: float
    truncated: bool = False


@dataclass
class EvalResult:
    correct: int
    total: int
    f1: float
    verdicts: list[Verdict] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total

    def summary(self) -> str:
        return f"accuracy\t{self.accuracy:.4f}\t({self.correct}/{self.total})\nf1\t{self.f1:.4f}"


@dataclass
class Prediction:
    text: str
    tree: LfTree | None
    truncated: bool
    attention: object
    input_tokens: list[str]
    output_tokens: list[str]


def predict(
    params: ModelParameters,
    pipeline: Pipeline,
    utterance: str,
    beam: int = 1,
    max_len: int = 100,
    max_depth: int = 10,
    max_nodes: int = 500,
) -> Prediction:
    masked = pipeline.mask_utterance(utterance)
    src = pipeline.source_indices(masked)
    vocab = pipeline.tgt_vocab
    in_tokens = list(reversed(masked.tokens))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UnknownMarkerWarning)
        if params.tree:
            res = decode_tree(src, params, vocab, max_len, max_depth, max_nodes)
            text, tree = pipeline.render_tree(res.tree, masked.argument_table)
            return Prediction(text, tree, res.truncated, res.attention, in_tokens, vocab.decode(res.step_tokens))
        res = beam_decode_seq(src, params, beam, max_len) if beam > 1 else greedy_decode_seq(src, params, max_len)
        toks = vocab.decode(res.tokens)
        text, tree = pipeline.render_tokens(toks, masked.argument_table)
        steps = toks + ([] if res.truncated else ["</s>"])
        return Prediction(text, tree, res.truncated, res.attention, in_tokens, steps[: len(res.attention)])


def evaluate(
    params: ModelParameters,
    examples: Sequence[ExamplePair] | Sequence[tuple[str, str]],
    pipeline: Pipeline,
    beam: int = 1,
    max_len: int = 100,
) -> EvalResult:
    """Decode every example and compare against its unmasked gold form.

    Truncated or unparsable predictions count as wrong with F1 0.
    """
    if len(examples) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    verdicts = []
    for i, ex in enumerate(examples):
        if isinstance(ex, ExamplePair):
            text, gold, ex_id = ex.text, ex.gold, ex.id
        else:
            text, gold, ex_id = ex[0], pipeline.read_gold(ex[1]), i
        pred = predict(params, pipeline, text, beam=beam, max_len=max_len)
        ok = not pred.truncated and pred.tree is not None and pred.tree == gold
        f1 = 0.0 if pred.truncated else balanced_f1(pred.tree, gold)
        verdicts.append(Verdict(ex_id, pipeline.write(gold), pred.text, ok, f1, pred.truncated))
    correct = sum(v.exact for v in verdicts)
    return EvalResult(correct, len(verdicts), sum(v.f1 for v in verdicts) / len(verdicts), verdicts)


def write_verdicts(path, result: EvalResult) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "gold", "prediction", "exact", "f1"])
        for v in result.verdicts:
            w.writerow([v.id, v.gold, v.prediction, int(v.exact), f"{v.f1:.6f}"])


def write_attention(path, pred: Prediction) -> None:
    """Tab-separated matrix: header of input tokens, one row per decoder step."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join([""] + pred.input_tokens) + "\n")
        for tok, row in zip(pred.output_tokens, pred.attention):
            f.write("\t".join([tok] + [f"{x:.6f}" for x in row]) + "\n")
