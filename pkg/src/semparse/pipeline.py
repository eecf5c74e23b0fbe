"""From raw ``(utterance, logical form)`` strings to model indices and back."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from . import lf as lfmod
from .lf import LevelSequence, LfTree
from .text import (
    EOS,
    ArgumentLexicon,
    MaskedUtterance,
    Vocabulary,
    build_vocab,
    identify_arguments,
    mask_logical_form,
    reverse_input,
    stem_word,
    tokenize,
    unmask,
)


@dataclass
class ExamplePair:
    utterance: MaskedUtterance
    logical_form: LfTree  # masked
    gold: LfTree  # unmasked, as read from the file
    text: str = ""
    id: int = 0


@dataclass
class EncodedExample:
    src: list[int]  # reversed input indices
    tgt: list  # seq: index tokens ending in </s>; tree: index LevelSequences
    pair: ExamplePair

    @property
    def target_length(self) -> int:
        if self.tgt and isinstance(self.tgt[0], LevelSequence):
            return sum(len(s.tokens) for s in self.tgt)
        return len(self.tgt)


def map_leaves(tree: LfTree, fn) -> LfTree:
    return LfTree(map_leaves(c, fn) if isinstance(c, LfTree) else fn(c) for c in tree.children)


def leaves(tree: LfTree) -> list[str]:
    return [t for t in lfmod.to_tokens(tree) if t not in "()"]


@dataclass
class Pipeline:
    """Text processing state shared by training, evaluation and prediction."""

    mode: str = "seq2seq"
    lexicon: ArgumentLexicon | None = None
    use_arguments: bool = True
    stem: bool = False
    lf_format: str = "sexpr"
    src_vocab: Vocabulary | None = None
    tgt_vocab: Vocabulary | None = None
    input_min_count: int = 2
    _marker_types: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.lexicon is not None:
            self._marker_types = self.lexicon.types

    # -- utterances

    def mask_utterance(self, text: str) -> MaskedUtterance:
        tokens = tokenize(text)
        if self.use_arguments and self.lexicon is not None:
            masked = identify_arguments(tokens, self.lexicon)
        else:
            masked = MaskedUtterance(list(tokens), {}, list(tokens))
        if self.stem:
            markers = set(masked.argument_table)
            masked.tokens = [t if t in markers else stem_word(t) for t in masked.tokens]
        return masked

    def source_indices(self, masked: MaskedUtterance) -> list[int]:
        return self.src_vocab.encode(reverse_input(masked.tokens))

    # -- logical forms

    def read_gold(self, lf_text: str) -> LfTree:
        return lfmod.read_form(lf_text, self.lf_format)

    def mask_tree(self, tree: LfTree, table: dict[str, str]) -> LfTree:
        if not table:
            return tree
        masked = mask_logical_form(leaves(tree), table)
        it = iter(masked)
        return map_leaves(tree, lambda _: next(it))

    def unmask_tree(self, tree: LfTree, table: dict[str, str]) -> LfTree:
        restored = unmask(leaves(tree), table, self._marker_types or None)
        it = iter(restored)
        return map_leaves(tree, lambda _: next(it))

    def target_tokens(self, tree: LfTree):
        if self.mode == "seq2tree":
            return lfmod.to_level_sequences(tree)
        return lfmod.to_tokens(tree) + [EOS]

    def target_indices(self, tree: LfTree):
        v = self.tgt_vocab
        if self.mode == "seq2tree":
            return [s._replace(tokens=tuple(v.index(t) for t in s.tokens)) for s in lfmod.to_level_sequences(tree)]
        return v.encode(self.target_tokens(tree))

    def prepare(self, utterance: str, lf_text: str, id: int = 0) -> ExamplePair:
        masked = self.mask_utterance(utterance)
        gold = self.read_gold(lf_text)
        return ExamplePair(masked, self.mask_tree(gold, masked.argument_table), gold, utterance, id)

    def encode(self, pair: ExamplePair) -> EncodedExample:
        return EncodedExample(self.source_indices(pair.utterance), self.target_indices(pair.logical_form), pair)

    # -- fitting

    def fit(self, pairs: Sequence[tuple[str, str]]) -> list[ExamplePair]:
        """Resolve the logical-form format, build both vocabularies, return prepared pairs."""
        if self.lf_format == "auto":
            self.lf_format = "prolog" if lfmod.looks_like_prolog(pairs[0][1]) else "sexpr"
        prepared = [self.prepare(u, a, i) for i, (u, a) in enumerate(pairs)]
        self.src_vocab = build_vocab((p.utterance.tokens for p in prepared), self.input_min_count)
        tgt_corpus = []
        for p in prepared:
            t = self.target_tokens(p.logical_form)
            if self.mode == "seq2tree":
                tgt_corpus.extend(s.tokens for s in t)
            else:
                tgt_corpus.append(t)
        self.tgt_vocab = build_vocab(tgt_corpus, keep_all=True)
        return prepared

    # -- output

    def render_tokens(self, tokens: Sequence[str], table: dict[str, str]) -> tuple[str, LfTree | None]:
        """Sequence-decoder output to (text, tree); tree is None when unparsable."""
        restored = unmask(list(tokens), table, self._marker_types or None) if self.use_arguments else list(tokens)
        try:
            tree = lfmod.from_tokens(restored)
        except lfmod.ParseError:
            return " ".join(restored), None
        return self.write(tree), tree

    def render_tree(self, tree: LfTree | None, table: dict[str, str]) -> tuple[str, LfTree | None]:
        if tree is None:
            return "", None
        if self.use_arguments:
            tree = self.unmask_tree(tree, table)
        return self.write(tree), tree

    def write(self, tree: LfTree) -> str:
        try:
            return lfmod.write_form(tree, self.lf_format)
        except lfmod.StructureError:
            return lfmod.serialize(tree)

    # -- persistence

    def to_dict(self) -> dict:
        lex = None
        if self.lexicon is not None:
            lex = {
                "entries": [[" ".join(s), t, c] for s, t, c in self.lexicon.entries],
                "number_patterns": [[p.regex, p.type_name, p.template] for p in self.lexicon.number_patterns],
            }
        return {
            "mode": self.mode,
            "use_arguments": self.use_arguments,
            "stem": self.stem,
            "lf_format": self.lf_format,
            "input_min_count": self.input_min_count,
            "src_vocab": self.src_vocab.index_to_token,
            "tgt_vocab": self.tgt_vocab.index_to_token,
            "lexicon": lex,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pipeline":
        from .text import NumberPattern

        lexicon = None
        if d.get("lexicon") is not None:
            lexicon = ArgumentLexicon(
                [(tuple(s.split(" ")), t, c) for s, t, c in d["lexicon"]["entries"]],
                tuple(NumberPattern(*p) for p in d["lexicon"]["number_patterns"]),
            )
        return cls(
            mode=d["mode"],
            lexicon=lexicon,
            use_arguments=d["use_arguments"],
            stem=d["stem"],
            lf_format=d["lf_format"],
            src_vocab=Vocabulary(list(d["src_vocab"])),
            tgt_vocab=Vocabulary(list(d["tgt_vocab"])),
            input_min_count=d["input_min_count"],
        )
