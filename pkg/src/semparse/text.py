"""Tokenisation, vocabularies and argument identification."""
from __future__ import annotations

import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

UNK, BOS, EOS, NT, NT_BOS = "<unk>", "<s>", "</s>", "<n>", "<("
SPECIALS = (UNK, BOS, EOS, NT, NT_BOS)


class DataError(ValueError):
    """Malformed input file or line."""


class AmbiguityError(ValueError):
    pass


class UnknownMarkerWarning(UserWarning):
    pass


_TOKEN_RE = re.compile(
    r"""
      \d+(?:[.:]\d+)?       # integers, decimals, clock times
    | [a-z]+(?=n't\b)       # "do" of "don't"
    | n't
    | '[a-z]+               # clitics: 's 're 'll ...
    | \w+
    | [^\w\s]               # any other single symbol
    """,
    re.VERBOSE,
)


def tokenize(text: str, stem: bool = False) -> list[str]:
    """Lowercase, split on whitespace and punctuation.

    >>> tokenize("What's first class fare")
    ['what', "'s", 'first', 'class', 'fare']
    """
    tokens = _TOKEN_RE.findall(text.lower())
    return [stem_word(t) for t in tokens] if stem else tokens


# words the suffix rules would damage
_STEM_EXCEPTIONS = frozenset(
    """
    is was has does this his its us as yes always perhaps whereas less unless
    bus gas plus thus news series species texas kansas arkansas illinois
    business process address class pass bring thing nothing something during
    morning evening king spring string ring sing need speed red bed feed seed
    united
    """.split()
)


def stem_word(word: str) -> str:
    """Tiny suffix stripper for plural -s/-es, -ing and -ed.

    Words of four letters or fewer, words without a vowel left after
    stripping, and the entries of ``_STEM_EXCEPTIONS`` are returned unchanged.
    """
    w = word
    if len(w) <= 4 or w in _STEM_EXCEPTIONS or not w.isalpha():
        return w
    if w.endswith("ies"):
        return w[:-3] + "y"
    if w.endswith("sses"):
        return w[:-2]
    if w.endswith(("ches", "shes", "xes", "zes")):
        return w[:-2]
    if w.endswith("ing"):
        base = w[:-3]
    elif w.endswith("ed"):
        base = w[:-2]
    elif w.endswith("s") and not w.endswith(("ss", "us", "is")):
        return w[:-1]
    else:
        return w
    if len(base) < 3 or not re.search(r"[aeiouy]", base):
        return w
    if len(base) >= 2 and base[-1] == base[-2] and base[-1] not in "lsz":
        base = base[:-1]
    return base


def reverse_input(tokens: Sequence[str]) -> list[str]:
    return list(tokens)[::-1]


# --------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocabulary:
    index_to_token: list[str]
    min_count: int = 1
    token_to_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.index_to_token[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.token_to_index = {t: i for i, t in enumerate(self.index_to_token)}
        if len(self.token_to_index) != len(self.index_to_token):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.index_to_token)

    def __contains__(self, token):
        return token in self.token_to_index

    def index(self, token: str) -> int:
        return self.token_to_index.get(token, 0)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.token_to_index.get(t, 0) for t in tokens]

    def decode(self, indices: Iterable[int]) -> list[str]:
        return [self.index_to_token[i] for i in indices]


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 1, keep_all: bool = False) -> Vocabulary:
    """Specials first, then tokens by descending count, ties lexicographic."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(t for seq in corpus for t in seq if t not in SPECIALS)
    kept = [t for t, c in counts.items() if keep_all or c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + kept, min_count=1 if keep_all else min_count)


# --------------------------------------------------------------------------
# argument identification


@dataclass(frozen=True)
class NumberPattern:
    """A literal matched by regex; ``template`` formats the logical constant."""

    regex: str
    type_name: str
    template: str = "{0}"

    def match(self, token: str) -> str | None:
        m = re.fullmatch(self.regex, token)
        if m is None:
            return None
        return self.template.format(token.replace(":", ""))


# integer, decimal, and H:MM / HH:MM clock times (colon dropped: "4:30" -> "430")
DEFAULT_NUMBER_PATTERNS = (
    NumberPattern(r"\d+", "num"),
    NumberPattern(r"\d+\.\d+", "num"),
    NumberPattern(r"\d{1,2}:\d{2}", "ti"),
)


@dataclass
class ArgumentLexicon:
    entries: list[tuple[tuple[str, ...], str, str]] = field(default_factory=list)
    number_patterns: tuple[NumberPattern, ...] = DEFAULT_NUMBER_PATTERNS

    def __post_init__(self):
        seen = set()
        for surface, type_name, _ in self.entries:
            if not surface:
                raise DataError("empty surface form in lexicon")
            if (surface, type_name) in seen:
                raise DataError(f"duplicate lexicon entry {' '.join(surface)!r} / {type_name}")
            seen.add((surface, type_name))
        self._by_first: dict[str, list[tuple[tuple[str, ...], str, str]]] = {}
        for e in sorted(self.entries, key=lambda e: -len(e[0])):
            self._by_first.setdefault(e[0][0], []).append(e)

    @property
    def types(self) -> list[str]:
        names = {t for _, t, _ in self.entries} | {p.type_name for p in self.number_patterns}
        return sorted(names)

    def longest_match(self, tokens: Sequence[str], i: int):
        for surface, type_name, const in self._by_first.get(tokens[i], ()):
            if tuple(tokens[i : i + len(surface)]) == surface:
                return len(surface), type_name, const
        for pat in self.number_patterns:
            const = pat.match(tokens[i])
            if const is not None:
                return 1, pat.type_name, const
        return None


def load_lexicon(path: str | Path) -> ArgumentLexicon:
    """Read ``surface<TAB>type<TAB>constant`` lines; blank and ``#`` lines skipped."""
    entries = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            surface = tuple(tokenize(parts[0]))
            key = (surface, parts[1])
            if key in seen:
                raise DataError(f"{path}:{lineno}: duplicate entry {parts[0]!r} / {parts[1]}")
            seen.add(key)
            entries.append((surface, parts[1], parts[2]))
    return ArgumentLexicon(entries)


@dataclass
class MaskedUtterance:
    tokens: list[str]
    argument_table: dict[str, str]
    original: list[str]


def identify_arguments(tokens: Sequence[str], lexicon: ArgumentLexicon) -> MaskedUtterance:
    """Replace entity and number mentions with typed markers ``<type><i>``.

    Longest lexicon match wins at each position, then number patterns.  A
    constant mentioned twice reuses its first marker.
    """
    out: list[str] = []
    table: dict[str, str] = {}
    by_const: dict[tuple[str, str], str] = {}
    per_type: Counter = Counter()
    i = 0
    while i < len(tokens):
        m = lexicon.longest_match(tokens, i)
        if m is None:
            out.append(tokens[i])
            i += 1
            continue
        length, type_name, const = m
        marker = by_const.get((type_name, const))
        if marker is None:
            marker = f"{type_name}{per_type[type_name]}"
            per_type[type_name] += 1
            by_const[(type_name, const)] = marker
            table[marker] = const
        out.append(marker)
        i += length
    return MaskedUtterance(out, table, list(tokens))


def mask_logical_form(lf_tokens: Sequence[str], table: dict[str, str]) -> list[str]:
    inverse: dict[str, list[str]] = {}
    for marker, const in table.items():
        inverse.setdefault(const, []).append(marker)
    out = []
    for tok in lf_tokens:
        markers = inverse.get(tok)
        if markers is None:
            out.append(tok)
        elif len(markers) > 1:
            raise AmbiguityError(f"constant {tok!r} maps to several markers: {', '.join(markers)}")
        else:
            out.append(markers[0])
    return out


def marker_regex(types: Iterable[str]) -> re.Pattern:
    alts = "|".join(re.escape(t) for t in sorted(types, key=len, reverse=True))
    return re.compile(rf"(?:{alts})\d+")


def unmask(prediction: Sequence[str], table: dict[str, str], types: Iterable[str] | None = None) -> list[str]:
    """Substitute markers back to constants.

    Markers missing from ``table`` are kept and reported with an
    :class:`UnknownMarkerWarning`.  ``types`` limits what counts as a marker;
    by default any lowercase word followed by digits does.
    """
    pattern = marker_regex(types) if types else re.compile(r"[a-z_]+\d+")
    out, unknown = [], []
    for tok in prediction:
        if tok in table:
            out.append(table[tok])
        else:
            if pattern.fullmatch(tok):
                unknown.append(tok)
            out.append(tok)
    if unknown:
        warnings.warn(f"markers without a constant: {' '.join(unknown)}", UnknownMarkerWarning, stacklevel=2)
    return out


# --------------------------------------------------------------------------
# dataset files


def read_dataset(path: str | Path) -> list[tuple[str, str]]:
    """``utterance<TAB>logical form`` per line; blank lines ignored."""
    pairs = []
    try:
        f = open(path, encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    with f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: missing tab between utterance and logical form")
            utt, lf = line.split("\t", 1)
            if not utt.strip() or not lf.strip():
                raise DataError(f"{path}:{lineno}: empty utterance or logical form")
            pairs.append((utt, lf))
    if not pairs:
        raise DataError(f"{path}: no examples")
    return pairs
