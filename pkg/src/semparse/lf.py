"""Logical forms as ordered trees.

A tree is an :class:`LfTree` whose children are leaf tokens (``str``) or
nested :class:`LfTree` subtrees.  The top-level tree stands for the whole
form and is never bracketed itself, so ``"A B (C)"`` parses to
``LfTree(("A", "B", LfTree(("C",))))``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence, Union

from .text import EOS, NT


class ParseError(ValueError):
    pass


class StructureError(ValueError):
    pass


@dataclass(frozen=True)
class LfTree:
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))

    def __str__(self):
        return serialize(self)

    def depth(self) -> int:
        """Bracket depth: 0 for a flat form."""
        return max((1 + c.depth() for c in self.children if isinstance(c, LfTree)), default=0)

    def subtrees(self):
        """Pre-order iterator over this tree and all nested subtrees."""
        yield self
        for c in self.children:
            if isinstance(c, LfTree):
                yield from c.subtrees()

    def first_leaf(self) -> str:
        head = self.children[0]
        return head if isinstance(head, str) else head.first_leaf()


Node = Union[str, LfTree]


def _lex(s: str) -> list[tuple[str, int]]:
    tokens = []
    i, n = 0, len(s)
    while i < n:
        ch = s[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            tokens.append((ch, i))
            i += 1
        elif ch == "'":
            j = s.find("'", i + 1)
            if j < 0:
                raise ParseError(f"unterminated quoted constant at position {i}")
            tokens.append((s[i : j + 1], i))
            i = j + 1
        else:
            j = i
            while j < n and not s[j].isspace() and s[j] not in "()":
                j += 1
            tokens.append((s[i:j], i))
            i = j
    return tokens


def parse(s: str) -> LfTree:
    tokens = _lex(s)
    if not tokens:
        raise ParseError("empty logical form")
    stack: list[list[Node]] = [[]]
    opens: list[int] = []
    for tok, pos in tokens:
        if tok == "(":
            stack.append([])
            opens.append(pos)
        elif tok == ")":
            if len(stack) == 1:
                raise ParseError(f"unmatched ')' at position {pos}")
            children = stack.pop()
            start = opens.pop()
            if not children:
                raise ParseError(f"empty brackets at position {start}")
            stack[-1].append(LfTree(children))
        else:
            stack[-1].append(tok)
    if len(stack) > 1:
        raise ParseError(f"unclosed '(' at position {opens[-1]}")
    return LfTree(stack[0])


def to_tokens(t: LfTree) -> list[str]:
    """Flat token sequence with brackets as separate tokens."""
    out: list[str] = []

    def walk(node: LfTree):
        for c in node.children:
            if isinstance(c, LfTree):
                out.append("(")
                walk(c)
                out.append(")")
            else:
                out.append(c)

    walk(t)
    return out


def serialize(t: LfTree, compact: bool = True) -> str:
    """Space-joined tokens; ``compact`` drops spaces after '(' and before ')'."""
    s = " ".join(to_tokens(t))
    if compact:
        s = normalize_spacing(s)
    return s


def normalize_spacing(s: str) -> str:
    """Collapse whitespace; no space after '(' or before ')' outside quotes."""
    parts = re.split(r"('[^']*')", s)
    out = []
    for k, part in enumerate(parts):
        if k % 2:
            out.append(part)
            continue
        part = re.sub(r"\s+", " ", part)
        part = re.sub(r"\(\s+", "(", part)
        part = re.sub(r"\s+\)", ")", part)
        out.append(part)
    return "".join(out).strip()


def from_tokens(tokens: Sequence[str]) -> LfTree:
    return parse(" ".join(tokens))


# --------------------------------------------------------------------------
# level sequences


class LevelSequence(NamedTuple):
    node_id: int
    parent_id: int | None  # None for the root
    tokens: tuple[str, ...]  # ends with </s>; subtrees replaced by <n>
    position: int | None  # index of the spawning <n> in the parent's tokens
    depth: int  # root is depth 1


def to_level_sequences(t: LfTree) -> list[LevelSequence]:
    """Breadth-first linearisation, root first."""
    out: list[LevelSequence] = []
    queue: list[tuple[LfTree, int | None, int | None, int]] = [(t, None, None, 1)]
    head = 0
    while head < len(queue):
        node, parent, pos, depth = queue[head]
        node_id = head
        head += 1
        toks = []
        for c in node.children:
            if isinstance(c, LfTree):
                queue.append((c, node_id, len(toks), depth + 1))
                toks.append(NT)
            else:
                toks.append(c)
        toks.append(EOS)
        out.append(LevelSequence(node_id, parent, tuple(toks), pos, depth))
    return out


def from_level_sequences(seqs: Iterable[LevelSequence | tuple]) -> LfTree:
    seqs = [LevelSequence(*s) if not isinstance(s, LevelSequence) else s for s in seqs]
    by_id = {s.node_id: s for s in seqs}
    if len(by_id) != len(seqs):
        raise StructureError("duplicate node id")
    roots = [s for s in seqs if s.parent_id is None]
    if len(roots) != 1:
        raise StructureError(f"expected one root sequence, found {len(roots)}")
    children: dict[tuple[int, int], LevelSequence] = {}
    for s in seqs:
        if s.parent_id is None:
            continue
        parent = by_id.get(s.parent_id)
        if parent is None:
            raise StructureError(f"orphan sequence {s.node_id}: no parent {s.parent_id}")
        if s.position is None or not (0 <= s.position < len(parent.tokens)) or parent.tokens[s.position] != NT:
            raise StructureError(f"sequence {s.node_id} does not attach to a nonterminal of {s.parent_id}")
        key = (s.parent_id, s.position)
        if key in children:
            raise StructureError(f"two sequences attach to slot {key}")
        children[key] = s

    used = set()

    def build(s: LevelSequence, trail: frozenset) -> LfTree:
        if s.node_id in trail:
            raise StructureError(f"cycle through node {s.node_id}")
        used.add(s.node_id)
        toks = list(s.tokens)
        if toks and toks[-1] == EOS:
            toks.pop()
        out: list[Node] = []
        for pos, tok in enumerate(toks):
            if tok == NT:
                child = children.get((s.node_id, pos))
                if child is None:
                    raise StructureError(f"dangling nonterminal at node {s.node_id}, position {pos}")
                out.append(build(child, trail | {s.node_id}))
            else:
                out.append(tok)
        if not out:
            raise StructureError(f"node {s.node_id} is empty")
        return LfTree(out)

    tree = build(roots[0], frozenset())
    if len(used) != len(seqs):
        missing = sorted(set(by_id) - used)
        raise StructureError(f"orphan sequences {missing}")
    return tree


# --------------------------------------------------------------------------
# productions


class Production(NamedTuple):
    parent: str
    children: tuple[str, ...]


ROOT = "ROOT"


def _label(node: Node) -> str:
    # subtrees are named by their first leaf, prefixed so they differ from leaves
    return node if isinstance(node, str) else "(" + node.first_leaf()


def extract_productions(t: LfTree) -> set[Production]:
    prods = {Production(ROOT, tuple(_label(c) for c in t.children))}
    for sub in list(t.subtrees())[1:]:
        prods.add(Production(_label(sub), tuple(_label(c) for c in sub.children)))
    return prods


# --------------------------------------------------------------------------
# Prolog-style forms

GROUP = "&"
_PROLOG_TOKEN = re.compile(r"'[^']*'|[(),]|[^\s(),']+")


def looks_like_prolog(s: str) -> bool:
    """True when some symbol is immediately followed by '(' or commas separate arguments."""
    stripped = re.sub(r"'[^']*'", "q", s)
    return bool(re.search(r"[^\s(]\(", stripped) or "," in stripped)


def prolog_to_tree(s: str) -> LfTree:
    """``f(a,b)`` becomes ``(f a b)``; a bare group ``(a,b)`` becomes ``(& a b)``.

    Commas are dropped.  :func:`tree_to_prolog` inverts this exactly for
    canonical input (no whitespace outside quotes).
    """
    toks = _PROLOG_TOKEN.findall(s)
    if not toks:
        raise ParseError("empty logical form")
    pos = 0

    def term() -> Node:
        nonlocal pos
        if pos >= len(toks):
            raise ParseError("unexpected end of Prolog term")
        tok = toks[pos]
        if tok == "(":
            pos += 1
            return LfTree([GROUP] + args())
        if tok in "),":
            raise ParseError(f"unexpected {tok!r} at token {pos}")
        pos += 1
        if pos < len(toks) and toks[pos] == "(":
            pos += 1
            return LfTree([tok] + args())
        return tok

    def args() -> list[Node]:
        nonlocal pos
        out = [term()]
        while pos < len(toks) and toks[pos] == ",":
            pos += 1
            out.append(term())
        if pos >= len(toks) or toks[pos] != ")":
            raise ParseError(f"expected ')' at token {pos}")
        pos += 1
        return out

    root = [term()]
    while pos < len(toks) and toks[pos] == ",":
        pos += 1
        root.append(term())
    if pos != len(toks):
        raise ParseError(f"trailing input at token {pos}")
    return LfTree(root)


def tree_to_prolog(t: LfTree) -> str:
    def render(node: Node) -> str:
        if isinstance(node, str):
            return node
        head, rest = node.children[0], node.children[1:]
        if head == GROUP:
            return "(" + ",".join(render(c) for c in rest) + ")"
        if not isinstance(head, str):
            raise StructureError("Prolog term must start with a functor")
        return head + "(" + ",".join(render(c) for c in rest) + ")"

    return ",".join(render(c) for c in t.children)


def read_form(s: str, fmt: str = "auto") -> LfTree:
    """Parse a dataset logical form in ``"sexpr"``, ``"prolog"`` or ``"auto"`` format."""
    if fmt == "auto":
        fmt = "prolog" if looks_like_prolog(s) else "sexpr"
    return prolog_to_tree(s) if fmt == "prolog" else parse(s)


def write_form(t: LfTree, fmt: str) -> str:
    return tree_to_prolog(t) if fmt == "prolog" else serialize(t)
