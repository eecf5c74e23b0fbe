"""Shared builders for tests: random tiny models, random trees, criterion log."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from semparse import nn
from semparse.lf import LfTree
from semparse.model import ModelParameters, init_model
from semparse.text import SPECIALS, Vocabulary

DATA = Path(__file__).resolve().parents[1] / "data"

# criterion number -> (passed, detail); printed in the terminal summary
CRITERIA: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    CRITERIA[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def tiny_model(seed=0, mode="seq2seq", attention=True, layers=1, src=7, tgt=9, n=4, e=3, scale=0.08, dt=None):
    p = ModelParameters(src, tgt, n, e, layers, mode, attention, dt)
    init_model(p, seed, scale)
    return p


def word_vocab(size: int) -> Vocabulary:
    return Vocabulary(list(SPECIALS) + [f"w{i}" for i in range(size - len(SPECIALS))])


def random_tree(rng: np.random.Generator, words: list[str], max_depth=3, max_branch=3, depth=0) -> LfTree:
    kids = []
    for _ in range(int(rng.integers(1, max_branch + 1))):
        if depth < max_depth and rng.random() < 0.3:
            kids.append(random_tree(rng, words, max_depth, max_branch, depth + 1))
        else:
            kids.append(str(rng.choice(words)))
    return LfTree(kids)


def random_query(rng: np.random.Generator, src_vocab: int, lo=1, hi=6) -> list[int]:
    return [int(x) for x in rng.integers(0, src_vocab, size=int(rng.integers(lo, hi + 1)))]


def high(fn):
    """Run ``fn`` in high precision."""
    with nn.precision("high"):
        return fn()


def _pin_unit(layer, unit, n, biases, weights=None):
    for gate in range(4):
        layer.input_weights.value[gate * n + unit] = 0
        layer.recurrent_weights.value[gate * n + unit] = 0
        layer.biases.value[gate * n + unit] = biases[gate]
    for gate, col, w in weights or ():
        layer.input_weights.value[gate * n + unit, col] = w


def branching_model(seed, attention=True, layers=1, tgt=9, n=6, nt_bias=0.5, scale=1.0, dt=None):
    """Random seq2tree model whose greedy decodes branch and terminate at varied sizes.

    In the top decoder layer unit 0 saturates and acts as a constant, and
    unit 1 counts steps (its cell grows by a fixed amount per step and is
    reset by the subtree start token).  Their output columns make </s> likelier
    as a sequence grows and give <n> a bias.  Gates are ordered i, f, o, g.
    """
    from semparse.model import EOS_ID, NT_BOS_ID, NT_ID

    p = tiny_model(seed, "seq2tree", attention, layers, tgt=tgt, n=n, scale=scale, dt=dt)
    # embedding column 0 flags the subtree start token
    p.output_embeddings.value[:, 0] = 0
    p.output_embeddings.value[NT_BOS_ID, 0] = 1.0
    flag_gain = 1.0
    if layers > 1:
        # pass the flag up through unit 0 of the first layer
        _pin_unit(p.decoder_layers[0], 0, n, (-8.0, -8.0, 8.0, 6.0), [(0, 0, 16.0)])
        flag_gain = float(np.tanh(1.0))
    top = p.decoder_layers[-1]
    _pin_unit(top, 0, n, (8.0, 8.0, 8.0, 6.0))
    _pin_unit(top, 1, n, (8.0, 8.0, 8.0, 0.3), [(1, 0, -16.0 / flag_gain)])
    for unit in (0, 1):
        _pin_unit(p.encoder_layers[-1], unit, n, (-8.0, -8.0, 0.0, 0.0))
    if attention:
        for unit in (0, 1):
            p.attn_hidden.value[unit] = 0
            p.attn_hidden.value[unit, unit] = 2.0
            p.attn_context.value[unit] = 0
    W = p.output_projection.value
    W[:, :2] = 0
    W[EOS_ID, 0], W[EOS_ID, 1] = -6.0, 8.0
    W[NT_ID, 0] = 3 * nt_bias
    return p


def decode_case(seed):
    """Model for the batched-vs-sequential decode comparison; mixes sizes from single nodes to capped trees."""
    return branching_model(seed, bool(seed % 2), 1 + seed % 3 // 2, nt_bias=0.04 * (seed % 10))


def compare_tree_decodes(n_cases=200, seed=0):
    """Count the cases where batched and sequential tree decoding disagree."""
    from semparse.model import decode_tree

    rng = np.random.default_rng(seed)
    vocab = word_vocab(9)
    mismatches, multi = 0, 0
    for case in range(n_cases):
        p = decode_case(case)
        q = random_query(rng, 7)
        a = decode_tree(q, p, vocab, max_seq_len=10, max_depth=5, max_nodes=40, batched=True)
        b = decode_tree(q, p, vocab, max_seq_len=10, max_depth=5, max_nodes=40, batched=False)
        same = (
            a.sequences == b.sequences
            and a.tree == b.tree
            and a.truncated == b.truncated
            and a.step_tokens == b.step_tokens
            and np.allclose(a.attention, b.attention, atol=1e-12)
        )
        mismatches += not same
        multi += len(a.sequences) > 1
    return mismatches, multi
