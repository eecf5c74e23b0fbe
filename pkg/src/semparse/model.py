"""LSTM encoder, attention, sequence decoder and hierarchical tree decoder.

Two code paths share the same parameters:

* a step-at-a-time API (:func:`encode`, :func:`initial_state`,
  :func:`advance`, :func:`predict_distribution`) used for inference;
* a batched teacher-forced engine (:func:`batch_nll`) that runs each LSTM
  layer over whole padded sequences and back-propagates by hand.

In tree mode every decoder step receives ``[embedding(prev); parent]`` where
``parent`` is the top-layer hidden state that emitted the spawning ``<n>``
(for the root sequence: the encoder's final top-layer state).  A child
sequence starts from the full per-layer (h, c) snapshot of that step and is
fed ``<(`` as its first input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .lf import LevelSequence, LfTree, from_level_sequences, to_level_sequences
from .nn import LstmLayerParams, Parameter
from .text import BOS, EOS, NT, NT_BOS, Vocabulary

BOS_ID, EOS_ID, NT_ID, NT_BOS_ID = 1, 2, 3, 4
MODES = ("seq2seq", "seq2tree")


class VocabularyError(ValueError):
    pass


class InputError(ValueError):
    pass


class StructureError(ValueError):
    pass


# --------------------------------------------------------------------------
# parameters


class ModelParameters:
    """All trainable weights.

    Embedding matrices are stored one row per token, i.e. shape (|V|, e).
    """

    def __init__(
        self,
        src_vocab_size: int,
        tgt_vocab_size: int,
        hidden_dim: int,
        embed_dim: int | None = None,
        num_layers: int = 1,
        mode: str = "seq2seq",
        attention: bool = True,
        dt=None,
    ):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if num_layers < 1 or hidden_dim < 1:
            raise ValueError("num_layers and hidden_dim must be positive")
        dt = dt or nn.dtype()
        e = embed_dim or hidden_dim
        n = hidden_dim
        self.mode = mode
        self.attention_enabled = attention
        self.hidden_dim, self.embed_dim, self.num_layers = n, e, num_layers
        self.input_embeddings = Parameter.zeros((src_vocab_size, e), "input_embeddings", dt)
        self.output_embeddings = Parameter.zeros((tgt_vocab_size, e), "output_embeddings", dt)
        self.encoder_layers = [
            LstmLayerParams.zeros(e if l == 0 else n, n, f"encoder.{l}.", dt) for l in range(num_layers)
        ]
        dec_in = e + n if mode == "seq2tree" else e
        self.decoder_layers = [
            LstmLayerParams.zeros(dec_in if l == 0 else n, n, f"decoder.{l}.", dt) for l in range(num_layers)
        ]
        self.output_projection = Parameter.zeros((tgt_vocab_size, n), "output_projection", dt)
        if attention:
            self.attn_hidden = Parameter.zeros((n, n), "attn_hidden", dt)
            self.attn_context = Parameter.zeros((n, n), "attn_context", dt)
        else:
            self.attn_hidden = self.attn_context = None

    @property
    def tree(self) -> bool:
        return self.mode == "seq2tree"

    @property
    def dtype(self):
        return self.output_projection.value.dtype

    @property
    def src_vocab_size(self) -> int:
        return self.input_embeddings.shape[0]

    @property
    def tgt_vocab_size(self) -> int:
        return self.output_embeddings.shape[0]

    def named_parameters(self) -> dict[str, Parameter]:
        out = {"input_embeddings": self.input_embeddings, "output_embeddings": self.output_embeddings}
        for side, layers in (("encoder", self.encoder_layers), ("decoder", self.decoder_layers)):
            for l, layer in enumerate(layers):
                out[f"{side}.{l}.input_weights"] = layer.input_weights
                out[f"{side}.{l}.recurrent_weights"] = layer.recurrent_weights
                out[f"{side}.{l}.biases"] = layer.biases
        out["output_projection"] = self.output_projection
        if self.attention_enabled:
            out["attn_hidden"] = self.attn_hidden
            out["attn_context"] = self.attn_context
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def copy(self) -> "ModelParameters":
        twin = ModelParameters(
            self.src_vocab_size, self.tgt_vocab_size, self.hidden_dim, self.embed_dim,
            self.num_layers, self.mode, self.attention_enabled, self.dtype,
        )
        for (name, src), dst in zip(self.named_parameters().items(), twin.parameters()):
            dst.value[...] = src.value
            dst.rms_cache[...] = src.rms_cache
        return twin

    def astype(self, dt) -> "ModelParameters":
        twin = ModelParameters(
            self.src_vocab_size, self.tgt_vocab_size, self.hidden_dim, self.embed_dim,
            self.num_layers, self.mode, self.attention_enabled, dt,
        )
        for src, dst in zip(self.parameters(), twin.parameters()):
            dst.value[...] = src.value
        return twin


def init_model(params: ModelParameters, seed: int, half_range: float = 0.08) -> ModelParameters:
    nn.init_uniform(params.parameters(), half_range, nn.make_rng(seed, "init"))
    return params


# --------------------------------------------------------------------------
# step-at-a-time API


@dataclass
class EncoderOutput:
    top_hiddens: np.ndarray  # (|q|, n)
    final_state: list[tuple[np.ndarray, np.ndarray]]  # per layer (h, c)


@dataclass
class DecoderState:
    """Per-layer (h, c) after consuming ``prev_token``.

    Arrays may carry a leading row axis when several hypotheses are stepped
    together.
    """

    layer_states: list[tuple[np.ndarray, np.ndarray]]
    prev_token: object = None
    parent_vector: np.ndarray | None = None

    @property
    def top(self) -> np.ndarray:
        return self.layer_states[-1][0]

    def rows(self, idx) -> "DecoderState":
        return DecoderState(
            [(h[idx], c[idx]) for h, c in self.layer_states],
            None if self.prev_token is None else np.asarray(self.prev_token)[idx],
            None if self.parent_vector is None else self.parent_vector[idx],
        )


def encode(tokens: Sequence[int], params: ModelParameters) -> EncoderOutput:
    """Run the encoder over already-reversed input indices."""
    if len(tokens) == 0:
        raise InputError("cannot encode an empty utterance")
    n = params.hidden_dim
    states = [(np.zeros(n, params.dtype), np.zeros(n, params.dtype)) for _ in params.encoder_layers]
    tops = []
    for tok in tokens:
        x = params.input_embeddings.value[tok]
        new = []
        for layer, (h, c) in zip(params.encoder_layers, states):
            h, c = nn.lstm_cell(x, h, c, layer)
            new.append((h, c))
            x = h
        states = new
        tops.append(x)
    return EncoderOutput(np.stack(tops), states)


def initial_state(enc: EncoderOutput, params: ModelParameters) -> DecoderState:
    parent = enc.final_state[-1][0] if params.tree else None
    return DecoderState([(h.copy(), c.copy()) for h, c in enc.final_state], None, parent)


def child_state(state: DecoderState, params: ModelParameters) -> DecoderState:
    """Start state for the subtree of the ``<n>`` predicted from ``state``."""
    return DecoderState([(h.copy(), c.copy()) for h, c in state.layer_states], None, state.top.copy())


def advance(state: DecoderState, token, params: ModelParameters) -> DecoderState:
    """Feed ``token`` (an index or an array of indices) through one decoder step."""
    x = params.output_embeddings.value[token]
    if params.tree:
        x = np.concatenate([x, state.parent_vector], axis=-1)
    new = []
    for layer, (h, c) in zip(params.decoder_layers, state.layer_states):
        h, c = nn.lstm_cell(x, h, c, layer)
        new.append((h, c))
        x = h
    return DecoderState(new, token, state.parent_vector)


def attend(dec_hidden: np.ndarray, enc: EncoderOutput, params: ModelParameters | None = None):
    """Dot-product attention; returns ``(scores, context)``."""
    H = enc.top_hiddens
    scores = nn.softmax(dec_hidden @ H.T)
    return scores, scores @ H


def _output_distribution(h_top, enc, params):
    if params.attention_enabled:
        scores, ctx = attend(h_top, enc, params)
        h = np.tanh(h_top @ params.attn_hidden.value.T + ctx @ params.attn_context.value.T)
    else:
        scores, h = None, h_top
    return nn.softmax(h @ params.output_projection.value.T), scores


def predict_distribution(state: DecoderState, enc: EncoderOutput, params: ModelParameters) -> np.ndarray:
    return _output_distribution(state.top, enc, params)[0]


# --------------------------------------------------------------------------
# decoding


@dataclass
class SeqDecodeResult:
    tokens: list[int]
    attention: np.ndarray  # (steps, |q|); empty when attention is off
    truncated: bool = False
    log_prob: float = 0.0


@dataclass
class TreeDecodeResult:
    sequences: list[LevelSequence]  # token indices
    tree: LfTree | None
    attention: np.ndarray
    step_tokens: list[int]  # output token of every attention row
    truncated: bool = False


def _empty_attention(q_len, dt):
    return np.zeros((0, q_len), dtype=dt)


def _greedy_rows(state: DecoderState, first_tokens: np.ndarray, enc, params, max_len: int):
    """Greedy decoding of several independent rows stepped in lockstep.

    Returns per-row token lists, per-row snapshot states at every step, per-row
    attention rows and per-row completion flags.
    """
    R = len(first_tokens)
    tokens = [[] for _ in range(R)]
    snaps = [[] for _ in range(R)]
    attn = [[] for _ in range(R)]
    done = np.zeros(R, dtype=bool)
    state = advance(state, first_tokens, params)
    for _ in range(max_len):
        p, scores = _output_distribution(state.top, enc, params)
        y = np.argmax(p, axis=-1)
        for r in np.flatnonzero(~done):
            tokens[r].append(int(y[r]))
            snaps[r].append(state.rows(r))
            if scores is not None:
                attn[r].append(scores[r])
        done |= y == EOS_ID
        if done.all():
            break
        state = advance(state, y, params)
    return tokens, snaps, attn, done


def greedy_decode_seq(q_tokens: Sequence[int], params: ModelParameters, max_len: int = 100) -> SeqDecodeResult:
    """Argmax decoding (ties to the lowest index) until ``</s>`` or ``max_len`` steps."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    enc = encode(q_tokens, params)
    state = _batched(initial_state(enc, params), 1)
    toks, _, attn, done = _greedy_rows(state, np.array([BOS_ID]), enc, params, max_len)
    out = toks[0]
    truncated = not done[0]
    if not truncated:
        out = out[:-1]
    A = np.stack(attn[0]) if attn[0] else _empty_attention(len(q_tokens), params.dtype)
    return SeqDecodeResult(out, A, truncated)


def _batched(state: DecoderState, R: int) -> DecoderState:
    rep = lambda a: np.repeat(a[None], R, axis=0)
    return DecoderState(
        [(rep(h), rep(c)) for h, c in state.layer_states],
        None,
        None if state.parent_vector is None else rep(state.parent_vector),
    )


def _stack_states(states: list[DecoderState]) -> DecoderState:
    L = len(states[0].layer_states)
    layers = [
        (np.stack([s.layer_states[l][0] for s in states]), np.stack([s.layer_states[l][1] for s in states]))
        for l in range(L)
    ]
    parent = None if states[0].parent_vector is None else np.stack([s.parent_vector for s in states])
    return DecoderState(layers, None, parent)


@dataclass
class _Job:
    node_id: int
    parent_id: int | None
    position: int | None
    depth: int
    state: DecoderState
    first: int


def decode_tree(
    q_tokens: Sequence[int],
    params: ModelParameters,
    vocab: Vocabulary | None = None,
    max_seq_len: int = 100,
    max_depth: int = 10,
    max_nodes: int = 500,
    batched: bool = True,
) -> TreeDecodeResult:
    """Greedy hierarchical decoding with a FIFO nonterminal queue.

    With ``batched`` all queued jobs of the current depth are decoded together;
    otherwise one job at a time.  Nonterminals left unexpanded because a cap
    tripped are dropped from the assembled tree and the result is flagged as
    truncated.  ``vocab`` is needed only to build ``tree``.
    """
    if min(max_seq_len, max_depth, max_nodes) < 1:
        raise ValueError("decoding caps must be positive")
    enc = encode(q_tokens, params)
    root = initial_state(enc, params)
    queue = [_Job(0, None, None, 1, root, BOS_ID)]
    next_id = 1
    decoded: dict[int, LevelSequence] = {}
    attn_rows, step_tokens = [], []
    truncated = False
    head = 0
    while head < len(queue):
        budget = max_nodes - len(decoded)
        if budget <= 0:
            truncated = True
            break
        if batched:
            depth = queue[head].depth
            end = head
            while end < len(queue) and queue[end].depth == depth and end - head < budget:
                end += 1
        else:
            end = head + 1
        jobs = queue[head:end]
        head = end
        state = _stack_states([j.state for j in jobs])
        toks, snaps, attn, done = _greedy_rows(
            state, np.array([j.first for j in jobs]), enc, params, max_seq_len
        )
        for r, job in enumerate(jobs):
            if not done[r]:
                truncated = True
            seq = list(toks[r])
            for pos, tok in enumerate(seq):
                if tok != NT_ID:
                    continue
                if job.depth + 1 > max_depth:
                    truncated = True
                    continue
                queue.append(_Job(next_id, job.node_id, pos, job.depth + 1, child_state(snaps[r][pos], params), NT_BOS_ID))
                next_id += 1
            decoded[job.node_id] = LevelSequence(job.node_id, job.parent_id, tuple(seq), job.position, job.depth)
            attn_rows.extend(attn[r])
            step_tokens.extend(seq)
    if head < len(queue):
        truncated = True
    A = np.stack(attn_rows) if attn_rows else _empty_attention(len(q_tokens), params.dtype)
    seqs = [decoded[k] for k in sorted(decoded)]
    tree = None
    if vocab is not None:
        tree = assemble_tree(seqs, vocab)
        if tree is None:
            truncated = True
    return TreeDecodeResult(seqs, tree, A, step_tokens, truncated)


def assemble_tree(seqs: list[LevelSequence], vocab: Vocabulary) -> LfTree | None:
    """Build an :class:`LfTree` from decoded index sequences.

    Nonterminals whose child was never decoded are dropped, as are empty
    subtrees.  Returns ``None`` when nothing is left.
    """
    have = {(s.parent_id, s.position) for s in seqs if s.parent_id is not None}
    by_parent: dict[tuple[int, int], LevelSequence] = {(s.parent_id, s.position): s for s in seqs if s.parent_id is not None}

    def build(s: LevelSequence):
        out = []
        for pos, tok in enumerate(s.tokens):
            if tok == EOS_ID:
                break
            if tok == NT_ID:
                if (s.node_id, pos) not in have:
                    continue
                child = build(by_parent[(s.node_id, pos)])
                if child is not None:
                    out.append(child)
            else:
                out.append(vocab.index_to_token[tok])
        return LfTree(out) if out else None

    roots = [s for s in seqs if s.parent_id is None]
    return build(roots[0]) if roots else None


def beam_decode_seq(
    q_tokens: Sequence[int], params: ModelParameters, beam: int = 5, max_len: int = 100
) -> SeqDecodeResult:
    """Length-synchronous beam search over token log-probabilities.

    At each step the ``beam`` best expansions survive; those ending in ``</s>``
    are set aside as finished.  Search stops when no live hypothesis can beat
    the best finished one.  The answer is the best of the finished hypotheses
    and, if ``max_len`` was reached, the surviving (truncated) ones.
    ``beam=1`` reproduces :func:`greedy_decode_seq`.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    enc = encode(q_tokens, params)
    state = advance(_batched(initial_state(enc, params), 1), np.array([BOS_ID]), params)
    scores = np.zeros(1)
    hyps: list[list[int]] = [[]]
    attns: list[list[np.ndarray]] = [[]]
    finished: list[tuple[float, list[int], list[np.ndarray]]] = []
    for _ in range(max_len):
        p, att = _output_distribution(state.top, enc, params)
        V = p.shape[-1]
        cand = (scores[:, None] + np.log(np.maximum(p.astype(np.float64), 1e-300))).ravel()
        order = np.argsort(-cand, kind="stable")[:beam]
        keep_rows, keep_tok, new_scores, new_hyps, new_attns = [], [], [], [], []
        for k in order:
            r, y = divmod(int(k), V)
            a = attns[r] + ([att[r]] if att is not None else [])
            if y == EOS_ID:
                finished.append((float(cand[k]), hyps[r], a))
            else:
                keep_rows.append(r)
                keep_tok.append(y)
                new_scores.append(cand[k])
                new_hyps.append(hyps[r] + [y])
                new_attns.append(a)
        if not keep_rows:
            hyps = []
            break
        scores = np.array(new_scores)
        hyps, attns = new_hyps, new_attns
        if finished and max(f[0] for f in finished) >= scores.max():
            hyps = []
            break
        state = advance(state.rows(np.array(keep_rows)), np.array(keep_tok), params)
    pool = [(s, h, a, False) for s, h, a in finished]
    pool += [(float(s), h, a, True) for s, h, a in zip(scores, hyps, attns)]
    best = max(pool, key=lambda item: item[0])  # max keeps the first of equal scores
    score, toks, a, truncated = best
    A = np.stack(a) if a else _empty_attention(len(q_tokens), params.dtype)
    return SeqDecodeResult(list(toks), A, truncated, score)


# --------------------------------------------------------------------------
# batched teacher-forced engine


class Dropout:
    def __init__(self, rate: float = 0.0, rng: np.random.Generator | None = None, training: bool = False):
        if not 0 <= rate < 1:
            raise nn.ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate, self.rng, self.training = rate, rng, training

    def mask(self, shape, dt):
        return nn.dropout_mask(shape, self.rate, self.rng, self.training, dt)


NO_DROPOUT = Dropout()


@dataclass
class Batch:
    """Padded source indices plus per-example targets.

    ``targets[b]`` is a list of index tokens ending in ``</s>`` (sequence mode)
    or a list of :class:`LevelSequence` with index tokens (tree mode).
    Padded source positions are masked out of attention and leave the encoder
    state untouched; padded target positions carry zero loss.
    """

    src: np.ndarray  # (B, S) int
    src_mask: np.ndarray  # (B, S) bool
    targets: list
    examples: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return self.src_mask.sum(axis=1)

    @classmethod
    def from_lists(cls, sources: Sequence[Sequence[int]], targets: list, examples=None) -> "Batch":
        if any(len(s) == 0 for s in sources):
            raise InputError("cannot encode an empty utterance")
        S = max(len(s) for s in sources)
        src = np.zeros((len(sources), S), dtype=np.int64)
        mask = np.zeros((len(sources), S), dtype=bool)
        for b, s in enumerate(sources):
            src[b, : len(s)] = s
            mask[b, : len(s)] = True
        return cls(src, mask, list(targets), list(examples or []))


def _pad(rows: list[Sequence[int]]):
    T = max(len(r) for r in rows)
    out = np.zeros((len(rows), T), dtype=np.int64)
    mask = np.zeros((len(rows), T), dtype=bool)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
        mask[i, : len(r)] = True
    return out, mask


def _encoder_forward(params, batch: Batch, drop: Dropout):
    dt = params.dtype
    B, S = batch.src.shape
    n = params.hidden_dim
    X = params.input_embeddings.value[batch.src.T]  # (S, B, e)
    tmask = batch.src_mask.T
    caches, drops = [], []
    for l, layer in enumerate(params.encoder_layers):
        dm = drop.mask(X.shape, dt) if l > 0 else None
        Xin = X if dm is None else X * dm
        H, C, cache = nn.lstm_layer_forward(Xin, np.zeros((B, n), dt), np.zeros((B, n), dt), layer, tmask)
        caches.append((H, C, cache))
        drops.append(dm)
        X = H
    memory = np.ascontiguousarray(caches[-1][0].transpose(1, 0, 2))  # (B, S, n)
    final = [(H[-1], C[-1]) for H, C, _ in caches]
    return memory, final, (caches, drops)


def _encoder_backward(params, batch: Batch, cache, d_memory, d_final):
    caches, drops = cache
    L = len(caches)
    dX = None
    for l in reversed(range(L)):
        H, C, c = caches[l]
        dH = np.zeros_like(H)
        dC = np.zeros_like(C)
        if l == L - 1:
            dH += d_memory.transpose(1, 0, 2)
        else:
            dH += dX
        dH[-1] += d_final[l][0]
        dC[-1] += d_final[l][1]
        dXin, _, _ = nn.lstm_layer_backward(dH, dC, c, params.encoder_layers[l])
        dX = dXin if drops[l] is None else dXin * drops[l]
    np.add.at(params.input_embeddings.grad, batch.src.T, dX)


def head_forward(params, top, Hr, mr, drop_mask):
    """Attention + softmax head for decoder states ``top`` (T, R, n).

    ``Hr`` (R, S, n) and ``mr`` (R, S) are each row's encoder memory and mask.
    Returns ``(probabilities (T, R, V), cache)``.
    """
    if params.attention_enabled:
        e = np.einsum("trn,rsn->trs", top, Hr)
        s = nn.masked_softmax(e, mr[None])
        ctx = np.einsum("trs,rsn->trn", s, Hr)
        hatt = np.tanh(top @ params.attn_hidden.value.T + ctx @ params.attn_context.value.T)
        feat = hatt
    else:
        s = ctx = hatt = None
        feat = top
    dropped = feat if drop_mask is None else feat * drop_mask
    p = nn.softmax(dropped @ params.output_projection.value.T)
    return p, (top, Hr, s, ctx, hatt, dropped, drop_mask)


def head_backward(params, dlogits, cache):
    """Accumulates head parameter grads; returns ``(d_top, d_Hr)``."""
    top, Hr, s, ctx, hatt, dropped, drop_mask = cache
    V, n = params.output_projection.shape
    params.output_projection.grad += dlogits.reshape(-1, V).T @ dropped.reshape(-1, n)
    dfeat = dlogits @ params.output_projection.value
    if drop_mask is not None:
        dfeat = dfeat * drop_mask
    if not params.attention_enabled:
        return dfeat, None
    dpre = dfeat * (1 - hatt**2)
    params.attn_hidden.grad += dpre.reshape(-1, n).T @ top.reshape(-1, n)
    params.attn_context.grad += dpre.reshape(-1, n).T @ ctx.reshape(-1, n)
    dtop = dpre @ params.attn_hidden.value
    dctx = dpre @ params.attn_context.value
    ds = np.einsum("trn,rsn->trs", dctx, Hr)
    de = s * (ds - (ds * s).sum(axis=-1, keepdims=True))
    dtop += np.einsum("trs,rsn->trn", de, Hr)
    dHr = np.einsum("trs,trn->rsn", de, top) + np.einsum("trs,trn->rsn", s, dctx)
    return dtop, dHr


@dataclass
class _Level:
    ex: np.ndarray  # (R,) example index of each row
    inp: np.ndarray  # (R, T)
    tgt: np.ndarray  # (R, T)
    mask: np.ndarray  # (R, T)
    prow: np.ndarray | None = None  # (R,) parent row in the previous level
    ppos: np.ndarray | None = None  # (R,) step of the spawning <n>


def _level_forward(params, lev: _Level, h0, c0, parent, memory, mem_mask, drop: Dropout):
    dt = params.dtype
    tmask = lev.mask.T
    E = params.output_embeddings.value[lev.inp.T]  # (T, R, e)
    T = E.shape[0]
    X = E if parent is None else np.concatenate([E, np.broadcast_to(parent, (T,) + parent.shape)], axis=-1)
    layers, drops = [], []
    for l, layer in enumerate(params.decoder_layers):
        dm = drop.mask(X.shape, dt) if l > 0 else None
        Xin = X if dm is None else X * dm
        H, C, cache = nn.lstm_layer_forward(Xin, h0[l], c0[l], layer, tmask)
        layers.append((H, C, cache))
        drops.append(dm)
        X = H
    top = layers[-1][0]
    Hr = memory[lev.ex]
    mr = mem_mask[lev.ex]
    feat_shape = top.shape
    head_drop = drop.mask(feat_shape, dt)
    p, hcache = head_forward(params, top, Hr, mr, head_drop)
    loss, dlogits = nn.nll_forward(p, lev.tgt.T, tmask)
    return loss, (layers, drops, hcache, dlogits, E.shape[-1])


def _level_backward(params, lev: _Level, cache, dH_ext, dC_ext, d_memory):
    layers, drops, hcache, dlogits, e = cache
    dtop, dHr = head_backward(params, dlogits, hcache)
    if dHr is not None:
        np.add.at(d_memory, lev.ex, dHr)
    L = len(layers)
    dX = None
    dh0, dc0 = [None] * L, [None] * L
    for l in reversed(range(L)):
        H, C, c = layers[l]
        dH = dH_ext[l] + (dtop if l == L - 1 else dX)
        dXin, dh0[l], dc0[l] = nn.lstm_layer_backward(dH, dC_ext[l], c, params.decoder_layers[l])
        dX = dXin if drops[l] is None else dXin * drops[l]
    dE = dX[..., :e]
    np.add.at(params.output_embeddings.grad, lev.inp.T, dE)
    dparent = dX[..., e:].sum(axis=0) if params.tree else None
    return dh0, dc0, dparent


def _build_levels(params, batch: Batch) -> list[_Level]:
    if not params.tree:
        rows_in, rows_out = [], []
        for tgt in batch.targets:
            rows_in.append([BOS_ID] + list(tgt[:-1]))
            rows_out.append(list(tgt))
        inp, mask = _pad(rows_in)
        tgt, _ = _pad(rows_out)
        return [_Level(np.arange(batch.size), inp, tgt, mask)]
    by_depth: dict[int, list] = {}
    for b, seqs in enumerate(batch.targets):
        for s in seqs:
            by_depth.setdefault(s.depth, []).append((b, s))
    levels = []
    row_of: dict[tuple[int, int], int] = {}
    for d in sorted(by_depth):
        items = by_depth[d]
        ex, rin, rout, prow, ppos = [], [], [], [], []
        new_rows = {}
        for r, (b, s) in enumerate(items):
            ex.append(b)
            first = BOS_ID if s.parent_id is None else NT_BOS_ID
            rin.append([first] + list(s.tokens[:-1]))
            rout.append(list(s.tokens))
            if s.parent_id is not None:
                prow.append(row_of[(b, s.parent_id)])
                ppos.append(s.position)
            new_rows[(b, s.node_id)] = r
        row_of = new_rows
        inp, mask = _pad(rin)
        tgt, _ = _pad(rout)
        lev = _Level(np.array(ex), inp, tgt, mask)
        if d > 1:
            lev.prow, lev.ppos = np.array(prow), np.array(ppos)
        levels.append(lev)
    return levels


def batch_nll(params: ModelParameters, batch: Batch, drop: Dropout = NO_DROPOUT, backward: bool = False) -> float:
    """Summed negative log-likelihood of a batch under teacher forcing.

    With ``backward`` the gradient of that sum is accumulated into the
    parameters' ``grad`` arrays.
    """
    levels = _build_levels(params, batch)
    memory, final, enc_cache = _encoder_forward(params, batch, drop)
    L = params.num_layers
    total = 0.0
    caches = []
    prev_H = prev_C = None
    for d, lev in enumerate(levels):
        if d == 0:
            h0 = [final[l][0][lev.ex] for l in range(L)]
            c0 = [final[l][1][lev.ex] for l in range(L)]
            parent = final[-1][0][lev.ex] if params.tree else None
        else:
            h0 = [prev_H[l][lev.ppos, lev.prow] for l in range(L)]
            c0 = [prev_C[l][lev.ppos, lev.prow] for l in range(L)]
            parent = h0[-1]
        loss, cache = _level_forward(params, lev, h0, c0, parent, memory, batch.src_mask, drop)
        total += loss
        caches.append(cache)
        prev_H = [layer[0] for layer in cache[0]]
        prev_C = [layer[1] for layer in cache[0]]
    if not backward:
        return total

    d_memory = np.zeros_like(memory)
    ext_H = [[np.zeros_like(layer[0]) for layer in c[0]] for c in caches]
    ext_C = [[np.zeros_like(layer[1]) for layer in c[0]] for c in caches]
    d_final = [(np.zeros_like(h), np.zeros_like(c)) for h, c in final]
    for d in reversed(range(len(levels))):
        lev = levels[d]
        dh0, dc0, dparent = _level_backward(params, lev, caches[d], ext_H[d], ext_C[d], d_memory)
        if d == 0:
            for l in range(L):
                np.add.at(d_final[l][0], lev.ex, dh0[l])
                np.add.at(d_final[l][1], lev.ex, dc0[l])
            if dparent is not None:
                np.add.at(d_final[-1][0], lev.ex, dparent)
        else:
            for l in range(L):
                np.add.at(ext_H[d - 1][l], (lev.ppos, lev.prow), dh0[l])
                np.add.at(ext_C[d - 1][l], (lev.ppos, lev.prow), dc0[l])
            np.add.at(ext_H[d - 1][-1], (lev.ppos, lev.prow), dparent)
    _encoder_backward(params, batch, enc_cache, d_memory, d_final)
    return total


# --------------------------------------------------------------------------
# likelihood of single examples


def _check_targets(indices, params):
    V = params.tgt_vocab_size
    bad = [i for i in indices if not 0 <= i < V]
    if bad:
        raise VocabularyError(f"target token index {bad[0]} outside output vocabulary of size {V}")


def encode_tree(tree: LfTree | Sequence[LevelSequence], vocab: Vocabulary | None = None) -> list[LevelSequence]:
    """Level sequences with index tokens; trees need ``vocab`` (tokens must be known)."""
    if isinstance(tree, LfTree):
        if vocab is None:
            raise VocabularyError("a vocabulary is needed to score an LfTree")
        out = []
        for s in to_level_sequences(tree):
            missing = [t for t in s.tokens if t not in vocab]
            if missing:
                raise VocabularyError(f"token {missing[0]!r} not in output vocabulary")
            out.append(s._replace(tokens=tuple(vocab.token_to_index[t] for t in s.tokens)))
        return out
    return [LevelSequence(*s) for s in tree]


def seq_log_prob(
    q_tokens: Sequence[int],
    a_tokens: Sequence[int],
    params: ModelParameters,
    rng: np.random.Generator | None = None,
    training: bool = False,
    dropout_rate: float = 0.0,
    backward: bool = False,
) -> float:
    """log p(a | q) for index sequences; ``a_tokens`` must end with ``</s>``.

    On a tree-mode model the sequence is scored as a root-level sequence.
    ``backward`` accumulates the gradient of ``-log p`` into the parameters.
    """
    a_tokens = list(a_tokens)
    if not a_tokens or a_tokens[-1] != EOS_ID:
        raise ValueError("target sequence must end with </s>")
    _check_targets(a_tokens, params)
    if params.tree:
        target = [LevelSequence(0, None, tuple(a_tokens), None, 1)]
    else:
        target = a_tokens
    drop = Dropout(dropout_rate, rng, training)
    return -batch_nll(params, Batch.from_lists([list(q_tokens)], [target]), drop, backward)


def tree_log_prob(
    q_tokens: Sequence[int],
    tree,
    params: ModelParameters,
    vocab: Vocabulary | None = None,
    rng: np.random.Generator | None = None,
    training: bool = False,
    dropout_rate: float = 0.0,
    backward: bool = False,
    max_depth: int = 10,
) -> float:
    """log p(tree | q) as the sum over its level sequences."""
    if not params.tree:
        raise ValueError("tree_log_prob needs a seq2tree model")
    seqs = encode_tree(tree, vocab)
    if max(s.depth for s in seqs) > max_depth:
        raise StructureError(f"tree depth exceeds cap {max_depth}")
    for s in seqs:
        _check_targets(s.tokens, params)
    drop = Dropout(dropout_rate, rng, training)
    return -batch_nll(params, Batch.from_lists([list(q_tokens)], [seqs]), drop, backward)
