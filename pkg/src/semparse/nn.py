"""Dense numpy kernels with hand-written backward passes.

Every primitive comes as a ``*_forward`` / ``*_backward`` pair (or a single
function when there is nothing to cache).  Arrays are plain ``numpy.ndarray``
objects; a leading batch axis is allowed everywhere a vector is expected.

LSTM gate blocks are stored in the order ``[i, f, o, g]``: input gate, forget
gate, output gate, candidate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_EPS = 1e-12
RMSPROP_EPS = 1e-8

_PRECISIONS = {"standard": np.float32, "high": np.float64}
_precision = "standard"


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


def set_precision(mode: str) -> None:
    """Switch the global numeric mode (``"standard"`` or ``"high"``)."""
    global _precision
    if mode not in _PRECISIONS:
        raise ConfigurationError(f"unknown precision {mode!r}")
    _precision = mode


def get_precision() -> str:
    return _precision


def dtype() -> type:
    return _PRECISIONS[_precision]


class precision:
    """Context manager that temporarily changes the numeric mode."""

    def __init__(self, mode: str):
        self.mode = mode

    def __enter__(self):
        self._old = get_precision()
        set_precision(self.mode)
        return self

    def __exit__(self, *exc):
        set_precision(self._old)
        return False


# --------------------------------------------------------------------------
# randomness

STREAMS = ("init", "dropout", "shuffle", "split", "probe")


def make_rng(seed: int, stream: str) -> np.random.Generator:
    """Deterministic PCG64 generator for one named purpose.

    Streams are derived with ``SeedSequence(seed, spawn_key=(index,))`` where
    ``index`` is the position of ``stream`` in :data:`STREAMS`, so the draws
    for one purpose never depend on how many draws another purpose made.
    """
    if stream not in STREAMS:
        raise ConfigurationError(f"unknown rng stream {stream!r}")
    seq = np.random.SeedSequence(seed, spawn_key=(STREAMS.index(stream),))
    return np.random.Generator(np.random.PCG64(seq))


# --------------------------------------------------------------------------
# parameters


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    rms_cache: np.ndarray = field(init=False)
    name: str = ""

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        self.grad = np.zeros_like(self.value)
        self.rms_cache = np.zeros_like(self.value)

    @classmethod
    def zeros(cls, shape, name: str = "", dt=None) -> "Parameter":
        return cls(np.zeros(shape, dtype=dt or dtype()), name=name)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def astype(self, dt) -> "Parameter":
        p = Parameter(self.value.astype(dt), name=self.name)
        p.grad = self.grad.astype(dt)
        p.rms_cache = self.rms_cache.astype(dt)
        return p


@dataclass
class LstmLayerParams:
    input_weights: Parameter  # (4n, m)
    recurrent_weights: Parameter  # (4n, n)
    biases: Parameter  # (4n,)

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int, prefix: str = "", dt=None):
        return cls(
            Parameter.zeros((4 * hidden_dim, input_dim), prefix + "Wx", dt),
            Parameter.zeros((4 * hidden_dim, hidden_dim), prefix + "Wh", dt),
            Parameter.zeros((4 * hidden_dim,), prefix + "b", dt),
        )

    @property
    def hidden_dim(self) -> int:
        return self.recurrent_weights.shape[1]

    @property
    def input_dim(self) -> int:
        return self.input_weights.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.input_weights, self.recurrent_weights, self.biases]


# --------------------------------------------------------------------------
# primitives


def affine_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``W @ x + b`` for x of shape (..., m) and W of shape (k, m)."""
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"affine: x has shape {x.shape}, W has shape {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"affine: W has shape {W.shape}, b has shape {b.shape}")
    out = x @ W.T
    if b is not None:
        out = out + b
    return out


def affine_backward(dout: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Returns ``(dx, dW, db)`` for :func:`affine_forward`."""
    dx = dout @ W
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dW = d2.T @ x2
    db = d2.sum(axis=0)
    return dx, dW, db


def affine(x, W, b):
    return affine_forward(np.asarray(x), np.asarray(W), np.asarray(b))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z)
    if z.size == 0 or z.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dout: np.ndarray, p: np.ndarray, axis: int = -1) -> np.ndarray:
    return p * (dout - (dout * p).sum(axis=axis, keepdims=True))


def masked_softmax(z: np.ndarray, mask: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax restricted to positions where ``mask`` is true (others get 0)."""
    z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    e = np.where(mask, e, 0.0)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def cross_entropy(dist: np.ndarray, target_index: int) -> float:
    dist = np.asarray(dist)
    if not 0 <= target_index < dist.shape[-1]:
        raise IndexError(f"target {target_index} outside distribution of size {dist.shape[-1]}")
    return float(-np.log(dist[target_index] + LOG_EPS))


def nll_forward(p: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Masked sum of ``-log(p[target] + LOG_EPS)`` and its gradient w.r.t. logits.

    ``p`` is (..., V) softmax output, ``targets`` and ``mask`` are (...,).
    """
    picked = np.take_along_axis(p, targets[..., None], axis=-1)[..., 0]
    loss = float((-np.log(picked + LOG_EPS) * mask).sum())
    scale = (picked / (picked + LOG_EPS)) * mask
    dlogits = p * scale[..., None]
    np.put_along_axis(
        dlogits,
        targets[..., None],
        np.take_along_axis(dlogits, targets[..., None], axis=-1) - scale[..., None],
        axis=-1,
    )
    return loss, dlogits


def lstm_cell_forward(x, h_prev, c_prev, params: LstmLayerParams):
    """One LSTM step; returns ``(h, c, cache)``."""
    n = params.hidden_dim
    if x.shape[-1] != params.input_dim:
        raise DimensionError(f"lstm_cell: input width {x.shape[-1]} != {params.input_dim}")
    if h_prev.shape[-1] != n or c_prev.shape[-1] != n:
        raise DimensionError(f"lstm_cell: state width must be {n}")
    a = (
        x @ params.input_weights.value.T
        + h_prev @ params.recurrent_weights.value.T
        + params.biases.value
    )
    ifo = sigmoid(a[..., : 3 * n])
    g = np.tanh(a[..., 3 * n :])
    i, f, o = ifo[..., :n], ifo[..., n : 2 * n], ifo[..., 2 * n :]
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x, h_prev, c_prev, i, f, o, g, tc)


def _gate_grads(dh, dc, c_prev, i, f, o, g, tc):
    dc = dc + dh * o * (1 - tc**2)
    da = np.concatenate(
        [
            dc * g * i * (1 - i),
            dc * c_prev * f * (1 - f),
            dh * tc * o * (1 - o),
            dc * i * (1 - g**2),
        ],
        axis=-1,
    )
    return da, dc * f


def lstm_cell_backward(dh, dc, cache, params: LstmLayerParams):
    """Accumulates parameter grads; returns ``(dx, dh_prev, dc_prev)``."""
    x, h_prev, c_prev, i, f, o, g, tc = cache
    da, dc_prev = _gate_grads(dh, dc, c_prev, i, f, o, g, tc)
    da2 = da.reshape(-1, da.shape[-1])
    params.input_weights.grad += da2.T @ x.reshape(-1, x.shape[-1])
    params.recurrent_weights.grad += da2.T @ h_prev.reshape(-1, h_prev.shape[-1])
    params.biases.grad += da2.sum(axis=0)
    dx = da @ params.input_weights.value
    dh_prev = da @ params.recurrent_weights.value
    return dx, dh_prev, dc_prev


def lstm_cell(x, h_prev, c_prev, params: LstmLayerParams):
    h, c, _ = lstm_cell_forward(np.asarray(x), np.asarray(h_prev), np.asarray(c_prev), params)
    return h, c


def lstm_layer_forward(X, h0, c0, params: LstmLayerParams, mask=None):
    """Run one LSTM layer over X of shape (T, B, m).

    Where ``mask[t, b]`` is 0 the step is skipped and the state carries over
    unchanged, which lets right-padded batches share one loop.
    Returns ``(H, C, cache)`` with H, C of shape (T, B, n).
    """
    T = X.shape[0]
    n = params.hidden_dim
    if X.shape[-1] != params.input_dim:
        raise DimensionError(f"lstm layer: input width {X.shape[-1]} != {params.input_dim}")
    Ax = X @ params.input_weights.value.T + params.biases.value
    Wh_T = params.recurrent_weights.value.T
    H = np.empty(X.shape[:2] + (n,), dtype=X.dtype)
    C = np.empty_like(H)
    gates = np.empty(X.shape[:2] + (4 * n,), dtype=X.dtype)
    TC = np.empty_like(H)
    h, c = h0, c0
    for t in range(T):
        a = Ax[t] + h @ Wh_T
        ifo = sigmoid(a[:, : 3 * n])
        g = np.tanh(a[:, 3 * n :])
        c_new = ifo[:, n : 2 * n] * c + ifo[:, :n] * g
        tc = np.tanh(c_new)
        h_new = ifo[:, 2 * n :] * tc
        if mask is not None:
            m = mask[t][:, None]
            h_new = np.where(m, h_new, h)
            c_new = np.where(m, c_new, c)
        gates[t, :, : 3 * n] = ifo
        gates[t, :, 3 * n :] = g
        TC[t] = tc
        H[t] = h_new
        C[t] = c_new
        h, c = h_new, c_new
    return H, C, (X, h0, c0, H, C, gates, TC, mask)


def lstm_layer_backward(dH, dC, cache, params: LstmLayerParams):
    """Backward of :func:`lstm_layer_forward`.

    ``dH``/``dC`` are (T, B, n) gradients arriving from outside the recurrence
    (upper layers, attention, snapshot consumers); either may be ``None``.
    Accumulates parameter grads; returns ``(dX, dh0, dc0)``.
    """
    X, h0, c0, H, C, gates, TC, mask = cache
    T, B, n = H.shape
    Wh = params.recurrent_weights.value
    dA = np.zeros_like(gates)
    dh_next = np.zeros((B, n), dtype=H.dtype)
    dc_next = np.zeros((B, n), dtype=H.dtype)
    for t in reversed(range(T)):
        dh = dh_next if dH is None else dh_next + dH[t]
        dc = dc_next if dC is None else dc_next + dC[t]
        c_prev = C[t - 1] if t > 0 else c0
        g = gates[t]
        da, dc_prev = _gate_grads(
            dh, dc, c_prev, g[:, :n], g[:, n : 2 * n], g[:, 2 * n : 3 * n], g[:, 3 * n :], TC[t]
        )
        if mask is not None:
            m = mask[t][:, None]
            da = np.where(m, da, 0.0)
            dc_prev = np.where(m, dc_prev, dc)
            dh_prev = np.where(m, da @ Wh, dh)
        else:
            dh_prev = da @ Wh
        dA[t] = da
        dh_next, dc_next = dh_prev, dc_prev
    dA2 = dA.reshape(-1, 4 * n)
    H_prev = np.concatenate([h0[None], H[:-1]], axis=0).reshape(-1, n)
    params.input_weights.grad += dA2.T @ X.reshape(-1, X.shape[-1])
    params.recurrent_weights.grad += dA2.T @ H_prev
    params.biases.grad += dA2.sum(axis=0)
    dX = dA @ params.input_weights.value
    return dX, dh_next, dc_next


def dropout_mask(shape, rate: float, rng: np.random.Generator | None, training: bool, dt=None):
    """Inverted-dropout multiplier, or ``None`` when dropout is inactive."""
    if not 0 <= rate < 1:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return None
    keep = rng.random(shape) >= rate
    return keep.astype(dt or dtype()) / (1.0 - rate)


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None, training: bool) -> np.ndarray:
    m = dropout_mask(x.shape, rate, rng, training, x.dtype)
    return x if m is None else x * m


# --------------------------------------------------------------------------
# optimisation


def global_grad_norm(params: Iterable[Parameter]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params)))


def clip_gradients(params: Sequence[Parameter], threshold: float) -> float:
    """Global L2-norm clipping; returns the norm before clipping."""
    if threshold <= 0:
        raise ConfigurationError("clip threshold must be positive")
    params = list(params)
    if not params:
        return 0.0
    norm = global_grad_norm(params)
    if norm > threshold:
        scale = threshold / norm
        for p in params:
            p.grad *= scale
    return norm


def rmsprop_step(params: Sequence[Parameter], lr: float, smoothing: float = 0.95, eps: float = RMSPROP_EPS) -> None:
    for p in params:
        g = p.grad
        p.rms_cache *= smoothing
        p.rms_cache += (1 - smoothing) * g * g
        p.value -= lr * g / (np.sqrt(p.rms_cache) + eps)
        p.zero_grad()


def init_uniform(params: Sequence[Parameter], half_range: float, rng: np.random.Generator) -> None:
    if half_range <= 0:
        raise ConfigurationError("half_range must be positive")
    for p in params:
        p.value[...] = rng.uniform(-half_range, half_range, size=p.shape)


# --------------------------------------------------------------------------
# gradient checking


def relative_error(analytic: float, numeric: float, floor: float = 1e-5) -> float:
    """``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is ~0 from being scored on
    central-difference round-off alone (about 1e-10 for O(1) losses).
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(
    loss_fn: Callable[[], float],
    params: Sequence[Parameter],
    probes: int = 100,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn()`` must return the loss and accumulate its gradient into
    ``p.grad`` for every parameter.  Probed entries are drawn uniformly over
    all parameter entries.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss_fn()
    analytic = [p.grad.copy() for p in params]
    sizes = np.array([p.value.size for p in params])
    rng = make_rng(seed, "probe")
    flat = rng.choice(int(sizes.sum()), size=min(probes, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for k in flat:
        pi = int(np.searchsorted(offsets, k, side="right") - 1)
        idx = np.unravel_index(int(k - offsets[pi]), params[pi].shape)
        v = params[pi].value
        old = v[idx]
        v[idx] = old + h
        fp = loss_fn()
        v[idx] = old - h
        fm = loss_fn()
        v[idx] = old
        numeric = (fp - fm) / (2 * h)
        worst = max(worst, relative_error(float(analytic[pi][idx]), numeric))
    for p, a in zip(params, analytic):
        p.grad[...] = a
    return worst
