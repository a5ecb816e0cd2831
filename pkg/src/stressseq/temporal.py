"""LSTM cell and sequence layer with analytic gradients.

The vectorized forward/backward below is the path used by the models. A
deliberately plain, loop-based scalar implementation (``cell_step_scalar``)
is kept alongside it as an independent cross-check: it shares no array code
with the vectorized path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GATE_NAMES = ("f", "i", "c", "o")

WEIGHT_KEYS = (
    "W_fh", "W_fx", "b_f",
    "W_ih", "W_ix", "b_i",
    "W_ch", "W_cx", "b_c",
    "W_oh", "W_ox", "b_o",
)


def sigmoid(z):
    """Numerically stable elementwise logistic function."""
    z = np.asarray(z)
    out = np.empty_like(z, dtype=z.dtype if z.dtype.kind == "f" else np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class LstmWeights:
    """All weight matrices and biases of one LSTM cell.

    For each gate g in (f, i, c, o): ``W_gh`` has shape (H, H) and acts on the
    previous hidden state, ``W_gx`` has shape (H, D) and acts on the input,
    ``b_g`` has shape (H,).
    """

    W_fh: np.ndarray
    W_fx: np.ndarray
    b_f: np.ndarray
    W_ih: np.ndarray
    W_ix: np.ndarray
    b_i: np.ndarray
    W_ch: np.ndarray
    W_cx: np.ndarray
    b_c: np.ndarray
    W_oh: np.ndarray
    W_ox: np.ndarray
    b_o: np.ndarray

    def __post_init__(self):
        H, D = self.W_fx.shape
        for key in WEIGHT_KEYS:
            arr = getattr(self, key)
            expected = (H, H) if key.endswith("h") else (H, D) if key.endswith("x") else (H,)
            if arr.shape != expected:
                raise ValueError(f"{key} has shape {arr.shape}, expected {expected}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{key} contains non-finite values")

    @property
    def hidden_units(self) -> int:
        return self.W_fx.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_fx.shape[1]

    @classmethod
    def init(cls, hidden_units, input_dim, rng=None, dtype=np.float32):
        """Glorot-uniform kernels, zero biases except a unit forget bias."""
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        H, D = hidden_units, input_dim

        def glorot(n_out, n_in):
            limit = math.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-limit, limit, size=(n_out, n_in)).astype(dtype)

        kwargs = {}
        for g in GATE_NAMES:
            kwargs[f"W_{g}h"] = glorot(H, H)
            kwargs[f"W_{g}x"] = glorot(H, D)
            kwargs[f"b_{g}"] = np.zeros(H, dtype=dtype)
        kwargs["b_f"] = np.ones(H, dtype=dtype)
        return cls(**kwargs)

    @classmethod
    def zeros(cls, hidden_units, input_dim, dtype=np.float64):
        H, D = hidden_units, input_dim
        kwargs = {}
        for g in GATE_NAMES:
            kwargs[f"W_{g}h"] = np.zeros((H, H), dtype=dtype)
            kwargs[f"W_{g}x"] = np.zeros((H, D), dtype=dtype)
            kwargs[f"b_{g}"] = np.zeros(H, dtype=dtype)
        return cls(**kwargs)

    def as_dict(self):
        return {key: getattr(self, key) for key in WEIGHT_KEYS}

    @classmethod
    def from_dict(cls, d):
        return cls(**{key: np.asarray(d[key]) for key in WEIGHT_KEYS})

    def astype(self, dtype):
        return LstmWeights(**{k: v.astype(dtype) for k, v in self.as_dict().items()})


@dataclass
class LstmState:
    """Hidden state h and cell state c, each of shape (..., H)."""

    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden_units, batch=None, dtype=np.float64):
        shape = (hidden_units,) if batch is None else (batch, hidden_units)
        return cls(h=np.zeros(shape, dtype=dtype), c=np.zeros(shape, dtype=dtype))


@dataclass
class LstmGates:
    """Gate activations of one step: f, i, candidate, o."""

    f: np.ndarray
    i: np.ndarray
    c_tilde: np.ndarray
    o: np.ndarray


def cell_step(w: LstmWeights, x_t, prev: LstmState):
    """One LSTM step.

    Computes, in order: the forget gate, the input gate and candidate cell
    state, the cell update, the output gate, and the new hidden state.
    Accepts a single input vector of shape (D,) or a batch (B, D), with a
    state of matching leading shape.

    Returns:
        (new_state, gates)
    """
    x_t = np.asarray(x_t)
    if x_t.shape[-1] != w.input_dim:
        raise ValueError(f"input has feature dim {x_t.shape[-1]}, weights expect {w.input_dim}")
    if prev.h.shape != x_t.shape[:-1] + (w.hidden_units,):
        raise ValueError(f"state shape {prev.h.shape} inconsistent with input shape {x_t.shape}")
    if prev.h.shape != prev.c.shape:
        raise ValueError("h and c must have the same shape")
    if not (np.all(np.isfinite(x_t)) and np.all(np.isfinite(prev.h)) and np.all(np.isfinite(prev.c))):
        raise ValueError("non-finite values in cell_step inputs")

    h, c = prev.h, prev.c
    f = sigmoid(h @ w.W_fh.T + x_t @ w.W_fx.T + w.b_f)
    i = sigmoid(h @ w.W_ih.T + x_t @ w.W_ix.T + w.b_i)
    c_tilde = np.tanh(h @ w.W_ch.T + x_t @ w.W_cx.T + w.b_c)
    c_new = f * c + i * c_tilde
    o = sigmoid(h @ w.W_oh.T + x_t @ w.W_ox.T + w.b_o)
    h_new = o * np.tanh(c_new)
    return LstmState(h=h_new, c=c_new), LstmGates(f=f, i=i, c_tilde=c_tilde, o=o)


def _scalar_sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def cell_step_scalar(w: LstmWeights, x_t, prev: LstmState):
    """Loop-based reference implementation of one LSTM step.

    Single sample only: x_t is (D,), state vectors are (H,). Every dot
    product is an explicit Python loop so this path is independent of the
    vectorized implementation above.
    """
    H, D = w.hidden_units, w.input_dim
    x = [float(v) for v in np.asarray(x_t).reshape(-1)]
    h = [float(v) for v in np.asarray(prev.h).reshape(-1)]
    c = [float(v) for v in np.asarray(prev.c).reshape(-1)]
    if len(x) != D or len(h) != H:
        raise ValueError("shape mismatch in scalar cell step")

    def gate_pre(Wh, Wx, b, j):
        acc = float(b[j])
        for k in range(H):
            acc += float(Wh[j, k]) * h[k]
        for k in range(D):
            acc += float(Wx[j, k]) * x[k]
        return acc

    f = [_scalar_sigmoid(gate_pre(w.W_fh, w.W_fx, w.b_f, j)) for j in range(H)]
    i = [_scalar_sigmoid(gate_pre(w.W_ih, w.W_ix, w.b_i, j)) for j in range(H)]
    c_tilde = [math.tanh(gate_pre(w.W_ch, w.W_cx, w.b_c, j)) for j in range(H)]
    c_new = [f[j] * c[j] + i[j] * c_tilde[j] for j in range(H)]
    o = [_scalar_sigmoid(gate_pre(w.W_oh, w.W_ox, w.b_o, j)) for j in range(H)]
    h_new = [o[j] * math.tanh(c_new[j]) for j in range(H)]

    state = LstmState(h=np.array(h_new), c=np.array(c_new))
    gates = LstmGates(f=np.array(f), i=np.array(i), c_tilde=np.array(c_tilde), o=np.array(o))
    return state, gates


@dataclass
class LstmCache:
    """Per-step activations kept for the backward pass."""

    w: LstmWeights
    xs: np.ndarray          # (B, T, D)
    h: list                 # h_0 .. h_T, each (B, H)
    c: list                 # c_0 .. c_T
    gates: list             # gates for steps 1 .. T


def forward_with_cache(w: LstmWeights, xs, init: LstmState | None = None):
    """Run T cell steps over a batch and keep activations for backward.

    Args:
        xs: array of shape (batch, T, D).
        init: optional initial state with (batch, H) vectors; zeros when None.

    Returns:
        (h_T, cache) where h_T has shape (batch, H).
    """
    xs = np.asarray(xs)
    if xs.ndim != 3:
        raise ValueError(f"xs must have shape (batch, T, D), got {xs.shape}")
    B, T, D = xs.shape
    if T < 1:
        raise ValueError("sequence length T must be >= 1")
    if D != w.input_dim:
        raise ValueError(f"xs feature dim {D} does not match weights ({w.input_dim})")
    if not np.all(np.isfinite(xs)):
        raise ValueError("non-finite values in xs")

    if init is None:
        init = LstmState.zeros(w.hidden_units, batch=B, dtype=xs.dtype)
    state = init
    cache = LstmCache(w=w, xs=xs, h=[init.h], c=[init.c], gates=[])
    for t in range(T):
        state, gates = cell_step(w, xs[:, t, :], state)
        cache.h.append(state.h)
        cache.c.append(state.c)
        cache.gates.append(gates)
    return state.h, cache


def forward(w: LstmWeights, xs, init: LstmState | None = None):
    """Final hidden state h_T for a batch of sequences, shape (batch, H)."""
    h_last, _ = forward_with_cache(w, xs, init)
    return h_last


@dataclass
class LstmGradients:
    """Gradients for the 12 weight arrays plus the input sequence."""

    weights: dict           # key -> array, same shapes as LstmWeights
    d_xs: np.ndarray        # (B, T, D)
    d_h0: np.ndarray
    d_c0: np.ndarray


def backward(cache: LstmCache, d_h_last) -> LstmGradients:
    """Analytic backward pass given dL/dh_T.

    Only the final hidden state is consumed downstream, so the upstream
    gradient enters at step T and flows back through the recurrence.
    """
    if cache is None or not cache.gates:
        raise ValueError("backward requires the cache produced by forward_with_cache")
    w, xs = cache.w, cache.xs
    B, T, D = xs.shape
    H = w.hidden_units
    d_h_last = np.asarray(d_h_last)
    if d_h_last.shape != (B, H):
        raise ValueError(f"d_h_last must have shape {(B, H)}, got {d_h_last.shape}")

    grads = {key: np.zeros_like(getattr(w, key)) for key in WEIGHT_KEYS}
    d_xs = np.zeros_like(xs)
    dh = d_h_last.astype(xs.dtype, copy=True)
    dc = np.zeros((B, H), dtype=xs.dtype)

    for t in range(T - 1, -1, -1):
        g = cache.gates[t]
        c_t = cache.c[t + 1]
        c_prev = cache.c[t]
        h_prev = cache.h[t]
        x_t = xs[:, t, :]

        tanh_c = np.tanh(c_t)
        d_o = dh * tanh_c
        dc = dc + dh * g.o * (1.0 - tanh_c * tanh_c)

        d_pre_o = d_o * g.o * (1.0 - g.o)
        d_f = dc * c_prev
        d_pre_f = d_f * g.f * (1.0 - g.f)
        d_i = dc * g.c_tilde
        d_pre_i = d_i * g.i * (1.0 - g.i)
        d_ct = dc * g.i
        d_pre_c = d_ct * (1.0 - g.c_tilde * g.c_tilde)

        pre = {"f": d_pre_f, "i": d_pre_i, "c": d_pre_c, "o": d_pre_o}
        dh_prev = np.zeros((B, H), dtype=xs.dtype)
        dx_t = np.zeros((B, D), dtype=xs.dtype)
        for gate, d_pre in pre.items():
            grads[f"W_{gate}h"] += d_pre.T @ h_prev
            grads[f"W_{gate}x"] += d_pre.T @ x_t
            grads[f"b_{gate}"] += d_pre.sum(axis=0)
            dh_prev += d_pre @ getattr(w, f"W_{gate}h")
            dx_t += d_pre @ getattr(w, f"W_{gate}x")

        d_xs[:, t, :] = dx_t
        dh = dh_prev
        dc = dc * g.f

    return LstmGradients(weights=grads, d_xs=d_xs, d_h0=dh, d_c0=dc)
