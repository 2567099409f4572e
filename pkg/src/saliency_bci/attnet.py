"""Masked-reconstruction autoencoder with dot-product self-attention.

Pipeline per trial ``x`` (n_c x T)::

    embed (1-D conv, end zero-padded) -> LSTM encoder -> self-attention
    -> LSTM decoder (initial state = final encoder state, inputs = context)
    -> dense head (tanh hidden layers, linear output) -> reconstruction

Everything is plain numpy with a hand-written backward pass. Internally the
functions work on batches: arrays carry a leading trial axis, and recurrent
state is kept time-major so every recurrence step touches contiguous memory.
"""

from __future__ import annotations

import enum
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import (
    EmptySet,
    InvalidSpec,
    ModelFormatError,
    NonFiniteActivation,
    ShapeMismatch,
)
from .trialio import TrialSet

log = logging.getLogger(__name__)

ACTIVATION_LIMIT = 1e100


@dataclass(frozen=True)
class NetConfig:
    m: int = 5
    d: int = 4
    h: int = 4
    n_k: int = 4
    n_v: int = 4
    n_c: int = 22
    dense_hidden: tuple[int, ...] = (5, 10, 15)
    p1: float = 0.6
    p2: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, "dense_hidden", tuple(int(v) for v in self.dense_hidden))
        for name in ("m", "d", "h", "n_k", "n_v", "n_c"):
            if int(getattr(self, name)) < 1:
                raise InvalidSpec(f"NetConfig.{name} must be >= 1")
        if not self.dense_hidden or min(self.dense_hidden) < 1:
            raise InvalidSpec("NetConfig.dense_hidden must be a nonempty list of positive sizes")
        for name in ("p1", "p2"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidSpec(f"NetConfig.{name} must lie in [0, 1]")


class Optimizer(str, enum.Enum):
    ADAM = "adam"
    SGD = "sgd"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    optimizer: Optimizer = Optimizer.ADAM
    moment_decays: tuple[float, float] = (0.9, 0.999)
    epsilon_hat: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        if self.epochs < 1:
            raise InvalidSpec("TrainConfig.epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise InvalidSpec("TrainConfig.learning_rate must be >= 0")
        if self.batch_size < 1:
            raise InvalidSpec("TrainConfig.batch_size must be >= 1")


@dataclass(frozen=True)
class ModelParams:
    """All learnable tensors, in serialization order.

    LSTM gate blocks are stacked ``[input; forget; cell; output]`` and the
    gate weight matrices act on ``[input; h_prev]``.
    """

    embed_kernels: np.ndarray  # (m, n_c, d)
    embed_bias: np.ndarray  # (m,)
    enc_w: np.ndarray  # (4h, m + h)
    enc_b: np.ndarray  # (4h,)
    w_q: np.ndarray  # (n_k, h)
    w_k: np.ndarray  # (n_k, h)
    w_v: np.ndarray  # (n_v, h)
    dec_w: np.ndarray  # (4h, n_v + h)
    dec_b: np.ndarray  # (4h,)
    dense: tuple[tuple[np.ndarray, np.ndarray], ...]  # (out, in), (out,)

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [(f.name, getattr(self, f.name)) for f in fields(self) if f.name != "dense"]
        for i, (w, b) in enumerate(self.dense):
            out += [(f"dense{i}_w", w), (f"dense{i}_b", b)]
        return out

    def arrays(self) -> list[np.ndarray]:
        return [a for _, a in self.tensors()]

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "ModelParams":
        arrays = list(arrays)
        head, rest = arrays[:9], arrays[9:]
        dense = tuple((rest[i], rest[i + 1]) for i in range(0, len(rest), 2))
        return cls(*head, dense=dense)

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ModelParams":
        return ModelParams.from_arrays([fn(a) for a in self.arrays()])

    @property
    def config_shape(self) -> dict:
        m, n_c, d = self.embed_kernels.shape
        return {
            "m": m, "n_c": n_c, "d": d, "h": self.w_q.shape[1], "n_k": self.w_q.shape[0],
            "n_v": self.w_v.shape[0], "dense_hidden": tuple(w.shape[0] for w, _ in self.dense[:-1]),
        }

    def check(self, cfg: NetConfig) -> None:
        """Raise ShapeMismatch unless every tensor matches ``cfg``."""
        for (name, got), want in zip(self.tensors(), _param_shapes(cfg)):
            if got.shape != want:
                raise ShapeMismatch(f"parameter {name}: shape {got.shape}, expected {want}")
        if len(self.tensors()) != len(_param_shapes(cfg)):
            raise ShapeMismatch("parameter count does not match the configuration")


def _param_shapes(cfg: NetConfig) -> list[tuple[int, ...]]:
    h4 = 4 * cfg.h
    shapes = [
        (cfg.m, cfg.n_c, cfg.d), (cfg.m,),
        (h4, cfg.m + cfg.h), (h4,),
        (cfg.n_k, cfg.h), (cfg.n_k, cfg.h), (cfg.n_v, cfg.h),
        (h4, cfg.n_v + cfg.h), (h4,),
    ]
    sizes = [cfg.h, *cfg.dense_hidden, cfg.n_c]
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        shapes += [(n_out, n_in), (n_out,)]
    return shapes


def init_params(cfg: NetConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases, LSTM forget-gate biases at 1."""
    rng = np.random.default_rng(seed)

    def glorot(shape, fan_in, fan_out):
        s = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-s, s, size=shape)

    h = cfg.h
    forget = np.zeros(4 * h)
    forget[h:2 * h] = 1.0
    arrays = [
        glorot((cfg.m, cfg.n_c, cfg.d), cfg.n_c * cfg.d, cfg.m * cfg.d),
        np.zeros(cfg.m),
        glorot((4 * h, cfg.m + h), cfg.m + h, 4 * h),
        forget.copy(),
        glorot((cfg.n_k, h), h, cfg.n_k),
        glorot((cfg.n_k, h), h, cfg.n_k),
        glorot((cfg.n_v, h), h, cfg.n_v),
        glorot((4 * h, cfg.n_v + h), cfg.n_v + h, 4 * h),
        forget.copy(),
    ]
    sizes = [h, *cfg.dense_hidden, cfg.n_c]
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        arrays += [glorot((n_out, n_in), n_in, n_out), np.zeros(n_out)]
    return ModelParams.from_arrays(arrays)


def zeros_like_params(cfg: NetConfig) -> ModelParams:
    return ModelParams.from_arrays([np.zeros(s) for s in _param_shapes(cfg)])


def _check_finite(name: str, arr: np.ndarray) -> None:
    # max() propagates NaN, so one comparison catches both cases
    if not np.max(np.abs(arr), initial=0.0) <= ACTIVATION_LIMIT:
        raise NonFiniteActivation(f"{name}: activation is NaN/Inf or exceeds {ACTIVATION_LIMIT:g}")


def _as_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None]
    if x.ndim != 3:
        raise ShapeMismatch(f"expected (n_c, T) or (B, n_c, T) input, got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# embedding


def _embed_windows(x: np.ndarray, d: int) -> np.ndarray:
    """(B, n_c, T) -> (B, T, n_c * d) windows over x[:, :, t:t+d], zero past the end."""
    B, n_c, T = x.shape
    xp = np.concatenate([x, np.zeros((B, n_c, d - 1))], axis=2)
    win = sliding_window_view(xp, d, axis=2)  # (B, n_c, T, d)
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B, T, n_c * d)


def embed(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Embedding of one trial (n_c, T) -> (m, T), or a batch (B, n_c, T) -> (B, m, T)."""
    single = np.ndim(x) == 2
    xb = _as_batch(x)
    m, n_c, d = params.embed_kernels.shape
    if xb.shape[1] != n_c:
        raise ShapeMismatch(f"input has {xb.shape[1]} channels, embedding expects {n_c}")
    y = _embed_windows(xb, d) @ params.embed_kernels.reshape(m, -1).T + params.embed_bias
    y = y.transpose(0, 2, 1)
    return y[0] if single else y


# ---------------------------------------------------------------------------
# LSTM


def lstm_step(gates_w, gates_b, x_in, h_prev, c_prev):
    """One LSTM cell update; returns ``(h, c, cache)``.

    Works on single vectors or on row-batches (B, features).
    """
    gates_w = np.asarray(gates_w, dtype=float)
    hdim = np.shape(h_prev)[-1]
    n_in = np.shape(x_in)[-1]
    if gates_w.shape != (4 * hdim, n_in + hdim) or np.shape(gates_b) != (4 * hdim,):
        raise ShapeMismatch(
            f"gate weights {gates_w.shape} / bias {np.shape(gates_b)} do not fit input {n_in} and hidden {hdim}"
        )
    z = np.concatenate([x_in, h_prev], axis=-1) @ gates_w.T + gates_b
    act = expit(z)
    act[..., 2 * hdim:3 * hdim] = np.tanh(z[..., 2 * hdim:3 * hdim])
    i, f, g, o = np.split(act, 4, axis=-1)
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, {"act": act, "c_prev": c_prev, "tanh_c": tc}


@dataclass
class _LstmCache:
    inputs: np.ndarray  # (T, B, n_in)
    h0: np.ndarray
    c0: np.ndarray
    act: np.ndarray  # (T, B, 4h) gate activations i, f, g, o
    cells: np.ndarray  # (T, B, h)
    tanh_c: np.ndarray
    hidden: np.ndarray


def _lstm_forward(w, b, inputs, h0, c0) -> _LstmCache:
    T, B, n_in = inputs.shape
    hdim = h0.shape[1]
    w_in, w_hT = w[:, :n_in], np.ascontiguousarray(w[:, n_in:].T)
    pre = inputs @ w_in.T + b
    act = np.empty((T, B, 4 * hdim))
    cells = np.empty((T, B, hdim))
    tanh_c = np.empty((T, B, hdim))
    hidden = np.empty((T, B, hdim))
    h, c = h0, c0
    g_sl = slice(2 * hdim, 3 * hdim)
    for t in range(T):
        z = pre[t] + h @ w_hT
        a = act[t]
        expit(z, out=a)
        np.tanh(z[:, g_sl], out=a[:, g_sl])
        c = a[:, hdim:2 * hdim] * c + a[:, :hdim] * a[:, g_sl]
        cells[t] = c
        tc = np.tanh(c, out=tanh_c[t])
        h = np.multiply(a[:, 3 * hdim:], tc, out=hidden[t])
    return _LstmCache(inputs, h0, c0, act, cells, tanh_c, hidden)


def _lstm_backward(w, cache: _LstmCache, d_hidden, dh_last, dc_last):
    """Backprop through time. Returns (dW, db, d_inputs, dh0, dc0)."""
    T, B, n_in = cache.inputs.shape
    hdim = cache.h0.shape[1]
    w_h = w[:, n_in:]
    act = cache.act
    i, f, g, o = (act[..., k * hdim:(k + 1) * hdim] for k in range(4))
    c_prev = np.concatenate([cache.c0[None], cache.cells[:-1]], axis=0)
    tc = cache.tanh_c
    # dz = [dc, dc, dc, dh] * gate_factor
    gate_factor = np.concatenate(
        [g * i * (1 - i), c_prev * f * (1 - f), i * (1 - g * g), tc * o * (1 - o)], axis=-1
    )
    dh_to_dc = o * (1 - tc * tc)
    dz = np.empty_like(act)
    dh_next, dc_next = dh_last, dc_last
    for t in range(T - 1, -1, -1):
        dh = d_hidden[t] + dh_next
        dc = dc_next + dh * dh_to_dc[t]
        np.multiply(np.concatenate((dc, dc, dc, dh), axis=1), gate_factor[t], out=dz[t])
        dh_next = dz[t] @ w_h
        dc_next = dc * f[t]
    h_prev = np.concatenate([cache.h0[None], cache.hidden[:-1]], axis=0)
    dz2 = dz.reshape(T * B, 4 * hdim)
    dw = np.concatenate(
        [dz2.T @ cache.inputs.reshape(T * B, n_in), dz2.T @ h_prev.reshape(T * B, hdim)], axis=1
    )
    db = dz2.sum(axis=0)
    d_inputs = dz @ w[:, :n_in]
    return dw, db, d_inputs, dh_next, dc_next


def encode(params: ModelParams, embedded: np.ndarray):
    """Run the encoder over (m, T) or (B, m, T).

    Returns ``(enc_hidden, final_h, final_c)`` with enc_hidden shaped (h, T)
    (or (B, h, T)).
    """
    single = np.ndim(embedded) == 2
    e = _as_batch(embedded)
    B, m, T = e.shape
    hdim = params.w_q.shape[1]
    if params.enc_w.shape != (4 * hdim, m + hdim):
        raise ShapeMismatch(f"embedded width {m} does not match encoder weights {params.enc_w.shape}")
    zero = np.zeros((B, hdim))
    cache = _lstm_forward(params.enc_w, params.enc_b, np.ascontiguousarray(e.transpose(2, 0, 1)), zero, zero)
    hidden = cache.hidden.transpose(1, 2, 0)
    fh, fc = cache.hidden[-1], cache.cells[-1]
    if single:
        return hidden[0], fh[0], fc[0]
    return hidden, fh, fc


# ---------------------------------------------------------------------------
# attention


def _attend_batch(params: ModelParams, hid: np.ndarray):
    """hid: (B, T, h). Returns Q, K, V (B, T, .), Lambda (B, T, T), context (B, T, n_v)."""
    q = hid @ params.w_q.T
    k = hid @ params.w_k.T
    v = hid @ params.w_v.T
    logits = q @ k.transpose(0, 2, 1)
    logits -= logits.max(axis=2, keepdims=True)
    lam = np.exp(logits)
    lam /= lam.sum(axis=2, keepdims=True)
    ctx = lam @ v
    return q, k, v, lam, ctx


def attend(params: ModelParams, enc_hidden: np.ndarray):
    """Self-attention over encoder states (h, T) or (B, h, T).

    Returns ``(Lambda, context)``: Lambda is (T, T) with row i the softmax of
    q_i . k_t over t (no scaling), context is (n_v, T).
    """
    single = np.ndim(enc_hidden) == 2
    hb = _as_batch(enc_hidden)
    _, _, _, lam, ctx = _attend_batch(params, hb.transpose(0, 2, 1))
    ctx = ctx.transpose(0, 2, 1)
    return (lam[0], ctx[0]) if single else (lam, ctx)


# ---------------------------------------------------------------------------
# decoder and dense head


def dense_head(params: ModelParams, hidden: np.ndarray) -> list[np.ndarray]:
    """Apply the dense stack on the last axis; returns every layer's output."""
    outs = [hidden]
    a = hidden
    last = len(params.dense) - 1
    for li, (w, b) in enumerate(params.dense):
        a = a @ w.T + b
        if li < last:
            a = np.tanh(a)
        outs.append(a)
    return outs


def decode_reconstruct(params: ModelParams, context: np.ndarray, init_h: np.ndarray, init_c: np.ndarray) -> np.ndarray:
    """Decoder + dense head: context (n_v, T) -> reconstruction (n_c, T)."""
    single = np.ndim(context) == 2
    ctx = _as_batch(context)
    h0 = np.atleast_2d(np.asarray(init_h, dtype=float))
    c0 = np.atleast_2d(np.asarray(init_c, dtype=float))
    cache = _lstm_forward(params.dec_w, params.dec_b, np.ascontiguousarray(ctx.transpose(2, 0, 1)), h0, c0)
    out = dense_head(params, cache.hidden.transpose(1, 0, 2))[-1].transpose(0, 2, 1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# masking and loss


def mask_input(x: np.ndarray, p1: float, p2: float, rng: np.random.Generator) -> np.ndarray:
    """Zero ``floor(p2*n_c)`` random channels at ``floor(p1*T)`` random time samples."""
    x = np.asarray(x, dtype=np.float64)
    n_c, T = x.shape
    n_t = int(math.floor(p1 * T))
    n_ch = int(math.floor(p2 * n_c))
    out = x.copy()
    if n_t == 0 or n_ch == 0:
        return out
    times = rng.choice(T, size=n_t, replace=False)
    chans = np.argsort(rng.random((n_t, n_c)), axis=1)[:, :n_ch]
    out[chans, times[:, None]] = 0.0
    return out


def loss_mse(x_hat: np.ndarray, x: np.ndarray) -> float:
    x_hat = np.asarray(x_hat, dtype=float)
    x = np.asarray(x, dtype=float)
    if x_hat.shape != x.shape:
        raise ShapeMismatch(f"reconstruction shape {x_hat.shape} != target shape {x.shape}")
    return float(np.mean((x_hat - x) ** 2))


# ---------------------------------------------------------------------------
# full forward / backward


@dataclass
class ForwardTrace:
    """Activations of one forward pass over a batch.

    Every public array carries a leading trial axis; a single (n_c, T)
    input becomes a batch of one.
    """

    x_in: np.ndarray  # (B, n_c, T)
    windows: np.ndarray  # (B, T, n_c*d)
    enc: _LstmCache
    dec: _LstmCache
    q: np.ndarray  # (B, T, n_k)
    k: np.ndarray
    v: np.ndarray  # (B, T, n_v)
    Lambda: np.ndarray  # (B, T, T)
    dense_outs: list[np.ndarray] = field(repr=False)

    @property
    def embedded(self) -> np.ndarray:
        return self.enc.inputs.transpose(1, 2, 0)

    @property
    def enc_hidden(self) -> np.ndarray:
        return self.enc.hidden.transpose(1, 2, 0)

    @property
    def enc_cell(self) -> np.ndarray:
        return self.enc.cells.transpose(1, 2, 0)

    @property
    def Q(self) -> np.ndarray:
        return self.q.transpose(0, 2, 1)

    @property
    def K(self) -> np.ndarray:
        return self.k.transpose(0, 2, 1)

    @property
    def V(self) -> np.ndarray:
        return self.v.transpose(0, 2, 1)

    @property
    def context(self) -> np.ndarray:
        return self.dec.inputs.transpose(1, 2, 0)

    @property
    def dec_hidden(self) -> np.ndarray:
        return self.dec.hidden.transpose(1, 2, 0)

    @property
    def reconstruction(self) -> np.ndarray:
        return self.dense_outs[-1].transpose(0, 2, 1)


def _encode_attend(params: ModelParams, xb: np.ndarray):
    m, n_c, d = params.embed_kernels.shape
    if xb.shape[1] != n_c:
        raise ShapeMismatch(f"input has {xb.shape[1]} channels, model expects {n_c}")
    B = xb.shape[0]
    hdim = params.w_q.shape[1]
    windows = _embed_windows(xb, d)
    emb = windows @ params.embed_kernels.reshape(m, -1).T + params.embed_bias  # (B, T, m)
    _check_finite("embedding", emb)
    zero = np.zeros((B, hdim))
    enc = _lstm_forward(params.enc_w, params.enc_b, np.ascontiguousarray(emb.transpose(1, 0, 2)), zero, zero)
    _check_finite("encoder", enc.cells)
    q, k, v, lam, ctx = _attend_batch(params, enc.hidden.transpose(1, 0, 2))
    _check_finite("attention queries", q)
    _check_finite("attention keys", k)
    _check_finite("context", ctx)
    return windows, enc, q, k, v, lam, ctx


def forward(params: ModelParams, x: np.ndarray) -> ForwardTrace:
    """Full pass on (n_c, T) or (B, n_c, T) input, caching what backward needs."""
    xb = _as_batch(x)
    windows, enc, q, k, v, lam, ctx = _encode_attend(params, xb)
    dec = _lstm_forward(
        params.dec_w, params.dec_b, np.ascontiguousarray(ctx.transpose(1, 0, 2)), enc.hidden[-1], enc.cells[-1]
    )
    _check_finite("decoder", dec.cells)
    outs = dense_head(params, dec.hidden.transpose(1, 0, 2))
    _check_finite("reconstruction", outs[-1])
    return ForwardTrace(xb, windows, enc, dec, q, k, v, lam, outs)


def trial_losses(trace: ForwardTrace, x: np.ndarray) -> np.ndarray:
    """Per-trial mean squared reconstruction error."""
    xb = _as_batch(x)
    if xb.shape != trace.x_in.shape:
        raise ShapeMismatch(f"target shape {xb.shape} != input shape {trace.x_in.shape}")
    return np.mean((trace.reconstruction - xb) ** 2, axis=(1, 2))


def backward(params: ModelParams, trace: ForwardTrace, x: np.ndarray) -> ModelParams:
    """Gradient of the batch-mean reconstruction loss w.r.t. every parameter."""
    xb = _as_batch(x)
    if xb.shape != trace.x_in.shape:
        raise ShapeMismatch(f"target shape {xb.shape} != input shape {trace.x_in.shape}")
    B, n_c, T = xb.shape
    hdim = params.w_q.shape[1]

    # dense head, on (B, T, .) activations
    outs = trace.dense_outs
    da = 2.0 * (outs[-1] - xb.transpose(0, 2, 1)) / (B * T * n_c)
    dense_grads = []
    for li in range(len(params.dense) - 1, -1, -1):
        w, _ = params.dense[li]
        a_in = outs[li]
        dense_grads.append(
            (da.reshape(-1, w.shape[0]).T @ a_in.reshape(-1, w.shape[1]), da.sum(axis=(0, 1)))
        )
        da = da @ w
        if li > 0:
            da = da * (1.0 - outs[li] ** 2)
    dense_grads.reverse()

    # decoder
    dec_dw, dec_db, d_ctx, dh_enc_last, dc_enc_last = _lstm_backward(
        params.dec_w, trace.dec, da.transpose(1, 0, 2), np.zeros((B, hdim)), np.zeros((B, hdim))
    )
    d_ctx = d_ctx.transpose(1, 0, 2)  # (B, T, n_v)

    # attention
    lam, q, k, v = trace.Lambda, trace.q, trace.k, trace.v
    hid = trace.enc.hidden.transpose(1, 0, 2)  # (B, T, h)
    d_lam = d_ctx @ v.transpose(0, 2, 1)
    dv = lam.transpose(0, 2, 1) @ d_ctx
    row_dot = np.einsum("bij,bij->bi", d_lam, lam)[:, :, None]
    d_lam -= row_dot
    d_lam *= lam
    d_logits = d_lam
    dq = d_logits @ k
    dk = d_logits.transpose(0, 2, 1) @ q
    flat_h = hid.reshape(-1, hdim)
    dwq = dq.reshape(-1, dq.shape[2]).T @ flat_h
    dwk = dk.reshape(-1, dk.shape[2]).T @ flat_h
    dwv = dv.reshape(-1, dv.shape[2]).T @ flat_h
    d_hid = dq @ params.w_q + dk @ params.w_k + dv @ params.w_v

    # encoder
    enc_dw, enc_db, d_emb, _, _ = _lstm_backward(
        params.enc_w, trace.enc, np.ascontiguousarray(d_hid.transpose(1, 0, 2)), dh_enc_last, dc_enc_last
    )
    d_emb = d_emb.transpose(1, 0, 2).reshape(B * T, -1)  # (B*T, m)
    d_kern = (d_emb.T @ trace.windows.reshape(B * T, -1)).reshape(params.embed_kernels.shape)
    d_ebias = d_emb.sum(axis=0)

    return ModelParams(
        d_kern, d_ebias, enc_dw, enc_db, dwq, dwk, dwv, dec_dw, dec_db, dense=tuple(dense_grads)
    )


def attention_maps(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Lambda for (n_c, T) or (B, n_c, T) input; the decoder is never run."""
    single = np.ndim(x) == 2
    lam = _encode_attend(params, _as_batch(x))[5]
    return lam[0] if single else lam


# ---------------------------------------------------------------------------
# finite-difference check


def numerical_gradient(params: ModelParams, x_in: np.ndarray, target: np.ndarray, eps: float = 1e-5) -> ModelParams:
    """Central differences of the batch-mean loss for every parameter entry."""

    def loss_at(p):
        return float(np.mean(trial_losses(forward(p, x_in), target)))

    arrays = [a.copy() for a in params.arrays()]
    grads = []
    for ai, a in enumerate(arrays):
        g = np.zeros_like(a)
        for j in range(a.size):
            orig = a.flat[j]
            a.flat[j] = orig + eps
            up = loss_at(ModelParams.from_arrays(arrays))
            a.flat[j] = orig - eps
            down = loss_at(ModelParams.from_arrays(arrays))
            a.flat[j] = orig
            g.flat[j] = (up - down) / (2.0 * eps)
        grads.append(g)
    return ModelParams.from_arrays(grads)


def relative_errors(analytic: ModelParams, numeric: ModelParams, abs_floor: float = 1e-8) -> dict[str, float]:
    """Max relative error per tensor; entries whose difference is below ``abs_floor`` count as exact."""
    out = {}
    for (name, a), (_, n) in zip(analytic.tensors(), numeric.tensors()):
        diff = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        rel = np.where(diff <= abs_floor, 0.0, diff / np.where(scale > 0, scale, 1.0))
        out[name] = float(rel.max(initial=0.0))
    return out


GRADCHECK_CONFIG = NetConfig(m=5, d=4, h=4, n_k=4, n_v=4, n_c=3, dense_hidden=(5, 10, 15))


def gradcheck(seed: int = 0, cfg: NetConfig = GRADCHECK_CONFIG, T: int = 12, eps: float = 1e-5) -> dict[str, float]:
    """Compare analytic and finite-difference gradients on random data.

    The input is masked with the configuration's p1/p2, the target is the
    unmasked signal, matching training.
    """
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    x = rng.standard_normal((cfg.n_c, T))
    x_in = mask_input(x, cfg.p1, cfg.p2, rng)
    analytic = backward(params, forward(params, x_in), x)
    numeric = numerical_gradient(params, x_in, x, eps)
    return relative_errors(analytic, numeric)


# ---------------------------------------------------------------------------
# training


def mask_rng(seed: int, epoch: int, trial_id: str) -> np.random.Generator:
    """Mask stream for one trial in one epoch, independent of trial order."""
    return np.random.default_rng([seed, epoch, zlib.crc32(trial_id.encode())])


class _Adam:
    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t = 0

    def step(self, params: ModelParams, grads: ModelParams) -> ModelParams:
        b1, b2 = self.cfg.moment_decays
        lr, eps = self.cfg.learning_rate, self.cfg.epsilon_hat
        self.t += 1
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        new = []
        for p, g, m, v in zip(params.arrays(), grads.arrays(), self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            new.append(p - lr * (m / corr1) / (np.sqrt(v / corr2) + eps))
        return ModelParams.from_arrays(new)


class _Sgd:
    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.lr = cfg.learning_rate

    def step(self, params: ModelParams, grads: ModelParams) -> ModelParams:
        return ModelParams.from_arrays([p - self.lr * g for p, g in zip(params.arrays(), grads.arrays())])


@dataclass
class TrainResult:
    params: ModelParams
    loss_curve: list[float]

    def __iter__(self) -> Iterator:
        return iter((self.params, self.loss_curve))


def train(
    trials: TrialSet,
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    init: ModelParams | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Fit the autoencoder to reconstruct each trial from a masked copy.

    Labels are never read. Every epoch shuffles the trials, draws fresh
    masks and takes one optimizer step per mini-batch on the batch-mean loss.
    Returns the final parameters and the per-epoch mean trial loss.
    """
    if len(trials) == 0:
        raise EmptySet("no trials to train on")
    data = trials.stack()
    if data.shape[1] != net_cfg.n_c:
        raise ShapeMismatch(f"trials have {data.shape[1]} channels, NetConfig.n_c = {net_cfg.n_c}")
    ids = [t.trial_id for t in trials]
    params = init if init is not None else init_params(net_cfg, train_cfg.seed)
    params.check(net_cfg)
    opt = (_Adam if train_cfg.optimizer is Optimizer.ADAM else _Sgd)(params, train_cfg)
    shuffle_rng = np.random.default_rng([train_cfg.seed, 0x5EED])
    curve = []
    n = len(ids)
    for epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            target = data[idx]
            masked = np.stack([
                mask_input(data[i], net_cfg.p1, net_cfg.p2, mask_rng(train_cfg.seed, epoch, ids[i])) for i in idx
            ])
            trace = forward(params, masked)
            total += float(np.sum(trial_losses(trace, target)))
            grads = backward(params, trace, target)
            params = opt.step(params, grads)
            for name, a in params.tensors():
                if not np.all(np.isfinite(a)):
                    raise NonFiniteActivation(f"epoch {epoch + 1}: parameter {name} became non-finite")
        curve.append(total / n)
        if progress is not None:
            progress(epoch + 1, curve[-1])
        log.debug("epoch %d loss %.6g", epoch + 1, curve[-1])
    return TrainResult(params, curve)


# ---------------------------------------------------------------------------
# serialization

MODEL_MAGIC = b"SBCIMODL"
MODEL_VERSION = 1


def _config_text(cfg: NetConfig) -> str:
    return "".join(
        f"{k} = {','.join(map(str, v)) if isinstance(v, tuple) else repr(v)}\n"
        for k, v in ((f.name, getattr(cfg, f.name)) for f in fields(cfg))
    )


def _parse_config(text: str) -> NetConfig:
    vals = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        vals[key] = value
    try:
        return NetConfig(
            m=int(vals["m"]), d=int(vals["d"]), h=int(vals["h"]), n_k=int(vals["n_k"]), n_v=int(vals["n_v"]),
            n_c=int(vals["n_c"]), dense_hidden=tuple(int(v) for v in vals["dense_hidden"].split(",")),
            p1=float(vals["p1"]), p2=float(vals["p2"]),
        )
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"bad config block: {exc}") from None


def save_model(path: str | Path, params: ModelParams, cfg: NetConfig) -> None:
    """Header, config block, then every tensor as float64 little-endian."""
    params.check(cfg)
    cfg_bytes = _config_text(cfg).encode()
    blob = b"".join([
        MODEL_MAGIC,
        struct.pack("<II", MODEL_VERSION, len(cfg_bytes)),
        cfg_bytes,
        *(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays()),
    ])
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_model(path: str | Path) -> tuple[ModelParams, NetConfig]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        from .errors import MissingFile

        raise MissingFile(f"{path}: model file not found") from None
    if blob[:8] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a model file")
    version, n_cfg = struct.unpack("<II", blob[8:16])
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported model version {version}")
    cfg = _parse_config(blob[16:16 + n_cfg].decode())
    offset = 16 + n_cfg
    arrays = []
    for shape in _param_shapes(cfg):
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(blob):
            raise ModelFormatError(f"{path}: truncated parameter data")
        arrays.append(np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(shape))
        offset = end
    if offset != len(blob):
        raise ModelFormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return ModelParams.from_arrays(arrays), cfg
