"""Minimal numpy neural-network engine: conv/pool/dense/LSTM with exact
reverse-mode gradients.

Tensors are plain numpy arrays.  Every layer exposes a batched forward that
returns (output, cache) and a backward that consumes the cache, so a model is
just explicit plumbing of these calls.  Single-sample wrappers mirror the
batched versions for direct use and for oracle tests.  Training typically
runs in float32; float64 is used wherever gradients are verified against
central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class ShapeMismatch(ValueError):
    pass


# --- activations --------------------------------------------------------------

def relu(z):
    return np.maximum(z, 0.0)


def _drelu(z, a):
    return (z > 0).astype(z.dtype)


def sigmoid(z):
    return expit(z)


def _dsigmoid(z, a):
    return a * (1.0 - a)


def _dtanh(z, a):
    return 1.0 - a * a


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "relu": (relu, _drelu),
    "sigmoid": (sigmoid, _dsigmoid),
    "tanh": (np.tanh, _dtanh),
    "identity": (lambda z: z, lambda z, a: np.ones_like(z)),
}


def _activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


# --- layers -------------------------------------------------------------------

@dataclass
class ConvLayer:
    w: np.ndarray  # (K, C, kh, kw)
    b: np.ndarray  # (K,)
    activation: str = "relu"


@dataclass
class DenseLayer:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "identity"


@dataclass
class LstmCell:
    w_i: np.ndarray  # each (hidden, hidden + input)
    w_f: np.ndarray
    w_c: np.ndarray
    w_o: np.ndarray
    b_i: np.ndarray  # each (hidden,)
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray

    @property
    def hidden_size(self) -> int:
        return self.w_i.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_i.shape[1] - self.w_i.shape[0]


@dataclass
class LstmState:
    c: np.ndarray
    h: np.ndarray


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                   dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_conv(rng, kernels: int, channels: int, kh: int, kw: int,
              activation="relu", dtype=np.float64) -> ConvLayer:
    fan_in = channels * kh * kw
    w = glorot_uniform(rng, (kernels, channels, kh, kw), fan_in, kernels, dtype)
    return ConvLayer(w, np.zeros(kernels, dtype=dtype), activation)


def init_dense(rng, n_in: int, n_out: int, activation="identity",
               dtype=np.float64) -> DenseLayer:
    w = glorot_uniform(rng, (n_out, n_in), n_in, n_out, dtype)
    return DenseLayer(w, np.zeros(n_out, dtype=dtype), activation)


def init_lstm(rng, n_in: int, hidden: int, dtype=np.float64) -> LstmCell:
    def gate():
        return glorot_uniform(rng, (hidden, hidden + n_in), hidden + n_in,
                              hidden, dtype)
    zeros = lambda: np.zeros(hidden, dtype=dtype)
    return LstmCell(gate(), gate(), gate(), gate(),
                    zeros(), zeros(), zeros(), zeros())


# --- convolution ---------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """(N,C,H,W) -> (N, Ho*Wo, C*kh*kw) patch matrix."""
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    n, c, ho, wo = windows.shape[:4]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n, ho * wo, c * kh * kw)


def conv_output_shape(h: int, w: int, kh: int, kw: int, sh: int, sw: int):
    if kh > h or kw > w:
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than input {h}x{w}")
    return (h - kh) // sh + 1, (w - kw) // sw + 1


def conv_forward_batch(x: np.ndarray, layer: ConvLayer, stride=(1, 1)):
    """x (N,C,H,W) -> (out (N,K,Ho,Wo), cache)."""
    k, c, kh, kw = layer.w.shape
    n, xc, h, w = x.shape
    if xc != c:
        raise ShapeMismatch(f"input has {xc} channels, kernels expect {c}")
    sh, sw = stride
    ho, wo = conv_output_shape(h, w, kh, kw, sh, sw)
    cols = _im2col(x, kh, kw, sh, sw)
    z = cols.reshape(n * ho * wo, -1) @ layer.w.reshape(k, -1).T + layer.b
    z = z.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    act, _ = _activation(layer.activation)
    out = act(z)
    cache = (cols, z, out, x.shape, stride, layer)
    return out, cache


def conv_backward_batch(dout: np.ndarray, cache):
    """Gradients of a conv layer: returns (dx, dw, db)."""
    cols, z, out, x_shape, stride, layer = cache
    k, c, kh, kw = layer.w.shape
    n, _, h, w = x_shape
    sh, sw = stride
    _, dact = _activation(layer.activation)
    dz = dout * dact(z, out)  # (N,K,Ho,Wo)
    ho, wo = dz.shape[2], dz.shape[3]
    dz_flat = dz.transpose(0, 2, 3, 1).reshape(-1, k)
    dw = (dz_flat.T @ cols.reshape(n * ho * wo, -1)).reshape(layer.w.shape)
    db = dz_flat.sum(axis=0)

    # dx as a full correlation of the (stride-dilated) dz with flipped kernels
    if sh > 1 or sw > 1:
        dil = np.zeros((n, k, (ho - 1) * sh + 1, (wo - 1) * sw + 1), dtype=dz.dtype)
        dil[:, :, ::sh, ::sw] = dz
    else:
        dil = dz
    padded = np.pad(dil, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    w_rot = np.flip(layer.w, axis=(2, 3)).transpose(1, 0, 2, 3)  # (C,K,kh,kw)
    pcols = _im2col(padded, kh, kw, 1, 1)
    holo, wolo = padded.shape[2] - kh + 1, padded.shape[3] - kw + 1
    dx_core = (pcols.reshape(n * holo * wolo, -1)
               @ w_rot.reshape(c, -1).T).reshape(n, holo, wolo, c)
    dx = np.zeros(x_shape, dtype=dz.dtype)
    dx[:, :, :holo, :wolo] = dx_core.transpose(0, 3, 1, 2)
    return dx, dw, db


def conv_forward(x: np.ndarray, layer: ConvLayer, stride: int | tuple = 1) -> np.ndarray:
    """Single-sample convolution; a 2D input is treated as one channel."""
    if isinstance(stride, int):
        stride = (stride, stride)
    if x.ndim == 2:
        x = x[None, :, :]
    if x.ndim != 3:
        raise ShapeMismatch(f"expected 2D or 3D input, got {x.ndim}D")
    out, _ = conv_forward_batch(x[None], layer, stride)
    return out[0]


# --- max pooling ---------------------------------------------------------------

def max_pool_forward_batch(x: np.ndarray, window, stride=None):
    """x (N,C,H,W) -> (out (N,C,Ho,Wo), cache).  Stride defaults to window."""
    ph, pw = window
    sh, sw = stride if stride is not None else window
    n, c, h, w = x.shape
    if ph > h or pw > w:
        raise ShapeMismatch(f"pool window {ph}x{pw} larger than input {h}x{w}")
    if (sh, sw) == (ph, pw):
        ho, wo = h // ph, w // pw
        view = x[:, :, :ho * ph, :wo * pw].reshape(n, c, ho, ph, wo, pw)
        patches = view.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, ph * pw)
    else:
        ho, wo = conv_output_shape(h, w, ph, pw, sh, sw)
        patches = np.ascontiguousarray(
            sliding_window_view(x, (ph, pw), axis=(2, 3))[:, :, ::sh, ::sw]
        ).reshape(n, c, ho, wo, ph * pw)
    idx = patches.argmax(axis=-1)
    out = np.take_along_axis(patches, idx[..., None], axis=-1)[..., 0]
    cache = (idx, x.shape, window, (sh, sw))
    return out, cache


def max_pool_backward_batch(dout: np.ndarray, cache) -> np.ndarray:
    idx, x_shape, (ph, pw), (sh, sw) = cache
    n, c, h, w = x_shape
    ho, wo = dout.shape[2], dout.shape[3]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    if (sh, sw) == (ph, pw):
        scat = np.zeros((n, c, ho, wo, ph * pw), dtype=dout.dtype)
        np.put_along_axis(scat, idx[..., None], dout[..., None], axis=-1)
        block = scat.reshape(n, c, ho, wo, ph, pw).transpose(0, 1, 2, 4, 3, 5)
        dx[:, :, :ho * ph, :wo * pw] = block.reshape(n, c, ho * ph, wo * pw)
        return dx
    # overlapping windows: scatter-add into absolute positions, looping the
    # (small) output grid rather than building a giant index tensor
    for i in range(ho):
        for j in range(wo):
            rows = i * sh + idx[:, :, i, j] // pw
            cols = j * sw + idx[:, :, i, j] % pw
            np.add.at(dx, (np.arange(n)[:, None], np.arange(c)[None, :], rows, cols),
                      dout[:, :, i, j])
    return dx


def max_pool(x: np.ndarray, window, stride=None) -> np.ndarray:
    """Single-sample max pool over the trailing two axes of a 2D/3D input."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3:
        raise ShapeMismatch(f"expected 2D or 3D input, got {x.ndim}D")
    out, _ = max_pool_forward_batch(x[None], window, stride)
    return out[0, 0] if squeeze else out[0]


# --- dense ----------------------------------------------------------------------

def dense_forward_batch(x: np.ndarray, layer: DenseLayer):
    if x.shape[1] != layer.w.shape[1]:
        raise ShapeMismatch(f"dense input {x.shape[1]} != weight cols {layer.w.shape[1]}")
    z = x @ layer.w.T + layer.b
    act, _ = _activation(layer.activation)
    out = act(z)
    return out, (x, z, out, layer)


def dense_backward_batch(dout: np.ndarray, cache):
    x, z, out, layer = cache
    _, dact = _activation(layer.activation)
    dz = dout * dact(z, out)
    return dz @ layer.w, dz.T @ x, dz.sum(axis=0)


def dense_forward(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    if x.ndim != 1:
        raise ShapeMismatch("dense_forward expects a vector")
    out, _ = dense_forward_batch(x[None], layer)
    return out[0]


# --- LSTM ------------------------------------------------------------------------

def lstm_step_batch(cell: LstmCell, c: np.ndarray, h: np.ndarray, x: np.ndarray):
    """One LSTM step over a batch: returns (c_next, h_next, cache).

    Gates: i = sig(W_i.[h,x]+b_i), f likewise, candidate g = tanh(W_c.[h,x]+b_c),
    c' = f*c + i*g, o = sig(W_o.[h,x]+b_o), h' = o*tanh(c').
    """
    if x.shape[1] != cell.input_size:
        raise ShapeMismatch(f"lstm input {x.shape[1]} != cell input {cell.input_size}")
    hx = np.concatenate([h, x], axis=1)
    i = sigmoid(hx @ cell.w_i.T + cell.b_i)
    f = sigmoid(hx @ cell.w_f.T + cell.b_f)
    g = np.tanh(hx @ cell.w_c.T + cell.b_c)
    o = sigmoid(hx @ cell.w_o.T + cell.b_o)
    c_next = f * c + i * g
    tanh_c = np.tanh(c_next)
    h_next = o * tanh_c
    cache = (hx, c, i, f, g, o, tanh_c, cell)
    return c_next, h_next, cache


def lstm_step_backward(dh_next: np.ndarray, dc_next: np.ndarray, cache):
    """Backward through one step; returns (dc_prev, dh_prev, dx, grads dict)."""
    hx, c_prev, i, f, g, o, tanh_c, cell = cache
    hidden = cell.hidden_size
    do = dh_next * tanh_c
    dc = dc_next + dh_next * o * (1.0 - tanh_c * tanh_c)
    di = dc * g
    df = dc * c_prev
    dg = dc * i
    dc_prev = dc * f
    dz_i = di * i * (1.0 - i)
    dz_f = df * f * (1.0 - f)
    dz_g = dg * (1.0 - g * g)
    dz_o = do * o * (1.0 - o)
    grads = {
        "w_i": dz_i.T @ hx, "b_i": dz_i.sum(axis=0),
        "w_f": dz_f.T @ hx, "b_f": dz_f.sum(axis=0),
        "w_c": dz_g.T @ hx, "b_c": dz_g.sum(axis=0),
        "w_o": dz_o.T @ hx, "b_o": dz_o.sum(axis=0),
    }
    dhx = dz_i @ cell.w_i + dz_f @ cell.w_f + dz_g @ cell.w_c + dz_o @ cell.w_o
    return dc_prev, dhx[:, :hidden], dhx[:, hidden:], grads


def lstm_step(cell: LstmCell, state: LstmState, x: np.ndarray) -> LstmState:
    if x.ndim != 1:
        raise ShapeMismatch("lstm_step expects a vector input")
    c, h, _ = lstm_step_batch(cell, state.c[None], state.h[None], x[None])
    return LstmState(c=c[0], h=h[0])


def lstm_zero_state(cell: LstmCell, dtype=None) -> LstmState:
    dtype = dtype or cell.w_i.dtype
    return LstmState(np.zeros(cell.hidden_size, dtype=dtype),
                     np.zeros(cell.hidden_size, dtype=dtype))


# --- loss -------------------------------------------------------------------------

def bce_loss(scores: np.ndarray, labels: np.ndarray, eps: float = 1e-12):
    """Mean binary cross-entropy and its gradient w.r.t. the scores."""
    p = np.clip(scores, eps, 1.0 - eps)
    loss = -np.mean(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    dscores = np.where((scores > eps) & (scores < 1.0 - eps),
                       (p - labels) / (p * (1.0 - p)) / len(scores), 0.0)
    return loss, dscores


def bce_with_logits(logits: np.ndarray, labels: np.ndarray):
    """Fused sigmoid + binary cross-entropy; gradient is w.r.t. the logits.

    The fused form stays finite for any logit, unlike differentiating
    through a saturated sigmoid output.
    """
    loss = float(np.mean(np.maximum(logits, 0.0) - logits * labels
                         + np.log1p(np.exp(-np.abs(logits)))))
    dlogits = (expit(logits) - labels) / len(logits)
    return loss, dlogits


# --- optimizer ---------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    kind: str = "adam"  # "adam" | "sgd"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Optimizer:
    """Keeps Adam moments keyed by parameter name; SGD is stateless."""

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        cfg = self.config
        if set(params) != set(grads):
            raise ShapeMismatch("params and grads disagree on keys")
        if cfg.kind == "sgd":
            for name, p in params.items():
                p -= (cfg.learning_rate * grads[name]).astype(p.dtype, copy=False)
            return
        if cfg.kind != "adam":
            raise ValueError(f"unknown optimizer {cfg.kind!r}")
        self.t += 1
        b1t = 1.0 - cfg.beta1 ** self.t
        b2t = 1.0 - cfg.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m += (1.0 - cfg.beta1) * (g - m)
            v += (1.0 - cfg.beta2) * (g * g - v)
            p -= (cfg.learning_rate * (m / b1t) /
                  (np.sqrt(v / b2t) + cfg.eps)).astype(p.dtype, copy=False)


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   config: OptimizerConfig, state: Optimizer | None = None):
    """Single update; pass the returned state back in to continue a run."""
    if state is None:
        state = Optimizer(config)
    state.step(params, grads)
    return params, state


# --- finite differences --------------------------------------------------------------

def finite_diff_check(params: dict[str, np.ndarray], loss_fn: Callable[[], float],
                      analytic: dict[str, np.ndarray], eps: float = 1e-5,
                      tol: float = 1e-4) -> dict:
    """Compare analytic gradients to central differences, parameter by parameter.

    loss_fn must recompute the loss from the live params dict.  Returns
    {name: {"max_rel_err": float, "passed": bool}, "__all__": {...}}.
    Elements where both gradients are below 1e-10 count as exact.
    """
    report: dict = {}
    worst = 0.0
    for name, p in params.items():
        ga = analytic[name]
        if ga.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {ga.shape} vs param {p.shape}")
        gf = np.zeros_like(p)
        flat_p = p.reshape(-1)
        flat_f = gf.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + eps
            hi = loss_fn()
            flat_p[i] = orig - eps
            lo = loss_fn()
            flat_p[i] = orig
            flat_f[i] = (hi - lo) / (2.0 * eps)
        diff = np.abs(ga - gf)
        denom = np.maximum(np.maximum(np.abs(ga), np.abs(gf)), 1e-6)
        rel = np.where(diff <= 1e-10, 0.0, diff / denom)
        max_rel = float(rel.max()) if rel.size else 0.0
        report[name] = {"max_rel_err": max_rel, "passed": max_rel <= tol}
        worst = max(worst, max_rel)
    report["__all__"] = {"max_rel_err": worst, "passed": worst <= tol}
    return report
