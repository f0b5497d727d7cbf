"""Differentiable neural building blocks: convolutions, pooling, batch norm,
dropout, a gated recurrent unit, and He initialization.

Convolutions are valid (no padding) and implemented as chunked im2col matrix
products; the column buffers are recomputed in backward instead of stored.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, accumulate, as_tensor, result
from .errors import InvalidArgumentError

_CHUNK_ELEMS = 1 << 23   # cap im2col buffers at ~32 MB of float32


def he_uniform(shape, fan_in, rng):
    """i.i.d. uniform on [-sqrt(6/fan_in), +sqrt(6/fan_in)], float32."""
    if fan_in < 1:
        raise InvalidArgumentError(f"fan_in must be >= 1, got {fan_in}")
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def he_init(shape, fan_in, seed):
    """Seeded He-uniform draw (fresh generator per call)."""
    return he_uniform(shape, fan_in, np.random.default_rng(seed))


def _row_chunks(n_rows, elems_per_row):
    step = max(1, _CHUNK_ELEMS // max(1, elems_per_row))
    for lo in range(0, n_rows, step):
        yield lo, min(n_rows, lo + step)


def _im2col(x, k, stride):
    """(B, C, L) -> contiguous (B, L_out, C*k) patch matrix."""
    view = np.lib.stride_tricks.sliding_window_view(x, k, axis=2)
    view = view[:, :, ::stride]              # (B, C, L_out, k)
    return np.ascontiguousarray(view.transpose(0, 2, 1, 3)).reshape(
        x.shape[0], -1, x.shape[1] * k)


def _corr_gemm(x, w2, co, k, stride, out=None):
    """Chunked valid correlation of x (B, Ci, L) with w2 (Co, Ci*k)."""
    bsz, ci, length = x.shape
    l_out = (length - k) // stride + 1
    y = out if out is not None else np.empty((bsz, co, l_out), dtype=x.dtype)
    for lo, hi in _row_chunks(bsz, l_out * ci * k):
        cols = _im2col(x[lo:hi], k, stride)
        y[lo:hi] = (cols @ w2.T).transpose(0, 2, 1)
    return y


def _weight_grad(x, g, k, stride, co):
    """dW (Co, Ci*k) for a valid correlation y = corr(x, w)."""
    bsz, ci, _ = x.shape
    l_out = g.shape[2]
    dw = np.zeros((co, ci * k), dtype=g.dtype)
    for lo, hi in _row_chunks(bsz, l_out * ci * k):
        cols = _im2col(x[lo:hi], k, stride)
        gc = np.ascontiguousarray(g[lo:hi].transpose(0, 2, 1)).reshape(-1, co)
        dw += gc.T @ cols.reshape(-1, ci * k)
    return dw


def _stuff_pad(g, stride, pad, tail):
    """Insert stride-1 zeros between samples, pad `pad` zeros both sides and
    `tail` extra zeros on the right."""
    bsz, ch, length = g.shape
    stuffed_len = (length - 1) * stride + 1
    out = np.zeros((bsz, ch, pad + stuffed_len + pad + tail), dtype=g.dtype)
    out[:, :, pad:pad + stuffed_len:stride] = g
    return out


def _data_grad(g, w, stride, l_in):
    """dx for y = corr(x, w): full correlation of the zero-stuffed output
    gradient with the kernel flipped along its tap axis.

    w is (Co, Ci, k); g is (B, Co, L_out); returns (B, Ci, l_in).
    """
    co, ci, k = w.shape
    wf = np.ascontiguousarray(w[:, :, ::-1].transpose(1, 0, 2)).reshape(
        ci, co * k)
    covered = (g.shape[2] - 1) * stride + k   # inputs reached by the kernel
    gp = _stuff_pad(g, stride, k - 1, max(0, l_in - covered))
    return _corr_gemm(gp, wf, ci, k, 1)


def conv1d(x, w, b=None, stride=1):
    """Valid cross-correlation: x (B, Ci, L), w (Co, Ci, k) -> (B, Co, L_out).

    L_out = floor((L - k) / stride) + 1.
    """
    x, w = as_tensor(x), as_tensor(w)
    bsz, ci, length = x.shape
    co, ci_w, k = w.shape
    if ci_w != ci:
        raise InvalidArgumentError(f"kernel expects {ci_w} channels, got {ci}")
    if k > length:
        raise InvalidArgumentError(
            f"kernel length {k} exceeds input length {length}")
    if stride < 1:
        raise InvalidArgumentError("stride must be >= 1")
    y = _corr_gemm(x.data, w.data.reshape(co, ci * k), co, k, stride)
    if b is not None:
        b = as_tensor(b)
        y += b.data.reshape(1, co, 1)

    def backward(g):
        accumulate(x, _data_grad(g, w.data, stride, length))
        accumulate(w, _weight_grad(x.data, g, k, stride, co).reshape(w.shape))
        if b is not None:
            accumulate(b, g.sum(axis=(0, 2), dtype=np.float64))
    return result(y, (x, w, b), backward)


def conv_transpose1d(x, w, b=None, stride=1, output_padding=0):
    """Transposed valid convolution: x (B, Ci, L), w (Ci, Co, k).

    Output length = (L - 1) * stride + k + output_padding (trailing zeros
    cover lengths lost to floor division in the paired forward pooling/conv).
    """
    x, w = as_tensor(x), as_tensor(w)
    bsz, ci, length = x.shape
    ci_w, co, k = w.shape
    if ci_w != ci:
        raise InvalidArgumentError(f"kernel expects {ci_w} channels, got {ci}")
    if output_padding < 0:
        raise InvalidArgumentError("output_padding must be >= 0")
    l_out = (length - 1) * stride + k + output_padding
    # transposed conv is the data gradient of a valid correlation whose
    # kernel already has the (in, out, taps) layout _data_grad expects
    y = _data_grad(x.data, w.data, stride, l_out)
    if b is not None:
        b = as_tensor(b)
        y += b.data.reshape(1, co, 1)

    def backward(g):
        g_used = g[:, :, :(length - 1) * stride + k]
        accumulate(x, _corr_gemm(np.ascontiguousarray(g_used),
                                 w.data.reshape(ci, co * k), ci, k, stride))
        dw = _weight_grad(g_used, x.data, k, stride, ci)
        accumulate(w, dw.reshape(ci, co, k))
        if b is not None:
            accumulate(b, g.sum(axis=(0, 2), dtype=np.float64))
    return result(y, (x, w, b), backward)


def _pool_view(x, width, stride):
    """Contiguous (B, C, P, width) window array (a view when stride==width)."""
    if stride == width:
        n_pool = x.shape[2] // width
        return x[:, :, :n_pool * width].reshape(x.shape[0], x.shape[1],
                                                n_pool, width)
    view = np.lib.stride_tricks.sliding_window_view(x, width, axis=2)
    return np.ascontiguousarray(view[:, :, ::stride])


def max_pool1d(x, width, stride=None):
    """Max pooling over the last axis; default stride equals the width."""
    x = as_tensor(x)
    stride = width if stride is None else stride
    bsz, ch, length = x.shape
    if width > length:
        raise InvalidArgumentError(
            f"pool width {width} exceeds input length {length}")
    n_pool = (length - width) // stride + 1
    view = _pool_view(x.data, width, stride)
    arg = view.argmax(axis=3)
    y = np.take_along_axis(view, arg[..., None], axis=3)[..., 0]

    def backward(g):
        dx = np.zeros_like(x.data)
        if stride == width:
            dxv = dx[:, :, :n_pool * width].reshape(bsz, ch, n_pool, width)
            np.put_along_axis(dxv, arg[..., None], g[..., None], axis=3)
        else:
            for j in range(width):
                dx[:, :, j:j + (n_pool - 1) * stride + 1:stride] += \
                    g * (arg == j)
        accumulate(x, dx)
    return result(y, (x,), backward)


def avg_pool1d(x, width, stride=None):
    """Average pooling over the last axis."""
    x = as_tensor(x)
    stride = width if stride is None else stride
    bsz, ch, length = x.shape
    if width > length:
        raise InvalidArgumentError(
            f"pool width {width} exceeds input length {length}")
    n_pool = (length - width) // stride + 1
    view = _pool_view(x.data, width, stride)
    y = view.mean(axis=3, dtype=np.float64).astype(x.dtype)

    def backward(g):
        dx = np.zeros_like(x.data)
        gw = g * (1.0 / width)
        if stride == width:
            dxv = dx[:, :, :n_pool * width].reshape(bsz, ch, n_pool, width)
            dxv += gw[..., None]
        else:
            for j in range(width):
                dx[:, :, j:j + (n_pool - 1) * stride + 1:stride] += gw
        accumulate(x, dx)
    return result(y, (x,), backward)


class BatchNormState:
    """Running statistics, updated in training mode outside the graph."""

    def __init__(self, n_features):
        self.running_mean = np.zeros(n_features, dtype=np.float32)
        self.running_var = np.ones(n_features, dtype=np.float32)

    def arrays(self):
        return [self.running_mean, self.running_var]

    def load(self, mean, var):
        self.running_mean = np.asarray(mean, dtype=np.float32).copy()
        self.running_var = np.asarray(var, dtype=np.float32).copy()


def batch_norm1d(x, gamma, beta, state, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization of x (B, C, L).

    Training normalizes by batch statistics (population variance) and updates
    the running stats; eval applies the affine map given by the running stats.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    bsz, ch, length = x.shape
    if training:
        if bsz < 2:
            raise InvalidArgumentError(
                "batch norm in training mode needs batch size >= 2")
        mu = x.data.mean(axis=(0, 2), dtype=np.float64)
        var = x.data.var(axis=(0, 2), dtype=np.float64)
        state.running_mean = ((1 - momentum) * state.running_mean
                              + momentum * mu).astype(np.float32)
        state.running_var = ((1 - momentum) * state.running_var
                             + momentum * var).astype(np.float32)
    else:
        mu = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    mu = mu.astype(x.dtype)
    xhat = x.data - mu[None, :, None]
    xhat *= inv[None, :, None]
    y = xhat * gamma.data[None, :, None]
    y += beta.data[None, :, None]
    n = bsz * length

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2), dtype=np.float64)
        dbeta = g.sum(axis=(0, 2), dtype=np.float64)
        accumulate(gamma, dgamma)
        accumulate(beta, dbeta)
        gi = gamma.data[None, :, None] * inv[None, :, None]
        if training:
            dxhat = g * gamma.data[None, :, None]
            s1 = dxhat.sum(axis=(0, 2), dtype=np.float64)[None, :, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2),
                                    dtype=np.float64)[None, :, None]
            dx = (inv[None, :, None] / n) * (n * dxhat - s1 - xhat * s2)
            accumulate(x, dx.astype(x.dtype, copy=False))
        else:
            accumulate(x, g * gi)
    return result(y, (x, gamma, beta), backward)


def dropout(x, p, training, rng):
    """Inverted dropout: survivors scaled by 1/(1-p); eval is the identity."""
    x = as_tensor(x)
    if not training or p <= 0:
        return x
    if not 0 <= p < 1:
        raise InvalidArgumentError(f"dropout rate must be in [0, 1), got {p}")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) * (1.0 / (1.0 - p))
    return ad.mul(x, np.asarray(mask, dtype=x.dtype))


def linear(x, w, b):
    """x (B, F) @ w (F, O) + b (O,)."""
    return ad.add(ad.matmul(x, w), b)


# ---------------------------------------------------------------------------
# Gated recurrent unit
# ---------------------------------------------------------------------------

def gru_params(input_dim, hidden_dim, rng):
    """Weight dict for one GRU layer; gate order (reset, update, candidate)."""
    return {
        "w_ih": Tensor(he_uniform((input_dim, 3 * hidden_dim), input_dim, rng),
                       requires_grad=True),
        "w_hh": Tensor(he_uniform((hidden_dim, 3 * hidden_dim), hidden_dim,
                                  rng), requires_grad=True),
        "b_ih": Tensor(np.zeros(3 * hidden_dim, dtype=np.float32),
                       requires_grad=True),
        "b_hh": Tensor(np.zeros(3 * hidden_dim, dtype=np.float32),
                       requires_grad=True),
    }


def gru_sequence(params, x):
    """Run a GRU over x (B, S, D); returns the final hidden state (B, H).

    The hidden state starts at zero. The candidate gate applies the reset
    gate to the projected hidden state (elementwise), so two bias vectors
    are kept.
    """
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] < 1:
        raise InvalidArgumentError(
            f"expected a non-empty (B, S, D) sequence, got {x.shape}")
    bsz, steps, _ = x.shape
    hidden = params["w_hh"].shape[0]
    h = Tensor(np.zeros((bsz, hidden), dtype=x.dtype))
    for s in range(steps):
        xt = ad.reshape(ad.narrow(x, 1, s, 1), (bsz, -1))
        gi = ad.add(ad.matmul(xt, params["w_ih"]), params["b_ih"])
        gh = ad.add(ad.matmul(h, params["w_hh"]), params["b_hh"])
        r = ad.sigmoid(ad.add(ad.narrow(gi, 1, 0, hidden),
                              ad.narrow(gh, 1, 0, hidden)))
        z = ad.sigmoid(ad.add(ad.narrow(gi, 1, hidden, hidden),
                              ad.narrow(gh, 1, hidden, hidden)))
        n = ad.tanh(ad.add(ad.narrow(gi, 1, 2 * hidden, hidden),
                           ad.mul(r, ad.narrow(gh, 1, 2 * hidden, hidden))))
        h = ad.add(n, ad.mul(z, ad.add(h, ad.mul(n, -1.0))))
    return h


def gru_forward(params, embeddings):
    """Single-sequence form: embeddings (S, D) -> final hidden state (H,)."""
    emb = as_tensor(embeddings)
    if emb.ndim != 2 or emb.shape[0] < 1:
        raise InvalidArgumentError(
            f"expected a non-empty (S, D) sequence, got {emb.shape}")
    out = gru_sequence(params, ad.reshape(emb, (1,) + tuple(emb.shape)))
    return ad.reshape(out, (-1,))
