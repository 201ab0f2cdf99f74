"""Forward/backward kernels for the fixed CNN-LSTM graph.

Activations are laid out batch-first: ``(B, T)`` for the raw window and
``(B, T, C)`` for every sequence after the convolution. Each ``*_forward``
returns its output together with whatever the matching ``*_backward``
needs; backward functions return the input gradient followed by the
parameter gradients.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NumericError, ShapeError, UninitializedStatsError


# ------------------------------------------------------------------ conv


def conv1d_forward(x, kernel, bias):
    """Single-input-channel cross-correlation with 'same' zero padding.

    ``out[b, t, f] = bias[f] + sum_j kernel[f, j] * x[b, t + j - sF // 2]``
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"conv input must be (batch, T>=1), got {x.shape}")
    n_filters, size = kernel.shape
    left = size // 2
    xp = np.pad(x, ((0, 0), (left, size - 1 - left)))
    patches = sliding_window_view(xp, size, axis=1)  # (B, T, sF)
    return patches @ kernel.T + bias, patches


def conv1d_backward(dout, patches, kernel):
    size = kernel.shape[1]
    T = dout.shape[1]
    dkernel = dout.reshape(-1, dout.shape[2]).T @ patches.reshape(-1, size)
    dbias = dout.sum(axis=(0, 1))
    dpatches = dout @ kernel
    dxp = np.zeros((dout.shape[0], T + size - 1))
    for j in range(size):
        dxp[:, j:j + T] += dpatches[:, :, j]
    left = size // 2
    return dxp[:, left:left + T], dkernel, dbias


# ------------------------------------------------------------------ relu


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dout, x):
    return dout * (x > 0)


# ------------------------------------------------------------- batchnorm


def batchnorm_forward(x, gamma, beta, mode, running_mean=None, running_var=None,
                      eps=1e-3, initialized=True):
    """Per-channel normalisation over batch and time.

    In ``train`` mode the batch statistics are used and returned in the
    cache; updating the running averages is left to the caller so that the
    forward pass never mutates parameters.
    """
    if mode == "train":
        n = x.shape[0] * x.shape[1]
        if n < 2:
            raise ShapeError("batch norm in train mode needs at least 2 values per channel")
        mean = x.mean(axis=(0, 1))
        centred = x - mean
        var = np.mean(centred * centred, axis=(0, 1))
    elif mode == "infer":
        if not initialized or running_mean is None:
            raise UninitializedStatsError("batch norm running statistics were never updated")
        mean, var = running_mean, running_var
        centred = x - mean
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std
    return gamma * xhat + beta, {"xhat": xhat, "inv_std": inv_std, "mean": mean, "var": var}


def batchnorm_backward(dout, cache, gamma):
    """Train-mode gradient (batch statistics depend on the input)."""
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    n = dout.shape[0] * dout.shape[1]
    dgamma = np.sum(dout * xhat, axis=(0, 1))
    dbeta = dout.sum(axis=(0, 1))
    dxhat = dout * gamma
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=(0, 1))
                          - xhat * np.sum(dxhat * xhat, axis=(0, 1)))
    return dx, dgamma, dbeta


# --------------------------------------------------------------- maxpool


def maxpool_forward(x, size):
    """Non-overlapping max over blocks of ``size`` steps; remainder dropped.

    Returns ``(out, argmax)``; ``argmax`` is the winning offset inside each
    block, first occurrence on ties.
    """
    B, T, C = x.shape
    if T < size:
        raise ShapeError(f"sequence of {T} steps is shorter than pool size {size}")
    n_out = T // size
    blocks = x[:, :n_out * size].reshape(B, n_out, size, C)
    argmax = blocks.argmax(axis=2)
    out = np.take_along_axis(blocks, argmax[:, :, None, :], axis=2)[:, :, 0, :]
    return out, argmax


def maxpool_backward(dout, argmax, size, T):
    B, n_out, C = dout.shape
    dblocks = np.zeros((B, n_out, size, C))
    np.put_along_axis(dblocks, argmax[:, :, None, :], dout[:, :, None, :], axis=2)
    dx = np.zeros((B, T, C))
    dx[:, :n_out * size] = dblocks.reshape(B, n_out * size, C)
    return dx


# --------------------------------------------------------------- dropout


def dropout_mask(shape, rate, rng):
    """Inverted-dropout mask: 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(x, rate, mode, rng=None, mask=None):
    if mode != "train":
        return x, None
    if mask is None:
        mask = dropout_mask(x.shape, rate, rng)
    return x * mask, mask


# ------------------------------------------------------------------ lstm


def hard_sigmoid(x):
    return np.clip(0.2 * x + 0.5, 0.0, 1.0)


def hard_sigmoid_grad(x):
    return np.where((x > -2.5) & (x < 2.5), 0.2, 0.0)


def lstm_forward(x, W, U, b, h0=None, c0=None):
    """Run one LSTM layer over ``x`` of shape ``(B, T, C_in)``.

    Gate blocks in ``W`` (C_in, 4n), ``U`` (n, 4n) and ``b`` (4n,) are
    ordered input, forget, candidate, output. Gates use the hard sigmoid,
    candidate and output squashing use tanh. Returns hidden states
    ``(B, T, n)`` and a cache whose arrays are time-major.
    """
    B, T, _ = x.shape
    n = U.shape[0]
    h0 = np.zeros((B, n)) if h0 is None else h0
    c0 = np.zeros((B, n)) if c0 is None else c0
    h, c = h0, c0
    xw = np.ascontiguousarray((x @ W + b).transpose(1, 0, 2))
    z_all = np.empty((T, B, 4 * n))
    gates = np.empty((T, B, 4 * n))
    cs = np.empty((T, B, n))
    tcs = np.empty((T, B, n))
    hs = np.empty((T, B, n))
    for t in range(T):
        z = z_all[t]
        np.matmul(h, U, out=z)
        z += xw[t]
        if not np.isfinite(z.sum()):
            raise NumericError(f"non-finite LSTM pre-activation at time step {t}", where=t)
        g = gates[t]
        np.multiply(z, 0.2, out=g)
        g += 0.5
        np.minimum(g, 1.0, out=g)
        np.maximum(g, 0.0, out=g)
        np.tanh(z[:, 2 * n:3 * n], out=g[:, 2 * n:3 * n])
        c = cs[t]
        np.multiply(g[:, n:2 * n], c0 if t == 0 else cs[t - 1], out=c)
        c += g[:, :n] * g[:, 2 * n:3 * n]
        np.tanh(c, out=tcs[t])
        h = hs[t]
        np.multiply(g[:, 3 * n:], tcs[t], out=h)
    cache = {"x": x, "z": z_all, "gates": gates, "c": cs, "tc": tcs, "h": hs, "h0": h0, "c0": c0}
    return hs.transpose(1, 0, 2), cache


def lstm_backward(dh_seq, cache, W, U):
    """Backpropagation through time; ``dh_seq`` is d(loss)/d(hidden), shape ``(B, T, n)``.

    Returns ``(dx, dW, dU, db, dh0, dc0)``.
    """
    x, z_all, gates = cache["x"], cache["z"], cache["gates"]
    cs, tcs, hs = cache["c"], cache["tc"], cache["h"]
    B, T, n = dh_seq.shape
    dh_seq = np.ascontiguousarray(dh_seq.transpose(1, 0, 2))
    # local derivative of each gate w.r.t. its pre-activation
    deriv = hard_sigmoid_grad(z_all)
    cand = gates[:, :, 2 * n:3 * n]
    deriv[:, :, 2 * n:3 * n] = 1.0 - cand * cand
    c_prev = np.concatenate([cache["c0"][None], cs[:-1]], axis=0)
    h_prev = np.concatenate([cache["h0"][None], hs[:-1]], axis=0)
    # dz = [dc, dc, dc, dh] * fac
    fac = np.concatenate([cand, c_prev, gates[:, :, :n], tcs], axis=2) * deriv
    o_dtanh = gates[:, :, 3 * n:] * (1.0 - tcs * tcs)
    forget = np.ascontiguousarray(gates[:, :, n:2 * n])

    dz_all = np.empty((T, B, 4 * n))
    dh_next = np.zeros((B, n))
    dc_next = np.zeros((B, n))
    UT = np.ascontiguousarray(U.T)
    for t in range(T - 1, -1, -1):
        dh = dh_seq[t] + dh_next
        dc = dh * o_dtanh[t]
        dc += dc_next
        dz = dz_all[t]
        f_t = fac[t]
        np.multiply(f_t[:, :n], dc, out=dz[:, :n])
        np.multiply(f_t[:, n:2 * n], dc, out=dz[:, n:2 * n])
        np.multiply(f_t[:, 2 * n:3 * n], dc, out=dz[:, 2 * n:3 * n])
        np.multiply(f_t[:, 3 * n:], dh, out=dz[:, 3 * n:])
        dc_next = dc * forget[t]
        dh_next = dz @ UT
    flat_dz = dz_all.reshape(T * B, 4 * n)
    dU = h_prev.reshape(T * B, n).T @ flat_dz
    x_tm = x.transpose(1, 0, 2).reshape(T * B, -1)
    dW = x_tm.T @ flat_dz
    db = flat_dz.sum(axis=0)
    dx = (dz_all @ W.T).transpose(1, 0, 2)
    return dx, dW, dU, db, dh_next, dc_next


# ----------------------------------------------------------------- dense


def dense_forward(h, W, b):
    if h.shape[-1] != W.shape[0]:
        raise ShapeError(f"dense layer expects {W.shape[0]} inputs, got {h.shape[-1]}")
    return h @ W + b


def dense_backward(dout, h, W):
    return dout @ W.T, h.T @ dout, dout.sum(axis=0)
