"""The composed network: conv -> ReLU -> batch norm -> max-pool -> dropout
-> stacked LSTM -> dense regression head."""
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..errors import ProtocolError, ShapeError
from . import layers


@dataclass(frozen=True)
class HyperParams:
    filter_size: int = 15
    n_filters: int = 32
    pool_size: int = 4
    dropout_rate: float = 0.1
    lstm_units: int = 64
    lstm_layers: int = 2
    output_dim: int = 2
    input_length: int = 160
    readout: str = "last"  # or "mean" over time
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-3

    def __post_init__(self):
        for name in ("filter_size", "n_filters", "pool_size", "lstm_units",
                     "lstm_layers", "output_dim", "input_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.readout not in ("last", "mean"):
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.input_length < self.pool_size:
            raise ValueError("input_length shorter than one pooling block")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def tensor_shapes(self):
        """Trainable tensors in their declared (checkpoint) order."""
        n = self.lstm_units
        shapes = {
            "conv.kernel": (self.n_filters, self.filter_size),
            "conv.bias": (self.n_filters,),
            "bn.gamma": (self.n_filters,),
            "bn.beta": (self.n_filters,),
        }
        n_in = self.n_filters
        for k in range(1, self.lstm_layers + 1):
            shapes[f"lstm{k}.W"] = (n_in, 4 * n)
            shapes[f"lstm{k}.U"] = (n, 4 * n)
            shapes[f"lstm{k}.b"] = (4 * n,)
            n_in = n
        shapes["dense.W"] = (n, self.output_dim)
        shapes["dense.b"] = (self.output_dim,)
        return shapes


@dataclass
class NetworkParams:
    """Trainable tensors plus batch-norm running statistics."""
    hp: HyperParams
    tensors: dict
    running_mean: np.ndarray
    running_var: np.ndarray
    bn_updates: int = 0

    def copy(self):
        return NetworkParams(self.hp, {k: v.copy() for k, v in self.tensors.items()},
                             self.running_mean.copy(), self.running_var.copy(), self.bn_updates)

    def __getitem__(self, name):
        return self.tensors[name]


def zero_params(hp):
    tensors = {name: np.zeros(shape) for name, shape in hp.tensor_shapes().items()}
    return NetworkParams(hp, tensors, np.zeros(hp.n_filters), np.ones(hp.n_filters))


def init_params(hp, seed):
    """Seeded initialisation.

    Conv, dense and LSTM input weights are uniform with limit sqrt(3/fan_in);
    recurrent weights are orthonormal (QR of a Gaussian); forget-gate bias 1,
    batch-norm scale 1, all other biases 0.
    """
    rng = np.random.default_rng(seed)
    p = zero_params(hp)
    t = p.tensors

    def fan_in_uniform(shape, fan_in):
        lim = np.sqrt(3.0 / fan_in)
        return rng.uniform(-lim, lim, size=shape)

    t["conv.kernel"] = fan_in_uniform(t["conv.kernel"].shape, hp.filter_size)
    t["bn.gamma"] = np.ones(hp.n_filters)
    n = hp.lstm_units
    for k in range(1, hp.lstm_layers + 1):
        W = t[f"lstm{k}.W"]
        t[f"lstm{k}.W"] = fan_in_uniform(W.shape, W.shape[0])
        q, r = np.linalg.qr(rng.normal(size=(4 * n, n)))
        q *= np.sign(np.diag(r))
        t[f"lstm{k}.U"] = q.T.copy()
        b = np.zeros(4 * n)
        b[n:2 * n] = 1.0
        t[f"lstm{k}.b"] = b
    t["dense.W"] = fan_in_uniform(t["dense.W"].shape, n)
    return p


@dataclass
class ForwardTrace:
    """Everything a backward pass needs; only produced in train mode."""
    x: np.ndarray
    conv_patches: np.ndarray
    conv_out: np.ndarray
    bn_cache: dict
    relu_out: np.ndarray
    pool_argmax: np.ndarray
    dropout_mask: np.ndarray
    lstm_caches: list = field(default_factory=list)
    readout_in: np.ndarray = None
    params: NetworkParams = None

    @property
    def batch_mean(self):
        return self.bn_cache["mean"]

    @property
    def batch_var(self):
        return self.bn_cache["var"]


def _as_batch(window, hp):
    x = np.asarray(window, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != hp.input_length:
        raise ShapeError(
            f"expected windows of {hp.input_length} samples, got shape {np.shape(window)}")
    return x, single


def network_forward(window, params, mode="infer", rng=None, dropout_mask=None):
    """Run the network on one window ``(T,)`` or a batch ``(B, T)``.

    Returns ``(output, trace)``: output has shape ``(2,)`` or ``(B, 2)`` in
    normalised BP units; ``trace`` is None in infer mode. In train mode a
    dropout mask is drawn from ``rng`` unless ``dropout_mask`` is given.
    """
    hp = params.hp
    t = params.tensors
    x, single = _as_batch(window, hp)

    conv_out, patches = layers.conv1d_forward(x, t["conv.kernel"], t["conv.bias"])
    act = layers.relu(conv_out)
    bn_out, bn_cache = layers.batchnorm_forward(
        act, t["bn.gamma"], t["bn.beta"], mode, params.running_mean, params.running_var,
        eps=hp.bn_epsilon, initialized=params.bn_updates > 0)
    pooled, argmax = layers.maxpool_forward(bn_out, hp.pool_size)
    if mode == "train" and dropout_mask is None:
        if rng is None and hp.dropout_rate > 0:
            raise ProtocolError("train-mode forward needs an rng or an explicit dropout mask")
        dropout_mask = layers.dropout_mask(pooled.shape, hp.dropout_rate, rng)
    seq, mask = layers.dropout(pooled, hp.dropout_rate, mode, mask=dropout_mask)

    lstm_caches = []
    for k in range(1, hp.lstm_layers + 1):
        seq, cache = layers.lstm_forward(seq, t[f"lstm{k}.W"], t[f"lstm{k}.U"], t[f"lstm{k}.b"])
        lstm_caches.append(cache)
    readout = seq[:, -1] if hp.readout == "last" else seq.mean(axis=1)
    out = layers.dense_forward(readout, t["dense.W"], t["dense.b"])

    trace = None
    if mode == "train":
        trace = ForwardTrace(x=x, conv_patches=patches, conv_out=conv_out, bn_cache=bn_cache,
                             relu_out=act, pool_argmax=argmax, dropout_mask=mask,
                             lstm_caches=lstm_caches, readout_in=readout, params=params)
    return (out[0] if single else out), trace


def network_backward(trace, output_grad):
    """Gradients of ``sum(output_grad * output)`` w.r.t. every trainable tensor.

    Reuses the dropout mask and pooling argmax recorded in ``trace``.
    """
    if trace is None:
        raise ProtocolError("backward pass needs a trace from a train-mode forward pass")
    params = trace.params
    hp, t = params.hp, params.tensors
    dout = np.asarray(output_grad, dtype=np.float64)
    if dout.ndim == 1:
        dout = dout[None, :]
    grads = {}

    dread, grads["dense.W"], grads["dense.b"] = layers.dense_backward(
        dout, trace.readout_in, t["dense.W"])
    B = dread.shape[0]
    T_seq = trace.lstm_caches[-1]["h"].shape[0]
    dseq = np.zeros((B, T_seq, hp.lstm_units))
    if hp.readout == "last":
        dseq[:, -1] = dread
    else:
        dseq[:] = dread[:, None, :] / T_seq
    for k in range(hp.lstm_layers, 0, -1):
        dseq, dW, dU, db, _, _ = layers.lstm_backward(
            dseq, trace.lstm_caches[k - 1], t[f"lstm{k}.W"], t[f"lstm{k}.U"])
        grads[f"lstm{k}.W"], grads[f"lstm{k}.U"], grads[f"lstm{k}.b"] = dW, dU, db

    dpooled = dseq * trace.dropout_mask
    dbn = layers.maxpool_backward(dpooled, trace.pool_argmax, hp.pool_size, trace.relu_out.shape[1])
    dact, grads["bn.gamma"], grads["bn.beta"] = layers.batchnorm_backward(
        dbn, trace.bn_cache, t["bn.gamma"])
    dconv = layers.relu_backward(dact, trace.conv_out)
    _, grads["conv.kernel"], grads["conv.bias"] = layers.conv1d_backward(
        dconv, trace.conv_patches, t["conv.kernel"])
    return {name: grads[name] for name in t}


def update_running_stats(params, trace):
    """Fold a train-mode batch's statistics into the running averages.

    The running variance uses the unbiased batch variance.
    """
    m = params.hp.bn_momentum
    n = trace.relu_out.shape[0] * trace.relu_out.shape[1]
    var = trace.batch_var * n / max(n - 1, 1)
    if params.bn_updates == 0:
        params.running_mean = trace.batch_mean.copy()
        params.running_var = var
    else:
        params.running_mean = m * params.running_mean + (1 - m) * trace.batch_mean
        params.running_var = m * params.running_var + (1 - m) * var
    params.bn_updates += 1
