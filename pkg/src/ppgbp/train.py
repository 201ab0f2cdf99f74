"""Mini-batch Adam training of the network on normalised (SBP, DBP) targets."""
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InsufficientDataError, NumericError
from .net.model import (
    HyperParams,
    init_params,
    network_backward,
    network_forward,
    update_running_stats,
)
from .scaler import TargetScaler

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 20
    epochs: int = 200
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    patience: int = 20
    min_delta: float = 1e-5
    seed: int = 0
    # full-set loss with dropout off after every epoch; costs one extra forward sweep
    track_clean_loss: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, tensors, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls({k: np.zeros_like(v) for k, v in tensors.items()},
                   {k: np.zeros_like(v) for k, v in tensors.items()},
                   0, lr, beta1, beta2, eps)


def mse_loss(pred, target):
    """Mean squared error over all components, and its gradient w.r.t. ``pred``.

    For a batch ``(B, 2)`` the mean runs over every entry, so the gradient is
    ``2 (pred - target) / pred.size``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    diff = pred - np.asarray(target, dtype=np.float64)
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def adam_step(tensors, grads, state):
    """One Adam update, in place; returns ``(tensors, state)``.

    Every gradient is checked before anything is touched, so a bad gradient
    leaves parameters and moments unchanged.
    """
    for name in tensors:
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient for {name}", where=name)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, theta in tensors.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        theta -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return tensors, state


@dataclass
class TrainResult:
    params: object
    scaler: TargetScaler
    adam: AdamState
    history: list = field(default_factory=list)
    train_indices: list = field(default_factory=list)

    def predict(self, window_input):
        """Predicted (sbp, dbp) in mmHg for one normalised PPG window."""
        z, _ = network_forward(window_input, self.params, "infer")
        return self.scaler.denormalize(z)


def _clean_loss(params, X, Y):
    ones = np.ones((X.shape[0], params.hp.input_length // params.hp.pool_size, params.hp.n_filters))
    out, _ = network_forward(X, params, "train", dropout_mask=ones)
    return mse_loss(out, Y)[0]


def train_subject(windows, config=None, exclude=(), hp=None, scaler=None, log_sink=None):
    """Train a fresh network on ``windows`` minus the indices in ``exclude``.

    ``windows`` is any indexable sequence of WindowSample; excluded positions
    are never read. Targets are normalised with ``scaler`` or, when None, a
    scaler fitted on the usable windows. ``log_sink`` receives one dict per
    epoch (epoch, loss, wall_time and, if tracked, clean_loss).
    """
    config = config or TrainConfig()
    hp = hp or HyperParams()
    exclude = set(exclude)
    usable = [i for i in range(len(windows)) if i not in exclude]
    if len(usable) < config.batch_size:
        raise InsufficientDataError(
            f"{len(usable)} usable windows, need at least batch_size={config.batch_size}")
    picked = [windows[i] for i in usable]
    X = np.stack([w.input for w in picked])
    bp = np.array([[w.sbp, w.dbp] for w in picked])
    if scaler is None:
        scaler = TargetScaler.fit(bp[:, 0], bp[:, 1])
    Y = scaler.normalize(bp)

    params = init_params(hp, config.seed)
    adam = AdamState.zeros_like(params.tensors, config.learning_rate, config.beta1,
                                config.beta2, config.epsilon)
    rng = np.random.default_rng([config.seed, 1])
    history = []
    best = np.inf
    stale = 0
    t0 = time.perf_counter()
    n = len(usable)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            out, trace = network_forward(X[idx], params, "train", rng=rng)
            loss, dout = mse_loss(out, Y[idx])
            grads = network_backward(trace, dout)
            adam_step(params.tensors, grads, adam)
            update_running_stats(params, trace)
            losses.append(loss)
        rec = {"epoch": epoch, "loss": float(np.mean(losses)),
               "wall_time": round(time.perf_counter() - t0, 3)}
        if config.track_clean_loss:
            rec["clean_loss"] = _clean_loss(params, X, Y)
        history.append(rec)
        if log_sink is not None:
            log_sink(rec)
        if best - rec["loss"] > config.min_delta:
            best = rec["loss"]
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                log.info("early stop at epoch %d (loss %.6g)", epoch, rec["loss"])
                break
    return TrainResult(params, scaler, adam, history, usable)


def write_log(history, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def config_dict(config):
    return asdict(config)
