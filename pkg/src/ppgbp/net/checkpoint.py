"""Checkpoint container.

Layout (all integers ASCII, all tensors little-endian float64, C order)::

    PPGBP-CKPT\\n
    <format version>\\n
    <header byte length>\\n
    <JSON header, sorted keys, UTF-8>
    <tensor payload>

The header records hyperparameters, seed, target scaler, Adam scalars,
free-form ``extra`` metadata and a ``tensors`` list of
``{"name", "shape", "offset"}`` entries (offset in bytes into the payload).
Tensors appear in declared order: the network's trainable tensors, then
``bn.running_mean`` and ``bn.running_var``, then ``adam.m.*`` and
``adam.v.*`` in the same trainable order. Nothing time-dependent is
written, so equal inputs give equal bytes.
"""
import json
from dataclasses import dataclass

import numpy as np

from ..errors import PPGBPError
from .model import HyperParams, NetworkParams

MAGIC = b"PPGBP-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(PPGBPError, ValueError):
    pass


@dataclass
class Checkpoint:
    params: NetworkParams
    adam: object = None
    scaler: object = None
    seed: int = None
    extra: dict = None


def save_checkpoint(path, params, adam=None, scaler=None, seed=None, extra=None):
    arrays = list(params.tensors.items())
    arrays += [("bn.running_mean", params.running_mean), ("bn.running_var", params.running_var)]
    if adam is not None:
        arrays += [(f"adam.m.{k}", adam.m[k]) for k in params.tensors]
        arrays += [(f"adam.v.{k}", adam.v[k]) for k in params.tensors]
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {
        "hyperparams": params.hp.to_dict(),
        "bn_updates": params.bn_updates,
        "seed": seed,
        "scaler": None if scaler is None else scaler.to_dict(),
        "adam": None if adam is None else {
            "t": adam.t, "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
        "extra": extra or {},
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(b"%d\n" % FORMAT_VERSION)
        fh.write(b"%d\n" % len(blob))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path):
    from ..scaler import TargetScaler
    from ..train import AdamState

    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version = int(fh.readline())
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        size = int(fh.readline())
        header = json.loads(fh.read(size).decode("utf-8"))
        payload = fh.read()

    def tensor(entry):
        count = int(np.prod(entry["shape"], dtype=np.int64))
        flat = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        return flat.astype(np.float64).reshape(entry["shape"])

    table = {e["name"]: tensor(e) for e in header["tensors"]}
    hp = HyperParams.from_dict(header["hyperparams"])
    names = list(hp.tensor_shapes())
    missing = [n for n in names if n not in table]
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing}")
    params = NetworkParams(hp, {n: table[n] for n in names}, table["bn.running_mean"],
                           table["bn.running_var"], header["bn_updates"])
    adam = None
    if header["adam"] is not None:
        a = header["adam"]
        adam = AdamState({n: table[f"adam.m.{n}"] for n in names},
                         {n: table[f"adam.v.{n}"] for n in names},
                         a["t"], a["lr"], a["beta1"], a["beta2"], a["eps"])
    scaler = None if header["scaler"] is None else TargetScaler(**header["scaler"])
    return Checkpoint(params, adam, scaler, header["seed"], header["extra"])
