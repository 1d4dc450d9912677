"""Training loops for the shared-weight supernet and standalone models,
evaluation, and binary checkpoints with bit-exact round trips."""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import distill as D
from . import space as S
from . import tensor as T
from .distill import KdConfig, QueryLedger, TeacherHandle
from .optim import make_optimizer
from .tensor import Graph, Tensor


@dataclass
class DataSplit:
    """Fixed-length waveforms with integer class labels."""

    x: np.ndarray  # [N, L] float32
    y: np.ndarray  # [N] int

    def __post_init__(self):
        if self.x.ndim != 2 or self.y.ndim != 1 or len(self.x) != len(self.y):
            raise ValueError("expected x [N, L] and y [N] of equal length")
        if len(self.x) == 0:
            raise ValueError("dataset is empty")

    def __len__(self):
        return len(self.x)

    def subset(self, indices) -> "DataSplit":
        return DataSplit(self.x[indices], self.y[indices])


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of one training run; the seed fixes sampling and data order."""

    epochs: int = 4
    batch_size: int = 16
    lr: float = 0.05
    optimizer: str = "sgd"
    lr_decay_fraction: float = 0.75  # single x0.1 decay at this point; >=1 disables
    seed: int = 0
    kd: KdConfig | None = None
    fixed_config: S.SubnetConfig | None = None  # single-path uniform when None
    sample_max_every: int = 0  # extra step on the max config every m steps; 0 = off

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class TrainResult:
    ledger: QueryLedger
    losses: list[float] = field(default_factory=list)
    wall_seconds: float = 0.0


def _batches(n: int, batch_size: int, perm: np.ndarray):
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _decay_epoch(cfg: TrainConfig) -> int | None:
    if cfg.lr_decay_fraction >= 1.0:
        return None
    return int(math.floor(cfg.epochs * cfg.lr_decay_fraction))


def train_supernet(space: S.SearchSpace, data: DataSplit,
                   teacher: TeacherHandle | None, cfg: TrainConfig,
                   validator=None, initial: S.Supernet | None = None
                   ) -> tuple[S.Supernet, TrainResult]:
    """Single-path training with an optional uncertainty-gated teacher.

    Per step: sample one valid config, forward the batch through its slices,
    gate on the batch uncertainty score when a teacher is attached, apply
    the distillation loss or plain cross-entropy, and update. With the gate
    closed the step is bit-identical to teacherless training. Pass `initial`
    to resume from existing weights instead of a fresh seed.
    """
    if teacher is not None and cfg.kd is None:
        raise ValueError("training with a teacher requires a KdConfig (threshold tau)")
    if cfg.optimizer == "adam":
        raise ValueError("supernet training cannot use plain adam: its moment "
                         "buffers leak updates into inactive slices; use "
                         "'masked_adam' or 'sgd'")
    net = initial if initial is not None else S.Supernet(space, seed=cfg.seed)
    result = _train_loop(net, None, space, data, teacher, cfg, validator)
    return net, result


def train_standalone(space: S.SearchSpace, config: S.SubnetConfig, data: DataSplit,
                     cfg: TrainConfig, initial: S.SubnetModel | None = None
                     ) -> tuple[S.SubnetModel, TrainResult]:
    """Train one fixed architecture from fresh weights (teacher, baselines)."""
    model = initial if initial is not None else S.SubnetModel.initialized(
        space, config, seed=cfg.seed)
    result = _train_loop(None, model, space, data, None, cfg, None)
    return model, result


def _train_loop(net: S.Supernet | None, model: S.SubnetModel | None,
                space: S.SearchSpace, data: DataSplit,
                teacher: TeacherHandle | None, cfg: TrainConfig,
                validator) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    params = net.parameters() if net is not None else model.parameters()
    opt = make_optimizer(cfg.optimizer, params, cfg.lr)
    ledger = QueryLedger()
    losses = []
    decay_at = _decay_epoch(cfg)
    prior = None  # uniform prior over the six classes
    step = 0
    t_start = time.perf_counter()

    for epoch in range(cfg.epochs):
        if decay_at is not None and epoch == decay_at and epoch > 0:
            opt.lr = cfg.lr * 0.1
        perm = rng.permutation(len(data))
        for idx in _batches(len(data), cfg.batch_size, perm):
            t0 = time.perf_counter()
            if net is not None:
                config = cfg.fixed_config or S.sample_uniform(space, rng, validator)
            else:
                config = model.config
            xb = Tensor(data.x[idx][:, None, :])
            yb = data.y[idx]
            queried = False
            s_batch = float("nan")
            with Graph() as g:
                logits = (S.subnet_forward(net, config, xb) if net is not None
                          else model.forward(xb))
                if teacher is not None:
                    probs = T._softmax(logits.data)
                    score = D.score_batch(probs, prior)
                    s_batch = score.s_batch
                    queried = D.gate_decision(s_batch, cfg.kd.tau)
                    if queried:
                        t_logits = teacher.query(data.x[idx][:, None, :])
                        loss = D.kd_loss(logits, t_logits, yb, cfg.kd)
                    else:
                        loss = T.softmax_cross_entropy(logits, yb)
                else:
                    loss = T.softmax_cross_entropy(logits, yb)
                value = loss.item()
                if not math.isfinite(value):
                    raise RuntimeError(
                        f"non-finite loss at step {step} (epoch {epoch}) "
                        f"with config {config.describe()}")
                g.backward(loss)
            opt.step()
            opt.zero_grad()
            losses.append(value)
            ledger.record(s_batch, queried, time.perf_counter() - t0)
            step += 1
            if net is not None and cfg.sample_max_every and step % cfg.sample_max_every == 0:
                with Graph() as g:
                    logits = S.subnet_forward(net, S.max_config(space), xb)
                    stab = T.softmax_cross_entropy(logits, yb)
                    g.backward(stab)
                opt.step()
                opt.zero_grad()

    return TrainResult(ledger=ledger, losses=losses,
                       wall_seconds=time.perf_counter() - t_start)


def predict(model_like, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Argmax class predictions, ties broken toward the lower class index."""
    if isinstance(model_like, tuple):
        supernet, config = model_like
        fwd = lambda xb: S.subnet_forward(supernet, config, Tensor(xb)).data
    else:
        fwd = model_like.forward_array
    preds = []
    for start in range(0, len(x), batch_size):
        logits = fwd(x[start:start + batch_size][:, None, :])
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds)


def evaluate(model_like, data: DataSplit, batch_size: int = 64) -> float:
    """Misclassification rate of a model or a (supernet, config) pair."""
    preds = predict(model_like, data.x, batch_size)
    return float(np.mean(preds != data.y))


# Checkpoint format: magic, u32 version, u64 meta length + meta JSON, u32
# tensor count, then per tensor sorted by name: u16 name length + name,
# u8 dtype code, u8 rank, u64 dims, raw little-endian data.

_MAGIC = b"HCCKPT\x00"
_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    version: int
    meta: dict
    tensors: dict[str, np.ndarray]


def save_checkpoint(path, meta: dict, tensors: dict[str, np.ndarray]):
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = tensors[name]
            code = _DTYPE_CODES.get(arr.dtype)
            if code is None:
                raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", code, arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated {what}")
    return buf


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CheckpointError(f"corrupt header in {path}: bad magic bytes")
        version = struct.unpack("<I", _read_exact(fh, 4, "header"))[0]
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} "
                                  f"(expected {_VERSION})")
        meta_len = struct.unpack("<Q", _read_exact(fh, 8, "header"))[0]
        meta = json.loads(_read_exact(fh, meta_len, "embedded config").decode("utf-8"))
        count = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))[0]
        tensors = {}
        for _ in range(count):
            name_len = struct.unpack("<H", _read_exact(fh, 2, "tensor name"))[0]
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            code, rank = struct.unpack("<BB", _read_exact(fh, 2, f"tensor {name}"))
            dtype = _CODE_DTYPES.get(code)
            if dtype is None:
                raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
            dims = [struct.unpack("<Q", _read_exact(fh, 8, f"tensor {name} dims"))[0]
                    for _ in range(rank)]
            n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            raw = _read_exact(fh, n_bytes, f"tensor data for {name!r}")
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
        return Checkpoint(version=version, meta=meta, tensors=tensors)


def save_supernet(path, net: S.Supernet, extra_meta: dict | None = None):
    meta = {"kind": "supernet", "space": net.space.to_dict()}
    meta.update(extra_meta or {})
    save_checkpoint(path, meta, net.named_tensors())


def load_supernet(path) -> tuple[S.Supernet, dict]:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "supernet":
        raise CheckpointError(f"{path} is not a supernet checkpoint")
    space = S.SearchSpace.from_dict(ckpt.meta["space"])
    net = S.Supernet(space, seed=0)
    net.load_named_tensors(ckpt.tensors)
    return net, ckpt.meta


def save_subnet_model(path, model: S.SubnetModel, extra_meta: dict | None = None):
    meta = {"kind": "subnet_model", "space": model.space.to_dict(),
            "genes": list(model.config.encode(model.space))}
    meta.update(extra_meta or {})
    save_checkpoint(path, meta, model.named_tensors())


def load_subnet_model(path) -> tuple[S.SubnetModel, dict]:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "subnet_model":
        raise CheckpointError(f"{path} is not a standalone model checkpoint")
    space = S.SearchSpace.from_dict(ckpt.meta["space"])
    config = S.SubnetConfig.decode(space, ckpt.meta["genes"])
    model = S.SubnetModel.initialized(space, config, seed=0)
    model.load_named_tensors(ckpt.tensors)
    return model, ckpt.meta
