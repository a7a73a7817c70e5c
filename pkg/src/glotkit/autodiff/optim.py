"""Adam optimizer, reduce-on-plateau learning-rate schedule and the binary
checkpoint format for named parameter sets."""

import struct

import numpy as np

from .tensor import Tensor

__all__ = ["Adam", "PlateauSchedule", "save_checkpoint", "load_checkpoint"]

CKPT_MAGIC = b"GLOTCKPT"
CKPT_VERSION = 1


def _f32(value):
    """Round a scalar to float32; learning rates live at checkpoint
    precision so a save/load cycle is bit-exact."""
    return float(np.float32(value))


class Adam:
    """Adam over a dict of named parameter tensors."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = _f32(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        # moments share the parameter dtype so checkpoints round-trip exactly
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** t
        bias2 = 1.0 - b2 ** t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = (b1 * self.m[k] + (1 - b1) * g).astype(p.data.dtype)
            self.v[k] = (b2 * self.v[k] + (1 - b2) * g * g).astype(p.data.dtype)
            mhat = self.m[k] / bias1
            vhat = self.v[k] / bias2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def state_tensors(self):
        """Optimizer state as named tensors for checkpointing."""
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = Tensor(self.m[k])
            out[f"adam.v.{k}"] = Tensor(self.v[k])
        out["adam.meta"] = Tensor(np.array([self.step_count, self.lr], dtype=np.float64))
        return out

    def load_state_tensors(self, tensors):
        for k in self.params:
            dt = self.params[k].data.dtype
            self.m[k] = np.asarray(tensors[f"adam.m.{k}"].data, dtype=dt).reshape(self.m[k].shape)
            self.v[k] = np.asarray(tensors[f"adam.v.{k}"].data, dtype=dt).reshape(self.v[k].shape)
        meta = np.asarray(tensors["adam.meta"].data, dtype=np.float64).ravel()
        self.step_count = int(round(meta[0]))
        self.lr = _f32(meta[1])


class PlateauSchedule:
    """Reduce the learning rate by `factor` after `patience` epochs without
    validation improvement; the wait counter resets on every reduction and
    on every improvement."""

    def __init__(self, optimizer, factor=0.75, patience=10, min_lr=None):
        if not 0.0 < factor < 1.0:
            raise ValueError("factor must be in (0, 1)")
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best_metric = None
        self.epochs_since_improvement = 0

    @property
    def lr(self):
        return self.optimizer.lr

    def update(self, validation_metric):
        """Feed one validation value (lower is better); returns the lr in
        effect afterwards."""
        m = float(validation_metric)
        if self.best_metric is None or m < self.best_metric:
            self.best_metric = m
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
            if self.epochs_since_improvement >= self.patience:
                new_lr = self.optimizer.lr * self.factor
                if self.min_lr is not None:
                    new_lr = max(new_lr, self.min_lr)
                self.optimizer.lr = _f32(new_lr)
                self.epochs_since_improvement = 0
        return self.optimizer.lr


def save_checkpoint(named_tensors, path):
    """Write named tensors: magic, version, count, then per tensor the
    name, rank, dims and raw little-endian float32 data."""
    items = sorted(named_tensors.items())
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(items)))
        for name, tensor in items:
            data = np.asarray(tensor.data if isinstance(tensor, Tensor) else tensor)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_checkpoint(path, into=None):
    """Read a checkpoint; returns dict name -> Tensor (float32).

    If `into` (a dict of named tensors) is given, values are copied into
    the existing tensors in place; unknown or missing names raise KeyError
    listing the names involved.
    """
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version, count = struct.unpack("<II", f.read(8))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(4 * n)
            if len(raw) != 4 * n:
                raise ValueError(f"truncated checkpoint while reading {name!r}")
            out[name] = Tensor(np.frombuffer(raw, dtype="<f4").reshape(shape).copy())
    if into is not None:
        unknown = sorted(set(out) - set(into))
        missing = sorted(set(into) - set(out))
        if unknown or missing:
            raise KeyError(
                f"checkpoint/model name mismatch: unknown={unknown}, missing={missing}")
        for name, tensor in into.items():
            tensor.data[...] = out[name].data.astype(tensor.data.dtype).reshape(tensor.data.shape)
    return out
