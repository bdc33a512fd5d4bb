"""Module containers, common layers and the binary checkpoint format."""
from __future__ import annotations

import struct

import numpy as np

from . import tensor as T
from .tensor import Parameter

CKPT_MAGIC = b"DELA"
CKPT_VERSION = 1


class Module:
    training = True

    def children(self):
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for v in value:
                    if isinstance(v, Module):
                        yield v

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield from v.named_modules(f"{prefix}{name}.{i}.")

    def named_parameters(self):
        for prefix, mod in self.named_modules():
            for name, value in vars(mod).items():
                if isinstance(value, Parameter):
                    yield prefix + name, value

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for prefix, mod in self.named_modules():
            for name in getattr(mod, "_buffers", ()):
                yield prefix + name, getattr(mod, name)

    def assign_names(self):
        for name, p in self.named_parameters():
            p.name = name
        return self

    def train(self, mode=True):
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for prefix, mod in self.named_modules():
            for name in getattr(mod, "_buffers", ()):
                setattr(mod, name, getattr(mod, name).astype(dtype))
        return self

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        for prefix, mod in self.named_modules():
            for name in getattr(mod, "_buffers", ()):
                key = prefix + name
                if key not in state:
                    raise KeyError(f"missing buffer {key!r} in checkpoint")
                getattr(mod, name)[...] = state[key]
        for name, p in params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in checkpoint")
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.shape}")
            p.data = np.asarray(state[name], dtype=p.data.dtype).copy()


def _init_weight(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


class Linear(Module):
    def __init__(self, cin, cout, bias=True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(_init_weight(rng, cin, cout))
        self.bias = Parameter(np.zeros(cout, np.float32), weight_decay_exempt=True) if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, c, affine=True, momentum=T.BN_MOMENTUM, eps=T.BN_EPS, init_scale=1.0):
        if affine:
            self.weight = Parameter(np.full(c, init_scale, np.float32), weight_decay_exempt=True)
            self.bias = Parameter(np.zeros(c, np.float32), weight_decay_exempt=True)
        else:
            self.weight = self.bias = None
        self.running_mean = np.zeros(c, np.float32)
        self.running_var = np.ones(c, np.float32)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x):
        return T.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            training=self.training, momentum=self.momentum, eps=self.eps)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class GELU(Module):
    def __call__(self, x):
        return T.gelu(x)


class Embedding(Module):
    def __init__(self, n, dim, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(rng.normal(0, 0.02, (n, dim)).astype(np.float32))

    def __call__(self, idx):
        return T.index_rows(self.weight, idx)


# ---------------------------------------------------------------- checkpoint I/O


def save_checkpoint(path, state):
    """Write named arrays in the DELA little-endian format (f32 payloads)."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(state)))
        for name, arr in state.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 12 or buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a DELA checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    try:
        return _read_entries(buf, count)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise ValueError(f"{path}: truncated or corrupt checkpoint ({e})") from e


def _read_entries(buf, count):
    pos = 12
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(dims, dtype=np.int64))
        state[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * size
    return state
