"""Layers, optimizer schedule, and the checkpoint format.

All weights are float64 Parameters initialized Xavier-uniform from a seeded
generator. The optimizer is plain momentum SGD with a cosine learning-rate
decay over a fixed number of steps.
"""
from __future__ import annotations

import json
import math
import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import DimensionError, ParameterError, ScheduleError

ACTIVATIONS = {
    "none": lambda x: x,
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "softmax": ad.softmax,
}


def xavier_uniform(rng, shape):
    fan_in, fan_out = shape[0], shape[-1]
    if len(shape) == 3:  # conv kernel (K, Cin, Cout)
        fan_in = shape[0] * shape[1]
        fan_out = shape[0] * shape[2]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def dense_forward(x, w, b, activation="none"):
    """activation(x @ w + b). x may be (d,), (B, d) or (B, L, d)."""
    if activation not in ACTIVATIONS:
        raise ParameterError(f"unknown activation {activation!r}")
    y = ad.add(ad.matmul(x, w), b)
    return ACTIVATIONS[activation](y)


def conv1d_forward(x, kernel, bias, stride=1, padding="same"):
    return ad.conv1d(x, kernel, bias, stride=stride, padding=padding)


class Dense:
    def __init__(self, rng, d_in, d_out, activation="none", name="dense",
                 bias=True):
        self.w = Parameter(xavier_uniform(rng, (d_in, d_out)), name=f"{name}.w")
        self.b = Parameter(np.zeros(d_out), name=f"{name}.b") if bias else None
        self.activation = activation

    def __call__(self, x):
        if self.b is None:
            if self.activation not in ACTIVATIONS:
                raise ParameterError(f"unknown activation {self.activation!r}")
            return ACTIVATIONS[self.activation](ad.matmul(x, self.w))
        return dense_forward(x, self.w, self.b, self.activation)

    def parameters(self):
        return [self.w] if self.b is None else [self.w, self.b]


class MLP:
    """Stack of dense layers; hidden layers use `hidden_activation`."""

    def __init__(self, rng, dims, hidden_activation="relu",
                 out_activation="none", name="mlp", bias=True):
        self.layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            act = out_activation if i == len(dims) - 2 else hidden_activation
            self.layers.append(Dense(rng, a, b, act, name=f"{name}.{i}", bias=bias))

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


class Conv1d:
    def __init__(self, rng, c_in, c_out, kernel=5, stride=1, padding="same",
                 activation="none", name="conv"):
        if kernel % 2 == 0:
            raise DimensionError("conv kernel width must be odd")
        self.w = Parameter(xavier_uniform(rng, (kernel, c_in, c_out)), name=f"{name}.w")
        self.b = Parameter(np.zeros(c_out), name=f"{name}.b")
        self.stride = stride
        self.padding = padding
        self.activation = activation

    def __call__(self, x):
        y = ad.conv1d(x, self.w, self.b, stride=self.stride, padding=self.padding)
        return ACTIVATIONS[self.activation](y)

    def parameters(self):
        return [self.w, self.b]


def gru_cell(x, h, params):
    """One GRU step. params holds wz, uz, bz, wr, ur, br, wh, uh, bh."""
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, params["wz"]), ad.matmul(h, params["uz"])), params["bz"]))
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, params["wr"]), ad.matmul(h, params["ur"])), params["br"]))
    hbar = ad.tanh(ad.add(ad.add(ad.matmul(x, params["wh"]),
                                 ad.matmul(ad.mul(r, h), params["uh"])), params["bh"]))
    one_minus_z = ad.add(ad.mul(z, -1.0), 1.0)
    return ad.add(ad.mul(one_minus_z, h), ad.mul(z, hbar))


class GRUCell:
    def __init__(self, rng, d_in, d_hidden, name="gru"):
        self.d_hidden = d_hidden
        self.params = {}
        for gate in ("z", "r", "h"):
            self.params[f"w{gate}"] = Parameter(
                xavier_uniform(rng, (d_in, d_hidden)), name=f"{name}.w{gate}")
            self.params[f"u{gate}"] = Parameter(
                xavier_uniform(rng, (d_hidden, d_hidden)), name=f"{name}.u{gate}")
            self.params[f"b{gate}"] = Parameter(
                np.zeros(d_hidden), name=f"{name}.b{gate}")

    def __call__(self, x, h):
        return gru_cell(x, h, self.params)

    def parameters(self):
        return list(self.params.values())


class SGD:
    """Momentum SGD with cosine learning-rate decay to zero."""

    def __init__(self, params, lr0=0.1, momentum=0.9, total_steps=5000):
        if total_steps <= 0:
            raise ParameterError("total_steps must be positive")
        self.params = list(params)
        self.lr0 = lr0
        self.momentum = momentum
        self.total_steps = total_steps
        self.step_count = 0
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def lr(self, step=None):
        step = self.step_count if step is None else step
        if step < 0 or step > self.total_steps:
            raise ScheduleError(f"step {step} outside schedule [0, {self.total_steps}]")
        return self.lr0 * 0.5 * (1.0 + math.cos(math.pi * step / self.total_steps))

    def step(self):
        if self.step_count >= self.total_steps:
            raise ScheduleError(f"optimizer exhausted at step {self.step_count}")
        lr = self.lr()
        for p, v in zip(self.params, self.velocity):
            g = p.grad_or_zero()
            v *= self.momentum
            v += g
            p.assign(p.value - lr * v)
            p.grad = None
        self.step_count += 1

    def skip(self):
        """Advance the schedule without touching parameters or velocity."""
        if self.step_count >= self.total_steps:
            raise ScheduleError(f"optimizer exhausted at step {self.step_count}")
        for p in self.params:
            p.grad = None
        self.step_count += 1


def sgd_step(optimizer):
    optimizer.step()


# ---------------------------------------------------------------------------
# checkpoint format: 8-byte little-endian manifest length, JSON manifest
# (name, shape, offset per parameter), then a flat little-endian float64
# payload. Round trips bit-exactly.
# ---------------------------------------------------------------------------

def save_checkpoint(path, named_params):
    manifest = []
    payload = bytearray()
    for name, value in named_params.items():
        arr = np.asarray(value, dtype="<f8")
        shape = list(arr.shape)
        arr = np.ascontiguousarray(arr)   # 0-d promotes to (1,); keep the real shape
        manifest.append({"name": name, "shape": shape, "offset": len(payload)})
        payload.extend(arr.tobytes())
    header = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(bytes(payload))


def load_checkpoint(path):
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    out = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=start)
        out[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return out
