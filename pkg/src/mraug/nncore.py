"""Functional network primitives, parameter sets and the Adam optimizer.

Autodiff is delegated to torch; everything here is written functionally so a
network is just a :class:`ParamSet` plus a forward function.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import torch
import torch.nn.functional as F

from .errors import CheckpointError, MissingGradient, ShapeError

INIT_STD = 0.02
MAGIC = b"DSFG"
FORMAT_VERSION = 1


def check_tensor4(x: torch.Tensor, name: str = "input") -> torch.Tensor:
    if not isinstance(x, torch.Tensor):
        raise TypeError(f"{name} must be a torch.Tensor, got {type(x).__name__}")
    if x.dim() != 4:
        raise ShapeError(f"{name} must be rank 4 (batch, channel, height, width), got rank {x.dim()}",
                         dim="rank")
    for axis, size in zip(("batch", "channels", "height", "width"), x.shape):
        if size < 1:
            raise ShapeError(f"{name} has empty {axis} dimension", dim=axis)
    return x


# ---------------------------------------------------------------------------
# operators

def conv2d(x, kernel, stride=1, padding=0, bias=None):
    """2-D cross-correlation. ``kernel`` is (out_channels, in_channels, kH, kW)."""
    check_tensor4(x)
    check_tensor4(kernel, "kernel")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}", dim="stride")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(
            f"kernel expects {kernel.shape[1]} input channels, input has {x.shape[1]}",
            dim="channels")
    for axis, n, k in (("height", x.shape[2], kernel.shape[2]), ("width", x.shape[3], kernel.shape[3])):
        if n + 2 * padding < k:
            raise ShapeError(f"kernel {axis} {k} exceeds padded input {axis} {n + 2 * padding}", dim=axis)
    return F.conv2d(x, kernel, bias, stride=stride, padding=padding)


def conv2d_transpose(x, kernel, stride=1, padding=0, bias=None):
    """Adjoint of :func:`conv2d` for the same ``kernel`` tensor.

    ``kernel`` keeps the forward layout (out_channels, in_channels, kH, kW), so
    ``x`` must carry ``out_channels`` channels and the result ``in_channels``.
    """
    check_tensor4(x)
    check_tensor4(kernel, "kernel")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}", dim="stride")
    if kernel.shape[0] != x.shape[1]:
        raise ShapeError(
            f"kernel expects {kernel.shape[0]} input channels, input has {x.shape[1]}",
            dim="channels")
    out_h = (x.shape[2] - 1) * stride - 2 * padding + kernel.shape[2]
    out_w = (x.shape[3] - 1) * stride - 2 * padding + kernel.shape[3]
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"transposed output would be {out_h}x{out_w}", dim="height" if out_h < 1 else "width")
    return F.conv_transpose2d(x, kernel, bias, stride=stride, padding=padding)


def instance_norm(x, eps=1e-5):
    # per-sample, per-channel, biased variance; no affine parameters (CycleGAN default)
    check_tensor4(x)
    return F.instance_norm(x, eps=eps)


def relu(x):
    return torch.relu(x)


def leaky_relu(x, slope=0.2):
    return F.leaky_relu(x, slope)


def tanh(x):
    return torch.tanh(x)


def sigmoid(x):
    return torch.sigmoid(x)


def softmax_channel(x):
    return torch.softmax(x, dim=1)


def resnet_block(x, params: Mapping[str, torch.Tensor], prefix: str = ""):
    """``x + F(x)`` with F = conv3x3 -> IN -> relu -> conv3x3 -> IN.

    Expects ``{prefix}conv1.w/.b`` and ``{prefix}conv2.w/.b`` in ``params``.
    """
    w1 = params[prefix + "conv1.w"]
    channels = w1.shape[0]
    if x.shape[1] != channels or w1.shape[1] != channels:
        raise ShapeError(f"resnet block has {channels} channels, input has {x.shape[1]}", dim="channels")
    h = conv2d(x, w1, padding=1, bias=params[prefix + "conv1.b"])
    h = relu(instance_norm(h))
    h = conv2d(h, params[prefix + "conv2.w"], padding=1, bias=params[prefix + "conv2.b"])
    return x + instance_norm(h)


# ---------------------------------------------------------------------------
# parameters

@dataclass
class AdamConfig:
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 < b < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {b}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass
class ParamSet:
    """Named parameters plus Adam moments and step count."""

    params: dict[str, torch.Tensor]
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, torch.zeros_like(p))
            self.v.setdefault(name, torch.zeros_like(p))
            if self.m[name].shape != p.shape or self.v[name].shape != p.shape:
                raise ShapeError(f"moment shape mismatch for {name!r}", dim=name)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self):
        return list(self.params)

    def tensors(self):
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def trainable(self) -> "ParamSet":
        """Copy whose parameter leaves require grad (moments shared)."""
        params = {k: p.detach().requires_grad_(True) for k, p in self.params.items()}
        return ParamSet(params, self.m, self.v, self.step)

    def frozen(self) -> dict[str, torch.Tensor]:
        return {k: p.detach() for k, p in self.params.items()}

    def to(self, dtype) -> "ParamSet":
        conv = lambda d: {k: t.to(dtype) for k, t in d.items()}
        return ParamSet(conv(self.params), conv(self.m), conv(self.v), self.step)


def gaussian_init(shape, generator: torch.Generator, std=INIT_STD, dtype=torch.float32):
    return torch.randn(*shape, generator=generator, dtype=dtype) * std


def conv_param(params: dict, name: str, cout: int, cin: int, k: int, generator, dtype=torch.float32):
    params[name + ".w"] = gaussian_init((cout, cin, k, k), generator, dtype=dtype)
    params[name + ".b"] = torch.zeros(cout, dtype=dtype)


def resnet_block_params(params: dict, prefix: str, channels: int, generator, dtype=torch.float32):
    conv_param(params, prefix + "conv1", channels, channels, 3, generator, dtype)
    conv_param(params, prefix + "conv2", channels, channels, 3, generator, dtype)


def grads_for(loss: torch.Tensor, ps: ParamSet, retain_graph=False) -> dict[str, torch.Tensor]:
    names = ps.names()
    grads = torch.autograd.grad(loss, [ps.params[n] for n in names], retain_graph=retain_graph,
                                allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(ps.params[n])) for n, g in zip(names, grads)}


def adam_step(ps: ParamSet, grads: Mapping[str, torch.Tensor], config: AdamConfig,
              lr: float | None = None) -> ParamSet:
    """One bias-corrected Adam update; returns a new ParamSet.

    ``lr`` overrides ``config.lr`` (schedules may drive it to zero).
    """
    lr = config.lr if lr is None else lr
    b1, b2, eps = config.beta1, config.beta2, config.epsilon
    step = ps.step + 1
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    params, m, v = {}, {}, {}
    with torch.no_grad():
        for name, p in ps.params.items():
            if name not in grads:
                raise MissingGradient(f"no gradient for parameter {name!r}")
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name!r} has shape {tuple(g.shape)}, "
                                 f"parameter has {tuple(p.shape)}", dim=name)
            m[name] = b1 * ps.m[name] + (1 - b1) * g
            v[name] = b2 * ps.v[name] + (1 - b2) * g * g
            update = (m[name] / c1) / (torch.sqrt(v[name] / c2) + eps)
            params[name] = p.detach() - lr * update
    return ParamSet(params, m, v, step)


# ---------------------------------------------------------------------------
# checkpoint container
#
# "DSFG" | u32 version | u32 meta_len | meta (utf-8 json) | u32 n_sets
# per set: u32 name_len | name | u64 step | u32 n_params | records... |
#          u8 has_moments | [m records... v records...]
# record: u32 name_len | name | u32 rank | u64 dims[rank] | f32 data (little endian)


def _write_record(buf, name: str, t: torch.Tensor):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", t.dim()))
    buf.write(struct.pack(f"<{t.dim()}Q", *t.shape))
    buf.write(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())


def _read_exact(buf, n):
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("checkpoint truncated")
    return data


def _read_record(buf):
    import numpy as np

    (n,) = struct.unpack("<I", _read_exact(buf, 4))
    name = _read_exact(buf, n).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(buf, 4))
    dims = struct.unpack(f"<{rank}Q", _read_exact(buf, 8 * rank))
    count = math.prod(dims)
    arr = np.frombuffer(_read_exact(buf, 4 * count), dtype="<f4").reshape(dims)
    return name, torch.from_numpy(arr.astype("float32"))


def checkpoint_bytes(sets: Mapping[str, ParamSet], meta: Mapping | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    meta_raw = json.dumps(dict(meta or {}), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_raw)))
    buf.write(meta_raw)
    buf.write(struct.pack("<I", len(sets)))
    for set_name, ps in sets.items():
        raw = set_name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<QI", ps.step, len(ps.params)))
        for name, t in ps.params.items():
            _write_record(buf, name, t)
        buf.write(b"\x01")
        for name in ps.params:
            _write_record(buf, name, ps.m[name])
        for name in ps.params:
            _write_record(buf, name, ps.v[name])
    return buf.getvalue()


def save_checkpoint(path, sets: Mapping[str, ParamSet], meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(sets, meta))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict[str, ParamSet], dict]:
    buf = io.BytesIO(Path(path).read_bytes())
    if buf.read(4) != MAGIC:
        raise CheckpointError(f"{path}: not a DSFG checkpoint")
    (version,) = struct.unpack("<I", _read_exact(buf, 4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", _read_exact(buf, 4))
    meta = json.loads(_read_exact(buf, meta_len).decode("utf-8"))
    (n_sets,) = struct.unpack("<I", _read_exact(buf, 4))
    sets = {}
    for _ in range(n_sets):
        (n,) = struct.unpack("<I", _read_exact(buf, 4))
        set_name = _read_exact(buf, n).decode("utf-8")
        step, n_params = struct.unpack("<QI", _read_exact(buf, 12))
        params = dict(_read_record(buf) for _ in range(n_params))
        m = v = None
        if _read_exact(buf, 1) == b"\x01":
            m = dict(_read_record(buf) for _ in range(n_params))
            v = dict(_read_record(buf) for _ in range(n_params))
        sets[set_name] = ParamSet(params, m or {}, v or {}, step)
    return sets, meta
