"""Parameter containers, shared MLPs and the checkpoint container format."""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

ACTIVATIONS = ("leaky_relu", "relu", "none")
NORMS = ("none", "batch")


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def uniform_init(rng: np.random.Generator, out_dim: int, in_dim: int, dtype=np.float32):
    """Fan-in uniform init, U(-1/sqrt(in), 1/sqrt(in)), for weight and bias."""
    bound = 1.0 / np.sqrt(in_dim)
    w = rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype)
    b = rng.uniform(-bound, bound, size=out_dim).astype(dtype)
    return w, b


class Module:
    """Attribute-walking container for parameters, buffers and submodules."""

    training = False

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif value.requires_grad:
                yield full, value

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
        for name in getattr(self, "_buffer_names", ()):
            yield f"{prefix}{name}", getattr(self, name)

    def state(self) -> list[tuple[str, np.ndarray]]:
        out = [(n, p.data) for n, p in self.named_parameters()]
        out.extend(self.named_buffers())
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"checkpoint lacks {name}")
            if state[name].shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data = state[name].astype(p.dtype)
        for name, buf in self.named_buffers():
            if name not in state:
                raise KeyError(f"checkpoint lacks {name}")
            buf[...] = state[name]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for _, value in self._children():
            if isinstance(value, Module):
                value.astype(dtype)
        for name in getattr(self, "_buffer_names", ()):
            setattr(self, name, getattr(self, name).astype(dtype))
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class BatchNorm(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = parameter(np.ones(channels), dtype)
        self.beta = parameter(np.zeros(channels), dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training)


class Layer(Module):
    """One 1x1 layer: linear -> optional batch norm -> activation."""

    def __init__(self, weight, bias=None, activation: str = "leaky_relu", norm: str = "none",
                 dtype=np.float32):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if norm not in NORMS:
            raise ValueError(f"unknown norm {norm!r}")
        self.weight = parameter(weight, dtype)
        self.bias = parameter(bias, dtype) if bias is not None else None
        self.activation = activation
        self.norm = BatchNorm(self.weight.shape[0], dtype) if norm == "batch" else None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.linear(x, self.weight, self.bias)
        if self.norm is not None:
            y = self.norm(y)
        return ad.activation(y, self.activation)


class Mlp(Module):
    """Shared MLP parameters: consecutive layers whose widths must chain."""

    def __init__(self, layers: Sequence[Layer]):
        layers = list(layers)
        if not layers:
            raise ValueError("an MLP needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionError(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")
        self.layers = layers

    @classmethod
    def build(cls, dims: Sequence[int], rng: np.random.Generator, activation: str = "leaky_relu",
              norm: str = "none", last_activation: str | None = None, last_norm: str | None = None,
              bias: bool = True, dtype=np.float32) -> "Mlp":
        layers = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            act = last_activation if (last and last_activation is not None) else activation
            nrm = last_norm if (last and last_norm is not None) else norm
            w, b = uniform_init(rng, d_out, d_in, dtype)
            layers.append(Layer(w, b if bias else None, act, nrm, dtype))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def __call__(self, x: Tensor) -> Tensor:
        return shared_mlp(x, self)


def shared_mlp(x: Tensor, params: Mlp) -> Tensor:
    """Apply the same layers to every element along the leading axes of ``x``."""
    if x.shape[-1] != params.in_dim:
        raise DimensionError(f"MLP expects {params.in_dim} channels, got {x.shape[-1]}")
    for layer in params.layers:
        x = layer(x)
    return x


# --------------------------------------------------------------------------
# checkpoint container: "CWT1", u32 count, then per tensor
# u16 name length, name, u8 rank, u32 dims, f32 row-major payload (little endian)

MAGIC = b"CWT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: Sequence[tuple[str, np.ndarray]]) -> None:
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic; not a CWT1 checkpoint")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        if pos + name_len > len(buf):
            raise CheckpointError("truncated checkpoint")
        try:
            name = buf[pos:pos + name_len].decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("tensor name is not UTF-8") from None
        pos += name_len
        (rank,) = take("<B")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        if pos + 4 * n > len(buf):
            raise CheckpointError("truncated checkpoint")
        out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * n
    return out
