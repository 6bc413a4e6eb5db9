"""Layer and parameter-container machinery on top of the tensor engine."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Parameter(Tensor):
    """Trainable tensor; ``decay`` marks it for weight decay."""

    __slots__ = ("decay",)

    def __init__(self, data, decay: bool = True):
        super().__init__(data, requires_grad=True)
        self.decay = decay


class Module:
    """Named tree of parameters, buffers and submodules.

    Assigning a Parameter, Module, or list of Modules to an attribute
    registers it. Parameters shared between submodules are deduplicated by
    identity in ``parameters()`` and in the checkpoint state, so a shared
    codebook counts (and trains) once.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if not name.startswith("_"):
            if isinstance(value, Parameter):
                self._params[name] = value
            elif isinstance(value, Module):
                self._modules[name] = value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                value = ModuleList(value)
                self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = value
        object.__setattr__(self, name, value)
        return value

    # -- traversal -----------------------------------------------------------

    def named_parameters(self, prefix: str = ""):
        seen = set()
        for name, mod, kind, obj in self._walk(prefix):
            if kind == "param" and id(obj) not in seen:
                seen.add(id(obj))
                yield name, obj

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, mod, kind, obj in self._walk(prefix):
            if kind == "buffer":
                yield name, mod, obj

    def _walk(self, prefix: str):
        for name, p in self._params.items():
            yield (prefix + name, self, "param", p)
        for name, b in self._buffers.items():
            yield (prefix + name, self, "buffer", b)
        for name, m in self._modules.items():
            yield from m._walk(prefix + name + ".")

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, flag: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", flag)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- state ----------------------------------------------------------------

    def state_arrays(self) -> dict:
        """Name -> numpy array for every unique parameter and buffer.

        Shared parameters appear once, under their first path.
        """
        out = {}
        seen = set()
        for name, _, kind, obj in self._walk(""):
            arr = obj.data if kind == "param" else obj
            if id(obj) in seen:
                continue
            seen.add(id(obj))
            out[name] = arr
        return out

    def load_state_arrays(self, state: dict) -> None:
        own = {}
        seen = set()
        for name, mod, kind, obj in self._walk(""):
            if id(obj) in seen:
                continue
            seen.add(id(obj))
            own[name] = (mod, kind, obj)
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:4]} extra={extra[:4]}")
        for name, arr in state.items():
            mod, kind, obj = own[name]
            if kind == "param":
                if obj.data.shape != arr.shape:
                    raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model {obj.data.shape}")
                obj.data = arr.astype(obj.data.dtype, copy=True)
            else:
                obj[...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, mods):
        super().__init__()
        self._items = list(mods)
        for i, m in enumerate(self._items):
            self._modules[str(i)] = m

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def count_params(module: Module) -> int:
    """Number of unique trainable scalars in the module tree."""
    return sum(p.size for p in module.parameters())


def parameter_counts(module: Module) -> dict:
    """Per-direct-child unique-parameter counts plus ``total``.

    A parameter shared across children is attributed to the first child
    that reaches it, mirroring how it is trained and stored.
    """
    seen = set()
    counts = {}
    for name, p in ((n, p) for n, p in module.named_parameters()):
        if id(p) in seen:
            continue
        seen.add(id(p))
        head = name.split(".", 1)[0]
        counts[head] = counts.get(head, 0) + p.size
    counts["total"] = sum(v for k, v in counts.items() if k != "total")
    return counts


# -- initializers ------------------------------------------------------------------


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def linear_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(1.0 / fan_in)).astype(dtype)


# -- layers -----------------------------------------------------------------------


@dataclass
class ConvSpec:
    """Geometry of one 2-D convolution.

    The output extent per axis is floor((in + 2p - k)/s) + 1; ``validate``
    enforces positive kernel/stride and non-negative padding.
    """

    in_channels: int
    out_channels: int
    kernel: tuple
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    bias: bool = False

    def __post_init__(self):
        if isinstance(self.kernel, int):
            self.kernel = (self.kernel, self.kernel)
        if isinstance(self.stride, int):
            self.stride = (self.stride, self.stride)
        if isinstance(self.padding, int):
            self.padding = (self.padding, self.padding)
        self.validate()

    def validate(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("ConvSpec: channel counts must be positive")
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise ShapeError("ConvSpec: kernel and stride must be positive")
        if any(p < 0 for p in self.padding):
            raise ShapeError("ConvSpec: padding must be non-negative")

    def out_extent(self, in_extent: tuple) -> tuple:
        return tuple((n + 2 * p - k) // s + 1
                     for n, k, s, p in zip(in_extent, self.kernel, self.stride, self.padding))


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        kh, kw = spec.kernel
        fan_in = spec.in_channels * kh * kw
        self.weight = Parameter(he_normal(rng, (spec.out_channels, spec.in_channels, kh, kw), fan_in, dtype))
        if spec.bias:
            self.bias = Parameter(np.zeros(spec.out_channels, dtype=dtype), decay=False)
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, self.spec.stride, self.spec.padding)
        if self.bias is not None:
            y = y + self.bias.reshape(1, -1, 1, 1)
        return y


class ConvTranspose2d(Module):
    """Learned x2 upsampler (or general transposed conv).

    ``for_doubling`` picks stride/padding/output-padding so any of the
    supported kernels (2, 3, 4) doubles both spatial extents exactly.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, stride=(2, 2), padding=(0, 0),
                 output_padding=(0, 0), bias: bool = True, dtype=np.float32):
        super().__init__()
        self.stride = stride if not isinstance(stride, int) else (stride, stride)
        self.padding = padding if not isinstance(padding, int) else (padding, padding)
        self.output_padding = (output_padding if not isinstance(output_padding, int)
                               else (output_padding, output_padding))
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(he_normal(rng, (in_channels, out_channels, kernel, kernel), fan_in, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), decay=False) if bias else None

    @classmethod
    def for_doubling(cls, in_channels: int, out_channels: int, kernel: int,
                     rng: np.random.Generator, dtype=np.float32) -> "ConvTranspose2d":
        geometry = {2: ((2, 2), (0, 0), (0, 0)),
                    3: ((2, 2), (1, 1), (1, 1)),
                    4: ((2, 2), (1, 1), (0, 0))}
        if kernel not in geometry:
            raise ShapeError(f"no exact-doubling geometry for transposed kernel {kernel}")
        stride, pad, outpad = geometry[kernel]
        return cls(in_channels, out_channels, kernel, rng, stride, pad, outpad, bias=True, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = T.transposed_conv2d(x, self.weight, self.stride, self.padding, self.output_padding)
        if self.bias is not None:
            y = y + self.bias.reshape(1, -1, 1, 1)
        return y


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype), decay=False)
        self.beta = Parameter(np.zeros(channels, dtype=dtype), decay=False)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(linear_normal(rng, (out_features, in_features), in_features, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype), decay=False) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight.transpose(1, 0)
        if self.bias is not None:
            y = y + self.bias
        return y
