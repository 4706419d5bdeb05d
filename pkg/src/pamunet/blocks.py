"""Parameterized layers: mobile conv primitives and the blocks built from them.

Every layer knows three things: how to run forward on a Tensor, what spatial
size it produces for a given input size (without running), and how many
multiply-accumulates that forward costs.  The static shape/MAC methods back
the FLOPs counter and the shape-total tests.

No normalization layers are used; convs carry biases instead.
"""

from __future__ import annotations

import math
import zlib

import numpy as np

from pamunet import tensor as T
from pamunet.tensor import ShapeError, Tensor


class Module:
    """Minimal parameter container with hierarchical naming.

    Tensor/Module attributes are auto-registered (insertion-ordered) unless
    the attribute name starts with an underscore, which lets composite layers
    keep plain references without double-counting parameters.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if not name.startswith("_"):
            if isinstance(value, Tensor):
                self._params[name] = value
            elif isinstance(value, Module):
                self._children[name] = value
        object.__setattr__(self, name, value)

    def register_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        object.__setattr__(self, name, module)
        return module

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> Module:
        self.register_child(str(len(self._items)), module)
        self._items.append(module)
        return module

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _conv_hw(hw, k, stride, padding):
    h, w = hw
    return ((h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1)


class Conv2d(Module):
    """Vanilla convolution with bias."""

    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, padding: int = 0):
        super().__init__()
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.padding = stride, padding
        self.kernel = _zeros(c_out, c_in, k, k)
        self.bias = _zeros(c_out, 1, 1)

    def forward(self, x):
        return T.add(T.conv2d(x, self.kernel, self.stride, self.padding), self.bias)

    def out_hw(self, hw):
        return _conv_hw(hw, self.k, self.stride, self.padding)

    def macs(self, hw) -> int:
        ho, wo = self.out_hw(hw)
        return self.k * self.k * self.c_in * self.c_out * ho * wo


class PointwiseConv(Module):
    """1x1 conv: per-pixel linear map across channels."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.kernel = _zeros(c_out, c_in, 1, 1)
        self.bias = _zeros(c_out, 1, 1)

    def forward(self, x):
        return T.add(T.pointwise_conv2d(x, self.kernel), self.bias)

    def out_hw(self, hw):
        return hw

    def macs(self, hw) -> int:
        h, w = hw
        return self.c_in * self.c_out * h * w


class DepthwiseConv(Module):
    def __init__(self, channels: int, k: int = 3, stride: int = 1, padding: int = 1):
        super().__init__()
        self.channels, self.k = channels, k
        self.stride, self.padding = stride, padding
        self.kernel = _zeros(channels, 1, k, k)
        self.bias = _zeros(channels, 1, 1)

    def forward(self, x):
        return T.add(T.depthwise_conv2d(x, self.kernel, self.stride, self.padding), self.bias)

    def out_hw(self, hw):
        return _conv_hw(hw, self.k, self.stride, self.padding)

    def macs(self, hw) -> int:
        ho, wo = self.out_hw(hw)
        return self.k * self.k * self.channels * ho * wo


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int = 2, stride: int = 2):
        super().__init__()
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.kernel = _zeros(c_in, c_out, k, k)
        self.bias = _zeros(c_out, 1, 1)

    def forward(self, x):
        return T.add(T.conv_transpose2d(x, self.kernel, self.stride), self.bias)

    def out_hw(self, hw):
        h, w = hw
        return ((h - 1) * self.stride + self.k, (w - 1) * self.stride + self.k)

    def macs(self, hw) -> int:
        # counted at the equivalent forward conv: every input pixel touches
        # the full k*k*C_in*C_out kernel once
        h, w = hw
        return self.k * self.k * self.c_in * self.c_out * h * w


class DSConvLayer(Module):
    """Depthwise filter per channel followed by a pointwise channel mix."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, padding: int = 1):
        super().__init__()
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.padding = stride, padding
        self.kernel_d = _zeros(c_in, 1, k, k)
        self.kernel_p = _zeros(c_out, c_in, 1, 1)
        self.bias = _zeros(c_out, 1, 1)

    def forward(self, x):
        if x.shape[1] != self.c_in:
            raise ShapeError(f"DSConvLayer expects {self.c_in} channels, got {x.shape[1]}")
        h = T.depthwise_conv2d(x, self.kernel_d, self.stride, self.padding)
        return T.add(T.pointwise_conv2d(h, self.kernel_p), self.bias)

    def out_hw(self, hw):
        return _conv_hw(hw, self.k, self.stride, self.padding)

    def macs(self, hw) -> int:
        ho, wo = self.out_hw(hw)
        return self.k * self.k * self.c_in * ho * wo + self.c_in * self.c_out * ho * wo


class IRBlock(Module):
    """Inverted residual bottleneck: expand 1x1 -> depthwise 3x3 -> project 1x1.

    The projection is linear; the residual is taken only when stride is 1 and
    the channel count is preserved.
    """

    def __init__(self, c_in: int, c_out: int, stride: int = 1, expansion: int = 6):
        super().__init__()
        if expansion < 1:
            raise ValueError(f"expansion factor must be >= 1, got {expansion}")
        if stride not in (1, 2):
            raise ValueError(f"IRBlock stride must be 1 or 2, got {stride}")
        self.c_in, self.c_out, self.stride, self.expansion = c_in, c_out, stride, expansion
        hidden = c_in * expansion
        self.expand = PointwiseConv(c_in, hidden)
        self.depthwise = DepthwiseConv(hidden, k=3, stride=stride, padding=1)
        self.project = PointwiseConv(hidden, c_out)
        self.use_residual = stride == 1 and c_in == c_out

    def forward(self, x):
        if x.shape[1] != self.c_in:
            raise ShapeError(f"IRBlock expects {self.c_in} channels, got {x.shape[1]}")
        h = T.relu6(self.expand(x))
        h = T.relu6(self.depthwise(h))
        h = self.project(h)
        return T.add(h, x) if self.use_residual else h

    def out_hw(self, hw):
        return self.depthwise.out_hw(hw)

    def macs(self, hw) -> int:
        mid_hw = self.depthwise.out_hw(hw)
        return self.expand.macs(hw) + self.depthwise.macs(hw) + self.project.macs(mid_hw)


class UpBlock(Module):
    """Stride-2 transposed conv (k=2, exact doubling) followed by an IR block.

    ``fuse_in`` widens the IR block's input for the decoder, where a skip
    connection is concatenated between the two halves; the plain forward path
    is only valid without that widening.
    """

    def __init__(self, c_in: int, c_out: int, expansion: int = 6, fuse_in: int | None = None):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.deconv = ConvTranspose2d(c_in, c_out, k=2, stride=2)
        self.ir = IRBlock(fuse_in if fuse_in is not None else c_out, c_out,
                          stride=1, expansion=expansion)

    def forward(self, x):
        return self.ir(self.deconv(x))

    def out_hw(self, hw):
        return self.ir.out_hw(self.deconv.out_hw(hw))

    def macs(self, hw) -> int:
        up_hw = self.deconv.out_hw(hw)
        return self.deconv.macs(hw) + self.ir.macs(up_hw)


def _fan_in(shape: tuple[int, ...]) -> int:
    if len(shape) > 1:
        return int(np.prod(shape[1:]))
    return shape[0]


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Per-parameter generator: a pure function of (seed, parameter name).

    Keyed by name so two models sharing layer names get bitwise-identical
    values for those layers regardless of what else they contain.
    """
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def init_parameters(module: Module, seed: int, zero_gates: bool = False) -> None:
    """Kaiming-uniform (fan-in) kernels, zero biases and gains; seeded.

    Gate output gains start at zero, so attention gates are pass-throughs at
    initialization and open up only as training finds the attended signal
    useful.  With ``zero_gates`` every parameter under a ``gate`` component is
    zeroed, which additionally makes the gates exact SGD fixed points.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    for name, p in module.named_parameters():
        parts = name.split(".")
        if zero_gates and "gate" in parts:
            p.data[...] = 0.0
        elif name.endswith("bias") or name.endswith("gain"):
            p.data[...] = 0.0
        else:
            bound = math.sqrt(6.0 / _fan_in(p.shape))
            p.data[...] = param_rng(seed, name).uniform(-bound, bound, p.shape)
