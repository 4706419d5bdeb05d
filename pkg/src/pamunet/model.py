"""Full network assembly: mobile encoder, bottleneck, gated decoder, head.

Layer naming contract (shared with checkpoints, FLOPs rows and activation
capture): ``stem``, ``enc{i}.block{0,1}``, ``bottleneck.{ir,reduce}``,
``dec{i}.{up,gate}``, ``head``.  Captured activations are keyed
``enc{i}``, ``bottleneck``, ``dec{i}`` and ``head``: one per stage plus the
bottleneck and the logits, 2*levels + 2 in total.

Every decoder stage doubles resolution with a stride-2 transposed conv,
optionally runs an attention gate against the matching encoder residual,
concatenates the residual, and fuses.  The deepest ``levels - 1`` skips come
from encoder stages and carry gates; the final full-resolution skip comes from
the stem and is a plain concatenation, which keeps every attention grid at or
below 64x64 positions for 128x128 inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from pamunet import tensor as T
from pamunet.attention import make_gate
from pamunet.blocks import (Conv2d, ConvTranspose2d, IRBlock, Module,
                            PointwiseConv, UpBlock, init_parameters)
from pamunet.tensor import ShapeError, Tensor

ATTENTION_VARIANTS = ("none", "self", "cross", "additive", "pla")
DECODER_KINDS = ("vanilla", "mobile")


@dataclass
class PAMUNetConfig:
    levels: int = 4
    base_channels: int = 16
    channel_schedule: list[int] = field(default_factory=list)
    expansion_factor: int = 6
    attention_variant: str = "pla"
    decoder_kind: str = "mobile"
    input_size: tuple[int, int] = (128, 128)
    in_channels: int = 1
    threshold: float = 0.5
    lambda_reg: float = 0.01

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        if not self.channel_schedule:
            self.channel_schedule = [self.base_channels * 2 ** i for i in range(self.levels)]
        self.validate()

    def validate(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if len(self.channel_schedule) != self.levels:
            raise ValueError(
                f"channel_schedule length {len(self.channel_schedule)} != levels {self.levels}")
        if self.attention_variant not in ATTENTION_VARIANTS:
            raise ValueError(f"attention_variant must be one of {ATTENTION_VARIANTS}, "
                             f"got {self.attention_variant!r}")
        if self.decoder_kind not in DECODER_KINDS:
            raise ValueError(f"decoder_kind must be one of {DECODER_KINDS}, got {self.decoder_kind!r}")
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")
        div = 2 ** self.levels
        h, w = self.input_size
        if h % div or w % div:
            raise ValueError(
                f"input size {h}x{w} is not divisible by 2^levels = {div}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PAMUNetConfig":
        return cls(**d)


class VanillaUpBlock(Module):
    """Plain decoder stage: transposed conv then a 3x3 conv, no IR refinement."""

    def __init__(self, c_in: int, c_out: int, fuse_in: int):
        super().__init__()
        self.deconv = ConvTranspose2d(c_in, c_out, k=2, stride=2)
        self.conv = Conv2d(fuse_in, c_out, k=3, stride=1, padding=1)

    def fuse(self, m):
        return T.relu6(self.conv(m))


@dataclass
class ForwardResult:
    logits: Tensor
    gate_maps: list[Tensor]
    activations: dict[str, Tensor] | None = None


class PAMUNet(Module):
    """The assembled network; construct through :func:`build`."""

    def __init__(self, config: PAMUNetConfig):
        super().__init__()
        config.validate()
        self._config = config
        ch = config.channel_schedule
        t = config.expansion_factor
        levels = config.levels
        c0 = ch[0]

        self.stem = Conv2d(config.in_channels, c0, k=3, stride=1, padding=1)

        self._enc_stages = []
        prev = c0
        for i in range(levels):
            stage = Module()
            stage.register_child("block0", IRBlock(prev, ch[i], stride=1, expansion=t))
            stage.register_child("block1", IRBlock(ch[i], ch[i], stride=2, expansion=t))
            self.register_child(f"enc{i}", stage)
            self._enc_stages.append(stage)
            prev = ch[i]

        reduced = ch[-2] if levels >= 2 else ch[0]
        bott = Module()
        bott.register_child("ir", IRBlock(ch[-1], ch[-1], stride=1, expansion=t))
        bott.register_child("reduce", PointwiseConv(ch[-1], reduced))
        self.register_child("bottleneck", bott)

        # decoder stage j consumes skip j: enc[levels-2-j] output, stem for the last
        skip_ch = [ch[levels - 2 - j] for j in range(levels - 1)] + [c0]
        self._dec_stages = []
        d_in = reduced
        for j in range(levels):
            out = skip_ch[j]
            stage = Module()
            if config.decoder_kind == "mobile":
                stage.register_child("up", UpBlock(d_in, out, expansion=t, fuse_in=2 * out))
            else:
                stage.register_child("up", VanillaUpBlock(d_in, out, fuse_in=2 * out))
            if config.attention_variant != "none" and j < levels - 1:
                stage.register_child(
                    "gate", make_gate(config.attention_variant, d_in, out, expansion=t))
            self.register_child(f"dec{j}", stage)
            self._dec_stages.append(stage)
            d_in = out

        self.head = ConvTranspose2d(ch[0], 1, k=1, stride=1)

    @property
    def config(self) -> PAMUNetConfig:
        return self._config

    def forward(self, x: Tensor, capture: bool = False) -> ForwardResult:
        cfg = self._config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != cfg.input_size:
            raise ShapeError(
                f"input shape {x.shape} does not match configured "
                f"(N,{cfg.in_channels},{cfg.input_size[0]},{cfg.input_size[1]})")
        acts: dict[str, Tensor] | None = {} if capture else None

        def grab(name, t):
            if acts is not None:
                acts[name] = t.detach()

        h = T.relu6(self.stem(x))
        skips = [h]
        for i, stage in enumerate(self._enc_stages):
            h = stage.block1(stage.block0(h))
            grab(f"enc{i}", h)
            skips.append(h)

        h = T.relu6(self.bottleneck.reduce(self.bottleneck.ir(h)))
        grab("bottleneck", h)

        # skips[-2] pairs with the first decoder stage, skips[0] (stem) with the last
        gate_maps: list[Tensor] = []
        for j, stage in enumerate(self._dec_stages):
            skip = skips[len(skips) - 2 - j]
            x_up = stage.up.deconv(h)
            gate = stage._children.get("gate")
            if gate is not None:
                y, entry = gate(h, x_up, skip)
                gate_maps.append(entry)
            else:
                y = x_up
            m = T.concat([y, skip], axis=1)
            h = stage.up.ir(m) if cfg.decoder_kind == "mobile" else stage.up.fuse(m)
            grab(f"dec{j}", h)

        logits = self.head(h)
        grab("head", logits)
        return ForwardResult(logits, gate_maps, acts)

    def activation_names(self) -> list[str]:
        levels = self._config.levels
        return ([f"enc{i}" for i in range(levels)] + ["bottleneck"]
                + [f"dec{j}" for j in range(levels)] + ["head"])

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(p.shape) for name, p in self.named_parameters()}

    def mac_sites(self, input_size: tuple[int, int] | None = None):
        """Yield (layer name, kind, MAC count) for every multiply-bearing site,
        walking the same structure as forward at the given input size."""
        cfg = self._config
        hw = tuple(input_size) if input_size is not None else cfg.input_size
        yield "stem", "conv", self.stem.macs(hw)
        for i, stage in enumerate(self._enc_stages):
            yield f"enc{i}.block0", "irblock", stage.block0.macs(hw)
            mid = stage.block0.out_hw(hw)
            yield f"enc{i}.block1", "irblock", stage.block1.macs(mid)
            hw = stage.block1.out_hw(mid)
        yield "bottleneck.ir", "irblock", self.bottleneck.ir.macs(hw)
        yield "bottleneck.reduce", "pointwise", self.bottleneck.reduce.macs(hw)
        for j, stage in enumerate(self._dec_stages):
            low_hw = hw
            up_hw = stage.up.deconv.out_hw(hw)
            yield f"dec{j}.up.deconv", "conv_transpose", stage.up.deconv.macs(low_hw)
            gate = stage._children.get("gate")
            if gate is not None:
                yield from self._gate_sites(f"dec{j}.gate", gate, low_hw, up_hw)
            if cfg.decoder_kind == "mobile":
                yield f"dec{j}.up.ir", "irblock", stage.up.ir.macs(up_hw)
            else:
                yield f"dec{j}.up.conv", "conv", stage.up.conv.macs(up_hw)
            hw = up_hw
        yield "head", "conv_transpose", self.head.macs(hw)

    @staticmethod
    def _gate_sites(prefix, gate, low_hw, up_hw):
        l = up_hw[0] * up_hw[1]
        c = gate.key_dimension
        kind = type(gate).__name__
        if kind == "PLAGate":
            yield f"{prefix}.refine", "irblock", gate.refine.macs(low_hw)
            yield f"{prefix}.upsample", "conv_transpose", gate.upsample.macs(low_hw)
            yield f"{prefix}.kv", "pointwise", gate.kv.macs(up_hw)
            yield f"{prefix}.scores", "attention", l * l * c + l * l * c
        elif kind in ("SelfAttentionGate", "CrossAttentionGate"):
            yield f"{prefix}.q_proj", "pointwise", gate.q_proj.macs(up_hw)
            yield f"{prefix}.k_proj", "pointwise", gate.k_proj.macs(up_hw)
            yield f"{prefix}.v_proj", "pointwise", gate.v_proj.macs(up_hw)
            yield f"{prefix}.scores", "attention", l * l * c + l * l * c
        else:  # additive
            yield f"{prefix}.w_q", "pointwise", gate.w_q.macs(up_hw)
            yield f"{prefix}.w_k", "pointwise", gate.w_k.macs(up_hw)
            yield f"{prefix}.v_proj", "pointwise", gate.v_proj.macs(up_hw)
            yield f"{prefix}.scores", "attention", l * l * gate.hidden + l * l * c


def build(config: PAMUNetConfig, seed: int, zero_init_gates: bool = False) -> PAMUNet:
    """Construct and deterministically initialize a model.

    Parameter values are a pure function of (seed, parameter name), so two
    variants sharing backbone layer names share backbone weights bitwise.
    """
    model = PAMUNet(config)
    init_parameters(model, seed, zero_gates=zero_init_gates)
    return model


def predict_mask(model: PAMUNet, x: Tensor) -> Tensor:
    """Binary mask: sigmoid(logits) >= threshold (ties go to foreground)."""
    with T.no_grad():
        logits = model.forward(x).logits
        probs = T.sigmoid(logits)
    return Tensor._wrap((probs.data >= model.config.threshold).astype(probs.data.dtype), False)
