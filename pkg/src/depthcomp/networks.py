"""Learnable components: placement STN, U-Net generator, PatchGAN discriminator."""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import DTYPE, Tensor
from .errors import ConfigError, ShapeError
from .imaging import AffineParams

IMAGE_CHANNELS = 4
DEPTH_CHANNELS = 1
MAX_SCALE = 4.0
INIT_KINDS = ("random_normal", "glorot", "he", "uniform", "constant")
FULL_SCALE_LADDER = (64, 128, 256, 512)


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass
class InitSpec:
    kind: str = "random_normal"
    std: float = 0.02
    range: float = 0.05
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in INIT_KINDS:
            raise ConfigError(f"init.kind must be one of {INIT_KINDS}, got {self.kind!r}")
        if not self.std > 0:
            raise ConfigError(f"init.std must be positive, got {self.std!r}")
        if not self.range > 0:
            raise ConfigError(f"init.range must be positive, got {self.range!r}")


@dataclass
class GeneratorConfig:
    image_size: int = 64
    base_channels: int = 16
    depth_levels: int = 4
    use_instance_norm: bool = True
    out_channels: int = IMAGE_CHANNELS
    # fuse the raw 9-channel input with the last decoder stage at full resolution
    input_skip: bool = True

    def __post_init__(self):
        if self.image_size < 2 or self.image_size & (self.image_size - 1):
            raise ConfigError(f"generator.image_size must be a power of two, got {self.image_size}")
        if self.depth_levels < 1 or self.image_size % (2 ** self.depth_levels):
            raise ConfigError(
                f"generator.depth_levels: image_size {self.image_size} is not divisible by 2^{self.depth_levels}"
            )
        if self.base_channels < 1:
            raise ConfigError(f"generator.base_channels must be >= 1, got {self.base_channels}")
        if self.out_channels != IMAGE_CHANNELS:
            raise ConfigError(f"generator.out_channels is fixed at {IMAGE_CHANNELS}")

    @classmethod
    def full_scale(cls) -> "GeneratorConfig":
        return cls(image_size=256, base_channels=64, depth_levels=8)

    def channels(self) -> List[int]:
        return [self.base_channels * 2 ** min(level, 3) for level in range(self.depth_levels)]


@dataclass
class DiscriminatorConfig:
    channel_ladder: Tuple[int, ...] = tuple(c // 4 for c in FULL_SCALE_LADDER)
    extra_block: bool = False
    use_instance_norm: bool = True
    # "single": judge one composite; "pair": judge the composite concatenated with the ground truth
    disc_input: str = "single"

    def __post_init__(self):
        self.channel_ladder = tuple(int(c) for c in self.channel_ladder)
        if not self.channel_ladder or any(c < 1 for c in self.channel_ladder):
            raise ConfigError(f"discriminator.channel_ladder must be positive counts, got {self.channel_ladder}")
        if any(b <= a for a, b in zip(self.channel_ladder, self.channel_ladder[1:])):
            raise ConfigError(f"discriminator.channel_ladder must be strictly increasing, got {self.channel_ladder}")
        if self.disc_input not in ("single", "pair"):
            raise ConfigError(f"discriminator.disc_input must be 'single' or 'pair', got {self.disc_input!r}")

    @classmethod
    def full_scale(cls, extra_block: bool = False) -> "DiscriminatorConfig":
        return cls(channel_ladder=FULL_SCALE_LADDER, extra_block=extra_block)

    @property
    def in_channels(self) -> int:
        return IMAGE_CHANNELS * (2 if self.disc_input == "pair" else 1)


@dataclass
class StnConfig:
    localization_channels: Tuple[int, ...] = (8, 16, 16)
    param_count: int = 4

    def __post_init__(self):
        self.localization_channels = tuple(int(c) for c in self.localization_channels)
        if not self.localization_channels or any(c < 1 for c in self.localization_channels):
            raise ConfigError(f"stn.localization_channels must be positive counts, got {self.localization_channels}")
        if self.param_count != 4:
            raise ConfigError("stn.param_count is fixed at 4 (sx, sy, tx, ty)")


# ---------------------------------------------------------------------------
# module plumbing
# ---------------------------------------------------------------------------

class Module:
    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> "Module":
        setattr(self, name, module)
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, m in self._modules.items():
            yield from m.named_modules(prefix + name + ".")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise ShapeError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, value in state.items():
            if name not in own:
                continue
            value = np.asarray(value, dtype=DTYPE)
            if value.shape != own[name].shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {value.shape} vs network shape {own[name].shape}")
            own[name].data = value.copy()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, zero_init=False):
        super().__init__()
        self.stride, self.padding, self.zero_init = stride, padding, zero_init
        k = kernel_size
        self.weight = Tensor(np.zeros((out_channels, in_channels, k, k), dtype=DTYPE), requires_grad=True)
        self.bias = Tensor(np.zeros((1, out_channels, 1, 1), dtype=DTYPE), requires_grad=True)
        self.fan_in = in_channels * k * k
        self.fan_out = out_channels * k * k

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0):
        super().__init__()
        self.stride, self.padding, self.zero_init = stride, padding, False
        k = kernel_size
        self.weight = Tensor(np.zeros((in_channels, out_channels, k, k), dtype=DTYPE), requires_grad=True)
        self.bias = Tensor(np.zeros((1, out_channels, 1, 1), dtype=DTYPE), requires_grad=True)
        self.fan_in = in_channels * k * k
        self.fan_out = out_channels * k * k

    def forward(self, x):
        return F.conv2d_transpose(x, self.weight, self.bias, self.stride, self.padding)


def _norm(x: Tensor, enabled: bool) -> Tensor:
    # a 1x1 plane has no variance to normalize
    if enabled and x.shape[2] * x.shape[3] > 1:
        return F.instance_norm(x)
    return x


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_parameters(network: Module, spec: InitSpec, seed: int) -> None:
    """Draw every conv weight per ``spec``; biases and zero-init layers become 0."""
    rng = np.random.default_rng(seed)
    for _, module in network.named_modules():
        if not isinstance(module, (Conv2d, ConvTranspose2d)):
            continue
        shape = module.weight.shape
        if module.zero_init:
            w = np.zeros(shape)
        elif spec.kind == "random_normal":
            w = rng.normal(0.0, spec.std, shape)
        elif spec.kind == "glorot":
            w = rng.normal(0.0, math.sqrt(2.0 / (module.fan_in + module.fan_out)), shape)
        elif spec.kind == "he":
            w = rng.normal(0.0, math.sqrt(2.0 / module.fan_in), shape)
        elif spec.kind == "uniform":
            w = rng.uniform(-spec.range, spec.range, shape)
        else:
            w = np.full(shape, spec.value)
        module.weight.data = w.astype(DTYPE)
        module.bias.data = np.zeros(module.bias.shape, dtype=DTYPE)


# ---------------------------------------------------------------------------
# spatial transformer
# ---------------------------------------------------------------------------

class PlacementSTN(Module):
    """Regresses (sx, sy, tx, ty) from foreground, background and depth, then warps the foreground.

    Scales pass through exp(log(4) * tanh(.)) into [0.25, 4], shifts through
    tanh into [-1, 1]. The regression head is zero-initialized so the
    untrained module is an exact identity.
    """

    def __init__(self, config: StnConfig):
        super().__init__()
        self.config = config
        cin = IMAGE_CHANNELS * 2 + DEPTH_CHANNELS
        for i, ch in enumerate(config.localization_channels):
            self.add_module(f"loc{i}", Conv2d(cin, ch, 4, stride=2, padding=1))
            cin = ch
        self.head = Conv2d(cin, config.param_count, 1, zero_init=True)

    def regress(self, foreground: Tensor, background: Tensor, depth: Tensor) -> Tensor:
        _check_inputs(foreground, background, depth)
        h = F.concat([foreground, background, depth])
        for i in range(len(self.config.localization_channels)):
            layer = getattr(self, f"loc{i}")
            if h.shape[2] < 4 or h.shape[3] < 4:
                break
            h = F.leaky_relu(layer(h))
        raw = self.head(F.spatial_mean(h))
        scales = F.log_scale_to_range(F.channel_slice(raw, 0, 2), MAX_SCALE)
        shifts = F.tanh(F.channel_slice(raw, 2, 4))
        return F.concat([scales, shifts])

    def forward(self, foreground: Tensor, background: Tensor, depth: Tensor):
        affine = self.regress(foreground, background, depth)
        return F.grid_sample_bilinear(foreground, affine), affine


def affine_params(affine: Tensor) -> List[AffineParams]:
    return [AffineParams(*map(float, row)) for row in affine.data.reshape(-1, 4)]


def _check_inputs(foreground: Tensor, background: Tensor, depth: Tensor) -> None:
    if foreground.shape[1] != IMAGE_CHANNELS or background.shape[1] != IMAGE_CHANNELS or depth.shape[1] != DEPTH_CHANNELS:
        raise ShapeError(
            f"expected 4+4+1 channels, got foreground {foreground.shape}, background {background.shape}, depth {depth.shape}"
        )
    spatial = {(t.shape[0], t.shape[2], t.shape[3]) for t in (foreground, background, depth)}
    if len(spatial) != 1:
        raise ShapeError(
            f"foreground {foreground.shape}, background {background.shape} and depth {depth.shape} must share batch and spatial extents"
        )


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

class UNetGenerator(Module):
    """Encoder, bottleneck and decoder joined by per-level skip connections."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        chans = config.channels()
        cin = IMAGE_CHANNELS * 2 + DEPTH_CHANNELS
        for level, ch in enumerate(chans):
            self.add_module(f"enc{level}", Conv2d(cin, ch, 4, stride=2, padding=1))
            cin = ch
        self.bottleneck = Conv2d(cin, cin, 3, stride=1, padding=1)
        prev = cin
        for level in reversed(range(config.depth_levels)):
            out = chans[level - 1] if level > 0 else config.out_channels
            if level == 0 and config.input_skip:
                out = config.base_channels
            self.add_module(f"dec{level}", ConvTranspose2d(prev + chans[level], out, 4, stride=2, padding=1))
            prev = out
        if config.input_skip:
            self.fuse = Conv2d(prev + IMAGE_CHANNELS * 2 + DEPTH_CHANNELS, config.out_channels, 3, stride=1, padding=1)

    def forward(self, f_transformed: Tensor, background: Tensor, depth: Tensor, drop_skip: Optional[int] = None) -> Tensor:
        _check_inputs(f_transformed, background, depth)
        size = self.config.image_size
        if f_transformed.shape[2:] != (size, size):
            raise ShapeError(f"generator built for {size}x{size} inputs, got {f_transformed.shape}")
        norm = self.config.use_instance_norm
        x = h = F.concat([f_transformed, background, depth])
        skips = []
        for level in range(self.config.depth_levels):
            h = getattr(self, f"enc{level}")(h)
            h = F.leaky_relu(_norm(h, norm and level > 0))
            skips.append(h)
        h = F.leaky_relu(_norm(self.bottleneck(h), norm))
        for level in reversed(range(self.config.depth_levels)):
            skip = skips[level]
            if drop_skip == level:
                skip = Tensor(np.zeros(skip.shape, dtype=DTYPE))
            h = getattr(self, f"dec{level}")(F.concat([h, skip]))
            if level > 0:
                h = F.relu(_norm(h, norm))
            elif self.config.input_skip:
                h = F.tanh(self.fuse(F.concat([F.relu(h), x])))
            else:
                h = F.tanh(h)
        return h


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

class PatchDiscriminator(Module):
    """Stride-2 conv ladder, optional extra stride-1 stage, then a 1-channel logit conv."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        cin = config.in_channels
        for i, ch in enumerate(config.channel_ladder):
            self.add_module(f"block{i}", Conv2d(cin, ch, 4, stride=2, padding=1))
            cin = ch
        if config.extra_block:
            self.extra = Conv2d(cin, config.channel_ladder[-1], 4, stride=1, padding=1)
        self.final = Conv2d(cin, 1, 4, stride=1, padding=1)

    def forward(self, image: Tensor, condition: Optional[Tensor] = None) -> Tensor:
        if self.config.disc_input == "pair":
            if condition is None:
                raise ShapeError("pair discriminator needs the ground-truth composite as condition")
            image = F.concat([image, condition])
        if image.shape[1] != self.config.in_channels:
            raise ShapeError(f"discriminator expects {self.config.in_channels} channels, got {image.shape}")
        norm = self.config.use_instance_norm
        h = image
        for i in range(len(self.config.channel_ladder)):
            h = F.leaky_relu(_norm(getattr(self, f"block{i}")(h), norm and i > 0))
        if self.config.extra_block:
            h = F.leaky_relu(_norm(self.extra(h), norm))
        return self.final(h)


def patch_grid_size(image_size: int, config: DiscriminatorConfig) -> int:
    size = image_size
    for _ in config.channel_ladder:
        size = F.conv_output_size(size, 4, 2, 1)
    if config.extra_block:
        size = F.conv_output_size(size, 4, 1, 1)
    return F.conv_output_size(size, 4, 1, 1)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _seed_for(seed: int, stream: str) -> int:
    digest = hashlib.sha256(f"{seed}:{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def build_generator(config: GeneratorConfig, init: InitSpec, seed: int) -> UNetGenerator:
    net = UNetGenerator(config)
    init_parameters(net, init, _seed_for(seed, "generator"))
    return net


def build_discriminator(config: DiscriminatorConfig, init: InitSpec, seed: int) -> PatchDiscriminator:
    net = PatchDiscriminator(config)
    init_parameters(net, init, _seed_for(seed, "discriminator"))
    return net


def build_stn(config: StnConfig, init: InitSpec, seed: int) -> PlacementSTN:
    net = PlacementSTN(config)
    init_parameters(net, init, _seed_for(seed, "stn"))
    return net


@dataclass
class Networks:
    stn: PlacementSTN
    generator: UNetGenerator
    discriminator: PatchDiscriminator

    def named_modules(self):
        return (("stn", self.stn), ("generator", self.generator), ("discriminator", self.discriminator))

    def composite(self, foreground: Tensor, background: Tensor, depth: Tensor):
        """(predicted composite, transformed foreground, affine tensor)."""
        f_t, affine = self.stn(foreground, background, depth)
        return self.generator(f_t, background, depth), f_t, affine

    def state(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for prefix, module in self.named_modules():
            for name, value in module.state_dict().items():
                out[f"{prefix}.{name}"] = value
        return out

    def load_state(self, state) -> None:
        for prefix, module in self.named_modules():
            sub = {k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + ".")}
            module.load_state_dict(sub)


def build_networks(
    generator: GeneratorConfig,
    discriminator: DiscriminatorConfig,
    stn: StnConfig,
    init: InitSpec,
    seed: int,
) -> Networks:
    return Networks(
        stn=build_stn(stn, init, seed),
        generator=build_generator(generator, init, seed),
        discriminator=build_discriminator(discriminator, init, seed),
    )
