"""Generators, discriminators and the perceptual feature extractor.

Every network is described by a small frozen spec dataclass; ``build_network``
turns a spec plus a seed into an initialized ``nn.Module`` and the module's
``state_dict`` plays the role of the parameter collection.
"""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .imaging import EPS_S, avg_downsample

PYRAMID_SCALES = (1, 2, 4, 16)
VGG_LAYERS = ("relu1_2", "relu2_2", "relu3_2", "relu4_4", "relu5_4")
# VGG19 convolution widths per block, each block closed by 2x2 max pooling
_VGG19_BLOCKS = ((64, 64), (128, 128), (256, 256, 256, 256), (512,) * 4, (512,) * 4)
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class Stage1GeneratorSpec:
    base_channels: int = 32
    pyramid_scales: tuple = PYRAMID_SCALES
    slope: float = 0.2


_LOGIT_CLAMP = 1e-3


@dataclass(frozen=True)
class Stage2GeneratorSpec:
    base_channels: int = 32
    n_res_blocks: int = 6
    in_channels: int = 7
    slope: float = 0.2
    encoder_strides: tuple = (2, 2)
    decoder_scales: tuple = (2, 2, 1)
    residual: bool = False    # output = sigmoid(logit(enhanced) + decoder pre-activation)


@dataclass(frozen=True)
class DiscriminatorSpec:
    base_channels: int = 64
    n_layers: int = 5
    scales: int = 1
    slope: float = 0.2
    in_channels: int = 3


def conv_block(cin, cout, slope, norm=True, stride=1):
    layers = [nn.Conv2d(cin, cout, 3, stride=stride, padding=1)]
    if norm:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.LeakyReLU(slope))
    return nn.Sequential(*layers)


class DeconvBlock(nn.Module):
    """Upsample, two 3x3 convs, then BN + LeakyReLU (or a bare sigmoid on the output block)."""

    def __init__(self, cin, cout, scale=2, slope=0.2, last=False):
        super().__init__()
        mid = cin if last else cout
        self.scale = scale
        self.conv1 = nn.Conv2d(cin, mid, 3, padding=1)
        self.conv2 = nn.Conv2d(mid, cout, 3, padding=1)
        self.norm = None if last else nn.BatchNorm2d(cout)
        self.act = nn.Sigmoid() if last else nn.LeakyReLU(slope)

    def forward(self, x):
        if self.scale != 1:
            x = F.interpolate(x, scale_factor=self.scale, mode="bilinear", align_corners=False)
        x = self.conv2(self.conv1(x))
        if self.norm is not None:
            x = self.norm(x)
        return self.act(x)


class PyramidModule(nn.Module):
    """Pool to each of several grid sizes, 1x1 conv + ReLU, upsample, concatenate, fuse.

    Grids larger than the incoming feature map are handled by adaptive
    pooling, which then replicates pixels instead of averaging them.
    """

    def __init__(self, channels, branch_channels, scales=PYRAMID_SCALES, slope=0.2):
        super().__init__()
        self.scales = tuple(scales)
        self.branches = nn.ModuleList(nn.Conv2d(channels, branch_channels, 1) for _ in self.scales)
        self.fuse = conv_block(channels + branch_channels * len(self.scales), channels, slope)

    def pooled(self, x):
        return [F.adaptive_avg_pool2d(x, s) for s in self.scales]

    def forward(self, x):
        size = x.shape[-2:]
        out = [x]
        for pooled, conv in zip(self.pooled(x), self.branches):
            y = F.relu(conv(pooled))
            out.append(F.interpolate(y, size=size, mode="bilinear", align_corners=False))
        return self.fuse(torch.cat(out, dim=1))


class Stage1Generator(nn.Module):
    """Encoder, pyramid, decoder: ``CCM CCM CCM P DDD``. Outputs an RGB illumination map in (0, 1)."""

    def __init__(self, spec: Stage1GeneratorSpec = Stage1GeneratorSpec()):
        super().__init__()
        c, s = spec.base_channels, spec.slope
        self.spec = spec
        self.encoder = nn.Sequential(
            conv_block(3, c, s, norm=False), conv_block(c, c, s), nn.MaxPool2d(2),
            conv_block(c, 2 * c, s), conv_block(2 * c, 2 * c, s), nn.MaxPool2d(2),
            conv_block(2 * c, 4 * c, s), conv_block(4 * c, 4 * c, s), nn.MaxPool2d(2),
        )
        self.pyramid = PyramidModule(4 * c, c, spec.pyramid_scales, s)
        self.decoder = nn.Sequential(
            DeconvBlock(4 * c, 2 * c, slope=s),
            DeconvBlock(2 * c, c, slope=s),
            DeconvBlock(c, 3, slope=s, last=True),
        )

    def forward(self, x):
        return self.decoder(self.pyramid(self.encoder(x)))


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1), nn.BatchNorm2d(ch), nn.ReLU(),
            nn.Conv2d(ch, ch, 3, padding=1), nn.BatchNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class Stage2Generator(nn.Module):
    """Denoiser ``CC RRRRRR DDD``; input is (low, enhanced, mask) stacked to 7 channels."""

    def __init__(self, spec: Stage2GeneratorSpec = Stage2GeneratorSpec()):
        super().__init__()
        c, s = spec.base_channels, spec.slope
        self.spec = spec
        e1, e2 = spec.encoder_strides
        d1, d2, d3 = spec.decoder_scales
        if e1 * e2 != d1 * d2 * d3:
            raise ValueError("stage II decoder must undo the encoder's downsampling")
        self.encoder = nn.Sequential(
            conv_block(spec.in_channels, c, s, norm=False, stride=e1),
            conv_block(c, 2 * c, s, stride=e2),
        )
        self.res = nn.Sequential(*[ResBlock(2 * c) for _ in range(spec.n_res_blocks)])
        self.decoder = nn.Sequential(
            DeconvBlock(2 * c, c, scale=d1, slope=s),
            DeconvBlock(c, c, scale=d2, slope=s),
            DeconvBlock(c, 3, scale=d3, slope=s, last=True),
        )

    def forward(self, low, enhanced, mask):
        x = torch.cat([low, enhanced, mask], dim=1)
        h = self.res(self.encoder(x))
        if not self.spec.residual:
            return self.decoder(h)
        h = self.decoder[1](self.decoder[0](h))
        last = self.decoder[2]
        if last.scale != 1:
            h = F.interpolate(h, scale_factor=last.scale, mode="bilinear", align_corners=False)
        e = enhanced.clamp(_LOGIT_CLAMP, 1 - _LOGIT_CLAMP)
        return torch.sigmoid(torch.log(e / (1 - e)) + last.conv2(last.conv1(h)))


class PatchDiscriminator(nn.Module):
    """Five-layer patch critic, kernel 4, strides 2,2,2,2,1; ``score`` averages the patch map."""

    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        self.spec = spec
        widths = [spec.in_channels] + [spec.base_channels * 2 ** i for i in range(spec.n_layers - 1)] + [1]
        layers = []
        for i in range(spec.n_layers):
            last = i == spec.n_layers - 1
            layers.append(nn.Conv2d(widths[i], widths[i + 1], 4, stride=1 if last else 2, padding=1))
            if not last:
                layers.append(nn.LeakyReLU(spec.slope))
        self.model = nn.Sequential(*layers)

    @property
    def min_size(self):
        # each stride-2 layer halves the side; the final k4/s1/p1 layer removes one pixel
        return 2 ** (self.spec.n_layers - 1) * 2

    def forward(self, x):
        if min(x.shape[-2:]) < self.min_size:
            raise ValueError(f"discriminator input must be at least {self.min_size}px, got {tuple(x.shape[-2:])}")
        return self.model(x)

    def score(self, x):
        return self(x).mean(dim=(1, 2, 3))


class MultiScaleDiscriminator(nn.Module):
    """Identical patch critics on the full image and on 2x average-pooled copies."""

    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec(scales=2)):
        super().__init__()
        self.spec = spec
        self.critics = nn.ModuleList(PatchDiscriminator(spec) for _ in range(spec.scales))

    def scale_inputs(self, x):
        inputs = [x]
        for _ in range(1, len(self.critics)):
            if x.shape[-1] % 2 or x.shape[-2] % 2:
                raise ValueError(f"multi-scale input dims must be even, got {tuple(x.shape[-2:])}")
            x = avg_downsample(x, 2)
            inputs.append(x)
        return inputs

    def forward(self, x):
        return [critic.score(xi) for critic, xi in zip(self.critics, self.scale_inputs(x))]


def init_weights(net: nn.Module, seed: int, std: float = 0.02) -> nn.Module:
    """Deterministic Gaussian(0, std) conv weights, zero biases, identity norms."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()
    return net


_BUILDERS = {
    Stage1GeneratorSpec: Stage1Generator,
    Stage2GeneratorSpec: Stage2Generator,
}


def build_network(spec, seed: int = 0) -> nn.Module:
    if isinstance(spec, DiscriminatorSpec):
        net = PatchDiscriminator(spec) if spec.scales == 1 else MultiScaleDiscriminator(spec)
    else:
        net = _BUILDERS[type(spec)](spec)
    return init_weights(net, seed)


def init_params(spec, seed: int) -> "OrderedDict[str, torch.Tensor]":
    return build_network(spec, seed).state_dict()


def count_params(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def expected_param_count(spec) -> int:
    """Closed-form learnable-parameter count from the channel table."""

    def conv(cin, cout, k=3):
        return k * k * cin * cout + cout

    def bn(ch):
        return 2 * ch

    if isinstance(spec, Stage1GeneratorSpec):
        c = spec.base_channels
        enc = (conv(3, c) + conv(c, c) + bn(c) + conv(c, 2 * c) + bn(2 * c) + conv(2 * c, 2 * c) + bn(2 * c)
               + conv(2 * c, 4 * c) + bn(4 * c) + conv(4 * c, 4 * c) + bn(4 * c))
        n = len(spec.pyramid_scales)
        pyr = n * conv(4 * c, c, 1) + conv(4 * c + n * c, 4 * c) + bn(4 * c)
        dec = (conv(4 * c, 2 * c) + conv(2 * c, 2 * c) + bn(2 * c)
               + conv(2 * c, c) + conv(c, c) + bn(c)
               + conv(c, c) + conv(c, 3))
        return enc + pyr + dec
    if isinstance(spec, Stage2GeneratorSpec):
        c = spec.base_channels
        enc = conv(spec.in_channels, c) + conv(c, 2 * c) + bn(2 * c)
        res = spec.n_res_blocks * 2 * (conv(2 * c, 2 * c) + bn(2 * c))
        dec = (conv(2 * c, c) + conv(c, c) + bn(c)
               + conv(c, c) + conv(c, c) + bn(c)
               + conv(c, c) + conv(c, 3))
        return enc + res + dec
    if isinstance(spec, DiscriminatorSpec):
        widths = [spec.in_channels] + [spec.base_channels * 2 ** i for i in range(spec.n_layers - 1)] + [1]
        one = sum(conv(widths[i], widths[i + 1], 4) for i in range(spec.n_layers))
        return one * spec.scales
    raise TypeError(f"unknown spec {spec!r}")


def _check_divisible(x, k, what):
    h, w = x.shape[-2:]
    if h % k or w % k:
        raise ValueError(f"{what} needs H and W divisible by {k}, got {h}x{w}")


def stage1_forward(net: Stage1Generator, low: torch.Tensor, eps: float = EPS_S) -> torch.Tensor:
    """Illumination map for a batch of low-light images, floored at ``eps``."""
    _check_divisible(low, 8, "stage I generator")
    return torch.clamp(net(low), min=eps)


def stage2_forward(net: Stage2Generator, low, enhanced, mask) -> torch.Tensor:
    if low.shape != enhanced.shape or low.shape[-2:] != mask.shape[-2:] or low.shape[0] != mask.shape[0]:
        raise ValueError("stage II inputs must share batch and spatial shape")
    _check_divisible(low, 4, "stage II generator")
    return net(low, enhanced, mask)


class FeatureExtractor(nn.Module):
    """VGG19 convolutional trunk exposing named ReLU activations.

    ``kind="reference"`` loads pretrained torchvision-layout weights from
    ``weights_path`` (verified against ``sha256`` when given) and applies
    ImageNet input normalization. ``kind="test"`` uses seeded random
    He-initialized weights; ``width_divisor`` narrows every layer.
    """

    def __init__(self, kind="test", layers=VGG_LAYERS, seed=0, width_divisor=1,
                 weights_path=None, sha256=None):
        super().__init__()
        self.kind = kind
        self.layers = tuple(layers)
        unknown = [l for l in self.layers if l not in _VGG_NAMES]
        if unknown:
            raise ConfigError(f"feature extractor has no layer(s) {unknown}")
        div = 1 if kind == "reference" else int(width_divisor)
        self.trunk, self.names = _vgg19_trunk(div)
        if kind == "reference":
            self._load_reference(weights_path, sha256)
        elif kind == "test":
            gen = torch.Generator().manual_seed(int(seed))
            with torch.no_grad():
                for m in self.trunk:
                    if isinstance(m, nn.Conv2d):
                        fan_in = m.in_channels * 9
                        m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                        m.bias.zero_()
        else:
            raise ConfigError(f"unknown feature extractor kind {kind!r} (expected 'reference' or 'test')")
        self.requires_grad_(False)
        self.eval()
        mean = torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1)
        self.register_buffer("mean", mean if kind == "reference" else torch.zeros_like(mean))
        self.register_buffer("std", std if kind == "reference" else torch.ones_like(std))

    def _load_reference(self, weights_path, sha256):
        remedy = ("set features.weights_path to a torchvision VGG19 state dict "
                  "(e.g. vgg19-dcbb9e9d.pth) or use features.kind = 'test'")
        if not weights_path:
            raise ConfigError(f"reference feature extractor needs weights; {remedy}")
        path = Path(weights_path)
        if not path.is_file():
            raise ConfigError(f"feature weights not found at {path}; {remedy}")
        if sha256:
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            if digest != sha256.lower():
                raise ConfigError(f"checksum mismatch for {path}: expected {sha256}, got {digest}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        convs = [m for m in self.trunk if isinstance(m, nn.Conv2d)]
        keys = sorted({k.rsplit(".", 1)[0] for k in state if k.startswith("features.")},
                      key=lambda k: int(k.split(".")[1]))
        if len(keys) != len(convs):
            raise ConfigError(f"{path} does not hold a VGG19 trunk ({len(keys)} conv layers found)")
        with torch.no_grad():
            for conv, key in zip(convs, keys):
                conv.weight.copy_(state[key + ".weight"])
                conv.bias.copy_(state[key + ".bias"])

    def forward(self, x, layers=None):
        layers = self.layers if layers is None else tuple(layers)
        missing = [l for l in layers if l not in self.names]
        if missing:
            raise ConfigError(f"feature extractor does not expose layer(s) {missing}")
        wanted = {self.names.index(l): l for l in layers}
        last = max(wanted)
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        found = {}
        for i, m in enumerate(self.trunk):
            x = m(x)
            if i in wanted:
                found[wanted[i]] = x
            if i == last:
                break
        return [found[l] for l in layers]


def _vgg19_trunk(divisor=1):
    mods, names = [], []
    cin = 3
    for b, block in enumerate(_VGG19_BLOCKS, start=1):
        if b > 1:
            mods.append(nn.MaxPool2d(2))
            names.append(f"pool{b - 1}")
        for j, width in enumerate(block, start=1):
            cout = max(1, width // divisor)
            mods += [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU()]
            names += [f"conv{b}_{j}", f"relu{b}_{j}"]
            cin = cout
    return nn.Sequential(*mods), names


_VGG_NAMES = tuple(_vgg19_trunk(64)[1])


def feature_extract(extractor: FeatureExtractor, img: torch.Tensor, layers=None):
    return extractor(img, layers)
