"""Network families: fully-convolutional label generator, cascaded-refinement
conditional generator, reconstructor and multi-scale patch discriminators.

All modules take and return NCHW tensors.  Label tensors carry three channels
(background, membrane, mitochondria); image tensors one channel in [-1, 1];
image-label pairs are ``cat([image, label], dim=1)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

MANIFEST_VERSION = 1
NOISE_CHANNELS = 8


class SpecError(ValueError):
    pass


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class GeneratorSpec:
    kind: str = "label_generator"  # label_generator | conditional_image | conditional_label
    upsample_factor: int = 64
    base_width: int = 64
    refinement_levels: int = 5
    output_channels: int = 3
    noise_channels: int = NOISE_CHANNELS
    min_width: int = 16
    image_noise: bool = False  # conditional_image only: also consume a noise image

    def validate(self) -> None:
        kinds = ("label_generator", "conditional_image", "conditional_label", "reconstructor")
        if self.kind not in kinds:
            raise SpecError(f"unknown generator kind {self.kind!r}")
        if self.kind == "label_generator" and not _is_pow2(self.upsample_factor):
            raise SpecError(f"upsample factor must be a power of two, got {self.upsample_factor}")
        if self.output_channels not in (1, 3, 4):
            raise SpecError(f"output_channels must be 1, 3 or 4, got {self.output_channels}")


@dataclass
class PyramidSpec:
    factors: tuple[int, ...] = (1, 2, 4)
    weights: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self):
        self.factors = tuple(int(f) for f in self.factors)
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.factors) != len(self.weights) or not self.factors:
            raise SpecError("pyramid needs one weight per level")
        if self.factors[0] != 1 or any(b <= a for a, b in zip(self.factors, self.factors[1:])):
            raise SpecError(f"factors must start at 1 and increase strictly: {self.factors}")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
            raise SpecError(f"weights must be nonnegative and sum to 1: {self.weights}")

    @property
    def levels(self):
        return list(enumerate(zip(self.factors, self.weights)))


@dataclass
class DiscriminatorSpec:
    input_channels: int = 3
    base_width: int = 64
    n_layers: int = 3
    pyramid: PyramidSpec = field(default_factory=PyramidSpec)

    @property
    def receptive_field(self) -> int:
        """Receptive field at pyramid level 0 (4x4 kernels)."""
        rf, jump = 1, 1
        for stride in [2] * self.n_layers + [1, 1]:
            rf += 3 * jump
            jump *= stride
        return rf


def spec_to_json(spec) -> str:
    payload = {"version": MANIFEST_VERSION, "type": type(spec).__name__, "spec": asdict(spec)}
    return json.dumps(payload, sort_keys=True)


def spec_from_json(text: str):
    payload = json.loads(text)
    if payload.get("version") != MANIFEST_VERSION:
        raise SpecError(f"unsupported manifest version {payload.get('version')}")
    kind, body = payload["type"], payload["spec"]
    if kind == "GeneratorSpec":
        return GeneratorSpec(**body)
    if kind == "DiscriminatorSpec":
        body = dict(body)
        body["pyramid"] = PyramidSpec(**body["pyramid"])
        return DiscriminatorSpec(**body)
    if kind == "PyramidSpec":
        return PyramidSpec(**body)
    raise SpecError(f"unknown manifest type {kind!r}")


def make_noise(batch: int, height: int, width: int, channels: int = NOISE_CHANNELS,
               seed: int | None = None, generator: torch.Generator | None = None,
               dtype=torch.float32) -> torch.Tensor:
    """i.i.d. standard-normal noise image of shape (batch, channels, height, width)."""
    if height < 1 or width < 1:
        raise SpecError("noise image needs positive spatial size")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else int(seed))
    return torch.randn(batch, channels, height, width, generator=generator, dtype=dtype)


def _apply_head(logits: torch.Tensor, channels: int) -> torch.Tensor:
    if channels in (2, 3):
        return torch.softmax(logits, dim=1)
    if channels == 1:
        return torch.tanh(logits)
    # joint sample: image channel then three label channels
    return torch.cat([torch.tanh(logits[:, :1]), torch.softmax(logits[:, 1:], dim=1)], dim=1)


class LabelGenerator(nn.Module):
    """Noise image -> soft label, upsampling by ``upsample_factor``.

    Every convolution pads circularly and normalization is per sample, so the
    map commutes with circular shifts of the noise image.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        spec.validate()
        if spec.kind != "label_generator":
            raise SpecError(f"label generator needs kind 'label_generator', got {spec.kind!r}")
        self.spec = spec
        n_up = int(math.log2(spec.upsample_factor))
        blocks = []
        in_ch = spec.noise_channels
        for i in range(n_up):
            out_ch = max(spec.base_width // (2 ** i), spec.min_width)
            blocks += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(in_ch, out_ch, 3, padding=1, padding_mode="circular"),
                nn.InstanceNorm2d(out_ch, affine=True),
                nn.ReLU(inplace=True),
            ]
            in_ch = out_ch
        self.body = nn.Sequential(*blocks)
        self.head = nn.Conv2d(in_ch, spec.output_channels, 3, padding=1, padding_mode="circular")

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(z))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return _apply_head(self.logits(z), self.spec.output_channels)


class _RefineModule(nn.Module):
    def __init__(self, in_ch, width):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, width, 3, padding=1),
            nn.InstanceNorm2d(width, affine=True),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width, width, 3, padding=1),
            nn.InstanceNorm2d(width, affine=True),
            nn.LeakyReLU(0.2, inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class CascadedRefinementGenerator(nn.Module):
    """Label (and optional noise) -> image or mitochondria label.

    The label is area-downsampled to every refinement resolution and lifted by
    one convolution whose weights all modules share.  Features start at
    ``H / 2**refinement_levels`` and are refined level by level up to full size.
    Noise, when given, has the coarsest resolution and enters the first module.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        spec.validate()
        if spec.kind not in ("conditional_image", "conditional_label"):
            raise SpecError(f"conditional generator needs a conditional kind, got {spec.kind!r}")
        self.spec = spec
        # y1 -> y2 reads the membrane map alone and emits (not-mito, mito) probabilities
        label_channels = 1 if spec.kind == "conditional_label" else 3
        width = spec.base_width
        uses_noise = spec.kind == "conditional_label" or spec.image_noise
        self.noise_channels = spec.noise_channels if uses_noise else 0
        self.label_lift = nn.Conv2d(label_channels, width, 3, padding=1)
        mods = [_RefineModule(width + self.noise_channels, width)]
        mods += [_RefineModule(2 * width, width) for _ in range(spec.refinement_levels)]
        self.refine = nn.ModuleList(mods)
        out = spec.output_channels if spec.kind == "conditional_image" else 2
        self.out_channels = out
        self.head = nn.Conv2d(width, out, 1)

    def logits(self, label: torch.Tensor, noise: torch.Tensor | None = None) -> torch.Tensor:
        levels = self.spec.refinement_levels
        h, w = label.shape[-2:]
        step = 2 ** levels
        if h % step or w % step:
            raise SpecError(f"label size {h}x{w} is not divisible by 2**{levels}")
        coarse = F.avg_pool2d(label, step) if step > 1 else label
        feats = self.label_lift(coarse)
        if self.noise_channels:
            if noise is None:
                noise = torch.zeros(label.shape[0], self.noise_channels, h // step, w // step,
                                    dtype=label.dtype, device=label.device)
            feats = torch.cat([feats, noise], dim=1)
        feats = self.refine[0](feats)
        for i in range(1, levels + 1):
            k = 2 ** (levels - i)
            lab_i = F.avg_pool2d(label, k) if k > 1 else label
            feats = F.interpolate(feats, scale_factor=2, mode="bilinear", align_corners=False)
            feats = self.refine[i](torch.cat([feats, self.label_lift(lab_i)], dim=1))
        return self.head(feats)

    def forward(self, label, noise=None):
        return _apply_head(self.logits(label, noise), self.out_channels)


class Reconstructor(nn.Module):
    """Image -> soft label at the same resolution (dilated convolution stack)."""

    def __init__(self, width: int = 32, dilations=(1, 2, 4, 8, 1), in_channels: int = 1):
        super().__init__()
        layers = []
        ch = in_channels
        for d in dilations:
            layers += [nn.Conv2d(ch, width, 3, padding=d, dilation=d),
                       nn.InstanceNorm2d(width, affine=True),
                       nn.LeakyReLU(0.2, inplace=True)]
            ch = width
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(width, 3, 1)

    def logits(self, x):
        return self.head(self.body(x))

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


class PatchDiscriminator(nn.Module):
    """Map of real/fake logits; each logit sees a local patch."""

    def __init__(self, in_channels: int, width: int = 64, n_layers: int = 3):
        super().__init__()
        layers = [nn.Conv2d(in_channels, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        ch = width
        for i in range(1, n_layers):
            nxt = min(width * 2 ** i, width * 8)
            layers += [nn.Conv2d(ch, nxt, 4, stride=2, padding=1),
                       nn.InstanceNorm2d(nxt, affine=True), nn.LeakyReLU(0.2, inplace=True)]
            ch = nxt
        nxt = min(ch * 2, width * 8)
        layers += [nn.Conv2d(ch, nxt, 4, stride=1, padding=1),
                   nn.InstanceNorm2d(nxt, affine=True), nn.LeakyReLU(0.2, inplace=True),
                   nn.Conv2d(nxt, 1, 4, stride=1, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class MultiScaleDiscriminator(nn.Module):
    """One patch discriminator per pyramid level."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        self.levels = nn.ModuleList(
            PatchDiscriminator(spec.input_channels, spec.base_width, spec.n_layers)
            for _ in spec.pyramid.factors)

    def forward(self, x) -> list[torch.Tensor]:
        if x.shape[1] != self.spec.input_channels:
            raise SpecError(f"discriminator expects {self.spec.input_channels} channels, got {x.shape[1]}")
        return [d(level) for d, level in zip(self.levels, pyramid(x, self.spec.pyramid))]


def build_label_generator(spec: GeneratorSpec) -> LabelGenerator:
    return LabelGenerator(spec)


def build_conditional_generator(spec: GeneratorSpec) -> CascadedRefinementGenerator:
    return CascadedRefinementGenerator(spec)


def compose_labels(membrane: torch.Tensor, mito_probs: torch.Tensor) -> torch.Tensor:
    """Soft 3-class label from a membrane map (N,1,H,W) and (not-mito, mito) probabilities."""
    mem = membrane.clamp(0, 1)
    rest = 1 - mem
    return torch.cat([rest * mito_probs[:, :1], mem, rest * mito_probs[:, 1:2]], dim=1)


def build_reconstructor(spec: GeneratorSpec | None = None) -> Reconstructor:
    width = spec.base_width if spec is not None else 32
    return Reconstructor(width=width)


def build_discriminator(spec: DiscriminatorSpec) -> MultiScaleDiscriminator:
    return MultiScaleDiscriminator(spec)


def pyramid(img, spec: PyramidSpec) -> list:
    """Area-averaged downsamplings of ``img`` at every pyramid factor.

    Accepts NCHW tensors or numpy arrays whose last two axes are spatial.
    """
    h, w = img.shape[-2:]
    top = max(spec.factors)
    if h % top or w % top:
        raise SpecError(f"image {h}x{w} is not divisible by the largest pyramid factor {top}")
    if isinstance(img, np.ndarray):
        out = []
        for d in spec.factors:
            shape = img.shape[:-2] + (h // d, d, w // d, d)
            out.append(img.reshape(shape).mean(axis=(-3, -1)))
        return out
    return [img if d == 1 else F.avg_pool2d(img, d) for d in spec.factors]


def multiscale_discriminate(d_set, spec: PyramidSpec, x, real: bool = True):
    """Per-level logit maps and the weighted value sum_i w_i * mean(log D_i).

    For ``real=False`` the value uses log(1 - D_i) instead.  ``d_set`` is a
    :class:`MultiScaleDiscriminator` or a sequence of per-level callables.
    """
    levels = list(d_set.levels if isinstance(d_set, MultiScaleDiscriminator) else d_set)
    if len(levels) != len(spec.factors):
        raise SpecError(f"{len(levels)} discriminators for {len(spec.factors)} pyramid levels")
    logits = [d(level) for d, level in zip(levels, pyramid(x, spec))]
    value = weighted_log_value(logits, spec.weights, real)
    return logits, value


def weighted_log_value(logits, weights, real: bool):
    total = 0.0
    for w, lg in zip(weights, logits):
        term = F.logsigmoid(lg) if real else F.logsigmoid(-lg)
        total = total + w * term.mean()
    return total


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
