"""Shared extractor, task and domain branches, heads, and gradient reversal.

    toi logits   = f_r (g_f(g(x)))
    irt logits   = f_ir(g_f(g(x)))
    domain prob  = d   (g_d(GRL(g(x))))

Inputs are N x H x W x 3 tensors in [0, 1].
"""

from __future__ import annotations

import copy
import enum
from dataclasses import asdict, dataclass, field

import torch
from torch import Tensor, nn

from .errors import ConfigError


class GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coefficient):
        ctx.coefficient = coefficient
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.coefficient, None


class GrlCoupling(nn.Module):
    """Identity forward; multiplies the backward gradient by ``-coefficient``."""

    def __init__(self, coefficient: float = 1.0):
        super().__init__()
        if coefficient < 0:
            raise ConfigError(f"GRL coefficient must be >= 0, got {coefficient}")
        self.coefficient = float(coefficient)

    def forward(self, x: Tensor) -> Tensor:
        return GradientReversal.apply(x, self.coefficient)


def grl_backward(grl: GrlCoupling, upstream_gradient) -> Tensor:
    """Push ``upstream_gradient`` back through the coupling."""
    g = torch.as_tensor(upstream_gradient, dtype=torch.float64)
    x = torch.zeros_like(g, requires_grad=True)
    (grad,) = torch.autograd.grad(grl(x), x, grad_outputs=g)
    return grad


class Backbone(str, enum.Enum):
    SMALL_CNN = "SMALL_CNN"
    PRETRAINED_RESNET50_SPLIT = "PRETRAINED_RESNET50_SPLIT"


@dataclass
class ArchitectureConfig:
    head_class_counts: tuple[int, int] = (10, 10)
    input_shape: tuple[int, int, int] = (28, 28, 3)
    conv_channels_g: list[int] = field(default_factory=lambda: [32, 64, 64])
    conv_channels_branch: list[int] = field(default_factory=lambda: [64, 64, 128])
    embedding_dims: tuple[int, int] | None = None  # derived from the backbone when None
    backbone: Backbone = Backbone.SMALL_CNN
    pretrained: bool = True  # ResNet-50 only

    def __post_init__(self):
        self.backbone = Backbone(self.backbone)
        self.head_class_counts = tuple(int(c) for c in self.head_class_counts)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.conv_channels_g = [int(c) for c in self.conv_channels_g]
        self.conv_channels_branch = [int(c) for c in self.conv_channels_branch]
        if len(self.head_class_counts) != 2 or min(self.head_class_counts) < 1:
            raise ConfigError(f"head_class_counts must be two positive counts, got {self.head_class_counts}")
        if len(self.input_shape) != 3 or self.input_shape[2] != 3:
            raise ConfigError(f"input_shape must be (H, W, 3), got {self.input_shape}")
        if self.backbone is Backbone.SMALL_CNN:
            if len(self.conv_channels_g) != 3 or len(self.conv_channels_branch) != 3:
                raise ConfigError("SMALL_CNN uses exactly three conv layers in g and in each branch")
            if min(self.input_shape[:2]) < 8:
                raise ConfigError(f"SMALL_CNN needs inputs of at least 8x8, got {self.input_shape}")
            derived = (self.conv_channels_branch[-1],) * 2
        else:
            if min(self.input_shape[:2]) < 32:
                raise ConfigError(f"ResNet-50 split needs inputs of at least 32x32, got {self.input_shape}")
            derived = (2048, 2048)
        if self.embedding_dims is None:
            self.embedding_dims = derived
        elif tuple(self.embedding_dims) != derived:
            raise ConfigError(f"embedding_dims {tuple(self.embedding_dims)} do not match the backbone output {derived}")
        self.embedding_dims = tuple(self.embedding_dims)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["backbone"] = self.backbone.value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(**d)


def conv_block(c_in: int, c_out: int) -> nn.Sequential:
    # ceil-mode pooling keeps 1x1 maps at 1x1, so six pooled layers fit 28x28 inputs
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel_size=3, stride=1, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(2, ceil_mode=True),
    )


def small_cnn(c_in: int, channels: list[int], pool: bool = False) -> nn.Sequential:
    layers = []
    for c_out in channels:
        layers.append(conv_block(c_in, c_out))
        c_in = c_out
    if pool:
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
    return nn.Sequential(*layers)


class ModelBundle(nn.Module):
    def __init__(self, cfg: ArchitectureConfig, g: nn.Module, g_f: nn.Module, g_d: nn.Module):
        super().__init__()
        self.cfg = cfg
        m_f, m_d = cfg.embedding_dims
        n_r, n_ir = cfg.head_class_counts
        self.g = g
        self.g_f = g_f
        self.g_d = g_d
        self.f_r = nn.Linear(m_f, n_r)
        self.f_ir = nn.Linear(m_f, n_ir)
        self.d = nn.Sequential(nn.Linear(m_d, 1), nn.Sigmoid())

    def _check(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.cfg.input_shape:
            raise ValueError(f"expected a batch of shape (N, {', '.join(map(str, self.cfg.input_shape))}), "
                             f"got {tuple(x.shape)}")
        return x.permute(0, 3, 1, 2)

    def shared(self, x: Tensor) -> Tensor:
        return self.g(self._check(x))

    def embeddings(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Task and domain embeddings ``(g_f(g(x)), g_d(g(x)))`` with no reversal."""
        h = self.shared(x)
        return self.g_f(h), self.g_d(h)

    def forward_all(self, x: Tensor, grl: GrlCoupling | None = None) -> tuple[Tensor, Tensor, Tensor]:
        h = self.shared(x)
        z_f = self.g_f(h)
        z_d = self.g_d(grl(h) if grl is not None else h)
        return self.f_r(z_f), self.f_ir(z_f), self.d(z_d).squeeze(-1)

    forward = forward_all

    def parameter_counts(self) -> dict[str, int]:
        return {name: sum(p.numel() for p in getattr(self, name).parameters())
                for name in ("g", "g_f", "g_d", "f_r", "f_ir", "d")}


class _ResNetStem(nn.Module):
    def __init__(self, net):
        super().__init__()
        self.stages = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3)

    def forward(self, x):
        return self.stages(x)


def _resnet50_parts(cfg: ArchitectureConfig):
    try:
        from torchvision.models import ResNet50_Weights, resnet50
    except ImportError as exc:  # pragma: no cover
        raise ConfigError("PRETRAINED_RESNET50_SPLIT needs torchvision") from exc
    try:
        net = resnet50(weights=ResNet50_Weights.IMAGENET1K_V1 if cfg.pretrained else None)
    except Exception as exc:
        raise ConfigError(f"could not load ImageNet ResNet-50 weights ({exc}); "
                          "set pretrained=False or pre-populate the torch hub cache") from exc
    g = _ResNetStem(net)
    g_f = nn.Sequential(net.layer4, nn.AdaptiveAvgPool2d(1), nn.Flatten())
    g_d = copy.deepcopy(g_f)
    return g, g_f, g_d


def build_model(cfg: ArchitectureConfig, seed: int = 0) -> ModelBundle:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if cfg.backbone is Backbone.SMALL_CNN:
            c_g = cfg.conv_channels_g[-1]
            g = small_cnn(3, cfg.conv_channels_g)
            g_f = small_cnn(c_g, cfg.conv_channels_branch, pool=True)
            g_d = small_cnn(c_g, cfg.conv_channels_branch, pool=True)
        else:
            g, g_f, g_d = _resnet50_parts(cfg)
        return ModelBundle(cfg, g, g_f, g_d)
