"""Classifier with feature-map taps and the pair discriminator used by IFM."""

from dataclasses import asdict, dataclass
from typing import List, NamedTuple, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from ifmlab.errors import BadLabel, BadShape


@dataclass(frozen=True)
class ClassifierConfig:
    conv_channels: Tuple[int, ...] = (32, 64, 128, 128)
    kernel: int = 3
    padding: int = 1
    leaky_slope: float = 0.2
    num_classes: int = 10
    in_channels: int = 1
    input_size: int = 32

    @property
    def final_spatial(self):
        return self.input_size // 2 ** len(self.conv_channels)

    @property
    def head_width(self):
        return self.conv_channels[-1] * self.final_spatial**2

    def tap_shapes(self, batch):
        size = self.input_size
        shapes = []
        for c in self.conv_channels:
            size //= 2
            shapes.append((batch, c, size, size))
        return shapes

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


@dataclass(frozen=True)
class DiscriminatorConfig:
    input_width: int
    hidden: Tuple[int, ...] = (256, 128, 64)
    leaky_slope: float = 0.2

    def to_dict(self):
        return {"input_width": self.input_width, "hidden": list(self.hidden), "leaky_slope": self.leaky_slope}

    @classmethod
    def from_dict(cls, d):
        return cls(d["input_width"], tuple(d["hidden"]), d["leaky_slope"])


class ClassifierOutputs(NamedTuple):
    logits: torch.Tensor
    taps: List[torch.Tensor]


class ConvBlock(nn.Module):
    def __init__(self, c_in, c_out, kernel, padding, slope):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel, padding=padding)
        self.bn = nn.BatchNorm2d(c_out)
        self.slope = slope

    def forward(self, x):
        x = F.leaky_relu(self.bn(self.conv(x)), self.slope)
        return F.max_pool2d(x, 2, 2)


class Classifier(nn.Module):
    """Four conv-BN-leakyReLU-maxpool blocks and a linear head.

    ``forward`` returns the logits and the four post-pool feature maps.
    """

    def __init__(self, config=ClassifierConfig()):
        super().__init__()
        self.config = config
        widths = (config.in_channels,) + tuple(config.conv_channels)
        self.blocks = nn.ModuleList(
            ConvBlock(a, b, config.kernel, config.padding, config.leaky_slope)
            for a, b in zip(widths[:-1], widths[1:])
        )
        self.head = nn.Linear(config.head_width, config.num_classes)

    def forward(self, x):
        cfg = self.config
        expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise BadShape(f"expected (b, {expected[0]}, {expected[1]}, {expected[2]}), got {tuple(x.shape)}")
        if self.training and x.shape[0] < 2:
            raise BadShape("train mode needs at least 2 examples for batch statistics")
        taps = []
        for block in self.blocks:
            x = block(x)
            taps.append(x)
        return ClassifierOutputs(self.head(x.flatten(1)), taps)

    def forward_from(self, stage, tap):
        """Run the network from the output of block ``stage`` (0-based) to the logits."""
        x = tap
        for block in self.blocks[stage + 1 :]:
            x = block(x)
        return self.head(x.flatten(1))


class Discriminator(nn.Module):
    """MLP scoring concatenated feature pairs; ``forward`` returns the pre-sigmoid score."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        widths = (config.input_width,) + tuple(config.hidden)
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.norms = nn.ModuleList(nn.BatchNorm1d(b) for b in config.hidden)
        self.out = nn.Linear(widths[-1], 1)

    def forward(self, v):
        if v.dim() != 2 or v.shape[1] != self.config.input_width:
            raise BadShape(f"expected (m, {self.config.input_width}) vectors, got {tuple(v.shape)}")
        if self.training and v.shape[0] < 2:
            raise BadShape("train mode needs at least 2 vectors for batch statistics")
        for lin, bn in zip(self.hidden, self.norms):
            v = F.leaky_relu(bn(lin(v)), self.config.leaky_slope)
        return self.out(v).squeeze(1)


def _init_module(module, generator, slope):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=slope, nonlinearity="leaky_relu", generator=generator)
            nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
            m.reset_running_stats()
    return module


def init_params(config, seed, dtype=torch.float32):
    """Build a freshly initialized classifier or discriminator from its config."""
    generator = torch.Generator().manual_seed(seed)
    if isinstance(config, ClassifierConfig):
        module = Classifier(config)
    elif isinstance(config, DiscriminatorConfig):
        module = Discriminator(config)
    else:
        raise TypeError(f"unknown config type {type(config).__name__}")
    return _init_module(module.to(dtype), generator, config.leaky_slope)


def classifier_forward(model, batch, mode="train"):
    model.train(mode == "train")
    return model(batch)


def discriminator_forward(model, vectors, mode="eval"):
    model.train(mode == "train")
    return torch.sigmoid(model(vectors))


def softmax_xent(logits, labels):
    """Mean negative log-softmax probability of the true class, in nats."""
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise BadLabel(f"labels must lie in 0..{logits.shape[1] - 1}")
    return F.cross_entropy(logits, labels)
