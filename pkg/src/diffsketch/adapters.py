"""Pluggable semantic embedders and perceptual distances.

The random-weight adapters are deterministic, dependency-free stand-ins used
by the tests and the toy pipeline. ``ClipEmbedder`` and ``LpipsPerceptual``
wrap the pretrained networks when their packages and weights are available.
"""

from __future__ import annotations

import math
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .feature_store import Image, Sketch


class SemanticEmbedder(Protocol):
    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        """B x C x H x W in [0, 1] (C = 1 or 3) -> B x d unit vectors."""


class PerceptualDistance(Protocol):
    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Per-item distance, shape B; d(x, x) = 0 and symmetric."""


def to_rgb(x: torch.Tensor) -> torch.Tensor:
    if x.shape[1] == 1:
        return x.expand(-1, 3, -1, -1)
    if x.shape[1] != 3:
        raise ValueError(f"expected 1 or 3 channels, got {x.shape[1]}")
    return x


def as_batch(x) -> torch.Tensor:
    """Accept Image/Sketch/HxWxC arrays/tensors and return B x C x H x W."""
    if isinstance(x, (Image, Sketch)):
        x = x.pixels
    if isinstance(x, np.ndarray):
        x = torch.as_tensor(x, dtype=torch.float64)
        if x.ndim == 3:
            x = x.permute(2, 0, 1)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    return x


class RandomProjectionEmbedder:
    """Resize to ``size`` x ``size``, flatten, project with a fixed Gaussian matrix, normalize."""

    def __init__(self, dim: int = 64, size: int = 16, seed: int = 0):
        self.dim, self.size, self.seed = dim, size, seed
        g = torch.Generator().manual_seed(seed)
        fan_in = 3 * size * size
        self.weight = torch.randn(dim, fan_in, generator=g, dtype=torch.float64) / math.sqrt(fan_in)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        x = to_rgb(as_batch(x))
        if x.shape[-2:] != (self.size, self.size):
            x = F.interpolate(x, size=(self.size, self.size), mode="bilinear", align_corners=False)
        v = (x.flatten(1) - 0.5) @ self.weight.to(x.dtype).T
        return v / v.norm(dim=1, keepdim=True).clamp_min(1e-12)

    def embed(self, x) -> np.ndarray:
        with torch.no_grad():
            return self(as_batch(x))[0].numpy()


class RandomConvPerceptual:
    """Multi-scale L2 between channel-normalized activations of a fixed random conv stack."""

    def __init__(self, widths: Sequence[int] = (8, 16, 16), seed: int = 0):
        g = torch.Generator().manual_seed(seed)
        self.weights = []
        prev = 3
        for w in widths:
            self.weights.append(torch.randn(w, prev, 3, 3, generator=g, dtype=torch.float64) / math.sqrt(9 * prev))
            prev = w

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = to_rgb(as_batch(x)) * 2.0 - 1.0
        feats = []
        for i, w in enumerate(self.weights):
            h = F.leaky_relu(F.conv2d(h, w.to(h.dtype), padding=1), 0.2)
            feats.append(h / torch.sqrt((h * h).sum(dim=1, keepdim=True) + 1e-10))
            if i < len(self.weights) - 1 and min(h.shape[-2:]) >= 2:
                h = F.avg_pool2d(h, 2)
        return feats

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        fa, fb = self.features(a), self.features(b)
        return sum(((x - y) ** 2).sum(dim=1).mean(dim=(1, 2)) for x, y in zip(fa, fb))


class ClipEmbedder:
    """CLIP image embeddings through ``transformers`` (weights fetched on first use)."""

    _mean = (0.48145466, 0.4578275, 0.40821073)
    _std = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32", device: str = "cpu"):
        from transformers import CLIPModel

        self.model = CLIPModel.from_pretrained(model_name).to(device).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.size = self.model.config.vision_config.image_size
        self.device = device

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        x = to_rgb(as_batch(x)).to(self.device, torch.float32)
        x = F.interpolate(x, size=(self.size, self.size), mode="bicubic", align_corners=False)
        mean = torch.tensor(self._mean, device=x.device).view(1, 3, 1, 1)
        std = torch.tensor(self._std, device=x.device).view(1, 3, 1, 1)
        v = self.model.get_image_features(pixel_values=(x - mean) / std)
        return v / v.norm(dim=1, keepdim=True)


class LpipsPerceptual:
    """LPIPS distance through the ``lpips`` package."""

    def __init__(self, net: str = "alex"):
        import lpips

        self.model = lpips.LPIPS(net=net, verbose=False).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        a = to_rgb(as_batch(a)).float() * 2 - 1
        b = to_rgb(as_batch(b)).float() * 2 - 1
        return self.model(a, b).flatten()


def make_embedder(name: str = "random", **kwargs):
    if name == "random":
        return RandomProjectionEmbedder(**kwargs)
    if name == "clip":
        return ClipEmbedder(**kwargs)
    raise ValueError(f"unknown embedder {name!r}")


def make_perceptual(name: str = "random", **kwargs):
    if name == "random":
        return RandomConvPerceptual(**kwargs)
    if name == "lpips":
        return LpipsPerceptual(**kwargs)
    raise ValueError(f"unknown perceptual adapter {name!r}")
