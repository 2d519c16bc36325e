"""Diffusion backends.

``ToyBackend`` is a small fixed-weight latent denoiser with a DDIM-style
update and a convolutional "VAE" decoder. It exists so the whole pipeline can
run on a laptop CPU; it has the same interface a Stable Diffusion adapter
would expose (see :mod:`diffsketch.sd_backend`).
"""

from __future__ import annotations

import math
import os

import numpy as np
import torch
import torch.nn.functional as F

from .feature_store import FeatureMap, FeatureTrajectory, Image, Sketch, VaePyramid

BACKEND_ENV = "DIFFSKETCH_BACKEND"


def _leaky(x):
    return F.leaky_relu(x, 0.2)


def _resize(x: torch.Tensor, res: int) -> torch.Tensor:
    if x.shape[-1] == res:
        return x
    if x.shape[-1] > res:
        return F.adaptive_avg_pool2d(x, res)
    return F.interpolate(x, size=(res, res), mode="nearest")


def _phase_warp(frac: float, phases: int) -> float:
    """Monotone staircase on [0, 1]: plateaus joined by fast transitions."""
    if phases < 1:
        return frac
    w = 2 * math.pi * phases
    return frac - math.sin(w * frac) / w


def _timestep_embedding(frac: float, dim: int) -> torch.Tensor:
    # low-frequency embedding of the normalized position in the schedule
    half = dim // 2
    freqs = math.pi / 2 * torch.arange(1, half + 1, dtype=torch.float32) / half
    args = float(frac) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)])


class ToyBackend:
    """Deterministic stand-in for a latent diffusion model.

    Layer ``l`` (1-based) of the toy UNet decoder sits at one of three
    resolutions, mirroring the low/mid/top split of a real decoder: layers in
    the first quarter at ``mid // 2``, up to three quarters at ``mid`` and the
    rest at ``top = image_size / 2**M``.

    The time embedding moves through ``phases`` plateaus, so features drift
    slowly within a phase and quickly between phases, as denoising
    features do in real models.
    """

    latent_channels = 4
    time_dim = 8

    def __init__(self, L=12, T=10, M=3, image_size=64, condition_dim=16, vae_blocks=2, weight_seed=0, phases=6):
        if image_size % (2**M):
            raise ValueError(f"image_size {image_size} not divisible by 2**M = {2**M}")
        self.L, self.T, self.M = L, T, M
        self.image_size = image_size
        self.condition_dim = condition_dim
        self.vae_blocks = vae_blocks
        self.weight_seed = weight_seed
        self.phases = phases
        self.top = image_size // 2**M
        self.mid = max(self.top // 2, 1)
        self.low = max(self.mid // 2, 1)

        g = torch.Generator().manual_seed(weight_seed)

        def rand(*shape, scale=1.0):
            return torch.randn(*shape, generator=g) * scale

        self._res = []
        self._chans = []
        for l in range(1, L + 1):
            if l <= L // 4:
                self._res.append(self.low)
                self._chans.append(24)
            elif l <= (3 * L) // 4:
                self._res.append(self.mid)
                self._chans.append(16)
            else:
                self._res.append(self.top)
                self._chans.append(8)

        lc = self.latent_channels
        self._layers = []
        prev = 0
        for c in self._chans:
            cin = prev + lc
            self._layers.append(
                {
                    "w": rand(c, cin, 3, 3, scale=1.0 / math.sqrt(9 * cin)),
                    "time": rand(c, self.time_dim, scale=0.15),
                    "cond": rand(c, condition_dim, scale=1.0 / math.sqrt(condition_dim)),
                }
            )
            prev = c
        self._head = rand(lc, prev, 1, 1, scale=1.0 / math.sqrt(prev))
        self._layout = rand(lc * self.top * self.top, condition_dim, scale=1.5 / math.sqrt(condition_dim))

        # cosine schedule; abar[t] for t = 0 (final, nearly clean) .. T-1 (noisiest)
        s = 0.008
        steps = torch.arange(T + 1, dtype=torch.float64)
        f = torch.cos(((steps / T) + s) / (1 + s) * math.pi / 2) ** 2
        abar = (f / f[0]).clamp(1e-4, 1.0)
        self._abar = abar[1:].float()

        self._vae_chans = [max(16 - 4 * i, 8) for i in range(M + 1)]
        self._vae = []
        prev = lc
        for i, c in enumerate(self._vae_chans):
            step = {"proj": rand(c, prev, 1, 1, scale=1.0 / math.sqrt(prev)), "blocks": []}
            for _ in range(vae_blocks):
                step["blocks"].append(
                    (rand(c, c, 3, 3, scale=1.0 / math.sqrt(9 * c)), rand(c, c, 3, 3, scale=0.5 / math.sqrt(9 * c)))
                )
            self._vae.append(step)
            prev = c
        self._rgb = rand(3, prev, 3, 3, scale=2.0 / math.sqrt(9 * prev))

        cg = np.random.default_rng(weight_seed + 7919)
        self._cond_mean = cg.normal(0.0, 0.3, condition_dim)
        a = cg.normal(0.0, 1.0, (condition_dim, condition_dim)) / math.sqrt(condition_dim)
        self._cond_factor = a * np.linspace(1.0, 0.2, condition_dim)

    def __repr__(self):
        return (
            f"ToyBackend(L={self.L}, T={self.T}, M={self.M}, image_size={self.image_size}, "
            f"condition_dim={self.condition_dim}, weight_seed={self.weight_seed}, phases={self.phases})"
        )

    def config(self) -> dict:
        return {
            "name": "toy",
            "L": self.L,
            "T": self.T,
            "M": self.M,
            "image_size": self.image_size,
            "condition_dim": self.condition_dim,
            "vae_blocks": self.vae_blocks,
            "weight_seed": self.weight_seed,
            "phases": self.phases,
        }

    def layer_shapes(self) -> dict[int, tuple[int, int, int]]:
        return {l: (c, r, r) for l, (c, r) in enumerate(zip(self._chans, self._res), start=1)}

    def vae_shapes(self) -> list[list[tuple[int, int, int]]]:
        return [[(c, self.top * 2**i, self.top * 2**i)] * self.vae_blocks for i, c in enumerate(self._vae_chans)]

    def sample_conditions(self, n: int, seed: int) -> np.ndarray:
        """Reference condition embeddings (stand-in for embedded text prompts)."""
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n, self.condition_dim))
        return self._cond_mean + z @ self._cond_factor.T

    def _unet(self, z: torch.Tensor, t: int, cond: torch.Tensor):
        temb = _timestep_embedding(_phase_warp(t / max(self.T - 1, 1), self.phases), self.time_dim)
        feats = []
        h = None
        for layer, res in zip(self._layers, self._res):
            x = _resize(z, res)
            if h is not None:
                x = torch.cat([_resize(h, res), x], dim=1)
            bias = layer["time"] @ temb + layer["cond"] @ cond
            h = _leaky(F.conv2d(x, layer["w"], padding=1) + bias[None, :, None, None])
            feats.append(h[0])
        x0 = torch.tanh(F.conv2d(h, self._head) + (self._layout @ cond).view(1, -1, self.top, self.top))
        return x0, feats

    def _decode(self, z: torch.Tensor):
        h = z
        vae = {}
        for i, step in enumerate(self._vae):
            if i > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = F.conv2d(h, step["proj"])
            for n, (w1, w2) in enumerate(step["blocks"]):
                h = h + F.conv2d(_leaky(F.conv2d(h, w1, padding=1)), w2, padding=1)
                vae[(i, n)] = h[0].numpy().copy()
        rgb = torch.sigmoid(F.conv2d(h, self._rgb, padding=1))
        return rgb[0].permute(1, 2, 0).numpy().copy(), vae

    def generate(self, condition, seed: int) -> tuple[Image, FeatureTrajectory, VaePyramid]:
        cond = torch.as_tensor(np.asarray(condition, dtype=np.float32).reshape(-1))
        if cond.numel() != self.condition_dim:
            raise ValueError(f"condition has {cond.numel()} entries, backend expects {self.condition_dim}")
        g = torch.Generator().manual_seed(int(seed) % (2**63))
        with torch.no_grad():
            z = torch.randn(1, self.latent_channels, self.top, self.top, generator=g)
            maps = {}
            for t in range(self.T - 1, -1, -1):
                x0, feats = self._unet(z, t, cond)
                for l, f in enumerate(feats, start=1):
                    maps[(l, t)] = FeatureMap(f.numpy().copy(), l, t)
                a_t = self._abar[t]
                a_prev = self._abar[t - 1] if t > 0 else torch.tensor(1.0)
                eps = (z - a_t.sqrt() * x0) / (1 - a_t).clamp_min(1e-8).sqrt()
                z = a_prev.sqrt() * x0 + (1 - a_prev).sqrt() * eps
            rgb, vae = self._decode(z)
        return (
            Image(np.clip(rgb, 0.0, 1.0)),
            FeatureTrajectory(maps, self.L, self.T),
            VaePyramid(vae, [self.vae_blocks] * (self.M + 1)),
        )


def edge_sketch(image: Image) -> Sketch:
    """Dark-lines-on-white sketch from luminance gradients.

    A stand-in for a hand drawing when exercising the pipeline on toy data.
    """
    lum = image.pixels @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    gy, gx = np.gradient(lum.astype(np.float64))
    mag = np.hypot(gx, gy)
    scale = np.quantile(mag, 0.9)
    if scale <= 0:
        return Sketch(np.ones(lum.shape + (1,), dtype=np.float32))
    ink = np.clip(mag / scale, 0.0, 1.0)
    return Sketch((1.0 - ink)[:, :, None].astype(np.float32))


def make_backend(name: str | None = None, **kwargs):
    """Build a backend by name; defaults to ``$DIFFSKETCH_BACKEND`` then ``toy``."""
    name = name or os.environ.get(BACKEND_ENV, "toy")
    if name == "toy":
        return ToyBackend(**kwargs)
    if name in ("sd", "stable-diffusion"):
        from .sd_backend import StableDiffusionBackend

        return StableDiffusionBackend(**kwargs)
    raise ValueError(f"unknown backend {name!r} (expected 'toy' or 'sd')")
