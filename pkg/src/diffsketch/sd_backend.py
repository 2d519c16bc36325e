"""Stable Diffusion adapter for the backend interface (requires ``diffusers``).

Trajectory layer ``l`` is the ``l``-th resnet of the UNet decoder (up blocks,
in execution order), so SD 1.x exposes L=12. The VAE pyramid holds every
resnet output of the VAE decoder's up blocks, one fusing step per block.

A condition is a pooled text embedding. It steers the UNet by shifting every
non-BOS token of the empty-prompt sequence by ``c - pooled(empty)``, which
keeps conditions in a fixed-size vector space where a Gaussian can be fitted.
"""

from __future__ import annotations

import os
import zlib
from typing import Callable, Sequence

import numpy as np
import torch

from .feature_store import FeatureMap, FeatureTrajectory, Image, VaePyramid

MODEL_ENV = "DIFFSKETCH_SD_MODEL"
DEFAULT_MODEL = "stable-diffusion-v1-5/stable-diffusion-v1-5"

TextEncoder = Callable[[Sequence[str]], "tuple[torch.Tensor, torch.Tensor]"]

_SUBJECTS = (
    "cat", "dog", "horse", "woman", "man", "child", "old man", "girl", "house", "castle",
    "car", "bicycle", "tree", "flower", "bird", "owl", "fox", "lion", "boat", "mountain",
)
_SETTINGS = (
    "in a park", "on a beach", "in the city", "in a forest", "at night",
    "in the snow", "indoors", "in a field", "by a lake", "in the rain",
)


def default_prompts() -> list[str]:
    return [f"a photo of a {s} {p}" for s in _SUBJECTS for p in _SETTINGS]


def clip_text_encoder(tokenizer, text_encoder) -> TextEncoder:
    """(sequence embeddings, pooled embeddings) from a CLIP tokenizer/encoder pair."""

    def encode(prompts):
        tok = tokenizer(
            list(prompts), padding="max_length", max_length=tokenizer.model_max_length,
            truncation=True, return_tensors="pt",
        )
        with torch.no_grad():
            out = text_encoder(tok.input_ids.to(text_encoder.device))
        return out.last_hidden_state, out.pooler_output

    return encode


def hashed_text_encoder(text_encoder, max_length: int = 16, bos: int = 0, eos: int = 1) -> TextEncoder:
    """Tokenizer-free encoder: words hashed into the vocabulary. Meant for tests with random weights."""
    vocab = text_encoder.config.vocab_size

    def encode(prompts):
        ids = []
        for p in prompts:
            words = [2 + zlib.crc32(w.encode()) % (vocab - 2) for w in p.split()][: max_length - 2]
            row = [bos] + words + [eos]
            ids.append(row + [eos] * (max_length - len(row)))
        with torch.no_grad():
            out = text_encoder(torch.tensor(ids))
        return out.last_hidden_state, out.pooler_output

    return encode


class StableDiffusionBackend:
    """Latent diffusion backend recorded with DDIM (eta=0) over ``T`` steps."""

    def __init__(
        self,
        model_id: str | None = None,
        T: int = 50,
        guidance_scale: float = 7.5,
        device: str = "cpu",
        dtype: torch.dtype = torch.float32,
        prompts: Sequence[str] | None = None,
        components: dict | None = None,
    ):
        from diffusers import DDIMScheduler

        self.model_id = model_id or os.environ.get(MODEL_ENV, DEFAULT_MODEL)
        if components is None:
            from diffusers import StableDiffusionPipeline

            pipe = StableDiffusionPipeline.from_pretrained(self.model_id, torch_dtype=dtype, safety_checker=None)
            components = {
                "unet": pipe.unet,
                "vae": pipe.vae,
                "scheduler": pipe.scheduler,
                "text_encoder": clip_text_encoder(pipe.tokenizer, pipe.text_encoder.to(device)),
            }
        self.device, self.dtype = device, dtype
        self.unet = components["unet"].to(device, dtype).eval()
        self.vae = components["vae"].to(device, dtype).eval()
        self.scheduler = DDIMScheduler.from_config(components["scheduler"].config)
        self.encode_text: TextEncoder = components["text_encoder"]
        self.T = T
        self.guidance_scale = guidance_scale
        self.prompts = list(prompts) if prompts is not None else default_prompts()

        self._resnets = [r for block in self.unet.up_blocks for r in block.resnets]
        self.L = len(self._resnets)
        self._vae_resnets = [list(block.resnets) for block in self.vae.decoder.up_blocks]
        self.M = len(self._vae_resnets) - 1
        self.vae_blocks = [len(b) for b in self._vae_resnets]
        self.latent_size = self.unet.config.sample_size
        self.image_size = self.latent_size * 2**self.M

        seq, pooled = self.encode_text([""])
        self._null_seq = seq.to(device, dtype)
        self._null_pool = pooled.to(device, dtype)
        self.condition_dim = int(pooled.shape[-1])
        self._cond_cache: dict[str, np.ndarray] = {}
        self._layer_shapes = None
        self._vae_shapes = None

    def config(self) -> dict:
        return {
            "name": "sd",
            "model_id": self.model_id,
            "T": self.T,
            "L": self.L,
            "M": self.M,
            "image_size": self.image_size,
            "condition_dim": self.condition_dim,
            "guidance_scale": self.guidance_scale,
        }

    # -- conditions ---------------------------------------------------------------

    def _pooled(self, prompts: Sequence[str]) -> np.ndarray:
        todo = sorted(set(p for p in prompts if p not in self._cond_cache))
        if todo:
            _, pooled = self.encode_text(todo)
            for p, v in zip(todo, pooled.double().cpu().numpy()):
                self._cond_cache[p] = v
        return np.stack([self._cond_cache[p] for p in prompts])

    def embed_prompt(self, prompt: str) -> np.ndarray:
        return self._pooled([prompt])[0]

    def sample_conditions(self, n: int, seed: int) -> np.ndarray:
        """Pooled embeddings of ``n`` prompts drawn with replacement from the prompt list."""
        rng = np.random.default_rng(seed)
        idx = rng.integers(len(self.prompts), size=n)
        return self._pooled([self.prompts[i] for i in idx])

    def _sequence(self, condition) -> torch.Tensor:
        c = torch.as_tensor(np.asarray(condition, dtype=np.float64).reshape(1, -1)).to(self.device, self.dtype)
        if c.shape[1] != self.condition_dim:
            raise ValueError(f"condition has {c.shape[1]} entries, backend expects {self.condition_dim}")
        seq = self._null_seq.clone()
        seq[:, 1:] += (c - self._null_pool)[:, None, :]
        return seq

    # -- shapes -------------------------------------------------------------------

    def layer_shapes(self) -> dict[int, tuple[int, int, int]]:
        if self._layer_shapes is None:
            out = {}
            hooks = [
                r.register_forward_hook(lambda m, i, o, l=l: out.__setitem__(l, tuple(o.shape[1:])))
                for l, r in enumerate(self._resnets, start=1)
            ]
            try:
                z = torch.zeros(1, self.unet.config.in_channels, self.latent_size, self.latent_size, device=self.device, dtype=self.dtype)
                with torch.no_grad():
                    self.unet(z, 0, encoder_hidden_states=self._null_seq)
            finally:
                for h in hooks:
                    h.remove()
            self._layer_shapes = out
        return dict(self._layer_shapes)

    def vae_shapes(self) -> list[list[tuple[int, int, int]]]:
        if self._vae_shapes is None:
            z = torch.zeros(1, self.vae.config.latent_channels, self.latent_size, self.latent_size, device=self.device, dtype=self.dtype)
            with torch.no_grad():
                _, maps = self._decode(z)
            self._vae_shapes = [[maps[(i, n)].shape for n in range(k)] for i, k in enumerate(self.vae_blocks)]
        return [list(s) for s in self._vae_shapes]

    # -- generation -----------------------------------------------------------------

    def _decode(self, latents: torch.Tensor):
        maps = {}
        hooks = []
        for i, block in enumerate(self._vae_resnets):
            for n, r in enumerate(block):
                hooks.append(r.register_forward_hook(lambda m, a, o, key=(i, n): maps.__setitem__(key, o[0].float().cpu().numpy().copy())))
        try:
            x = self.vae.decode(latents / self.vae.config.scaling_factor).sample
        finally:
            for h in hooks:
                h.remove()
        rgb = (x[0].float() / 2 + 0.5).clamp(0, 1).permute(1, 2, 0).cpu().numpy()
        return rgb, maps

    def generate(self, condition, seed: int) -> tuple[Image, FeatureTrajectory, VaePyramid]:
        seq = self._sequence(condition)
        cfg = self.guidance_scale != 1.0
        hidden = torch.cat([self._null_seq, seq]) if cfg else seq
        g = torch.Generator().manual_seed(int(seed) % (2**63))
        shape = (1, self.unet.config.in_channels, self.latent_size, self.latent_size)
        latents = torch.randn(shape, generator=g, dtype=torch.float32).to(self.device, self.dtype)
        self.scheduler.set_timesteps(self.T)
        latents = latents * self.scheduler.init_noise_sigma

        current: dict[int, torch.Tensor] = {}
        hooks = [
            r.register_forward_hook(lambda m, a, o, l=l: current.__setitem__(l, o[-1]))
            for l, r in enumerate(self._resnets, start=1)
        ]
        maps = {}
        try:
            with torch.no_grad():
                for j, ts in enumerate(self.scheduler.timesteps):
                    t = self.T - 1 - j  # stored with t=0 as the final denoising step
                    x = torch.cat([latents] * 2) if cfg else latents
                    x = self.scheduler.scale_model_input(x, ts)
                    noise = self.unet(x, ts, encoder_hidden_states=hidden).sample
                    if cfg:
                        uncond, cond = noise.chunk(2)
                        noise = uncond + self.guidance_scale * (cond - uncond)
                    for l, f in current.items():
                        maps[(l, t)] = FeatureMap(f.float().cpu().numpy().copy(), l, t)
                    latents = self.scheduler.step(noise, ts, latents, eta=0.0).prev_sample
                rgb, vae = self._decode(latents)
        finally:
            for h in hooks:
                h.remove()
        return Image(rgb), FeatureTrajectory(maps, self.L, self.T), VaePyramid(vae, self.vae_blocks)
