"""Sketch generator: representative-feature gate, two-level aggregation and
the feature-fusing decoder (FFD) over VAE decoder features."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .feature_store import FeatureTrajectory, Image, Sketch, VaePyramid

LEAK = 0.2


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass
class AggregatorConfig:
    L: int = 12
    l_md: int = 9
    selected_timesteps: list[int] = field(default_factory=list)
    mid_resolution: int = 32
    top_resolution: int = 64
    bottleneck_channels: int = 128
    bottleneck_bias: bool = True

    def __post_init__(self):
        self.selected_timesteps = sorted(int(t) for t in self.selected_timesteps)
        if not 1 <= self.l_md < self.L:
            raise ValueError(f"need 1 <= l_md < L, got l_md={self.l_md}, L={self.L}")
        if not self.selected_timesteps:
            raise ValueError("the representative gate needs at least one timestep")
        if len(set(self.selected_timesteps)) != len(self.selected_timesteps):
            raise ValueError(f"duplicate gate timesteps {self.selected_timesteps}")
        if min(self.selected_timesteps) < 0:
            raise ValueError("gate timesteps must be non-negative")
        for name in ("mid_resolution", "top_resolution"):
            if not _is_pow2(getattr(self, name)):
                raise ValueError(f"{name} must be a power of two, got {getattr(self, name)}")
        if self.mid_resolution > self.top_resolution:
            raise ValueError("mid_resolution cannot exceed top_resolution")


@dataclass
class FfdConfig:
    """Topology of the feature-fusing decoder.

    ``vae_shapes[i]`` lists the (C, h, w) of each VAE block consumed at fusing
    step i = 0..M; step M feeds the output head together with the source image.
    """

    vae_shapes: list[list[tuple[int, int, int]]]
    reduce_channels: int = 8
    fuse_channels: list[int] | None = None
    use_vae: bool = True
    image_channels: int = 3

    def __post_init__(self):
        self.vae_shapes = [[tuple(int(v) for v in s) for s in step] for step in self.vae_shapes]
        if len(self.vae_shapes) < 1:
            raise ValueError("FFD needs at least the output step")

    @property
    def M(self) -> int:
        return len(self.vae_shapes) - 1


class Aggregator(nn.Module):
    """Two-level mix of gated UNet features.

    First level mixes layers 1..l_md at ``mid_resolution``; the second mixes
    the upper layers and the first-level result at ``top_resolution``. Each
    summation group uses softmax-normalized logits.
    """

    def __init__(self, config: AggregatorConfig, layer_shapes: Mapping[int, Sequence[int]]):
        super().__init__()
        self.config = config
        cfg = config
        bc = cfg.bottleneck_channels
        self.layer_shapes = {int(l): tuple(s) for l, s in layer_shapes.items()}
        for l in range(1, cfg.L + 1):
            if l not in self.layer_shapes:
                raise ValueError(f"layer-shape table has no entry for layer {l}")
            c, h, w = self.layer_shapes[l]
            limit = cfg.mid_resolution if l <= cfg.l_md else cfg.top_resolution
            if max(h, w) > limit:
                raise ValueError(f"layer {l} resolution {h}x{w} exceeds target {limit}; upsamplers cannot shrink")
        self.bottlenecks = nn.ModuleDict(
            {str(l): nn.Conv2d(self.layer_shapes[l][0], bc, 1, bias=cfg.bottleneck_bias) for l in range(1, cfg.L + 1)}
        )
        # the first-level result has bottleneck width, so its path gets its own 1x1 per upper layer
        self.skip_bottlenecks = nn.ModuleDict(
            {str(l): nn.Conv2d(bc, bc, 1, bias=cfg.bottleneck_bias) for l in range(cfg.l_md + 1, cfg.L + 1)}
        )
        n_t = len(cfg.selected_timesteps)
        self.mix_first = nn.Parameter(torch.zeros(cfg.l_md, n_t))
        self.mix_final = nn.Parameter(torch.zeros(cfg.L - cfg.l_md, n_t))
        self.mix_skip = nn.Parameter(torch.zeros(cfg.L - cfg.l_md))

    @staticmethod
    def _up(x: torch.Tensor, res: int) -> torch.Tensor:
        if x.shape[-2:] == (res, res):
            return x
        return F.interpolate(x, size=(res, res), mode="bilinear", align_corners=False)

    def aggregate_first(self, feats: Mapping[tuple[int, int], torch.Tensor]) -> torch.Tensor:
        cfg = self.config
        w = torch.softmax(self.mix_first.flatten(), 0).view_as(self.mix_first)
        out = 0.0
        for i, l in enumerate(range(1, cfg.l_md + 1)):
            bottleneck = self.bottlenecks[str(l)]
            for j, t in enumerate(cfg.selected_timesteps):
                out = out + w[i, j] * bottleneck(self._up(feats[(l, t)], cfg.mid_resolution))
        return out

    def aggregate_final(
        self,
        feats: Mapping[tuple[int, int], torch.Tensor],
        f_fst: torch.Tensor,
        upper_mask: torch.Tensor | None = None,
        skip_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Upper-layer terms plus the first-level skip terms.

        The optional masks multiply the normalized mixing weights (shape of
        ``mix_final`` / ``mix_skip``) and exist for ablations and tests.
        """
        cfg = self.config
        top = cfg.top_resolution
        w = torch.softmax(self.mix_final.flatten(), 0).view_as(self.mix_final)
        if upper_mask is not None:
            w = w * upper_mask
        ws = torch.softmax(self.mix_skip, 0)
        if skip_mask is not None:
            ws = ws * skip_mask
        out = 0.0
        f_top = self._up(f_fst, top)
        for i, l in enumerate(range(cfg.l_md + 1, cfg.L + 1)):
            bottleneck = self.bottlenecks[str(l)]
            for j, t in enumerate(cfg.selected_timesteps):
                out = out + w[i, j] * bottleneck(self._up(feats[(l, t)], top))
            out = out + ws[i] * self.skip_bottlenecks[str(l)](f_top)
        return out

    def forward(self, feats):
        return self.aggregate_final(feats, self.aggregate_first(feats))


class FeatureFusingDecoder(nn.Module):
    def __init__(self, config: FfdConfig, in_channels: int, in_resolution: int):
        super().__init__()
        self.config = config
        r = config.reduce_channels
        M = config.M
        fuse = config.fuse_channels
        if fuse is None:
            fuse = [max(in_channels // 2 ** (i + 1), 8) for i in range(M)]
        if len(fuse) != M:
            raise ValueError(f"need {M} fuse widths, got {len(fuse)}")
        self.fuse_channels = list(fuse)
        self.in_resolution = in_resolution

        self.reducers = nn.ModuleList()
        self.convs = nn.ModuleList()
        for i, step in enumerate(config.vae_shapes):
            res = in_resolution * 2**i
            for n, (c, h, w) in enumerate(step):
                if (h, w) != (res, res):
                    raise ValueError(f"vae block (i={i}, n={n}) is {h}x{w}, fusing step {i} runs at {res}x{res}")
            n_used = len(step) if config.use_vae else 0
            self.reducers.append(nn.ModuleList([nn.Conv2d(step[n][0], r, 1) for n in range(n_used)]))
            self.convs.append(nn.ModuleList([nn.Conv2d(r, r, 3, padding=1) for _ in range(n_used)]))

        self.fusers = nn.ModuleList()
        prev = in_channels
        for i in range(M):
            n_used = len(self.reducers[i])
            self.fusers.append(nn.Conv2d(prev + n_used * r, fuse[i], 3, padding=1))
            prev = fuse[i]
        self.out = nn.Conv2d(prev + len(self.reducers[M]) * r + config.image_channels, 1, 3, padding=1)

    def _vae_branch(self, i: int, vae_step: Sequence[torch.Tensor], res: int) -> list[torch.Tensor]:
        if len(vae_step) < len(self.reducers[i]):
            raise ValueError(f"fusing step {i} expects {len(self.reducers[i])} vae blocks, got {len(vae_step)}")
        parts = []
        for n, (reduce, conv) in enumerate(zip(self.reducers[i], self.convs[i])):
            v = vae_step[n]
            if tuple(v.shape[-2:]) != (res, res):
                raise ValueError(f"vae block (i={i}, n={n}) has resolution {tuple(v.shape[-2:])}, expected {(res, res)}")
            parts.append(F.leaky_relu(conv(reduce(v)), LEAK))
        return parts

    def step(self, i: int, x: torch.Tensor, vae_step: Sequence[torch.Tensor]) -> torch.Tensor:
        """One fusing step: x_i (res r) -> x_{i+1} (res 2r)."""
        res = x.shape[-1]
        h = torch.cat(self._vae_branch(i, vae_step, res) + [x], dim=1)
        h = F.leaky_relu(self.fusers[i](h), LEAK)
        return F.interpolate(h, scale_factor=2, mode="nearest")

    def head(self, x: torch.Tensor, vae_step: Sequence[torch.Tensor], source: torch.Tensor) -> torch.Tensor:
        res = x.shape[-1]
        if tuple(source.shape[-2:]) != (res, res):
            raise ValueError(f"source image is {tuple(source.shape[-2:])}, decoder output is {res}x{res}")
        h = torch.cat(self._vae_branch(self.config.M, vae_step, res) + [x, source], dim=1)
        return torch.sigmoid(self.out(h))

    def forward(self, x, vae_steps, source):
        for i in range(self.config.M):
            x = self.step(i, x, vae_steps[i])
        return self.head(x, vae_steps[self.config.M], source)


class SketchGenerator(nn.Module):
    def __init__(self, agg_config: AggregatorConfig, layer_shapes, ffd_config: FfdConfig):
        super().__init__()
        self.aggregator = Aggregator(agg_config, layer_shapes)
        self.ffd = FeatureFusingDecoder(ffd_config, agg_config.bottleneck_channels, agg_config.top_resolution)

    @property
    def config(self) -> AggregatorConfig:
        return self.aggregator.config

    @property
    def gate(self) -> list[int]:
        return list(self.aggregator.config.selected_timesteps)

    def forward(self, feats, vae_steps, source):
        return self.ffd(self.aggregator(feats), vae_steps, source)

    def describe(self) -> dict:
        """JSON-able description sufficient to rebuild the module."""
        ffd = self.ffd.config
        return {
            "aggregator": asdict(self.aggregator.config),
            "layer_shapes": {str(l): list(s) for l, s in self.aggregator.layer_shapes.items()},
            "ffd": {
                "vae_shapes": [[list(s) for s in step] for step in ffd.vae_shapes],
                "reduce_channels": ffd.reduce_channels,
                "fuse_channels": list(self.ffd.fuse_channels),
                "use_vae": ffd.use_vae,
                "image_channels": ffd.image_channels,
            },
        }

    @classmethod
    def from_description(cls, desc: dict) -> "SketchGenerator":
        return cls(
            AggregatorConfig(**desc["aggregator"]),
            {int(l): tuple(s) for l, s in desc["layer_shapes"].items()},
            FfdConfig(**desc["ffd"]),
        )


def build_generator(
    backend,
    selected_timesteps: Sequence[int],
    bottleneck_channels: int = 32,
    l_md: int | None = None,
    use_vae: bool = True,
    bottleneck_bias: bool = True,
    reduce_channels: int = 8,
    seed: int = 0,
) -> SketchGenerator:
    """Size a generator for ``backend`` with parameters drawn from ``seed``."""
    shapes = backend.layer_shapes()
    L = backend.L
    if l_md is None:
        l_md = (3 * L) // 4
    mid = max(max(shapes[l][1:]) for l in range(1, l_md + 1))
    top = max(max(shapes[l][1:]) for l in range(1, L + 1))
    mid = 2 ** math.ceil(math.log2(mid))
    top = 2 ** math.ceil(math.log2(top))
    agg = AggregatorConfig(
        L=L,
        l_md=l_md,
        selected_timesteps=list(selected_timesteps),
        mid_resolution=mid,
        top_resolution=top,
        bottleneck_channels=bottleneck_channels,
        bottleneck_bias=bottleneck_bias,
    )
    ffd = FfdConfig(vae_shapes=backend.vae_shapes(), reduce_channels=reduce_channels, use_vae=use_vae)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SketchGenerator(agg, shapes, ffd)


# -- numpy <-> torch ------------------------------------------------------------


def _param_dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def trajectory_tensors(trajectory: FeatureTrajectory, timesteps: Sequence[int], dtype=torch.float32) -> dict:
    """Tensors for the gated timesteps only; other cells are never read."""
    out = {}
    for t in timesteps:
        if not 0 <= t < trajectory.T:
            raise ValueError(f"gate timestep {t} outside trajectory range [0, {trajectory.T})")
        for l in range(1, trajectory.L + 1):
            out[(l, t)] = torch.as_tensor(trajectory[(l, t)], dtype=dtype).unsqueeze(0)
    return out


def pyramid_tensors(pyramid: VaePyramid, dtype=torch.float32) -> list[list[torch.Tensor]]:
    return [[torch.as_tensor(v, dtype=dtype).unsqueeze(0) for v in pyramid.step(i)] for i in range(len(pyramid.counts))]


def image_tensor(image: Image, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(image.pixels, dtype=dtype).permute(2, 0, 1).unsqueeze(0).contiguous()


def sketch_tensor(sketch: Sketch, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(sketch.pixels, dtype=dtype).permute(2, 0, 1).unsqueeze(0).contiguous()


def tensor_to_sketch(x: torch.Tensor) -> Sketch:
    arr = x.detach().to(torch.float32).cpu()[0].permute(1, 2, 0).numpy()
    return Sketch(np.clip(arr, 0.0, 1.0))


def generator_inputs(generator: SketchGenerator, trajectory, pyramid, source):
    dtype = _param_dtype(generator)
    return (
        trajectory_tensors(trajectory, generator.gate, dtype),
        pyramid_tensors(pyramid, dtype),
        image_tensor(source, dtype),
    )


def forward_sketch(generator: SketchGenerator, trajectory, pyramid, source) -> torch.Tensor:
    """Differentiable forward pass from stored features; returns 1 x 1 x H x W."""
    return generator(*generator_inputs(generator, trajectory, pyramid, source))


def generate_sketch(generator: SketchGenerator, trajectory, pyramid, source: Image) -> Sketch:
    with torch.no_grad():
        return tensor_to_sketch(forward_sketch(generator, trajectory, pyramid, source))
