"""One-shot training of the sketch generator on a single triplet."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import checkpoint
from .adapters import RandomConvPerceptual, RandomProjectionEmbedder
from .cdst import CdstState, ConditionDistribution, load_distribution, sample_condition, save_distribution
from .feature_store import TripletDatum
from .generator import SketchGenerator, build_generator, forward_sketch, image_tensor, sketch_tensor
from .objectives import LossWeights, loss_total

log = logging.getLogger(__name__)

LOG_NAME = "loss_log.jsonl"


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration: int, terms: dict):
        self.iteration = iteration
        self.terms = terms
        super().__init__(f"non-finite loss at iteration {iteration}: {terms}")


@dataclass
class TrainConfig:
    iterations: int = 1200
    learning_rate: float = 1e-4
    cdst_S: int = 1000
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    bottleneck_channels: int = 32
    use_cdst: bool = True
    l1: bool = True
    use_vae: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        if self.iterations < 1:
            raise ValueError(f"iterations must be positive, got {self.iterations}")
        if self.cdst_S < 1:
            raise ValueError(f"cdst_S must be positive, got {self.cdst_S}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrainConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


def iteration_seed(seed: int, iteration: int) -> int:
    """Per-iteration sample seed derived from the run seed."""
    hi, lo = np.random.SeedSequence([seed, iteration]).generate_state(2)
    return (int(hi) << 31) ^ int(lo)


class Trainer:
    """Owns the generator, its optimizer and the loss log for one training run.

    Each iteration draws a condition (CDST blend or a pure distribution draw),
    lets the backend generate a sample image with its features, and steps on
    the total loss for the ground-truth triplet and that sample.
    """

    def __init__(
        self,
        backend,
        triplet: TripletDatum,
        condition,
        dist: ConditionDistribution,
        timesteps: Sequence[int],
        config: TrainConfig = TrainConfig(),
        embedder=None,
        perceptual=None,
        generator: SketchGenerator | None = None,
    ):
        self.backend = backend
        self.triplet = triplet
        self.config = config
        self.embedder = embedder or RandomProjectionEmbedder()
        self.perceptual = perceptual or RandomConvPerceptual()
        self.state = CdstState(np.asarray(condition, dtype=np.float64), dist, config.cdst_S)
        self.generator = generator or build_generator(
            backend, timesteps, config.bottleneck_channels, use_vae=config.use_vae, seed=config.seed
        )
        self.optimizer = torch.optim.Adam(self.generator.parameters(), lr=config.learning_rate, betas=config.betas)
        self.iteration = 0
        self.log: list[dict] = []
        dtype = next(self.generator.parameters()).dtype
        self._source = image_tensor(triplet.source, dtype)
        self._sketch = sketch_tensor(triplet.sketch, dtype)

    @property
    def dist(self) -> ConditionDistribution:
        return self.state.dist

    def condition_for(self, iteration: int) -> np.ndarray:
        seed = iteration_seed(self.config.seed, iteration)
        if not self.config.use_cdst:
            return self.dist.draw(np.random.default_rng(seed))
        # past the horizon the blend stays at pure distribution sampling
        return sample_condition(self.state, min(iteration, self.state.S), seed)

    def compute_loss(self, iteration: int):
        seed = iteration_seed(self.config.seed, iteration)
        i_samp, traj_s, pyr_s = self.backend.generate(self.condition_for(iteration), seed)
        t = self.triplet
        pred_gt = forward_sketch(self.generator, t.trajectory, t.pyramid, t.source)
        s_samp = forward_sketch(self.generator, traj_s, pyr_s, i_samp)
        dtype = pred_gt.dtype
        return loss_total(
            pred_gt,
            self._sketch,
            image_tensor(i_samp, dtype),
            self._source,
            s_samp,
            self.embedder,
            self.perceptual,
            self.config.weights,
            l1=self.config.l1,
        )

    def step(self) -> dict:
        i = self.iteration
        self.optimizer.zero_grad(set_to_none=False)
        terms = self.compute_loss(i)
        record = terms.record(i)
        if not terms.finite():
            raise TrainingDivergedError(i, record)
        terms.total.backward()
        self.optimizer.step()
        self.iteration += 1
        self.log.append(record)
        return record

    def run(self, until: int | None = None, checkpoint_every: int | None = None, checkpoint_dir=None, log_every: int = 50):
        until = self.config.iterations if until is None else until
        while self.iteration < until:
            record = self.step()
            if log_every and self.iteration % log_every == 0:
                log.info("iter %d total %.5f", record["iter"], record["total"])
            if checkpoint_every and checkpoint_dir and self.iteration % checkpoint_every == 0:
                self.save(Path(checkpoint_dir) / f"iter_{self.iteration:06d}")
        return self

    def l1_on_triplet(self) -> float:
        with torch.no_grad():
            t = self.triplet
            pred = forward_sketch(self.generator, t.trajectory, t.pyramid, t.source)
            return float((pred - self._sketch).abs().mean())

    # -- persistence ------------------------------------------------------------

    def save(self, path: str | os.PathLike) -> str:
        path = Path(path)
        meta = {
            "kind": "generator",
            "generator": self.generator.describe(),
            "train_config": self.config.to_json(),
            "iteration": self.iteration,
            "condition": [float(v) for v in self.state.C],
            "backend": getattr(self.backend, "config", lambda: {})(),
        }
        digest = checkpoint.save_checkpoint(path, self.generator, meta, self.optimizer)
        save_distribution(self.dist, path / "distribution")
        write_loss_log(self.log, path / LOG_NAME)
        return digest

    @classmethod
    def resume(cls, path, backend, triplet: TripletDatum, config: TrainConfig | None = None, embedder=None, perceptual=None):
        """Rebuild a trainer mid-run; continuing it reproduces the uninterrupted loss log."""
        model_sd, optim_tensors, meta = checkpoint.load_checkpoint(path)
        generator = SketchGenerator.from_description(meta["generator"])
        generator.load_state_dict(model_sd)
        config = config or TrainConfig.from_json(meta["train_config"])
        trainer = cls(
            backend,
            triplet,
            np.asarray(meta["condition"]),
            load_distribution(Path(path) / "distribution"),
            generator.gate,
            config,
            embedder=embedder,
            perceptual=perceptual,
            generator=generator,
        )
        checkpoint.restore_optimizer(trainer.optimizer, optim_tensors)
        trainer.iteration = int(meta["iteration"])
        trainer.log = read_loss_log(Path(path) / LOG_NAME)
        return trainer


def write_loss_log(records: Sequence[dict], path: str | os.PathLike) -> None:
    lines = [json.dumps(r, sort_keys=True) for r in records]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_loss_log(path: str | os.PathLike) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def train_generator(
    backend,
    triplet: TripletDatum,
    condition,
    dist: ConditionDistribution,
    timesteps: Sequence[int],
    config: TrainConfig = TrainConfig(),
    embedder=None,
    perceptual=None,
) -> tuple[SketchGenerator, list[dict]]:
    trainer = Trainer(backend, triplet, condition, dist, timesteps, config, embedder, perceptual)
    trainer.run()
    return trainer.generator, trainer.log


def load_generator(path: str | os.PathLike) -> tuple[SketchGenerator, dict]:
    model_sd, _, meta = checkpoint.load_checkpoint(path)
    generator = SketchGenerator.from_description(meta["generator"])
    generator.load_state_dict(model_sd)
    generator.eval()
    return generator, meta
