from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RIDGE = 1e-6


@dataclass(eq=False)
class ConditionDistribution:
    """Multivariate normal over condition embeddings."""

    mean: np.ndarray
    covariance: np.ndarray
    _factor: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        d = self.mean.size
        if self.covariance.shape != (d, d):
            raise ValueError(f"covariance shape {self.covariance.shape} does not match mean dimension {d}")
        if not np.allclose(self.covariance, self.covariance.T, rtol=0.0, atol=1e-8):
            raise ValueError("covariance is not symmetric")
        if d and np.linalg.eigvalsh(self.covariance).min() < -1e-8:
            raise ValueError("covariance is not positive semidefinite")

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def factor(self) -> np.ndarray:
        """F with F @ F.T == covariance (eigen-based, so semidefinite input is fine)."""
        if self._factor is None:
            vals, vecs = np.linalg.eigh((self.covariance + self.covariance.T) / 2)
            self._factor = vecs * np.sqrt(np.clip(vals, 0.0, None))
        return self._factor

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.factor @ rng.standard_normal(self.dim)


@dataclass(eq=False)
class CdstState:
    C: np.ndarray
    dist: ConditionDistribution
    S: int

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=np.float64).reshape(-1)
        if self.S < 1:
            raise ValueError(f"schedule horizon S must be >= 1, got {self.S}")
        if self.C.size != self.dist.dim:
            raise ValueError(f"condition has dimension {self.C.size}, distribution {self.dist.dim}")


def schedule(iteration: int, S: int) -> tuple[float, float]:
    """Blend weights (fixed condition, distribution draw) at ``iteration``."""
    if S < 1:
        raise ValueError(f"S must be >= 1, got {S}")
    if not 0 <= iteration <= S:
        raise ValueError(f"iteration {iteration} outside [0, {S}]")
    frac = iteration / S
    alpha = math.sqrt(1.0 - frac)
    beta = math.sqrt(frac)
    return alpha / (alpha + beta), beta / (alpha + beta)


def sample_condition(state: CdstState, iteration: int, seed: int) -> np.ndarray:
    w_c, w_d = schedule(iteration, state.S)
    x = state.dist.draw(np.random.default_rng(seed))
    return w_c * state.C + w_d * x


def fit_condition_distribution(samples, ridge: float = RIDGE) -> ConditionDistribution:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need an n x d sample matrix with n >= 2, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite condition samples")
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
    cov = (cov + cov.T) / 2 + ridge * np.eye(x.shape[1])
    return ConditionDistribution(mean, cov)


def save_distribution(dist: ConditionDistribution, path: str | os.PathLike) -> str:
    """Write mean/covariance blobs (little-endian f64) and a JSON header; return header digest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs = {}
    for name, arr in (("mean", dist.mean), ("covariance", dist.covariance)):
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        (path / f"{name}.bin").write_bytes(data)
        blobs[name] = {
            "file": f"{name}.bin",
            "shape": list(arr.shape),
            "dtype": "f64",
            "byte_order": "le",
            "checksum": hashlib.sha256(data).hexdigest(),
        }
    header = (json.dumps({"version": 1, "dim": dist.dim, "blobs": blobs}, indent=1, sort_keys=True) + "\n").encode()
    (path / "distribution.json").write_bytes(header)
    return hashlib.sha256(header).hexdigest()


def load_distribution(path: str | os.PathLike) -> ConditionDistribution:
    path = Path(path)
    header = json.loads((path / "distribution.json").read_text())
    arrays = {}
    for name, entry in header["blobs"].items():
        data = (path / entry["file"]).read_bytes()
        if hashlib.sha256(data).hexdigest() != entry["checksum"]:
            raise ValueError(f"checksum mismatch for distribution blob {name}")
        arrays[name] = np.frombuffer(data, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
    return ConditionDistribution(arrays["mean"], arrays["covariance"])
