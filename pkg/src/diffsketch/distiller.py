"""Distillation: teacher-generated image/sketch pairs and a feed-forward student."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .cdst import CdstState, ConditionDistribution, sample_condition
from .feature_store import ArchiveError, Image, IntegrityError, Sketch, manifest_bytes, read_blob, write_blob
from .generator import SketchGenerator, generate_sketch, image_tensor, sketch_tensor, tensor_to_sketch

log = logging.getLogger(__name__)

PAIRS_DIR = "pairs"
MANIFEST_NAME = "manifest.json"


def pair_seed(seed: int, index: int) -> int:
    hi, lo = np.random.SeedSequence([seed, index, 1]).generate_state(2)
    return (int(hi) << 31) ^ int(lo)


@dataclass
class PairDataset:
    entries: list[tuple[Image, Sketch]]
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]


def generate_dataset(
    teacher: SketchGenerator,
    backend,
    n: int,
    S: int,
    seed: int,
    dist: ConditionDistribution,
    C,
    teacher_digest: str = "",
) -> PairDataset:
    """Sample ``n`` pairs with CDST conditions; pair i uses schedule position min(i, S).

    A backend failure for one index is logged and that index skipped; the
    generation keeps going until ``n`` pairs exist, so the count is never short.
    """
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    state = CdstState(np.asarray(C, dtype=np.float64), dist, S)
    entries, records, failures = [], [], []
    index = 0
    max_failures = max(10, n)
    while len(entries) < n:
        s = pair_seed(seed, index)
        cond = sample_condition(state, min(index, S), s)
        try:
            img, traj, pyr = backend.generate(cond, s)
        except Exception as exc:  # noqa: BLE001 - any backend failure is skipped and recorded
            log.warning("backend failed at pair index %d (seed %d): %s", index, s, exc)
            failures.append({"index": index, "seed": s, "error": str(exc)})
            if len(failures) > max_failures:
                raise RuntimeError(f"backend failed {len(failures)} times; giving up") from exc
            index += 1
            continue
        entries.append((img, generate_sketch(teacher, traj, pyr, img)))
        records.append({"index": index, "seed": s})
        index += 1
    provenance = {
        "teacher": teacher_digest,
        "S": S,
        "seed": seed,
        "pairs": records,
        "failures": failures,
    }
    return PairDataset(entries, provenance)


def regenerate_pair(teacher, backend, dataset: PairDataset, i: int, dist: ConditionDistribution, C) -> tuple[Image, Sketch]:
    """Rebuild pair ``i`` from the provenance alone."""
    prov = dataset.provenance
    rec = prov["pairs"][i]
    state = CdstState(np.asarray(C, dtype=np.float64), dist, prov["S"])
    cond = sample_condition(state, min(rec["index"], prov["S"]), rec["seed"])
    img, traj, pyr = backend.generate(cond, rec["seed"])
    return img, generate_sketch(teacher, traj, pyr, img)


# -- on-disk layout ---------------------------------------------------------------


def save_dataset(dataset: PairDataset, path: str | os.PathLike) -> str:
    path = Path(path)
    (path / PAIRS_DIR).mkdir(parents=True, exist_ok=True)
    items = []
    for i, (img, sk) in enumerate(dataset.entries):
        a = write_blob(path / PAIRS_DIR / f"{i}_img.bin", img.pixels)
        b = write_blob(path / PAIRS_DIR / f"{i}_sketch.bin", sk.pixels)
        items.append(
            {
                "img_shape": list(img.pixels.shape),
                "sketch_shape": list(sk.pixels.shape),
                "img_sha256": hashlib.sha256(a).hexdigest(),
                "sketch_sha256": hashlib.sha256(b).hexdigest(),
            }
        )
    manifest = {"version": 1, "n": len(items), "items": items, "provenance": dataset.provenance}
    data = manifest_bytes(manifest)
    (path / MANIFEST_NAME).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_dataset(path: str | os.PathLike) -> PairDataset:
    path = Path(path)
    mpath = path / MANIFEST_NAME
    if not mpath.is_file():
        raise ArchiveError(f"no pair manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
        items = manifest["items"]
    except (ValueError, KeyError) as exc:
        raise ArchiveError(f"malformed pair manifest {mpath}: {exc}") from exc
    entries = []
    for i, item in enumerate(items):
        arrs = []
        for kind in ("img", "sketch"):
            bpath = path / PAIRS_DIR / f"{i}_{kind}.bin"
            if not bpath.is_file():
                raise ArchiveError(f"missing blob {bpath}")
            if hashlib.sha256(bpath.read_bytes()).hexdigest() != item[f"{kind}_sha256"]:
                raise IntegrityError(f"checksum mismatch for {bpath}")
            arrs.append(read_blob(bpath, item[f"{kind}_shape"]))
        entries.append((Image(arrs[0]), Sketch(arrs[1])))
    return PairDataset(entries, manifest.get("provenance", {}))


# -- student ---------------------------------------------------------------------


class SketchStudent(nn.Module):
    """Small U-shaped image-to-sketch network: RGB in, one channel out, same size."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.width = width
        self.enc1 = nn.Conv2d(3, width, 3, padding=1)
        self.enc2 = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.mid = nn.Conv2d(2 * width, 2 * width, 3, padding=1)
        self.dec = nn.Conv2d(3 * width, width, 3, padding=1)
        self.out = nn.Conv2d(width, 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e1 = F.leaky_relu(self.enc1(x), 0.2)
        e2 = F.leaky_relu(self.enc2(e1), 0.2)
        m = F.leaky_relu(self.mid(e2), 0.2)
        up = F.interpolate(m, size=e1.shape[-2:], mode="bilinear", align_corners=False)
        d = F.leaky_relu(self.dec(torch.cat([up, e1], dim=1)), 0.2)
        return torch.sigmoid(self.out(d))

    def apply_image(self, image: Image) -> Sketch:
        with torch.no_grad():
            dtype = next(self.parameters()).dtype
            return tensor_to_sketch(self(image_tensor(image, dtype)))

    def describe(self) -> dict:
        return {"kind": "student", "width": self.width}


def build_student(width: int = 16, seed: int = 0) -> SketchStudent:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SketchStudent(width)


@dataclass
class StudentRun:
    losses: list[float]
    injections: list[int]  # iterations whose batch carried the ground-truth pair
    iterations: int


def _stack(pairs: Sequence[tuple[Image, Sketch]], dtype) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.cat([image_tensor(img, dtype) for img, _ in pairs])
    y = torch.cat([sketch_tensor(sk, dtype) for _, sk in pairs])
    return x, y


def train_student(
    student: SketchStudent,
    dataset: PairDataset,
    gt_pair: tuple[Image, Sketch],
    epochs: int = 5,
    reg_every: int = 16,
    batch_size: int = 8,
    learning_rate: float = 1e-3,
    seed: int = 0,
) -> StudentRun:
    """L1 image-to-sketch training; every ``reg_every``-th iteration also sees ``gt_pair``."""
    if len(dataset) == 0:
        raise ValueError("cannot train a student on an empty dataset")
    if reg_every < 1:
        raise ValueError(f"reg_every must be >= 1, got {reg_every}")
    dtype = next(student.parameters()).dtype
    opt = torch.optim.Adam(student.parameters(), lr=learning_rate)
    rng = np.random.default_rng(seed)
    gt = [gt_pair]
    losses, injections = [], []
    it = 0
    student.train()
    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), batch_size):
            batch = [dataset[int(j)] for j in order[start : start + batch_size]]
            if (it + 1) % reg_every == 0:
                batch = batch + gt
                injections.append(it)
            x, y = _stack(batch, dtype)
            opt.zero_grad()
            loss = (student(x) - y).abs().mean()
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite student loss at iteration {it}")
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            it += 1
    student.eval()
    return StudentRun(losses, injections, it)


def heldout_l1(student: SketchStudent, pairs: Sequence[tuple[Image, Sketch]]) -> float:
    vals = [np.abs(student.apply_image(img).pixels - sk.pixels).mean() for img, sk in pairs]
    return float(np.mean(vals))


def save_student(student: SketchStudent, path, extra: dict | None = None) -> str:
    return checkpoint.save_checkpoint(path, student, {**student.describe(), **(extra or {})})


def load_student(path) -> tuple[SketchStudent, dict]:
    sd, _, meta = checkpoint.load_checkpoint(path)
    if meta.get("kind") != "student":
        raise ValueError(f"{path} is not a student checkpoint")
    student = SketchStudent(meta["width"])
    student.load_state_dict(sd)
    student.eval()
    return student, meta
