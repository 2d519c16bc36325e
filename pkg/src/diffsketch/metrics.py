"""Sketch quality metrics and the ablation harness."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.signal import correlate2d

from .adapters import as_batch
from .feature_store import Image, Sketch

WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03
DATA_RANGE = 1.0


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _pixels(x) -> np.ndarray:
    if isinstance(x, (Image, Sketch)):
        x = x.pixels
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected H x W x C, got shape {arr.shape}")
    return arr


def ssim(a, b) -> float:
    """Single-scale SSIM with a Gaussian window over valid positions, averaged over channels."""
    x, y = _pixels(a), _pixels(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape[:2]) < WINDOW:
        raise ValueError(f"images must be at least {WINDOW}x{WINDOW}, got {x.shape[:2]}")
    w = gaussian_window()
    c1 = (K1 * DATA_RANGE) ** 2
    c2 = (K2 * DATA_RANGE) ** 2
    vals = []
    for c in range(x.shape[2]):
        xc, yc = x[:, :, c], y[:, :, c]

        def filt(z):
            return correlate2d(z, w, mode="valid")

        mx, my = filt(xc), filt(yc)
        vx = filt(xc * xc) - mx * mx
        vy = filt(yc * yc) - my * my
        cov = filt(xc * yc) - mx * my
        smap = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        vals.append(smap.mean())
    return float(np.mean(vals))


def perceptual(a, b, adapter) -> float:
    with torch.no_grad():
        d = adapter(as_batch(a), as_batch(b))
    return float(d.reshape(-1)[0])


@dataclass(frozen=True)
class EvalRecord:
    style: str
    variant: str
    metric: str
    value: float
    n_pairs: int

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"non-finite {self.metric} for {self.style}/{self.variant}")


def evaluate(preds: Sequence, gts: Sequence, adapter, style: str = "default", variant: str = "default") -> list[EvalRecord]:
    """Mean perceptual distance and SSIM over matched prediction/ground-truth sketches."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise ValueError("nothing to evaluate")
    n = len(preds)
    # fsum is exactly rounded, so the order of pairs cannot change the result
    lp = math.fsum(perceptual(p, g, adapter) for p, g in zip(preds, gts)) / n
    ss = math.fsum(ssim(p, g) for p, g in zip(preds, gts)) / n
    return [EvalRecord(style, variant, "lpips", lp, n), EvalRecord(style, variant, "ssim", ss, n)]


# -- ablation ----------------------------------------------------------------------

VARIANT_NAMES = (
    "Ours",
    "Non-representative features 1",
    "Non-representative features 2",
    "One timestep features (t=0)",
    "W/O CDST",
    "W/O L1",
    "FFD W/O VAE features",
)


@dataclass(frozen=True)
class Variant:
    name: str
    timesteps: tuple[int, ...]
    use_cdst: bool = True
    l1: bool = True
    use_vae: bool = True


def ablation_variants(selected: Sequence[int], T: int, seed: int = 0) -> list[Variant]:
    """The seven generator variants, in table order."""
    from .selection import random_timesteps

    sel = tuple(int(t) for t in selected)
    k = len(sel)
    rand = [tuple(random_timesteps(T, k, np.random.default_rng([seed, draw]))) for draw in (1, 2)]
    return [
        Variant(VARIANT_NAMES[0], sel),
        Variant(VARIANT_NAMES[1], rand[0]),
        Variant(VARIANT_NAMES[2], rand[1]),
        Variant(VARIANT_NAMES[3], (0,)),
        Variant(VARIANT_NAMES[4], sel, use_cdst=False),
        Variant(VARIANT_NAMES[5], sel, l1=False),
        Variant(VARIANT_NAMES[6], sel, use_vae=False),
    ]


def run_ablation(
    variants: Sequence[tuple[str, Callable]],
    eval_pairs: Sequence[tuple[object, Sketch]],
    adapter,
    style: str = "default",
) -> list[EvalRecord]:
    """Evaluate each ``(name, predict)`` on ``eval_pairs`` of (input, ground-truth sketch)."""
    records = []
    gts = [gt for _, gt in eval_pairs]
    for name, predict in variants:
        preds = [predict(x) for x, _ in eval_pairs]
        records.extend(evaluate(preds, gts, adapter, style, name))
    return records


CSV_COLUMNS = ("style", "variant", "lpips", "ssim", "n")


def records_to_rows(records: Sequence[EvalRecord]) -> list[dict]:
    rows: dict[tuple[str, str], dict] = {}
    for r in records:
        row = rows.setdefault((r.style, r.variant), {"style": r.style, "variant": r.variant, "n": r.n_pairs})
        row[r.metric] = r.value
    return list(rows.values())


def records_to_csv(records: Sequence[EvalRecord]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in records_to_rows(records):
        w.writerow({**row, "lpips": f"{row['lpips']:.6f}", "ssim": f"{row['ssim']:.6f}"})
    return buf.getvalue()
