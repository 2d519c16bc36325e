"""Confidence of directional embedding losses within and across image domains.

A domain is a set of (image, sketch) pairs embedded in the same space. For
two domains X and Y every ordered cross pair (x, y) contributes two cosines:
image-to-image vs sketch-to-sketch direction, and image-to-sketch direction
of x vs of y. ``Sim`` is their mean; confidence rescales by ``Sim`` over the
union of all domains so that confidence(ALL, ALL) = 100.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

ALL = "ALL"


def embed_pairs(pairs: Sequence, embedder) -> tuple[np.ndarray, np.ndarray]:
    """Embed (image, sketch) pairs; returns (image embeddings, sketch embeddings)."""
    imgs = np.stack([embedder.embed(img) for img, _ in pairs])
    sks = np.stack([embedder.embed(sk) for _, sk in pairs])
    return imgs, sks


def _cosines(u: np.ndarray, v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    ok = (nu > eps) & (nv > eps)
    # zero-length directions carry no signal and are left out of the mean
    return ((u * v).sum(axis=-1)[ok]) / (nu[ok] * nv[ok])


def similarity(x: tuple[np.ndarray, np.ndarray], y: tuple[np.ndarray, np.ndarray]) -> float:
    ix, sx = (np.asarray(v, dtype=np.float64) for v in x)
    iy, sy = (np.asarray(v, dtype=np.float64) for v in y)
    img_dir = iy[None, :, :] - ix[:, None, :]
    sk_dir = sy[None, :, :] - sx[:, None, :]
    own_x = np.broadcast_to((sx - ix)[:, None, :], img_dir.shape)
    own_y = np.broadcast_to((sy - iy)[None, :, :], img_dir.shape)
    cos = np.concatenate([_cosines(img_dir, sk_dir).ravel(), _cosines(own_x, own_y).ravel()])
    if cos.size == 0:
        raise ValueError("no non-degenerate direction pairs")
    return float(cos.mean())


def confidence_scores(domains: Mapping[str, tuple[np.ndarray, np.ndarray]]) -> dict[tuple[str, str], float]:
    """Confidence for every ordered pair of named domains, plus (ALL, ALL)."""
    if not domains:
        raise ValueError("no domains given")
    union = (
        np.concatenate([d[0] for d in domains.values()]),
        np.concatenate([d[1] for d in domains.values()]),
    )
    base = similarity(union, union)
    out = {(ALL, ALL): base / base * 100.0}
    for a, da in domains.items():
        for b, db in domains.items():
            out[(a, b)] = similarity(da, db) / base * 100.0
    return out
