"""Tensor containers, the triplet archive format and the backend interface.

Archives are directories holding a JSON manifest and one raw blob per tensor.
Blobs are little-endian float32, row-major; shape, dtype and byte order live
only in the manifest so any language can read them back.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

ARCHIVE_VERSION = 1
MANIFEST_NAME = "manifest.json"
_BLOB_DTYPE = np.dtype("<f4")


class ArchiveError(Exception):
    """Raised for any malformed, incomplete or unwritable archive."""


class IntegrityError(ArchiveError):
    pass


class IncompleteGridError(ArchiveError):
    def __init__(self, missing: tuple[int, int]):
        self.missing = missing
        super().__init__(f"incomplete grid: missing trajectory cell (l={missing[0]}, t={missing[1]})")


def _as_f32(array, name: str) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(array, dtype=np.float32))
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite values")
    return out


@dataclass(frozen=True, eq=False)
class Image:
    """RGB image, H x W x 3 in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = _as_f32(self.pixels, "image")
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got {px.shape}")
        if px.shape[0] < 8 or px.shape[1] < 8:
            raise ValueError(f"image must be at least 8x8, got {px.shape[:2]}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def __eq__(self, other):
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class Sketch:
    """Single-channel sketch, H x W x 1 in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = _as_f32(self.pixels, "sketch")
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] != 1:
            raise ValueError(f"sketch must be HxWx1, got {px.shape}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("sketch values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def __eq__(self, other):
        return isinstance(other, Sketch) and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    data: np.ndarray  # C x h x w
    layer: int
    timestep: int

    def __post_init__(self):
        data = _as_f32(self.data, f"feature map (l={self.layer}, t={self.timestep})")
        if data.ndim != 3:
            raise ValueError(f"feature map must be CxHxW, got {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(eq=False)
class FeatureTrajectory:
    """All UNet decoder features of one generation, keyed by (layer, timestep).

    Layers are 1-based; timestep 0 is the final denoising step.
    """

    maps: dict[tuple[int, int], FeatureMap]
    L: int
    T: int

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for l in range(1, self.L + 1):
            shape = None
            for t in range(self.T):
                fm = self.maps.get((l, t))
                if fm is None:
                    raise IncompleteGridError((l, t))
                if shape is None:
                    shape = fm.shape
                elif fm.shape != shape:
                    raise ValueError(f"layer {l}: shape {fm.shape} at t={t} differs from {shape}")
        extra = set(self.maps) - {(l, t) for l in range(1, self.L + 1) for t in range(self.T)}
        if extra:
            raise ValueError(f"trajectory has cells outside the grid: {sorted(extra)[:3]}")

    def __getitem__(self, key: tuple[int, int]) -> np.ndarray:
        return self.maps[key].data

    def layer_shapes(self) -> dict[int, tuple[int, int, int]]:
        return {l: self.maps[(l, 0)].shape for l in range(1, self.L + 1)}

    def __eq__(self, other):
        if not isinstance(other, FeatureTrajectory):
            return NotImplemented
        return (
            self.L == other.L
            and self.T == other.T
            and self.maps.keys() == other.maps.keys()
            and all(np.array_equal(self[k], other[k]) for k in self.maps)
        )


@dataclass(eq=False)
class VaePyramid:
    """VAE decoder residual-block features keyed by (fusing step, block).

    Steps run 0..M; step M is the one consumed by the output head.
    """

    maps: dict[tuple[int, int], np.ndarray]
    counts: list[int]

    def __post_init__(self):
        self.maps = {k: _as_f32(v, f"vae feature {k}") for k, v in self.maps.items()}
        self.validate()

    @property
    def M(self) -> int:
        return len(self.counts) - 1

    def validate(self) -> None:
        prev_res = 0
        for i, n_blocks in enumerate(self.counts):
            res = None
            for n in range(n_blocks):
                if (i, n) not in self.maps:
                    raise ArchiveError(f"vae pyramid missing block (i={i}, n={n})")
                h, w = self.maps[(i, n)].shape[1:]
                if res is None:
                    res = (h, w)
                elif (h, w) != res:
                    raise ValueError(f"vae step {i}: block {n} resolution {(h, w)} differs from {res}")
            if res is not None:
                if res[0] <= prev_res:
                    raise ValueError(f"vae step {i}: resolution {res} does not increase")
                prev_res = res[0]

    def step(self, i: int) -> list[np.ndarray]:
        return [self.maps[(i, n)] for n in range(self.counts[i])]

    def __eq__(self, other):
        if not isinstance(other, VaePyramid):
            return NotImplemented
        return (
            self.counts == other.counts
            and self.maps.keys() == other.maps.keys()
            and all(np.array_equal(self.maps[k], other.maps[k]) for k in self.maps)
        )


@dataclass(eq=False)
class TripletDatum:
    """The one-shot training datum: features, the generated image and its sketch.

    ``condition`` and ``seed`` record how the backend produced the image; they are
    optional so externally drawn triplets can still be archived.
    """

    trajectory: FeatureTrajectory
    pyramid: VaePyramid
    source: Image
    sketch: Sketch
    condition: np.ndarray | None = None
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source.size != self.sketch.size:
            raise ValueError(f"sketch {self.sketch.size} is not paired with image {self.source.size}")
        if self.condition is not None:
            self.condition = _as_f32(self.condition, "condition").reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, TripletDatum):
            return NotImplemented
        same_cond = (self.condition is None and other.condition is None) or (
            self.condition is not None
            and other.condition is not None
            and np.array_equal(self.condition, other.condition)
        )
        return (
            self.trajectory == other.trajectory
            and self.pyramid == other.pyramid
            and self.source == other.source
            and self.sketch == other.sketch
            and same_cond
            and self.seed == other.seed
        )


class DiffusionBackend(Protocol):
    """Anything that can run one conditioned generation and expose its features.

    ``generate`` must be deterministic: the same (condition, seed) gives
    bit-identical outputs, and it must not mutate shared state.
    """

    L: int
    T: int
    M: int
    condition_dim: int
    image_size: int

    def layer_shapes(self) -> dict[int, tuple[int, int, int]]: ...

    def vae_shapes(self) -> list[list[tuple[int, int, int]]]: ...

    def generate(self, condition: np.ndarray, seed: int) -> tuple[Image, FeatureTrajectory, VaePyramid]: ...

    def sample_conditions(self, n: int, seed: int) -> np.ndarray: ...


# -- archive ---------------------------------------------------------------


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _blob_entries(datum: TripletDatum):
    traj = datum.trajectory
    for l in range(1, traj.L + 1):
        for t in range(traj.T):
            yield f"traj/l{l}/t{t}", f"traj_l{l}_t{t}.bin", traj[(l, t)]
    pyr = datum.pyramid
    for i, count in enumerate(pyr.counts):
        for n in range(count):
            yield f"vae/s{i}/b{n}", f"vae_s{i}_b{n}.bin", pyr.maps[(i, n)]
    yield "source", "source.bin", datum.source.pixels
    yield "sketch", "sketch.bin", datum.sketch.pixels
    if datum.condition is not None:
        yield "condition", "condition.bin", datum.condition


def write_blob(path: Path, array: np.ndarray) -> bytes:
    data = np.ascontiguousarray(array, dtype=_BLOB_DTYPE).tobytes(order="C")
    path.write_bytes(data)
    return data


def read_blob(path: Path, shape: Sequence[int]) -> np.ndarray:
    data = path.read_bytes()
    expected = int(np.prod(shape)) * _BLOB_DTYPE.itemsize
    if len(data) != expected:
        raise IntegrityError(f"{path.name}: {len(data)} bytes, manifest shape {list(shape)} needs {expected}")
    return np.frombuffer(data, dtype=_BLOB_DTYPE).reshape(shape).astype(np.float32)


def manifest_bytes(manifest: Mapping) -> bytes:
    return (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode("utf-8")


def save_archive(datum: TripletDatum, path: str | os.PathLike) -> str:
    """Write ``datum`` to directory ``path``; return the manifest's SHA-256 digest."""
    path = Path(path)
    entries = list(_blob_entries(datum))
    for key, _, array in entries:
        if not np.all(np.isfinite(array)):
            raise ArchiveError(f"refusing to write non-finite tensor {key}")
    try:
        path.mkdir(parents=True, exist_ok=True)
        blobs = []
        for key, fname, array in entries:
            data = write_blob(path / fname, array)
            blobs.append(
                {
                    "key": key,
                    "shape": list(array.shape),
                    "dtype": "f32",
                    "byte_order": "le",
                    "file": fname,
                    "checksum": _sha256(data),
                }
            )
        traj = datum.trajectory
        manifest = {
            "version": ARCHIVE_VERSION,
            "L": traj.L,
            "T": traj.T,
            "M": datum.pyramid.M,
            "vae_counts": list(datum.pyramid.counts),
            "layer_shapes": {str(l): list(s) for l, s in traj.layer_shapes().items()},
            "seed": datum.seed,
            "blobs": blobs,
        }
        raw = manifest_bytes(manifest)
        (path / MANIFEST_NAME).write_bytes(raw)
    except OSError as exc:
        raise ArchiveError(f"cannot write archive at {path}: {exc}") from exc
    return _sha256(raw)


def archive_digest(path: str | os.PathLike) -> str:
    return _sha256((Path(path) / MANIFEST_NAME).read_bytes())


def load_archive(path: str | os.PathLike) -> TripletDatum:
    path = Path(path)
    mpath = path / MANIFEST_NAME
    if not mpath.is_file():
        raise ArchiveError(f"no manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
        L, T, M = int(manifest["L"]), int(manifest["T"]), int(manifest["M"])
        blobs = manifest["blobs"]
        layer_shapes = {int(k): tuple(v) for k, v in manifest["layer_shapes"].items()}
    except (ValueError, KeyError, TypeError) as exc:
        raise ArchiveError(f"malformed manifest {mpath}: {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    for entry in blobs:
        key = entry["key"]
        if entry.get("dtype") != "f32" or entry.get("byte_order") != "le":
            raise IntegrityError(f"{key}: unsupported dtype/byte order {entry.get('dtype')}/{entry.get('byte_order')}")
        fpath = path / entry["file"]
        if not fpath.is_file():
            raise ArchiveError(f"missing blob for {key}: {entry['file']}")
        array = read_blob(fpath, entry["shape"])
        if _sha256(array.astype(_BLOB_DTYPE).tobytes()) != entry["checksum"]:
            raise IntegrityError(f"checksum mismatch for {key}")
        tensors[key] = array

    maps = {}
    for l in range(1, L + 1):
        for t in range(T):
            arr = tensors.get(f"traj/l{l}/t{t}")
            if arr is None:
                raise IncompleteGridError((l, t))
            if l in layer_shapes and tuple(arr.shape) != layer_shapes[l]:
                raise IntegrityError(f"traj (l={l}, t={t}) shape {arr.shape} != layer shape {layer_shapes[l]}")
            maps[(l, t)] = FeatureMap(arr, l, t)

    counts = manifest.get("vae_counts")
    if counts is None:
        counts = [0] * (M + 1)
        for key in tensors:
            if key.startswith("vae/"):
                i, n = (int(part[1:]) for part in key.split("/")[1:])
                counts[i] = max(counts[i], n + 1)
    vae = {}
    for i, count in enumerate(counts):
        for n in range(count):
            arr = tensors.get(f"vae/s{i}/b{n}")
            if arr is None:
                raise ArchiveError(f"missing vae blob (i={i}, n={n})")
            vae[(i, n)] = arr

    for key in ("source", "sketch"):
        if key not in tensors:
            raise ArchiveError(f"archive has no {key} blob")
    try:
        return TripletDatum(
            trajectory=FeatureTrajectory(maps, L, T),
            pyramid=VaePyramid(vae, list(counts)),
            source=Image(tensors["source"]),
            sketch=Sketch(tensors["sketch"]),
            condition=tensors.get("condition"),
            seed=manifest.get("seed"),
        )
    except ValueError as exc:
        raise ArchiveError(f"archive {path} violates a type invariant: {exc}") from exc
