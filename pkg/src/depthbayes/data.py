"""Synthetic depth scenes, dataset splits, and the TNSR tensor file format.

Scenes are random axis-aligned rectangles at random metric depths over a
tilted background plane; targets are disparity (inverse depth) maps, strictly
inside [0.1, 1] because depths are drawn from [1, 10].

TNSR layout (all little-endian): magic ``TNSR``, version byte 0x01, dtype
byte 0x02 (IEEE-754 binary64), rank byte, rank u64 extents, then the
row-major payload. Round trips are bit-exact, including rank-0 tensors.
"""
from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .tensor import as_tensor

__all__ = [
    "DatasetSplit",
    "DimOverflowError",
    "DtypeMismatchError",
    "MagicMismatchError",
    "Scene",
    "TensorFileError",
    "TruncatedPayloadError",
    "VersionMismatchError",
    "generate_scene",
    "load_split",
    "load_tensor",
    "make_split",
    "save_split",
    "save_tensor",
]

MAGIC = b"TNSR"
VERSION = 0x01
DTYPE_FLOAT64 = 0x02
_MAX_ELEMENTS = 1 << 40


class TensorFileError(Exception):
    """Base class for TNSR format violations."""


class MagicMismatchError(TensorFileError):
    pass


class VersionMismatchError(TensorFileError):
    pass


class DtypeMismatchError(TensorFileError):
    pass


class TruncatedPayloadError(TensorFileError):
    pass


class DimOverflowError(TensorFileError):
    pass


def save_tensor(path, t) -> None:
    arr = as_tensor(t)
    if arr.ndim > 255:
        raise DimOverflowError(f"rank {arr.ndim} does not fit the rank byte")
    header = MAGIC + bytes([VERSION, DTYPE_FLOAT64, arr.ndim])
    header += b"".join(struct.pack("<Q", extent) for extent in arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 7:
        raise TruncatedPayloadError(f"{path}: file shorter than the fixed header")
    if blob[:4] != MAGIC:
        raise MagicMismatchError(f"{path}: magic {blob[:4]!r} != {MAGIC!r}")
    if blob[4] != VERSION:
        raise VersionMismatchError(f"{path}: version {blob[4]} != {VERSION}")
    if blob[5] != DTYPE_FLOAT64:
        raise DtypeMismatchError(f"{path}: dtype byte {blob[5]} != {DTYPE_FLOAT64}")
    rank = blob[6]
    header_end = 7 + 8 * rank
    if len(blob) < header_end:
        raise TruncatedPayloadError(f"{path}: header truncated at {len(blob)} bytes")
    shape = struct.unpack(f"<{rank}Q", blob[7:header_end]) if rank else ()
    count = 1
    for extent in shape:
        if extent < 1:
            raise DimOverflowError(f"{path}: extent {extent} < 1")
        count *= extent
        if count > _MAX_ELEMENTS:
            raise DimOverflowError(f"{path}: element count exceeds {_MAX_ELEMENTS}")
    expected = header_end + 8 * count
    if len(blob) != expected:
        raise TruncatedPayloadError(f"{path}: payload is {len(blob) - header_end} bytes, expected {8 * count}")
    values = np.frombuffer(blob, dtype="<f8", offset=header_end).astype(np.float64)
    return values.reshape(shape)


@dataclass(frozen=True, eq=False)
class Scene:
    """An RGB image with its ground-truth disparity map."""

    image: np.ndarray  # (3, h, w), values in [0, 1]
    disparity: np.ndarray  # (1, h, w), strictly positive
    seed: int


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    train: tuple[Scene, ...]
    test: tuple[Scene, ...]
    seed: int


_DEPTH_NEAR = 1.0
_DEPTH_FAR = 10.0
_NOISE_STD = 0.02


def _shade(color: np.ndarray, depth: float | np.ndarray) -> np.ndarray:
    # closer surfaces render brighter
    return color * (0.3 + 0.7 / np.asarray(depth))


def generate_scene(seed: int, height: int = 32, width: int = 32) -> Scene:
    """Deterministic scene: 3-6 rectangles over a depth-ramp background."""
    if height < 8 or width < 8:
        raise DomainError(f"scene extents must be >= 8, got ({height}, {width})")
    rng = np.random.default_rng(seed)
    for _ in range(16):
        image, disparity = _render(rng, height, width)
        dev = np.mean(np.abs(disparity - np.median(disparity)))
        if dev > 1e-3:
            break
    return Scene(image=image, disparity=disparity[None, :, :], seed=int(seed))


def _render(rng: np.random.Generator, height: int, width: int):
    near = rng.uniform(1.0, 4.0)
    far = rng.uniform(6.0, 10.0)
    if rng.random() < 0.5:
        near, far = far, near
    angle = rng.uniform(0.0, 2.0 * np.pi)
    rows = np.linspace(0.0, 1.0, height)[:, None]
    cols = np.linspace(0.0, 1.0, width)[None, :]
    ramp = np.cos(angle) * cols + np.sin(angle) * rows
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
    depth = near + (far - near) * ramp

    image = np.empty((3, height, width))
    background = rng.uniform(0.2, 0.9, size=3)
    for c in range(3):
        image[c] = _shade(background[c], depth)

    for _ in range(int(rng.integers(3, 7))):
        rect_h = int(rng.integers(height // 8, height // 2 + 1))
        rect_w = int(rng.integers(width // 8, width // 2 + 1))
        top = int(rng.integers(0, height - rect_h + 1))
        left = int(rng.integers(0, width - rect_w + 1))
        rect_depth = rng.uniform(_DEPTH_NEAR, _DEPTH_FAR)
        color = rng.uniform(0.2, 0.9, size=3)
        window = depth[top : top + rect_h, left : left + rect_w]
        mask = window > rect_depth  # occlusion: keep nearest surface
        window[mask] = rect_depth
        shaded = _shade(color, rect_depth)
        for c in range(3):
            image[c, top : top + rect_h, left : left + rect_w][mask] = shaded[c]

    image += rng.normal(0.0, _NOISE_STD, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return image, 1.0 / depth


def make_split(seed: int, train_count: int, test_count: int, height: int = 32, width: int = 32) -> DatasetSplit:
    """Disjoint seeded train/test scene lists, reproducible per seed."""
    if train_count < 1 or test_count < 1:
        raise DomainError(f"counts must be >= 1, got {train_count}/{test_count}")
    rng = np.random.default_rng(seed)
    needed = train_count + test_count
    seeds: list[int] = []
    chosen: set[int] = set()
    while len(seeds) < needed:
        candidate = int(rng.integers(0, 1 << 62))
        if candidate not in chosen:
            chosen.add(candidate)
            seeds.append(candidate)
    train = tuple(generate_scene(s, height, width) for s in seeds[:train_count])
    test = tuple(generate_scene(s, height, width) for s in seeds[train_count:])
    return DatasetSplit(train=train, test=test, seed=int(seed))


def save_split(dirpath: str, split: DatasetSplit) -> None:
    """Directory layout: {split}/{index:05}_image.tnsr plus a manifest."""
    lines = [f"seed = {split.seed}"]
    lines.append(f"train_count = {len(split.train)}")
    lines.append(f"test_count = {len(split.test)}")
    height, width = split.train[0].image.shape[1:]
    lines.append(f"height = {height}")
    lines.append(f"width = {width}")
    for part, scenes in (("train", split.train), ("test", split.test)):
        os.makedirs(os.path.join(dirpath, part), exist_ok=True)
        for index, scene in enumerate(scenes):
            save_tensor(os.path.join(dirpath, part, f"{index:05}_image.tnsr"), scene.image)
            save_tensor(os.path.join(dirpath, part, f"{index:05}_disparity.tnsr"), scene.disparity)
            lines.append(f"{part} {index:05} {scene.seed}")
    with open(os.path.join(dirpath, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_split(dirpath: str) -> DatasetSplit:
    manifest = os.path.join(dirpath, "manifest.txt")
    with open(manifest, encoding="utf-8") as fh:
        lines = [line.strip() for line in fh if line.strip()]
    header: dict[str, int] = {}
    entries: list[tuple[str, int, int]] = []
    for line in lines:
        if "=" in line:
            key, _, raw = line.partition("=")
            header[key.strip()] = int(raw.strip())
        else:
            part, index, scene_seed = re.split(r"\s+", line)
            entries.append((part, int(index), int(scene_seed)))
    scenes: dict[str, list[Scene]] = {"train": [], "test": []}
    for part, index, scene_seed in entries:
        image = load_tensor(os.path.join(dirpath, part, f"{index:05}_image.tnsr"))
        disparity = load_tensor(os.path.join(dirpath, part, f"{index:05}_disparity.tnsr"))
        scenes[part].append(Scene(image=image, disparity=disparity, seed=scene_seed))
    return DatasetSplit(train=tuple(scenes["train"]), test=tuple(scenes["test"]), seed=header["seed"])
