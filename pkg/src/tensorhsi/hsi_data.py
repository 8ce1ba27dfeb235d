"""Hyperspectral scene ingestion, normalization, patch extraction and n-per-class splits.

Scenes are stored as two NPY (format 1.0) files: the cube as a little-endian
``float32``/``float64`` array ``[H, W, B]`` and the label map as a
little-endian ``uint16`` array ``[H, W]`` where 0 marks unlabeled pixels and
1..M are classes.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib import format as npy_format

CUBE_DTYPES = (np.dtype("<f4"), np.dtype("<f8"))
LABEL_DTYPE = np.dtype("<u2")


class DataError(ValueError):
    """Raised for unreadable or inconsistent scene data."""


@dataclass(frozen=True)
class HsiScene:
    cube: np.ndarray
    labels: np.ndarray
    n_classes: int | None = None
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        cube = np.asarray(self.cube, dtype=np.float64)
        labels = np.asarray(self.labels)
        if cube.ndim != 3:
            raise DataError(f"cube must be [H, W, B], got shape {cube.shape}")
        if labels.shape != cube.shape[:2]:
            raise DataError(f"label map {labels.shape} does not match cube {cube.shape[:2]}")
        if labels.size and (labels.min() < 0 or not np.all(labels == np.round(labels))):
            raise DataError("labels must be non-negative integers")
        labels = labels.astype(np.int64)
        top = int(labels.max()) if labels.size else 0
        m = top if self.n_classes is None else int(self.n_classes)
        if top > m:
            raise DataError(f"label {top} exceeds the declared class count {m}")
        present = set(np.unique(labels[labels > 0]).tolist())
        missing = [c for c in range(1, m + 1) if c not in present]
        if missing:
            raise DataError(f"classes without labeled pixels: {missing}")
        if self.class_names is not None and len(self.class_names) != m:
            raise DataError(f"{len(self.class_names)} class names for {m} classes")
        cube.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "cube", cube)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "n_classes", m)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.cube.shape

    @property
    def n_labeled(self) -> int:
        return int(np.count_nonzero(self.labels))


@dataclass(frozen=True)
class Split:
    train: tuple[tuple[int, int], ...]
    test: tuple[tuple[int, int], ...]
    seed: int
    train_labels: tuple[int, ...] = field(default=())
    test_labels: tuple[int, ...] = field(default=())


# -- NPY input/output ----------------------------------------------------------


def read_npy(path, allowed: Sequence[np.dtype], ndim: int) -> np.ndarray:
    """Read an NPY v1.0 file after validating its header."""
    path = os.fspath(path)
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise DataError(f"cannot open {path}: {e.strerror}") from e
    with fh:
        try:
            version = npy_format.read_magic(fh)
            if version != (1, 0):
                raise DataError(f"{path}: unsupported NPY version {version}")
            shape, fortran, dtype = npy_format.read_array_header_1_0(fh)
        except ValueError as e:
            raise DataError(f"{path}: bad NPY header ({e})") from e
        if fortran:
            raise DataError(f"{path}: fortran-order arrays are not accepted")
        if dtype not in allowed:
            raise DataError(f"{path}: dtype {dtype.str} not in {[d.str for d in allowed]}")
        if len(shape) != ndim:
            raise DataError(f"{path}: expected {ndim} dimensions, got shape {shape}")
        count = int(np.prod(shape, dtype=np.int64))
        data = np.fromfile(fh, dtype=dtype, count=count)
        if data.size != count:
            raise DataError(f"{path}: truncated data ({data.size} of {count} values)")
    return data.reshape(shape)


def write_npy(path, arr: np.ndarray) -> None:
    """Write a C-order NPY v1.0 file."""
    arr = np.ascontiguousarray(arr)
    with open(path, "wb") as fh:
        npy_format.write_array(fh, arr, version=(1, 0), allow_pickle=False)


def load_scene(cube_path, labels_path, n_classes: int | None = None) -> HsiScene:
    cube = read_npy(cube_path, CUBE_DTYPES, 3)
    labels = read_npy(labels_path, (LABEL_DTYPE,), 2)
    return HsiScene(cube, labels, n_classes)


def save_scene(scene: HsiScene, cube_path, labels_path, cube_dtype: str = "<f8") -> None:
    if np.dtype(cube_dtype) not in CUBE_DTYPES:
        raise ValueError(f"cube dtype must be one of {[d.str for d in CUBE_DTYPES]}")
    write_npy(cube_path, scene.cube.astype(cube_dtype))
    write_npy(labels_path, scene.labels.astype(LABEL_DTYPE))


# -- preprocessing ---------------------------------------------------------------


def normalize(scene: HsiScene, method: str = "minmax") -> HsiScene:
    """Per-band min-max scaling to [0, 1] or per-band standardization.

    Min-max leaves a band untouched when it already has min 0 and max 1, which
    makes the operation exactly idempotent. A constant band maps to 0.
    """
    cube = scene.cube
    if method == "minmax":
        lo = cube.min(axis=(0, 1))
        hi = cube.max(axis=(0, 1))
        out = np.empty_like(cube)
        for b in range(cube.shape[2]):
            if lo[b] == 0.0 and hi[b] == 1.0:
                out[..., b] = cube[..., b]
            elif hi[b] == lo[b]:
                out[..., b] = 0.0
            else:
                out[..., b] = (cube[..., b] - lo[b]) / (hi[b] - lo[b])
    elif method == "standardize":
        mu = cube.mean(axis=(0, 1))
        sd = cube.std(axis=(0, 1))
        flat = np.flatnonzero(sd == 0)
        if flat.size:
            raise DataError(f"band {int(flat[0])} is constant and cannot be standardized")
        out = (cube - mu) / sd
    else:
        raise ValueError(f"unknown normalization {method!r}; use 'minmax' or 'standardize'")
    return HsiScene(out, scene.labels, scene.n_classes, scene.class_names)


def _check_patch(p: int) -> None:
    if int(p) != p or p < 1 or p % 2 == 0:
        raise ValueError(f"patch size must be a positive odd integer, got {p}")


def _window_index(center: int, p: int, n: int) -> np.ndarray:
    # symmetric reflection with edge repeat: index -1 -> 0, -2 -> 1, n -> n-1
    idx = np.arange(center - p // 2, center + p // 2 + 1)
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def extract_patch(scene, row: int, col: int, p: int) -> np.ndarray:
    """``[P, P, B]`` window centered at ``(row, col)``; borders are mirror-reflected.

    ``scene`` may be an :class:`HsiScene` or a bare cube.
    """
    cube = scene.cube if isinstance(scene, HsiScene) else np.asarray(scene, dtype=np.float64)
    _check_patch(p)
    h, w, _ = cube.shape
    if not (0 <= row < h and 0 <= col < w):
        raise ValueError(f"center ({row}, {col}) outside a {h}x{w} scene")
    r = _window_index(row, p, h)
    c = _window_index(col, p, w)
    return cube[np.ix_(r, c)]


def extract_patches(scene, coords: Sequence[tuple[int, int]], p: int) -> np.ndarray:
    cube = scene.cube if isinstance(scene, HsiScene) else np.asarray(scene, dtype=np.float64)
    if len(coords) == 0:
        return np.zeros((0, p, p, cube.shape[2]))
    return np.stack([extract_patch(cube, r, c, p) for r, c in coords])


def make_split(scene: HsiScene, n_per_class: int, seed: int) -> Split:
    """Sample ``n_per_class`` labeled pixels per class without replacement.

    Unlabeled pixels appear on neither side. Coordinates on each side are
    sorted in row-major order.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    labels = scene.labels
    train, test = [], []
    for c in range(1, scene.n_classes + 1):
        flat = np.flatnonzero(labels == c)
        if flat.size < n_per_class:
            raise DataError(f"class {c} has {flat.size} labeled pixels, fewer than {n_per_class}")
        pick = rng.choice(flat.size, size=n_per_class, replace=False)
        mask = np.zeros(flat.size, dtype=bool)
        mask[pick] = True
        train.extend(flat[mask].tolist())
        test.extend(flat[~mask].tolist())
    w = labels.shape[1]
    train, test = sorted(train), sorted(test)
    to_rc = lambda idx: tuple((i // w, i % w) for i in idx)
    flat_labels = labels.ravel()
    return Split(to_rc(train), to_rc(test), int(seed),
                 tuple(int(flat_labels[i]) for i in train),
                 tuple(int(flat_labels[i]) for i in test))


def synthetic_scene(height: int = 32, width: int = 32, bands: int = 16, n_classes: int = 3,
                    noise: float = 0.01, seed: int = 0) -> HsiScene:
    """Scene of vertical class stripes with distinct smooth spectra plus Gaussian noise.

    Class ``c`` has the spectrum ``0.5 + 0.4 * cos(pi * c * t)`` over
    ``t in [0, 1]``, so every pair of classes is linearly separable. Every
    pixel is labeled. ``noise`` is the standard deviation of the additive noise.
    """
    if width < n_classes:
        raise ValueError("need at least one column per class")
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, bands)
    spectra = np.stack([0.5 + 0.4 * np.cos(np.pi * c * t) for c in range(1, n_classes + 1)])
    cls = (np.arange(width) * n_classes) // width + 1
    labels = np.broadcast_to(cls, (height, width)).copy()
    cube = spectra[labels - 1] + noise * rng.standard_normal((height, width, bands))
    return HsiScene(cube, labels.astype(np.uint16), n_classes)
