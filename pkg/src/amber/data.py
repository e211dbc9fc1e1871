"""Raster I/O, synthetic scenes, and the patch sampling pipeline.

Cubes and label maps live on disk as a JSON header (``<base>.hdr.json``)
beside a raw little-endian payload (``<base>.raw``), band-sequential and
row-major. The pairing is byte-auditable and round-trips bitwise.

All sampling, splitting, flipping, and rebalancing is a pure function of
its inputs and a seed; nothing here touches global random state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .rng import SplitMix64

__all__ = [
    "HyperCube",
    "LabelMap",
    "PatchSet",
    "FormatError",
    "read_cube",
    "write_cube",
    "read_labels",
    "write_labels",
    "generate_synthetic_scene",
    "sample_patches",
    "split_patches",
    "extract_crop",
    "random_flip",
    "rebalance_to_undefined",
    "band_stats",
    "standardize",
    "overlap_fraction",
]

CROP = 32
MARGIN = CROP // 2

_MAGIC = "HSC1"


class FormatError(ValueError):
    """Malformed raster header or payload."""


@dataclass
class HyperCube:
    """(D, H, W) float32 radiance cube, band-sequential."""

    values: np.ndarray
    wavelengths: Optional[list[float]] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise ValueError(f"cube must be (D, H, W), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("cube contains non-finite values")
        if self.wavelengths is not None and len(self.wavelengths) != v.shape[0]:
            raise ValueError("wavelength list length must equal band count")
        self.values = v

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass
class LabelMap:
    """(H, W) uint16 ground truth; 0 marks pixels without a class."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError(f"label map must be (H, W), got {lab.shape}")
        if lab.dtype != np.uint16:
            if lab.min() < 0 or lab.max() > np.iinfo(np.uint16).max:
                raise ValueError("labels out of uint16 range")
            lab = lab.astype(np.uint16)
        self.labels = lab

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def n_classes(self) -> int:
        return int(self.labels.max())


# --- header + raw payload format -----------------------------------------

def _base_path(path: str) -> str:
    for suffix in (".hdr.json", ".raw"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def _write_raster(arr: np.ndarray, dtype_tag: str, path: str,
                  extra: Optional[dict] = None) -> None:
    base = _base_path(path)
    np_dtype = {"f32": "<f4", "u16": "<u2"}[dtype_tag]
    bands = arr.shape[0] if arr.ndim == 3 else 1
    height, width = arr.shape[-2:]
    header = {
        "magic": _MAGIC,
        "dtype": dtype_tag,
        "layout": "BSQ",
        "bands": bands,
        "height": height,
        "width": width,
        "endianness": "little",
    }
    if extra:
        header.update(extra)
    payload = np.ascontiguousarray(arr, dtype=np_dtype).tobytes()
    with open(base + ".raw", "wb") as f:
        f.write(payload)
    with open(base + ".hdr.json", "w", encoding="utf-8") as f:
        json.dump(header, f, indent=1)
        f.write("\n")


def _read_raster(path: str, want_dtype: str) -> tuple[np.ndarray, dict]:
    base = _base_path(path)
    header_path = base + ".hdr.json"
    try:
        with open(header_path, "r", encoding="utf-8") as f:
            header = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{header_path}: header is not valid JSON ({e})") from e
    if not isinstance(header, dict) or header.get("magic") != _MAGIC:
        raise FormatError(f"{header_path}: bad magic, expected {_MAGIC!r}")
    for key in ("dtype", "layout", "bands", "height", "width", "endianness"):
        if key not in header:
            raise FormatError(f"{header_path}: missing header key {key!r}")
    if header["layout"] != "BSQ":
        raise FormatError(f"{header_path}: unsupported layout {header['layout']!r}")
    if header["endianness"] != "little":
        raise FormatError(f"{header_path}: unsupported endianness {header['endianness']!r}")
    if header["dtype"] != want_dtype:
        raise FormatError(f"{header_path}: dtype {header['dtype']!r}, expected {want_dtype!r}")
    bands, height, width = (int(header[k]) for k in ("bands", "height", "width"))
    if min(bands, height, width) < 1:
        raise FormatError(f"{header_path}: non-positive extents")
    np_dtype = {"f32": "<f4", "u16": "<u2"}[want_dtype]
    itemsize = np.dtype(np_dtype).itemsize
    expected = bands * height * width * itemsize
    with open(base + ".raw", "rb") as f:
        payload = f.read()
    if len(payload) != expected:
        raise FormatError(
            f"{base}.raw: payload is {len(payload)} bytes, "
            f"extents declare {expected}")
    arr = np.frombuffer(payload, dtype=np_dtype).reshape(bands, height, width)
    return arr, header


def write_cube(cube: HyperCube, path: str) -> None:
    extra = {"wavelengths": cube.wavelengths} if cube.wavelengths is not None else None
    _write_raster(cube.values, "f32", path, extra)


def read_cube(path: str) -> HyperCube:
    arr, header = _read_raster(path, "f32")
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{_base_path(path)}.raw: non-finite values in payload")
    wl = header.get("wavelengths")
    return HyperCube(arr.astype(np.float32), list(wl) if wl is not None else None)


def write_labels(labels: LabelMap, path: str) -> None:
    _write_raster(labels.labels, "u16", path)


def read_labels(path: str) -> LabelMap:
    arr, _ = _read_raster(path, "u16")
    return LabelMap(arr[0].astype(np.uint16))


# --- synthetic scenes ------------------------------------------------------

def generate_synthetic_scene(n_classes: int, bands: int, height: int, width: int,
                             seed: int, noise_sigma: float = 0.05
                             ) -> tuple[HyperCube, LabelMap]:
    """Voronoi-partitioned scene with smooth per-class spectra.

    The first ``n_classes`` Voronoi sites carry classes 1..C in order, so
    every class owns at least its own site pixel and the label histogram
    always covers all classes. Spectra are a baseline plus 2-3 Gaussian
    bumps over the band index, with i.i.d. Gaussian pixel noise on top.
    """
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if height < 1 or width < 1 or bands < 1:
        raise ValueError("extents must be positive")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = SplitMix64(seed)

    n_sites = 3 * n_classes
    if n_sites > height * width:
        raise ValueError("scene too small for the site count")
    taken: set[tuple[int, int]] = set()
    sites = []
    while len(sites) < n_sites:
        p = (rng.randint(height), rng.randint(width))
        if p not in taken:
            taken.add(p)
            sites.append(p)
    site_class = np.array(
        [1 + i if i < n_classes else 1 + rng.randint(n_classes) for i in range(n_sites)],
        dtype=np.uint16)

    rows = np.arange(height)[:, None, None]
    cols = np.arange(width)[None, :, None]
    site_arr = np.array(sites)
    d2 = (rows - site_arr[:, 0]) ** 2 + (cols - site_arr[:, 1]) ** 2
    labels = site_class[np.argmin(d2, axis=2)]

    idx = np.arange(bands, dtype=np.float64)
    signatures = np.zeros((n_classes + 1, bands), dtype=np.float64)
    for k in range(1, n_classes + 1):
        sig = np.full(bands, rng.uniform(0.2, 0.8))
        for _ in range(2 + rng.randint(2)):
            center = rng.uniform(0, bands - 1)
            sigma = rng.uniform(max(bands / 16.0, 1.0), max(bands / 4.0, 2.0))
            amp = rng.uniform(0.2, 1.0)
            sig = sig + amp * np.exp(-0.5 * ((idx - center) / sigma) ** 2)
        signatures[k] = sig

    cube = signatures[labels].transpose(2, 0, 1)
    if noise_sigma > 0:
        cube = cube + rng.normal_array((bands, height, width), 0.0, noise_sigma)
    return HyperCube(cube.astype(np.float32)), LabelMap(labels)


# --- patch sampling ---------------------------------------------------------

@dataclass(frozen=True)
class PatchSet:
    """Sampled crop centers with their train/test assignment."""

    centers: tuple[tuple[int, int], ...]
    splits: tuple[str, ...]
    seed: int
    crop_size: int = CROP

    def __post_init__(self):
        if len(self.centers) != len(self.splits):
            raise ValueError("centers and splits must align")
        if len(set(self.centers)) != len(self.centers):
            raise ValueError("duplicate centers")
        if any(s not in ("train", "test") for s in self.splits):
            raise ValueError("split values must be 'train' or 'test'")

    def __len__(self) -> int:
        return len(self.centers)

    def subset(self, split: str) -> list[tuple[int, int]]:
        return [c for c, s in zip(self.centers, self.splits) if s == split]

    def to_json(self) -> dict:
        return {
            "crop_size": self.crop_size,
            "seed": self.seed,
            "patches": [
                {"row": r, "col": c, "split": s}
                for (r, c), s in zip(self.centers, self.splits)
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PatchSet":
        patches = doc["patches"]
        return cls(
            centers=tuple((int(p["row"]), int(p["col"])) for p in patches),
            splits=tuple(str(p["split"]) for p in patches),
            seed=int(doc["seed"]),
            crop_size=int(doc.get("crop_size", CROP)),
        )


def sample_patches(labels: LabelMap, n: int, seed: int) -> PatchSet:
    """Draw ``n`` distinct labeled centers, uniformly, away from the edges.

    Eligible centers keep the full crop in bounds (rows and cols in
    [16, extent-16)) and sit on a defined pixel. Every sampled patch
    starts in the test split; ``split_patches`` reassigns.
    """
    lab = labels.labels
    h, w = lab.shape
    if h < 2 * MARGIN or w < 2 * MARGIN:
        raise ValueError(f"image {h}x{w} smaller than one {CROP}x{CROP} crop")
    interior = lab[MARGIN:h - MARGIN, MARGIN:w - MARGIN]
    coords = np.argwhere(interior != 0) + MARGIN
    if len(coords) == 0:
        raise ValueError("no eligible centers: every interior pixel is undefined")
    if n > len(coords):
        raise ValueError(f"requested {n} patches but only {len(coords)} eligible centers")
    rng = SplitMix64(seed)
    picked = rng.choose(len(coords), n)
    centers = tuple((int(coords[i, 0]), int(coords[i, 1])) for i in picked)
    return PatchSet(centers=centers, splits=("test",) * n, seed=seed)


def split_patches(ps: PatchSet, train_fraction: float, seed: int) -> PatchSet:
    """Mark exactly floor(train_fraction * n) patches as train, the rest test."""
    if not 0.0 <= train_fraction <= 1.0:
        raise ValueError(f"train_fraction must be in [0, 1], got {train_fraction}")
    n = len(ps)
    n_train = int(np.floor(train_fraction * n))
    rng = SplitMix64(seed)
    train_idx = set(rng.choose(n, n_train))
    splits = tuple("train" if i in train_idx else "test" for i in range(n))
    return replace(ps, splits=splits)


def extract_crop(cube: HyperCube, labels: LabelMap, center: tuple[int, int]
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Window of rows/cols center+-16 (exclusive upper): (1,D,32,32) + (32,32)."""
    r, c = center
    if not (MARGIN <= r <= cube.height - MARGIN and MARGIN <= c <= cube.width - MARGIN):
        raise ValueError(f"center {center} puts the crop out of bounds")
    rs, cs = r - MARGIN, c - MARGIN
    crop = cube.values[:, rs:rs + CROP, cs:cs + CROP][None]
    tile = labels.labels[rs:rs + CROP, cs:cs + CROP]
    return np.ascontiguousarray(crop), np.ascontiguousarray(tile)


def random_flip(crop: np.ndarray, tile: np.ndarray, rng: SplitMix64
                ) -> tuple[np.ndarray, np.ndarray]:
    """Reverse H and/or W of both arrays, each with probability 1/2.

    The spectral axis is never flipped. Two draws are consumed (H first,
    then W) whether or not either flip fires.
    """
    flip_h = rng.random() < 0.5
    flip_w = rng.random() < 0.5
    axes_crop = []
    axes_tile = []
    if flip_h:
        axes_crop.append(crop.ndim - 2)
        axes_tile.append(tile.ndim - 2)
    if flip_w:
        axes_crop.append(crop.ndim - 1)
        axes_tile.append(tile.ndim - 1)
    if not axes_crop:
        return crop, tile
    return (np.ascontiguousarray(np.flip(crop, axis=axes_crop)),
            np.ascontiguousarray(np.flip(tile, axis=axes_tile)))


def rebalance_to_undefined(labels: LabelMap, class_id: int, n_pixels: int,
                           seed: int) -> LabelMap:
    """Relabel exactly ``n_pixels`` random pixels of ``class_id`` as undefined."""
    if n_pixels < 0:
        raise ValueError("n_pixels must be >= 0")
    if n_pixels == 0:
        return LabelMap(labels.labels.copy())
    coords = np.argwhere(labels.labels == class_id)
    if len(coords) < n_pixels:
        raise ValueError(
            f"class {class_id} has {len(coords)} pixels, cannot clear {n_pixels}")
    rng = SplitMix64(seed)
    picked = rng.choose(len(coords), n_pixels)
    out = labels.labels.copy()
    sel = coords[np.array(picked, dtype=np.int64)]
    out[sel[:, 0], sel[:, 1]] = 0
    return LabelMap(out)


# --- normalization ----------------------------------------------------------

def band_stats(cube: HyperCube, centers: Sequence[tuple[int, int]]
               ) -> tuple[np.ndarray, np.ndarray]:
    """Per-band mean/std over the pixels of the given crops.

    Crops that overlap count their shared pixels once per crop; the
    statistics describe what the model actually sees. Bands with nearly
    zero spread fall back to unit scale.
    """
    if not centers:
        raise ValueError("need at least one crop to compute statistics")
    d = cube.bands
    total = np.zeros(d, dtype=np.float64)
    total_sq = np.zeros(d, dtype=np.float64)
    count = 0
    for r, c in centers:
        window = cube.values[:, r - MARGIN:r + MARGIN, c - MARGIN:c + MARGIN]
        total += window.sum(axis=(1, 2), dtype=np.float64)
        total_sq += np.square(window, dtype=np.float64).sum(axis=(1, 2))
        count += window.shape[1] * window.shape[2]
    mean = total / count
    var = np.maximum(total_sq / count - mean ** 2, 0.0)
    std = np.sqrt(var)
    std[std < 1e-8] = 1.0
    return mean.astype(np.float32), std.astype(np.float32)


def standardize(crop: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Apply per-band standardization to a (..., D, 32, 32) crop."""
    shape = (-1, 1, 1)
    return ((crop - mean.reshape(shape)) / std.reshape(shape)).astype(np.float32)


def overlap_fraction(ps: PatchSet) -> float:
    """Fraction of test patches whose window intersects any train window."""
    train = np.array(ps.subset("train"), dtype=np.int64)
    test = np.array(ps.subset("test"), dtype=np.int64)
    if len(train) == 0 or len(test) == 0:
        return 0.0
    dr = np.abs(test[:, None, 0] - train[None, :, 0])
    dc = np.abs(test[:, None, 1] - train[None, :, 1])
    hit = ((dr < CROP) & (dc < CROP)).any(axis=1)
    return float(hit.mean())
