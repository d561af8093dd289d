"""Synthetic phantom volumes, intensity normalization, augmentation and MCVX I/O.

Phantoms are axis-aligned ellipsoids ("organs") on a soft-tissue background.
Organ ``i`` carries class label ``i + 1`` and its own mean intensity in HU, so
a small network can learn them while masking an organ still leaves the
positions of the others as context.

MCVX layout (little endian)::

    b"MCVX"  u32 version=1  u8 dtype (0=f32, 1=u8)  u8 rank
    u32 extents[rank]  f32 spacing[3]  payload (row-major)
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import seeding
from .errors import ContractError, FormatError, GenerationError, VersionError

MCVX_MAGIC = b"MCVX"
MCVX_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}

HU_RANGE = (-1000.0, 1000.0)


@dataclass(frozen=True)
class PhantomConfig:
    extents: tuple[int, int, int] = (32, 32, 32)  # (D, H, W)
    num_organs: int = 3
    organ_hu: tuple[float, ...] = (300.0, -350.0, 650.0)
    background_hu: float = 0.0
    noise_sigma: float = 60.0
    semi_axis_range: tuple[float, float] = (3.5, 7.5)
    min_separation: int = 2
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    max_retries: int = 200
    seed: int = 0

    def __post_init__(self):
        for name in ("extents", "organ_hu", "semi_axis_range", "spacing"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.num_organs < 0:
            raise ContractError("num_organs must be non-negative")
        if self.num_organs > len(self.organ_hu):
            raise ContractError(f"{self.num_organs} organs but only {len(self.organ_hu)} intensities")
        if min(self.spacing) <= 0:
            raise ContractError("spacing must be positive")

    @property
    def num_classes(self) -> int:
        return self.num_organs + 1

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class Organ:
    label: int
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]

    def contains(self, coords: np.ndarray) -> np.ndarray:
        """Ellipsoid inequality for an array of (..., 3) voxel coordinates."""
        q = ((coords - np.asarray(self.center)) / np.asarray(self.semi_axes)) ** 2
        return q.sum(axis=-1) <= 1.0


@dataclass
class VolumeSample:
    image: np.ndarray  # float32 (D, H, W)
    labels: np.ndarray  # uint8 (D, H, W), 0 = background
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    sample_id: str = ""
    organs: list[Organ] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.image.shape != self.labels.shape:
            raise ContractError(f"image {self.image.shape} and labels {self.labels.shape} differ")


def _place_organs(cfg: PhantomConfig, gen: np.random.Generator) -> list[Organ]:
    lo, hi = cfg.semi_axis_range
    organs: list[Organ] = []
    for label in range(1, cfg.num_organs + 1):
        for _ in range(cfg.max_retries):
            axes = tuple(float(a) for a in gen.uniform(lo, hi, size=3))
            center = tuple(
                float(gen.uniform(a + 0.5, e - 1.5 - a)) for a, e in zip(axes, cfg.extents)
            )
            ok = all(
                np.linalg.norm(np.subtract(center, o.center)) >= max(axes) + max(o.semi_axes) + cfg.min_separation
                for o in organs
            )
            if ok:
                organs.append(Organ(label, center, axes))
                break
        else:
            raise GenerationError(f"could not place organ {label} after {cfg.max_retries} attempts")
    return organs


def voxel_coords(extents: Sequence[int]) -> np.ndarray:
    grids = np.meshgrid(*(np.arange(e, dtype=np.float64) for e in extents), indexing="ij")
    return np.stack(grids, axis=-1)


def generate_phantom(cfg: PhantomConfig, sample_id: str = "") -> VolumeSample:
    """Deterministic phantom for ``cfg.seed``: organ ellipsoids, HU intensities plus noise."""
    gen = seeding.rng(cfg.seed, "data")
    if any(e < 2 * cfg.semi_axis_range[1] + 2 for e in cfg.extents) and cfg.num_organs:
        raise GenerationError(f"extents {cfg.extents} too small for semi-axes up to {cfg.semi_axis_range[1]}")
    organs = _place_organs(cfg, gen)
    coords = voxel_coords(cfg.extents)
    labels = np.zeros(cfg.extents, dtype=np.uint8)
    image = np.full(cfg.extents, cfg.background_hu, dtype=np.float64)
    for organ in organs:
        inside = organ.contains(coords)
        labels[inside] = organ.label
        image[inside] = cfg.organ_hu[organ.label - 1]
    image += gen.normal(0.0, cfg.noise_sigma, size=cfg.extents)
    return VolumeSample(image.astype(np.float32), labels, tuple(cfg.spacing), sample_id, organs)


def generate_dataset(cfg: PhantomConfig, count: int) -> list[VolumeSample]:
    """``count`` phantoms with per-sample seeds derived from ``cfg.seed``."""
    return [
        generate_phantom(replace(cfg, seed=seeding.derive_seed(cfg.seed, "data", i)), f"case{i:03d}")
        for i in range(count)
    ]


def normalize_hu(x: np.ndarray, lo: float = HU_RANGE[0], hi: float = HU_RANGE[1]) -> np.ndarray:
    """Clamp to ``[lo, hi]`` and map affinely onto ``[0, 1]``."""
    if not lo < hi:
        raise ContractError(f"need lo < hi, got {lo}, {hi}")
    x = np.asarray(x)
    dtype = x.dtype if x.dtype.kind == "f" else np.float64
    out = (np.clip(x, lo, hi) - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0).astype(dtype, copy=False)


@dataclass(frozen=True)
class AugmentConfig:
    flip_axes: tuple[int, ...] = ()
    flip_prob: float = 0.5
    intensity_shift: float = 0.0


def augment(sample: VolumeSample, cfg: AugmentConfig, seed: int) -> VolumeSample:
    """Random axis flips (image and labels together) and a global intensity shift."""
    gen = np.random.default_rng(seed)
    image, labels = sample.image, sample.labels
    for axis in cfg.flip_axes:
        if gen.random() < cfg.flip_prob:
            image = np.flip(image, axis=axis)
            labels = np.flip(labels, axis=axis)
    if cfg.intensity_shift > 0:
        image = image + np.float32(gen.normal(0.0, cfg.intensity_shift))
    return VolumeSample(
        np.ascontiguousarray(image, dtype=np.float32),
        np.ascontiguousarray(labels),
        sample.spacing,
        sample.sample_id,
    )


def flip(sample: VolumeSample, axis: int) -> VolumeSample:
    return VolumeSample(
        np.ascontiguousarray(np.flip(sample.image, axis)),
        np.ascontiguousarray(np.flip(sample.labels, axis)),
        sample.spacing,
        sample.sample_id,
    )


# ---------------------------------------------------------------------------
# MCVX files


def encode_volume(array: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> bytes:
    array = np.asarray(array)
    code = _CODES.get(array.dtype)
    if code is None:
        raise FormatError(f"MCVX stores float32 or uint8, not {array.dtype}")
    if len(spacing) != 3:
        raise FormatError("spacing must have three components")
    header = MCVX_MAGIC + struct.pack("<IBB", MCVX_VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    header += struct.pack("<3f", *spacing)
    return header + np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()


def decode_volume(buf: bytes) -> tuple[np.ndarray, tuple[float, float, float]]:
    if len(buf) < 10:
        raise FormatError("truncated MCVX header")
    if buf[:4] != MCVX_MAGIC:
        raise FormatError(f"bad MCVX magic {buf[:4]!r}")
    version, code, rank = struct.unpack_from("<IBB", buf, 4)
    if version != MCVX_VERSION:
        raise VersionError(f"unsupported MCVX version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown MCVX dtype code {code}")
    off = 10
    if len(buf) < off + 4 * rank + 12:
        raise FormatError("truncated MCVX header")
    extents = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    spacing = struct.unpack_from("<3f", buf, off)
    off += 12
    dtype = _DTYPES[code]
    expected = int(np.prod(extents, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off != expected:
        raise FormatError(f"payload has {len(buf) - off} bytes, header implies {expected}")
    arr = np.frombuffer(buf, dtype=dtype, offset=off).reshape(extents)
    return arr.astype(dtype.newbyteorder("="), copy=True), tuple(float(s) for s in spacing)


def save_volume(array: np.ndarray, path, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> None:
    Path(path).write_bytes(encode_volume(array, spacing))


def load_volume(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    return decode_volume(Path(path).read_bytes())


def save_sample(sample: VolumeSample, directory) -> tuple[str, str]:
    directory = Path(directory)
    img = f"{sample.sample_id}_img.mcvx"
    lbl = f"{sample.sample_id}_lbl.mcvx"
    save_volume(sample.image.astype(np.float32), directory / img, sample.spacing)
    save_volume(sample.labels.astype(np.uint8), directory / lbl, sample.spacing)
    return img, lbl


def load_sample(directory, sample_id: str) -> VolumeSample:
    directory = Path(directory)
    image, spacing = load_volume(directory / f"{sample_id}_img.mcvx")
    labels, _ = load_volume(directory / f"{sample_id}_lbl.mcvx")
    return VolumeSample(image, labels, spacing, sample_id)


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    test: tuple[str, ...]


def make_split(sample_ids: Sequence[str], n_train: int, n_test: int, seed: int) -> DatasetSplit:
    """Disjoint seeded train/test selection."""
    ids = list(sample_ids)
    if n_train < 0 or n_test < 0 or n_train + n_test > len(ids):
        raise ContractError(f"cannot draw {n_train} + {n_test} samples from {len(ids)}")
    order = seeding.rng(seed, "split").permutation(len(ids))
    picked = [ids[i] for i in order]
    return DatasetSplit(tuple(picked[:n_train]), tuple(picked[n_train:n_train + n_test]))


def subset(ids: Sequence[str], n: int, seed: int) -> tuple[str, ...]:
    """Seeded ``n``-element subset, order preserved (the few-shot draw)."""
    ids = list(ids)
    if n > len(ids):
        raise ContractError(f"cannot draw {n} samples from {len(ids)}")
    keep = sorted(seeding.rng(seed, "split", 1).permutation(len(ids))[:n])
    return tuple(ids[i] for i in keep)
