"""Image containers, HU region partition, normalization and the sample format.

Images are plain 2D numpy arrays. A handful of ``check_*`` helpers enforce
the shape/range contracts at module boundaries instead of wrapper classes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import ndimage

from .errors import (
    ContractError,
    MissingFileError,
    SampleFormatError,
    SizeMismatchError,
    UnsupportedVersionError,
)

HU_MIN = -1000.0
HU_MAX = 3000.0

# Region boundaries in HU. Ownership at the edges: -400 -> air, -250 -> tissue,
# 250 -> bone. (-400, -250) is the unnamed "other" class.
AIR_MAX = -400.0
TISSUE_MIN = -250.0
BONE_MIN = 250.0

BODY_THRESHOLD = -400.0
STD_FLOOR = 1e-8

FORMAT_VERSION = 1
PLANE_DTYPES = {
    "mr": "<f4",
    "ct": "<f4",
    "body": "u1",
    "sct": "<f4",
    "bone": "<f4",
    "mask": "<f4",
}
REQUIRED_PLANES = ("mr", "ct", "body")
PREDICTION_PLANES = ("sct", "bone", "mask")


def check_image(img, name: str = "image") -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ContractError(f"{name} must be a non-empty 2D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    return arr


def check_same_shape(*arrays, names=None) -> None:
    shapes = [np.shape(a) for a in arrays]
    if any(s != shapes[0] for s in shapes[1:]):
        label = ", ".join(names) if names else "inputs"
        raise ContractError(f"dimension mismatch between {label}: {shapes}")


def check_mask(mask, name: str = "mask") -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    if not np.all((arr == 0) | (arr == 1)):
        raise ContractError(f"{name} must be binary")
    return arr.astype(bool)


def clamp_hu(img) -> np.ndarray:
    return np.clip(img, HU_MIN, HU_MAX)


@dataclass(frozen=True)
class RegionPartition:
    """Disjoint region masks of a CT image within a body mask."""

    body: np.ndarray
    background: np.ndarray
    air: np.ndarray
    tissue: np.ndarray
    bone: np.ndarray
    other: np.ndarray

    def region(self, name: str) -> np.ndarray:
        return getattr(self, name)


def partition_regions(ct, body) -> RegionPartition:
    ct = check_image(ct, "ct")
    body = check_mask(body, "body")
    check_same_shape(ct, body, names=("ct", "body"))
    air = body & (ct <= AIR_MAX)
    tissue = body & (ct >= TISSUE_MIN) & (ct < BONE_MIN)
    bone = body & (ct >= BONE_MIN)
    other = body & (ct > AIR_MAX) & (ct < TISSUE_MIN)
    return RegionPartition(
        body=body.copy(), background=~body, air=air, tissue=tissue, bone=bone, other=other
    )


def derive_body_mask(ct) -> np.ndarray:
    """Body = largest 4-connected component above -400 HU, holes filled."""
    ct = check_image(ct, "ct")
    above = ct > BODY_THRESHOLD
    labels, n = ndimage.label(above)  # default structure is 4-connected in 2D
    if n == 0:
        return np.zeros(ct.shape, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    # ties resolved towards the lowest label so the result is deterministic
    largest = labels == (int(np.argmax(sizes)) + 1)
    return ndimage.binary_fill_holes(largest)


def z_score_normalize(img) -> np.ndarray:
    img = check_image(img).astype(np.float64)
    std = max(float(img.std()), STD_FLOOR)
    return (img - img.mean()) / std


def binarize(p, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    return np.asarray(p) >= threshold


def dice_coefficient(a, b) -> float:
    """Hard Dice of two boolean masks; two empty masks agree perfectly."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


@dataclass
class PhantomSample:
    """An aligned MR/CT pair with its ground-truth body mask."""

    mr: np.ndarray
    ct: np.ndarray
    body: np.ndarray
    seed: int
    id: str = ""
    geometry: dict[str, Any] = field(default_factory=dict)
    # optional prediction planes (sct/bone/mask) when read from a prediction dir
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        check_same_shape(self.mr, self.ct, self.body, names=("mr", "ct", "body"))
        check_image(self.mr, "mr")
        check_image(self.ct, "ct")
        self.body = check_mask(self.body, "body")

    @property
    def shape(self) -> tuple[int, int]:
        return self.ct.shape


@dataclass
class Dataset:
    train: list[PhantomSample]
    val: list[PhantomSample]
    test: list[PhantomSample] = field(default_factory=list)


def _write_plane(path: Path, arr: np.ndarray, dtype: str) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_plane(path: Path, dtype: str, shape: tuple[int, int]) -> np.ndarray:
    if not path.is_file():
        raise MissingFileError(f"missing plane file: {path}")
    raw = path.read_bytes()
    expected = shape[0] * shape[1] * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise SizeMismatchError(f"{path.name}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def write_meta(directory: Path, height: int, width: int, seed: int, **extra) -> None:
    meta = {
        "version": FORMAT_VERSION,
        "height": int(height),
        "width": int(width),
        "seed": int(seed),
        "hu_range": [int(HU_MIN), int(HU_MAX)],
    }
    meta.update(extra)
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_meta(directory) -> dict[str, Any]:
    path = Path(directory) / "meta.json"
    if not path.is_file():
        raise MissingFileError(f"missing meta.json in {directory}")
    meta = json.loads(path.read_text())
    if meta.get("version") != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported sample version {meta.get('version')!r}")
    for key in ("height", "width", "seed", "hu_range"):
        if key not in meta:
            raise SampleFormatError(f"meta.json lacks required key {key!r}")
    return meta


def write_sample(sample: PhantomSample, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h, w = sample.shape
    extra = {"geometry": sample.geometry} if sample.geometry else {}
    write_meta(directory, h, w, sample.seed, **extra)
    _write_plane(directory / "mr.f32", sample.mr, PLANE_DTYPES["mr"])
    _write_plane(directory / "ct.f32", sample.ct, PLANE_DTYPES["ct"])
    _write_plane(directory / "body.u8", sample.body, PLANE_DTYPES["body"])
    for name, plane in sample.extras.items():
        _write_plane(directory / f"{name}.f32", plane, "<f4")
    return directory


def read_sample(directory) -> PhantomSample:
    directory = Path(directory)
    meta = read_meta(directory)
    shape = (int(meta["height"]), int(meta["width"]))
    planes = {
        name: _read_plane(directory / f"{name}.{'u8' if name == 'body' else 'f32'}",
                          PLANE_DTYPES[name], shape)
        for name in REQUIRED_PLANES
    }
    extras = {
        name: _read_plane(directory / f"{name}.f32", PLANE_DTYPES[name], shape)
        for name in PREDICTION_PLANES
        if (directory / f"{name}.f32").is_file()
    }
    body = planes["body"]
    if not np.all(body <= 1):
        raise SampleFormatError(f"{directory}/body.u8 holds values outside {{0, 1}}")
    return PhantomSample(
        mr=planes["mr"],
        ct=planes["ct"],
        body=body.astype(bool),
        seed=int(meta["seed"]),
        id=directory.name,
        geometry=meta.get("geometry", {}),
        extras=extras,
    )


def write_planes(directory, planes: dict[str, np.ndarray], seed: int = 0, **meta_extra) -> Path:
    """Write standalone float planes (predictions, difference maps) plus meta.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shapes = {p.shape for p in planes.values()}
    if len(shapes) != 1:
        raise ContractError(f"planes have differing shapes: {shapes}")
    (h, w), = shapes
    write_meta(directory, h, w, seed, **meta_extra)
    for name, plane in planes.items():
        _write_plane(directory / f"{name}.f32", plane, "<f4")
    return directory


def read_plane(directory, name: str) -> np.ndarray:
    directory = Path(directory)
    meta = read_meta(directory)
    return _read_plane(directory / f"{name}.f32", "<f4", (int(meta["height"]), int(meta["width"])))


def list_sample_dirs(root) -> list[Path]:
    root = Path(root)
    if (root / "meta.json").is_file():
        return [root]
    return sorted(p for p in root.iterdir() if (p / "meta.json").is_file())


def load_split(root) -> list[PhantomSample]:
    return [read_sample(d) for d in list_sample_dirs(root)]


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise MissingFileError(f"dataset directory {root} does not exist")
    splits = {}
    for name in ("train", "val", "test"):
        split_dir = root / name
        splits[name] = load_split(split_dir) if split_dir.is_dir() else []
    return Dataset(**splits)
