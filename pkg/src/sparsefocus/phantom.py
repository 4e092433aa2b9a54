"""Seeded paired MR/CT head phantoms.

Each phantom is an elliptical head: a thin scalp, a skull annulus with
per-pixel bone densities, a smooth soft-tissue interior, anterior air
pockets lined with one-pixel bony septa and, sometimes, a hyperdense blob
growing from the skull. The MR-like image only knows tissue classes: bone
and air are both dark and overlap in intensity.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ContractError
from .imaging import HU_MAX, HU_MIN, PhantomSample, write_sample, z_score_normalize

SPLITS = ("train", "val", "test")

# label codes of the rendered class map
BACKGROUND, TISSUE, SKULL, POCKET, SEPTUM, PATHOLOGY = range(6)


@dataclass(frozen=True)
class PhantomParams:
    size: int = 96
    body_axis_frac: tuple[float, float] = (0.6, 0.8)
    center_jitter_frac: float = 0.05
    scalp_px: tuple[float, float] = (1.0, 2.0)
    skull_thickness_px: tuple[float, float] = (2.0, 4.0)
    # bone share of skull pixels bordering soft tissue (partial-volume mixing)
    skull_edge_fraction: tuple[float, float] = (0.0, 0.75)
    bone_hu_mode: float = 900.0
    bone_hu_sigma: float = 0.35
    bone_hu_clip: tuple[float, float] = (300.0, 2500.0)
    tissue_hu: tuple[float, float] = (0.0, 80.0)
    tissue_smoothness_px: float = 6.0
    air_hu: float = -1000.0
    sinus_count: tuple[int, int] = (1, 3)
    sinus_radius_px: tuple[float, float] = (3.0, 7.0)
    septa: bool = True
    septa_hu: tuple[float, float] = (300.0, 700.0)
    pathology_prob: float = 0.3
    pathology_hu: tuple[float, float] = (600.0, 1200.0)
    pathology_radius_px: tuple[float, float] = (3.0, 5.0)
    mr_tissue_mean: float = 1.0
    mr_bone_mean: float = 0.15
    mr_air_mean: float = 0.05
    mr_noise_sigma: float = 0.05
    bias_amplitude: float = 0.2

    def __post_init__(self):
        if self.size < 32:
            raise ContractError(f"phantom size must be >= 32, got {self.size}")
        for name in ("body_axis_frac", "scalp_px", "skull_thickness_px", "bone_hu_clip",
                     "tissue_hu", "skull_edge_fraction", "sinus_count", "sinus_radius_px", "septa_hu",
                     "pathology_hu", "pathology_radius_px"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ContractError(f"{name} range is not ordered: {lo} > {hi}")
        if not 0.0 <= self.pathology_prob <= 1.0:
            raise ContractError("pathology_prob must lie in [0, 1]")
        if not (0.0 < self.body_axis_frac[0] and self.body_axis_frac[1] <= 1.0):
            raise ContractError("body_axis_frac must lie in (0, 1]")
        if self.sinus_count[0] < 1:
            raise ContractError("phantoms need at least one air pocket")
        if self.mr_noise_sigma < 0 or self.bias_amplitude < 0 or self.bone_hu_sigma < 0:
            raise ContractError("noise, bias amplitude and bone sigma must be >= 0")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomParams":
        fields = cls.__dataclass_fields__
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in fields})


@dataclass
class PhantomRender:
    sample: PhantomSample
    mr_raw: np.ndarray  # before z-scoring
    labels: np.ndarray
    geometry: dict = field(default_factory=dict)


def _uniform(rng, bounds):
    lo, hi = bounds
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _smooth_field(rng, shape, sigma, lo, hi):
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    span = noise.max() - noise.min()
    unit = (noise - noise.min()) / span if span > 0 else np.zeros(shape)
    return lo + (hi - lo) * unit


def _bias_field(rng, size, amplitude):
    """1 + a 2nd-order polynomial whose largest deviation is <= amplitude."""
    if amplitude == 0:
        return np.ones((size, size))
    y, x = np.mgrid[-1:1:size * 1j, -1:1:size * 1j]
    terms = [x, y, x * x, x * y, y * y]
    poly = sum(rng.uniform(-1, 1) * t for t in terms)
    peak = np.abs(poly).max()
    if peak == 0:
        return np.ones((size, size))
    return 1.0 + poly * (amplitude * rng.uniform(0.5, 1.0) / peak)


def _ellipse(shape, cy, cx, ry, rx, angle):
    yy, xx = np.mgrid[: shape[0], : shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = c * dy + s * dx
    v = -s * dy + c * dx
    return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0


def _bone_draws(rng, n, p: PhantomParams):
    # log-normal with the requested mode: mode = exp(mu - sigma^2)
    mu = np.log(p.bone_hu_mode) + p.bone_hu_sigma**2
    vals = rng.lognormal(mu, p.bone_hu_sigma, size=n)
    return np.clip(vals, *p.bone_hu_clip)


def render_phantom(params: PhantomParams | None = None, seed: int = 0) -> PhantomRender:
    p = params or PhantomParams()
    rng = np.random.default_rng(int(seed))
    n = p.size
    shape = (n, n)

    # body ellipse
    ry = _uniform(rng, p.body_axis_frac) * n / 2
    rx = _uniform(rng, p.body_axis_frac) * n / 2
    jitter = p.center_jitter_frac * n
    cy = (n - 1) / 2 + rng.uniform(-jitter, jitter)
    cx = (n - 1) / 2 + rng.uniform(-jitter, jitter)
    angle = rng.uniform(-0.3, 0.3)
    body = _ellipse(shape, cy, cx, ry, rx, angle)
    if body[0].any() or body[-1].any() or body[:, 0].any() or body[:, -1].any():
        raise ContractError("canvas too small: body ellipse touches the border")
    depth = ndimage.distance_transform_edt(body)

    scalp = _uniform(rng, p.scalp_px)
    thickness = _uniform(rng, p.skull_thickness_px)
    skull = body & (depth > scalp) & (depth <= scalp + thickness)
    inner = body & (depth > scalp + thickness)

    labels = np.where(body, TISSUE, BACKGROUND).astype(np.uint8)
    labels[skull] = SKULL

    # anterior air pockets (top half of the head), well inside the skull
    pockets = np.zeros(shape, dtype=bool)
    pocket_desc = []
    yy, xx = np.mgrid[:n, :n]
    count = int(rng.integers(p.sinus_count[0], p.sinus_count[1] + 1))
    for _ in range(count):
        radius = _uniform(rng, p.sinus_radius_px)
        gap = 3.0
        while True:
            margin = scalp + thickness + radius + gap
            candidates = np.flatnonzero(inner & (depth >= margin) & (yy < cy))
            if candidates.size:
                break
            if radius > 1.5:
                radius -= 1.0
            elif gap > 1.0:
                gap = 1.0  # small canvases: let the pocket sit closer to the skull
            else:
                break
        if candidates.size == 0:
            raise ContractError("canvas too small to place an air pocket")
        idx = int(candidates[rng.integers(candidates.size)])
        py, px = divmod(idx, n)
        ratio = rng.uniform(0.6, 1.0)
        pocket = _ellipse(shape, py, px, radius, radius * ratio, rng.uniform(0, np.pi))
        pockets |= pocket
        pocket_desc.append({"center": [int(py), int(px)], "radius": round(radius, 4),
                            "aspect": round(float(ratio), 4)})

    septa = np.zeros(shape, dtype=bool)
    if p.septa:
        septa = ndimage.binary_dilation(pockets) & ~pockets & inner

    pathology = np.zeros(shape, dtype=bool)
    path_desc = None
    if rng.random() < p.pathology_prob:
        skull_idx = np.flatnonzero(skull)
        py, px = divmod(int(skull_idx[rng.integers(skull_idx.size)]), n)
        radius = _uniform(rng, p.pathology_radius_px)
        blob = (yy - py) ** 2 + (xx - px) ** 2 <= radius**2
        # lobulate: union with a smaller offset disk
        oy, ox = rng.uniform(-radius, radius, size=2)
        blob |= (yy - py - oy) ** 2 + (xx - px - ox) ** 2 <= (0.6 * radius) ** 2
        pathology = blob & body & (depth > scalp) & ~pockets & ~septa
        path_desc = {"center": [int(py), int(px)], "radius": round(radius, 4)}

    labels[septa] = SEPTUM
    labels[pathology] = PATHOLOGY
    labels[pockets] = POCKET

    # CT
    ct = np.full(shape, p.air_hu, dtype=np.float64)
    tissue_field = _smooth_field(rng, shape, p.tissue_smoothness_px, *p.tissue_hu)
    is_tissue = labels == TISSUE
    ct[is_tissue] = tissue_field[is_tissue]
    is_skull = labels == SKULL
    ct[is_skull] = _bone_draws(rng, int(is_skull.sum()), p)
    bone_share = np.ones(shape)
    edge = is_skull & ndimage.binary_dilation(is_tissue)
    bone_share[edge] = rng.uniform(*p.skull_edge_fraction, size=int(edge.sum()))
    ct[edge] = bone_share[edge] * ct[edge] + (1.0 - bone_share[edge]) * tissue_field[edge]
    is_septum = labels == SEPTUM
    ct[is_septum] = rng.uniform(*p.septa_hu, size=int(is_septum.sum()))
    is_path = labels == PATHOLOGY
    ct[is_path] = rng.uniform(*p.pathology_hu, size=int(is_path.sum()))
    ct = np.clip(ct, HU_MIN, HU_MAX)

    # MR: class means, additive noise, multiplicative bias, then z-score
    means = np.full(shape, p.mr_air_mean)
    means[is_tissue] = p.mr_tissue_mean
    means[is_skull | is_septum | is_path] = p.mr_bone_mean
    means[edge] = bone_share[edge] * p.mr_bone_mean + (1.0 - bone_share[edge]) * p.mr_tissue_mean
    mr_raw = (means + p.mr_noise_sigma * rng.standard_normal(shape)) * _bias_field(rng, n, p.bias_amplitude)
    mr = z_score_normalize(mr_raw)

    geometry = {
        "body": {"center": [round(cy, 4), round(cx, 4)], "axes": [round(ry, 4), round(rx, 4)],
                 "angle": round(float(angle), 6)},
        "scalp_px": round(scalp, 4),
        "skull_thickness_px": round(thickness, 4),
        "pockets": pocket_desc,
        "pathology": path_desc,
    }
    sample = PhantomSample(
        mr=mr.astype(np.float32),
        ct=ct.astype(np.float32),
        body=body,
        seed=int(seed),
        geometry=geometry,
    )
    return PhantomRender(sample=sample, mr_raw=mr_raw, labels=labels, geometry=geometry)


def generate_phantom(params: PhantomParams | None = None, seed: int = 0) -> PhantomSample:
    return render_phantom(params, seed).sample


def sample_seed(master_seed: int, split: str, index: int) -> int:
    digest = hashlib.blake2b(f"{int(master_seed)}:{split}:{int(index)}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1  # keep it a positive int63


def dataset_plan(n_train: int, n_val: int, n_test: int, master_seed: int):
    counts = {"train": n_train, "val": n_val, "test": n_test}
    for split, c in counts.items():
        if int(c) < 1:
            raise ContractError(f"{split} count must be >= 1, got {c}")
    return {
        split: [(f"{split}-{i:04d}", sample_seed(master_seed, split, i)) for i in range(int(c))]
        for split, c in counts.items()
    }


def generate_dataset(out_dir, n_train: int = 120, n_val: int = 20, n_test: int = 40,
                     params: PhantomParams | None = None, master_seed: int = 0,
                     overwrite: bool = False) -> dict[str, Path]:
    """Write train/val/test sample directories plus ``dataset.json``."""
    params = params or PhantomParams()
    plan = dataset_plan(n_train, n_val, n_test, master_seed)
    out = Path(out_dir)
    targets = [out / s for s in SPLITS] + [out / "dataset.json"]
    if any(t.exists() for t in targets):
        if not overwrite:
            raise FileExistsError(f"{out} already holds a dataset; pass overwrite=True to replace it")
        for t in targets:
            if t.is_dir():
                shutil.rmtree(t)
            elif t.exists():
                t.unlink()
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"master_seed": int(master_seed), "params": params.to_dict(), "splits": {}}
    for split, entries in plan.items():
        for sid, seed in entries:
            sample = generate_phantom(params, seed)
            write_sample(sample, out / split / sid)
        manifest["splits"][split] = [{"id": sid, "seed": seed} for sid, seed in entries]
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return {s: out / s for s in SPLITS}


def generate_samples(n: int, params: PhantomParams | None = None, master_seed: int = 0,
                     split: str = "train") -> list[PhantomSample]:
    """In-memory counterpart of one split of :func:`generate_dataset`."""
    out = []
    for i in range(n):
        s = generate_phantom(params, sample_seed(master_seed, split, i))
        s.id = f"{split}-{i:04d}"
        out.append(s)
    return out
