"""Head aggregation and region-wise sCT evaluation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .imaging import (
    BONE_MIN,
    binarize,
    check_image,
    check_mask,
    check_same_shape,
    clamp_hu,
    derive_body_mask,
    dice_coefficient,
    partition_regions,
)
from .network import SparseFocusNet, forward
from .variants import VARIANT_ORDER, Variant

REGIONS = ("body", "bone", "tissue", "air")
DEFAULT_THRESHOLDS = (250.0, 450.0, 600.0, 900.0, 1200.0, 1500.0)


def aggregate_sct(planes: dict, variant=Variant.THREE_TASK, mask_threshold: float = 0.5) -> np.ndarray:
    """Compose the final sCT (HU) from per-head HU planes.

    3TN: bone-head values replace the sCT head wherever the mask head is at
    or above ``mask_threshold``. 2TN has no mask head, so the replacement
    region is where the sCT head itself reads bone (>= 250 HU).
    """
    variant = Variant.parse(variant)
    missing = [h for h in variant.heads if planes.get(h) is None]
    if missing:
        raise ContractError(f"variant {variant.value} aggregation needs heads {missing}")
    sct = np.asarray(planes["sct"], dtype=np.float64)
    if variant is Variant.THREE_TASK:
        region = binarize(planes["mask"], mask_threshold)
    elif variant is Variant.TWO_TASK:
        region = sct >= BONE_MIN
    else:
        return clamp_hu(sct)
    bone = np.asarray(planes["bone"], dtype=np.float64)
    check_same_shape(sct, bone, region, names=("sct", "bone", "region"))
    return clamp_hu(np.where(region, bone, sct))


def predict(model: SparseFocusNet, mr_images, mask_threshold: float = 0.5,
            batch_size: int = 16) -> list[dict[str, np.ndarray]]:
    """Eval-mode prediction. Each result holds the head planes in HU (mask as
    probability) and the aggregated ``"aggregate"`` sCT."""
    results = []
    mr_images = [np.asarray(m, dtype=np.float32) for m in mr_images]
    for start in range(0, len(mr_images), batch_size):
        chunk = np.stack(mr_images[start:start + batch_size])[:, None]
        outputs = forward(model, chunk, train=False).numpy()
        for i in range(chunk.shape[0]):
            planes = {}
            for name, arr in outputs.items():
                plane = arr[i].astype(np.float64)
                planes[name] = plane if name == "mask" else plane / model.value_scale
            planes["aggregate"] = aggregate_sct(planes, model.variant, mask_threshold)
            results.append(planes)
    return results


def difference_map(sct, ct) -> np.ndarray:
    sct = check_image(sct, "sct").astype(np.float64)
    ct = check_image(ct, "ct").astype(np.float64)
    check_same_shape(sct, ct, names=("sct", "ct"))
    return sct - ct


def dice_at_thresholds(sct, ct, thresholds=DEFAULT_THRESHOLDS, body_sct=None, body_ct=None):
    """Hard Dice of ``{ct >= t}`` vs ``{sct >= t}`` inside the union of both body masks."""
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ContractError("threshold list is empty")
    sct = check_image(sct, "sct")
    ct = check_image(ct, "ct")
    check_same_shape(sct, ct, names=("sct", "ct"))
    body_ct = derive_body_mask(ct) if body_ct is None else body_ct
    body_sct = derive_body_mask(sct) if body_sct is None else body_sct
    union = body_ct | body_sct
    return [(t, dice_coefficient((ct >= t) & union, (sct >= t) & union)) for t in thresholds]


@dataclass
class CaseMetrics:
    id: str
    mae: dict[str, float | None]
    dice: dict[str, float]
    dice_curve: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "mae": dict(self.mae),
            "dice": dict(self.dice),
            "dice_curve": {
                "thresholds": [t for t, _ in self.dice_curve],
                "values": [v for _, v in self.dice_curve],
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CaseMetrics":
        curve = list(zip(d["dice_curve"]["thresholds"], d["dice_curve"]["values"]))
        return cls(id=d["id"], mae=dict(d["mae"]), dice=dict(d["dice"]), dice_curve=curve)

    def curve_value(self, threshold: float) -> float:
        for t, v in self.dice_curve:
            if t == threshold:
                return v
        raise KeyError(threshold)


def evaluate_case(sct, ct, body_ref, thresholds=DEFAULT_THRESHOLDS, case_id: str = "") -> CaseMetrics:
    sct = check_image(sct, "sct").astype(np.float64)
    ct = check_image(ct, "ct").astype(np.float64)
    body_ref = check_mask(body_ref, "body_ref")
    check_same_shape(sct, ct, body_ref, names=("sct", "ct", "body_ref"))

    ref = partition_regions(ct, body_ref)
    err = np.abs(sct - ct)
    mae = {}
    for name in REGIONS:
        region = ref.region(name)
        mae[name] = float(err[region].mean()) if region.any() else None

    body_ct = derive_body_mask(ct)
    body_sct = derive_body_mask(sct)
    part_ct = partition_regions(ct, body_ct)
    part_sct = partition_regions(sct, body_sct)
    dice = {name: dice_coefficient(part_ct.region(name), part_sct.region(name)) for name in REGIONS}
    curve = dice_at_thresholds(sct, ct, thresholds, body_sct=body_sct, body_ct=body_ct)
    return CaseMetrics(id=case_id, mae=mae, dice=dice, dice_curve=curve)


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None}
    arr = np.asarray(vals, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std}


@dataclass
class Report:
    cases: list[CaseMetrics]
    summary: dict
    metadata: dict

    def to_dict(self) -> dict:
        return {
            "metadata": dict(self.metadata),
            "cases": [c.to_dict() for c in self.cases],
            "summary": self.summary,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        return cls(cases=[CaseMetrics.from_dict(c) for c in d["cases"]], summary=d["summary"],
                   metadata=d["metadata"])

    def rows(self):
        return [(self.metadata.get("variant", ""), self.summary)]


def summarize(cases, metadata: dict | None = None) -> Report:
    cases = sorted(cases, key=lambda c: c.id)
    if not cases:
        raise ContractError("cannot summarize an empty case list")
    summary = {
        "mae": {r: _mean_std([c.mae.get(r) for c in cases]) for r in REGIONS},
        "dice": {r: _mean_std([c.dice.get(r) for c in cases]) for r in REGIONS},
    }
    thresholds = [t for t, _ in cases[0].dice_curve]
    if thresholds and all([t for t, _ in c.dice_curve] == thresholds for c in cases):
        stats = [_mean_std([c.dice_curve[i][1] for c in cases]) for i in range(len(thresholds))]
        summary["dice_curve"] = {
            "thresholds": thresholds,
            "mean": [s["mean"] for s in stats],
            "std": [s["std"] for s in stats],
        }
    meta = {"variant": "", "seed": 0, "config_hash": ""}
    meta.update(metadata or {})
    return Report(cases=cases, summary=summary, metadata=meta)


def average_summaries(summaries: list[dict]) -> dict:
    """Per-field mean of several summaries (e.g. one per seed); nulls skipped."""
    def avg(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    out = {}
    for group in ("mae", "dice"):
        out[group] = {
            r: {k: avg([s[group][r][k] for s in summaries]) for k in ("mean", "std")}
            for r in REGIONS
        }
    curves = [s.get("dice_curve") for s in summaries]
    if all(curves) and all(c["thresholds"] == curves[0]["thresholds"] for c in curves):
        out["dice_curve"] = {
            "thresholds": curves[0]["thresholds"],
            "mean": [avg(v) for v in zip(*[c["mean"] for c in curves])],
            "std": [avg(v) for v in zip(*[c["std"] for c in curves])],
        }
    return out


@dataclass
class AblationReport:
    """Per-variant summaries averaged over seeds, plus every per-run report."""

    variants: dict[str, dict]
    runs: list[dict]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "variants": self.variants, "runs": self.runs}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def rows(self):
        ordered = [v.value for v in VARIANT_ORDER if v.value in self.variants]
        return [(name, self.variants[name]["summary"]) for name in ordered]


def csv_header() -> list[str]:
    cols = ["variant"]
    for group in ("mae", "dice"):
        for r in REGIONS:
            cols += [f"{group}_{r}_mean", f"{group}_{r}_std"]
    return cols


def _fmt(v, digits=6):
    return "" if v is None else f"{v:.{digits}f}"


def _pm(stat, digits):
    if stat["mean"] is None:
        return "n/a"
    return f"{stat['mean']:.{digits}f} ± {stat['std']:.{digits}f}"


def render_report(report, fmt: str = "json") -> str:
    if fmt == "json":
        return report.to_json()
    rows = report.rows()
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(csv_header())
        for label, summary in rows:
            line = [label]
            for group in ("mae", "dice"):
                for r in REGIONS:
                    stat = summary[group][r]
                    line += [_fmt(stat["mean"]), _fmt(stat["std"])]
            writer.writerow(line)
        return buf.getvalue()
    if fmt == "markdown":
        lines = [
            "| Method | MAE_body | MAE_bone | MAE_tissue | MAE_air |",
            "|---|---|---|---|---|",
        ]
        lines += [f"| {label} | " + " | ".join(_pm(s["mae"][r], 1) for r in REGIONS) + " |"
                  for label, s in rows]
        return "\n".join(lines) + "\n"
    raise ContractError(f"unknown report format {fmt!r}")
