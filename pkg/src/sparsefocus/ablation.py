"""Train/predict/evaluate sweeps over ablation variants and seeds."""

from __future__ import annotations

import dataclasses
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .evaluation import (
    DEFAULT_THRESHOLDS,
    AblationReport,
    Report,
    average_summaries,
    evaluate_case,
    predict,
    summarize,
)
from .imaging import write_planes
from .manifest import write_manifest
from .network import load_checkpoint
from .trainer import TrainConfig, selected_model, train
from .variants import VARIANT_ORDER, Variant

log = logging.getLogger(__name__)


def evaluate_model(model, samples, thresholds=None, metadata=None, mask_threshold=0.5,
                   pred_dir=None) -> Report:
    """Predict every sample, optionally write prediction planes, and summarize."""
    thresholds = thresholds or DEFAULT_THRESHOLDS
    preds = predict(model, [s.mr for s in samples], mask_threshold)
    cases = []
    for sample, planes in zip(samples, preds):
        if pred_dir is not None:
            out = {"sct": planes["aggregate"]}
            out.update({k: planes[k] for k in ("bone", "mask") if k in planes})
            write_planes(Path(pred_dir) / sample.id, out, seed=sample.seed)
        cases.append(evaluate_case(planes["aggregate"], sample.ct, sample.body, thresholds, sample.id))
    return summarize(cases, metadata)


def run_dir_name(variant: Variant, seed: int) -> str:
    return f"{variant.value}-s{seed}"


def run_single(dataset, variant, seed: int, cfg: TrainConfig, run_dir=None, thresholds=None) -> Report:
    variant = Variant.parse(variant)
    cfg = dataclasses.replace(cfg, seed=int(seed))
    command = ["ablate-run", variant.value, str(seed)]
    if run_dir is not None:
        write_manifest(run_dir, command, cfg.hash(variant), [seed], variant=variant.value)
        (Path(run_dir) / "config.json").write_text(
            json.dumps({**cfg.to_dict(), "variant": variant.value}, indent=2) + "\n")
    try:
        result = train(dataset, cfg, variant, run_dir=run_dir)
    except Exception:
        if run_dir is not None:
            write_manifest(run_dir, command, cfg.hash(variant), [seed], status="failed")
        raise
    if result.selected.path is not None:
        model = load_checkpoint(result.selected.path)
    else:
        model = selected_model(result)
    meta = {"variant": variant.value, "seed": int(seed), "config_hash": cfg.hash(variant)}
    pred_dir = None if run_dir is None else Path(run_dir) / "pred"
    report = evaluate_model(model, dataset.test, thresholds, meta, pred_dir=pred_dir)
    if run_dir is not None:
        (Path(run_dir) / "report.json").write_text(report.to_json())
        write_manifest(run_dir, command, cfg.hash(variant), [seed], status="ok")
    return report


def _run_job(args):
    dataset, variant, seed, cfg, run_dir, thresholds = args
    try:
        return run_single(dataset, variant, seed, cfg, run_dir, thresholds), None
    except Exception as exc:  # one failed run must not sink the sweep
        log.error("run %s seed %s failed: %s", variant, seed, exc)
        return None, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"


def run_ablation(dataset, variants=VARIANT_ORDER, seeds=(1, 2, 3), cfg: TrainConfig | None = None,
                 out_dir=None, thresholds=None, jobs: int = 1) -> AblationReport:
    cfg = cfg or TrainConfig()
    variants = [Variant.parse(v) for v in variants]
    jobs_args = []
    for v in variants:
        for s in seeds:
            run_dir = None if out_dir is None else Path(out_dir) / run_dir_name(v, s)
            jobs_args.append((dataset, v, int(s), cfg, run_dir, thresholds))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_job, jobs_args))
    else:
        outcomes = [_run_job(a) for a in jobs_args]

    per_variant: dict[str, dict] = {}
    runs = []
    for (_, v, s, _, run_dir, _), (report, error) in zip(jobs_args, outcomes):
        entry = {"variant": v.value, "seed": s, "status": "ok" if error is None else "failed",
                 "dir": None if run_dir is None else run_dir.name}
        if error is not None:
            entry["error"] = error.splitlines()[0]
        runs.append(entry)
        if report is not None:
            per_variant.setdefault(v.value, {"seeds": {}})["seeds"][str(s)] = report.to_dict()
    for block in per_variant.values():
        block["summary"] = average_summaries([r["summary"] for r in block["seeds"].values()])
    metadata = {"variants": [v.value for v in variants], "seeds": [int(s) for s in seeds],
                "config_hash": cfg.hash()}
    return AblationReport(variants=per_variant, runs=runs, metadata=metadata)


def failed_runs(report: AblationReport) -> list[dict]:
    return [r for r in report.runs if r["status"] != "ok"]


def variant_mean(report: AblationReport, variant, group: str, region: str):
    return report.variants[Variant.parse(variant).value]["summary"][group][region]["mean"]


def variant_curve(report: AblationReport, variant) -> dict[float, float]:
    curve = report.variants[Variant.parse(variant).value]["summary"]["dice_curve"]
    return dict(zip(curve["thresholds"], curve["mean"]))


def load_ablation(path) -> AblationReport:
    d = json.loads(Path(path).read_text())
    return AblationReport(variants=d["variants"], runs=d["runs"], metadata=d.get("metadata", {}))
