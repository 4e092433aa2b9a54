"""Command-line entry point: ``sparsefocus {phantom,train,predict,eval,ablate}``.

Exit codes: 0 success, 1 I/O failure, 2 usage or contract error,
3 numerical failure or partially failed sweep.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import __version__
from .ablation import failed_runs, run_ablation
from .errors import ContractError, MissingFileError, NumericalError, SampleFormatError
from .evaluation import DEFAULT_THRESHOLDS, difference_map, evaluate_case, predict, render_report, summarize
from .imaging import list_sample_dirs, load_dataset, read_plane, read_sample, write_planes
from .manifest import write_manifest
from .network import load_checkpoint
from .phantom import PhantomParams, generate_dataset
from .trainer import TrainConfig
from .variants import VARIANT_ORDER, Variant

log = logging.getLogger("sparsefocus")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("threshold list is empty")
    return vals


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _variant_list(text: str) -> list[Variant]:
    try:
        return [Variant.parse(x) for x in text.split(",") if x.strip()]
    except ContractError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def thread_budget() -> int:
    """Cap from SPARSEFOCUS_THREADS, else every core."""
    raw = os.environ.get("SPARSEFOCUS_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SPARSEFOCUS_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise UsageError("SPARSEFOCUS_THREADS must be >= 1")
    return n


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    if getattr(args, "batch_size", None) is not None:
        changes["batch_size"] = args.batch_size
    return dataclasses.replace(cfg, **changes) if changes else cfg


# ----------------------------------------------------------------------------
# commands


def cmd_phantom(args, argv) -> int:
    params = PhantomParams()
    if args.params:
        params = PhantomParams.from_dict(json.loads(Path(args.params).read_text()))
    if args.size is not None:
        params = dataclasses.replace(params, size=args.size)
    generate_dataset(args.out, args.train, args.val, args.test, params, args.seed, overwrite=args.overwrite)
    return EXIT_OK


def cmd_train(args, argv) -> int:
    from .trainer import train

    cfg = _load_config(args)
    variant = Variant.parse(args.variant)
    run_dir = Path(args.out)
    if not Path(args.data).is_dir():
        raise MissingFileError(f"dataset directory {args.data} does not exist")
    manifest = dict(command=["sparsefocus", *argv], config_hash=cfg.hash(variant), seeds=[cfg.seed],
                    variant=variant.value)
    write_manifest(run_dir, **manifest)
    (run_dir / "config.json").write_text(json.dumps({**cfg.to_dict(), "variant": variant.value},
                                                    indent=2) + "\n")
    dataset = load_dataset(args.data)
    try:
        train(dataset, cfg, variant, run_dir=run_dir)
    except NumericalError:
        write_manifest(run_dir, **manifest, status="failed")
        raise
    write_manifest(run_dir, **manifest, status="ok")
    return EXIT_OK


def resolve_checkpoint(model_path: Path) -> Path:
    if (model_path / "model.json").is_file():
        return model_path
    selected = model_path / "selected.json"
    if not selected.is_file():
        raise SampleFormatError(f"{model_path} is neither a checkpoint nor a run directory")
    name = json.loads(selected.read_text())["path"]
    if not name:
        raise SampleFormatError(f"{selected} names no checkpoint")
    return model_path / name


def cmd_predict(args, argv) -> int:
    ckpt = resolve_checkpoint(Path(args.model))
    model = load_checkpoint(ckpt)
    requested = args.outputs or list(model.variant.heads)
    unknown = [h for h in requested if h not in model.variant.heads]
    if unknown:
        raise UsageError(f"model variant {model.variant.value} has no {unknown} head(s)")
    samples = [read_sample(d) for d in list_sample_dirs(args.input)]
    if not samples:
        raise SampleFormatError(f"no samples under {args.input}")
    out = Path(args.out)
    preds = predict(model, [s.mr for s in samples], args.mask_threshold)
    for sample, planes in zip(samples, preds):
        to_write = {"sct": planes["aggregate"]}
        to_write.update({h: planes[h] for h in requested if h != "sct"})
        write_planes(out / sample.id, to_write, seed=sample.seed)
    extra = json.loads((ckpt / "model.json").read_text()).get("extra", {})
    run_cfg = ckpt.parent / "config.json"
    info = {
        "variant": model.variant.value,
        "seed": json.loads(run_cfg.read_text()).get("seed", 0) if run_cfg.is_file() else 0,
        "config_hash": "",
        "checkpoint_epoch": extra.get("epoch"),
        "mask_threshold": args.mask_threshold,
    }
    manifest = ckpt.parent / "manifest.json"
    if manifest.is_file():
        info["config_hash"] = json.loads(manifest.read_text()).get("config_hash", "")
    (out / "prediction.json").write_text(json.dumps(info, indent=2) + "\n")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    pred_root, ref_root = Path(args.pred), Path(args.ref)
    preds = {d.name: d for d in list_sample_dirs(pred_root)}
    refs = {d.name: d for d in list_sample_dirs(ref_root)}
    unpaired = sorted(set(preds) ^ set(refs))
    if unpaired:
        raise UsageError("unpaired case ids: " + ", ".join(unpaired))
    out = Path(args.out)
    diff_root = out.parent / "diffmaps"
    cases = []
    for case_id in sorted(refs):
        ref = read_sample(refs[case_id])
        sct = read_plane(preds[case_id], "sct")
        if sct.shape != ref.shape:
            raise UsageError(f"case {case_id}: prediction shape {sct.shape} != reference {ref.shape}")
        cases.append(evaluate_case(sct, ref.ct, ref.body, args.thresholds, case_id))
        write_planes(diff_root / case_id, {"diff": difference_map(sct, ref.ct)}, seed=ref.seed)
    meta = {"variant": "", "seed": 0, "config_hash": ""}
    info = pred_root / "prediction.json"
    if info.is_file():
        doc = json.loads(info.read_text())
        meta.update({k: doc[k] for k in ("variant", "seed", "config_hash") if k in doc})
    report = summarize(cases, meta)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_report(report, "json"))
    for fmt, suffix in (("csv", ".csv"), ("markdown", ".md")):
        out.with_suffix(suffix).write_text(render_report(report, fmt))
    return EXIT_OK


def cmd_ablate(args, argv) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    if not Path(args.data).is_dir():
        raise MissingFileError(f"dataset directory {args.data} does not exist")
    manifest = dict(command=["sparsefocus", *argv], config_hash=cfg.hash(), seeds=args.seeds,
                    variants=[v.value for v in args.variants])
    write_manifest(out, **manifest)
    dataset = load_dataset(args.data)
    if not dataset.test:
        raise UsageError(f"{args.data} has no test split")
    report = run_ablation(dataset, args.variants, args.seeds, cfg, out_dir=out,
                          thresholds=args.thresholds, jobs=args.jobs)
    (out / "report.json").write_text(report.to_json())
    (out / "report.md").write_text(render_report(report, "markdown"))
    (out / "report.csv").write_text(render_report(report, "csv"))
    failures = failed_runs(report)
    write_manifest(out, **manifest, status="partial" if failures else "ok")
    if failures:
        for f in failures:
            log.error("run %s seed %s failed: %s", f["variant"], f["seed"], f.get("error"))
        return EXIT_NUMERIC
    return EXIT_OK


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsefocus", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a paired phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=_positive_int, default=120)
    p.add_argument("--val", type=_positive_int, default=20)
    p.add_argument("--test", type=_positive_int, default=40)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--params", help="JSON file of phantom parameters")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_phantom)

    variant_names = [v.value for v in VARIANT_ORDER]
    p = sub.add_parser("train", help="train one network variant")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", required=True, choices=variant_names)
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--batch-size", type=_positive_int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict aggregated sCT planes")
    p.add_argument("--model", required=True, help="run directory or checkpoint directory")
    p.add_argument("--input", required=True, help="sample directory or directory of samples")
    p.add_argument("--out", required=True)
    p.add_argument("--mask-threshold", type=float, default=0.5)
    p.add_argument("--outputs", type=lambda s: [x for x in s.split(",") if x],
                   help="heads to write, e.g. sct,bone,mask (default: all heads of the model)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="region-wise evaluation of predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--thresholds", type=_float_list, default=list(DEFAULT_THRESHOLDS))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate every (variant, seed)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", type=_variant_list, default=list(VARIANT_ORDER))
    p.add_argument("--seeds", type=_int_list, default=[1, 2, 3])
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--thresholds", type=_float_list, default=list(DEFAULT_THRESHOLDS))
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        torch.set_num_threads(thread_budget())
        return args.func(args, argv)
    except (UsageError, ContractError) as exc:
        print(f"sparsefocus {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"sparsefocus {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, SampleFormatError) as exc:
        print(f"sparsefocus {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
