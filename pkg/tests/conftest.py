"""Shared fixtures. The desk-scale ablation sweep is expensive, so it runs at
most once per session and is shared by every test that needs trained models."""

import json
import os
from pathlib import Path

import pytest

from sparsefocus.ablation import load_ablation, run_ablation
from sparsefocus.imaging import Dataset
from sparsefocus.network import ModelConfig
from sparsefocus.phantom import generate_samples
from sparsefocus.trainer import TrainConfig
from sparsefocus.variants import VARIANT_ORDER

ABLATION_SEEDS = (1, 2, 3)

# Desk profile for the 4 x 3 sweep on one CPU core: the default phantom
# dataset at full size, a narrower two-level trunk and a shorter schedule.
DESK_PROFILE = TrainConfig(
    epochs=15,
    batch_size=15,
    model=ModelConfig(levels=2, base_channels=8, dilation_schedule=(1, 2)),
)


@pytest.fixture(scope="session")
def default_dataset():
    """The default phantom dataset (120/20/40 at 96 px, master seed 0), in memory."""
    return Dataset(
        train=generate_samples(120, None, 0, "train"),
        val=generate_samples(20, None, 0, "val"),
        test=generate_samples(40, None, 0, "test"),
    )


@pytest.fixture(scope="session")
def ablation_report(default_dataset, tmp_path_factory):
    # SPARSEFOCUS_ABLATION_DIR points at a finished sweep to reuse it
    reuse = os.environ.get("SPARSEFOCUS_ABLATION_DIR")
    if reuse and (Path(reuse) / "report.json").is_file():
        return load_ablation(Path(reuse) / "report.json")
    out = Path(reuse) if reuse else tmp_path_factory.mktemp("ablation")
    report = run_ablation(default_dataset, VARIANT_ORDER, ABLATION_SEEDS, DESK_PROFILE, out_dir=out)
    (out / "report.json").write_text(report.to_json())
    (out / "profile.json").write_text(json.dumps(DESK_PROFILE.to_dict(), indent=2) + "\n")
    return report


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
