"""Run manifests: one ``manifest.json`` per run directory.

The manifest is the only run artifact that carries wall-clock timestamps, so
byte-level reproducibility checks skip it.
"""

from __future__ import annotations

import datetime as _dt
import json
from pathlib import Path

MANIFEST = "manifest.json"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def tool_version() -> str:
    from . import __version__

    return __version__


def list_artifacts(run_dir) -> list[str]:
    run_dir = Path(run_dir)
    return sorted(str(p.relative_to(run_dir)) for p in run_dir.rglob("*")
                  if p.is_file() and p.name != MANIFEST)


def write_manifest(run_dir, command, config_hash: str, seeds, status: str = "running", **extra) -> Path:
    """Create or update the manifest. The first call records ``started``;
    later calls refresh the artifact list and status."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / MANIFEST
    doc = json.loads(path.read_text()) if path.is_file() else {"started": _now()}
    doc.update({
        "command": [str(c) for c in command],
        "config_hash": config_hash,
        "seeds": [int(s) for s in seeds],
        "tool_version": tool_version(),
        "status": status,
        "updated": _now(),
        "artifacts": list_artifacts(run_dir),
    })
    doc.update(extra)
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def read_manifest(run_dir) -> dict:
    return json.loads((Path(run_dir) / MANIFEST).read_text())
