"""Run registry: content-addressed run directories with atomic writes.

Each run lives in ``<root>/runs/<id>/`` with a ``manifest.json`` plus whatever
artifacts the command produced. The id is a hash of the command, resolved
configuration and input fingerprints, so replaying identical inputs lands on
the identical id. Writers go through temp-file-then-rename, so a concurrent
reader never sees a partial record.
"""

from __future__ import annotations

import hashlib
import json
import os
import subprocess
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path


class RunsError(ValueError):
    pass


class UnknownRun(RunsError):
    pass


def canonical_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def run_id_for(payload: dict) -> str:
    """16-hex content hash over the replay-relevant payload."""
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()[:16]


def source_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "unknown"


def atomic_write_text(path: Path, content: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: Path, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=False) + "\n")


@dataclass
class RunRecord:
    run_id: str
    command: str
    config: dict
    dataset_fingerprints: dict
    revision: str = field(default_factory=source_revision)
    created_at: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds")
    )
    artifacts: dict = field(default_factory=dict)
    report: dict | None = None
    status: str = "ok"
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "command": self.command,
            "config": self.config,
            "dataset_fingerprints": self.dataset_fingerprints,
            "revision": self.revision,
            "created_at": self.created_at,
            "artifacts": self.artifacts,
            "report": self.report,
            "status": self.status,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            run_id=d["run_id"],
            command=d["command"],
            config=d["config"],
            dataset_fingerprints=d["dataset_fingerprints"],
            revision=d.get("revision", "unknown"),
            created_at=d.get("created_at", ""),
            artifacts=d.get("artifacts", {}),
            report=d.get("report"),
            status=d.get("status", "ok"),
            notes=d.get("notes", []),
        )


class RunRegistry:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def run_dir(self, run_id: str) -> Path:
        return self.root / "runs" / run_id

    def new_run(self, command: str, config: dict, dataset_fingerprints: dict) -> RunRecord:
        payload = {
            "command": command,
            "config": config,
            "dataset_fingerprints": dataset_fingerprints,
        }
        return RunRecord(
            run_id=run_id_for(payload),
            command=command,
            config=config,
            dataset_fingerprints=dataset_fingerprints,
        )

    def save(self, record: RunRecord) -> Path:
        rd = self.run_dir(record.run_id)
        rd.mkdir(parents=True, exist_ok=True)
        atomic_write_json(rd / "manifest.json", record.to_dict())
        return rd

    def load(self, run_id: str) -> RunRecord:
        manifest = self.run_dir(run_id) / "manifest.json"
        if not manifest.exists():
            raise UnknownRun(f"no run {run_id!r} under {self.root}")
        return RunRecord.from_dict(json.loads(manifest.read_text(encoding="utf-8")))

    def exists(self, run_id: str) -> bool:
        return (self.run_dir(run_id) / "manifest.json").exists()

    def list_runs(self) -> list[str]:
        base = self.root / "runs"
        if not base.exists():
            return []
        return sorted(p.name for p in base.iterdir() if (p / "manifest.json").exists())
