"""Durable, append-only persistence for refinement runs.

A run directory is the single source of truth the CLI and service read:

    config.json          frozen run configuration
    manifest.json        digests, status, latest iteration / codebook version
    val_labels.json      the held-out validation labels
    state.json           loop state after the last completed iteration
    iterations.jsonl     append-only, one self-delimiting record per iteration
    codebook/v{t}.json   every codebook version
    annotations.jsonl    final corpus-wide annotations
    pending.json         in-flight feedback batch, when one is parked

Crash ordering is log-before-manifest: an iteration line is appended and
fsync'd before the manifest advances, and reopening reconciles the manifest
from the log tail. Flat files keep runs single-writer, human-auditable
artifacts; a lock file enforces one writer per run.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

from . import CodebookForgeError
from .codebook import Codebook

EPOCH_TIMESTAMP = "1970-01-01T00:00:00Z"


class RunStoreError(CodebookForgeError):
    """Run directory missing, already present, or locked."""


class SequencingError(CodebookForgeError):
    """An iteration record arrived out of order."""


class CorruptionError(CodebookForgeError):
    """Persisted files disagree with each other or with their digests."""


def content_digest(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def json_line(obj: dict) -> str:
    """Canonical single-line JSON used for every append-only record."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


@dataclass
class RunManifest:
    run_id: str
    created_at: str
    config_digest: str
    corpus_digest: str
    status: str
    latest_iteration: int
    latest_codebook_version: int

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "created_at": self.created_at,
            "config_digest": self.config_digest,
            "corpus_digest": self.corpus_digest,
            "status": self.status,
            "latest_iteration": self.latest_iteration,
            "latest_codebook_version": self.latest_codebook_version,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RunManifest":
        return cls(**obj)


class RunStore:
    """One run directory; create once, append forever, read anywhere."""

    def __init__(self, root: Path, manifest: RunManifest, config: dict):
        self.root = Path(root)
        self.manifest = manifest
        self.config = config
        self._locked = False

    # --- lifecycle -------------------------------------------------------

    @classmethod
    def create(
        cls,
        root: str | Path,
        run_id: str,
        config: dict,
        corpus_digest: str,
        created_at: str | None = None,
    ) -> "RunStore":
        root = Path(root)
        if root.exists() and any(root.iterdir()):
            raise RunStoreError(f"run directory {root} already exists and is not empty")
        root.parent.mkdir(parents=True, exist_ok=True)
        config_text = json.dumps(config, sort_keys=True, ensure_ascii=False, indent=2)
        manifest = RunManifest(
            run_id=run_id,
            created_at=created_at or EPOCH_TIMESTAMP,
            config_digest=content_digest(config_text),
            corpus_digest=corpus_digest,
            status="running",
            latest_iteration=-1,
            latest_codebook_version=-1,
        )
        staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=root.parent))
        try:
            (staging / "codebook").mkdir()
            (staging / "config.json").write_text(config_text, encoding="utf-8")
            (staging / "iterations.jsonl").touch()
            (staging / "manifest.json").write_text(
                json.dumps(manifest.to_json(), sort_keys=True, indent=2),
                encoding="utf-8",
            )
            if root.exists():
                root.rmdir()
            os.rename(staging, root)
        except OSError:
            raise RunStoreError(f"could not materialize run directory {root}")
        return cls(root, manifest, config)

    @classmethod
    def open(cls, root: str | Path) -> "RunStore":
        root = Path(root)
        manifest_path = root / "manifest.json"
        if not manifest_path.exists():
            raise RunStoreError(f"no run manifest at {manifest_path}")
        manifest = RunManifest.from_json(json.loads(manifest_path.read_text(encoding="utf-8")))
        config_text = (root / "config.json").read_text(encoding="utf-8")
        if content_digest(config_text) != manifest.config_digest:
            raise CorruptionError("config.json does not match its manifest digest")
        store = cls(root, manifest, json.loads(config_text))
        store._reconcile()
        return store

    def _reconcile(self) -> None:
        """Log-before-manifest recovery: trust the log tail over the manifest."""
        records = self.iterations()
        log_latest = records[-1]["t"] if records else -1
        if log_latest < self.manifest.latest_iteration:
            raise CorruptionError(
                f"iteration log ends at t={log_latest} but manifest claims "
                f"t={self.manifest.latest_iteration}"
            )
        if log_latest > self.manifest.latest_iteration:
            self.manifest.latest_iteration = log_latest
            self._write_manifest()
        for version in range(self.manifest.latest_codebook_version + 1):
            path = self.codebook_path(version)
            if not path.exists():
                raise CorruptionError(f"missing codebook file {path}")

    # --- locking ---------------------------------------------------------

    @property
    def lock_path(self) -> Path:
        return self.root / ".lock"

    def acquire_lock(self) -> None:
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunStoreError(
                f"run {self.manifest.run_id} is locked by another writer "
                f"({self.lock_path})"
            )
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        self._locked = True

    def release_lock(self) -> None:
        if self._locked and self.lock_path.exists():
            self.lock_path.unlink()
        self._locked = False

    # --- manifest --------------------------------------------------------

    def _write_manifest(self) -> None:
        _atomic_write(
            self.root / "manifest.json",
            json.dumps(self.manifest.to_json(), sort_keys=True, indent=2),
        )

    def set_status(self, status: str) -> None:
        self.manifest.status = status
        self._write_manifest()

    # --- iteration log ----------------------------------------------------

    @property
    def log_path(self) -> Path:
        return self.root / "iterations.jsonl"

    def append_iteration(self, record: dict) -> None:
        expected = self.manifest.latest_iteration + 1
        if record.get("t") != expected:
            raise SequencingError(
                f"iteration record t={record.get('t')} but expected t={expected}"
            )
        line = json_line(record) + "\n"
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())
        self.manifest.latest_iteration = record["t"]
        self._write_manifest()

    def iterations(self) -> list[dict]:
        """All fully-persisted iteration records.

        A trailing partial line (torn write from a crash) is dropped; a
        malformed line anywhere earlier is real corruption.
        """
        if not self.log_path.exists():
            return []
        raw_lines = self.log_path.read_text(encoding="utf-8").splitlines()
        records = []
        for index, line in enumerate(raw_lines):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                if index == len(raw_lines) - 1:
                    break
                raise CorruptionError(f"malformed iteration record at line {index + 1}")
        return records

    # --- state, codebooks, labels, pending, annotations -------------------

    def write_state(self, state: dict) -> None:
        _atomic_write(self.root / "state.json", json.dumps(state, sort_keys=True, indent=2))

    def read_state(self) -> dict:
        path = self.root / "state.json"
        if not path.exists():
            raise CorruptionError(f"missing state file {path}")
        return json.loads(path.read_text(encoding="utf-8"))

    def codebook_path(self, version: int) -> Path:
        return self.root / "codebook" / f"v{version}.json"

    def write_codebook(self, cb: Codebook) -> None:
        _atomic_write(
            self.codebook_path(cb.version),
            json.dumps(cb.to_json(), sort_keys=True, ensure_ascii=False, indent=2),
        )
        if cb.version > self.manifest.latest_codebook_version:
            self.manifest.latest_codebook_version = cb.version
            self._write_manifest()

    def read_codebook(self, version: int) -> Codebook:
        path = self.codebook_path(version)
        if not path.exists():
            raise CorruptionError(f"missing codebook file {path}")
        return Codebook.from_json(json.loads(path.read_text(encoding="utf-8")))

    def write_val_labels(self, obj: dict) -> None:
        _atomic_write(self.root / "val_labels.json", json.dumps(obj, sort_keys=True, indent=2))

    def read_val_labels(self) -> dict:
        return json.loads((self.root / "val_labels.json").read_text(encoding="utf-8"))

    def write_pending(self, obj: dict | None) -> None:
        path = self.root / "pending.json"
        if obj is None:
            if path.exists():
                path.unlink()
            return
        _atomic_write(path, json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2))

    def read_pending(self) -> dict | None:
        path = self.root / "pending.json"
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    @property
    def annotations_path(self) -> Path:
        return self.root / "annotations.jsonl"

    def append_annotations(self, records: list[dict]) -> None:
        with open(self.annotations_path, "a", encoding="utf-8") as fh:
            for record in records:
                fh.write(json_line(record) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def annotations(self) -> list[dict]:
        if not self.annotations_path.exists():
            return []
        return [
            json.loads(line)
            for line in self.annotations_path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]

    # --- exports -----------------------------------------------------------

    def metrics_timeline(self) -> list[dict]:
        """Per-iteration rows backing convergence plots."""
        rows = []
        for record in self.iterations():
            metrics = record.get("metrics", {})
            row = {
                "t": record["t"],
                "acc_guide": metrics.get("acc_guide"),
                "acc_val": metrics.get("acc_val"),
                "val_carried": metrics.get("val_carried", False),
                "guide_size": metrics.get("guide_size"),
                "codebook_version": record.get("codebook_version"),
            }
            for cls_label, f1 in sorted(metrics.get("per_class_f1", {}).items()):
                row[f"f1_{cls_label}"] = f1
            rows.append(row)
        return rows

    def metrics_timeline_csv(self) -> str:
        rows = self.metrics_timeline()
        base = ["t", "acc_guide", "acc_val", "val_carried", "guide_size", "codebook_version"]
        extra = sorted({k for row in rows for k in row} - set(base))
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=base + extra)
        writer.writeheader()
        writer.writerows(rows)
        return buffer.getvalue()
