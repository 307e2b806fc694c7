"""Filesystem stand-in for cloud object storage of model versions.

Layout::

    <root>/objects/<sha256 hex>           parameter blobs, content addressed
    <root>/<task_id>/manifest.jsonl       one JSON record per version
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

from .detection import ArchConfig, ModelParams, params_from_bytes, params_to_bytes

MANIFEST_FIELDS = ("task_id", "version", "round", "digest_hex", "bytes", "created_at_unix_ms")


class NotFound(KeyError):
    pass


class IntegrityError(IOError):
    pass


@dataclass(frozen=True)
class ModelVersionRecord:
    task_id: str
    version: int
    round: int
    digest_hex: str
    bytes: int
    created_at_unix_ms: int

    @property
    def digest(self) -> bytes:
        return bytes.fromhex(self.digest_hex)


class ModelStore:
    def __init__(self, root: Path | str):
        self.root = Path(root)
        self._locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._guard = threading.Lock()

    def _lock(self, task_id: str) -> threading.Lock:
        with self._guard:
            return self._locks[task_id]

    def manifest_path(self, task_id: str) -> Path:
        return self.root / task_id / "manifest.jsonl"

    def object_path(self, digest_hex: str) -> Path:
        return self.root / "objects" / digest_hex

    def records(self, task_id: str) -> list[ModelVersionRecord]:
        path = self.manifest_path(task_id)
        if not path.exists():
            return []
        out = []
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                out.append(ModelVersionRecord(**json.loads(line)))
        for k, rec in enumerate(out, start=1):
            if rec.version != k:
                raise IntegrityError(f"{path}: version gap at {rec.version} (expected {k})")
        return out

    def store_model(self, task_id: str, round: int, params: ModelParams) -> ModelVersionRecord:
        blob = params_to_bytes(params)
        digest = hashlib.sha256(blob).hexdigest()
        with self._lock(task_id):
            obj = self.object_path(digest)
            obj.parent.mkdir(parents=True, exist_ok=True)
            if not obj.exists():
                tmp = obj.with_suffix(f".tmp{os.getpid()}.{threading.get_ident()}")
                with open(tmp, "wb") as f:
                    f.write(blob)
                    f.flush()
                    os.fsync(f.fileno())
                os.replace(tmp, obj)
            if hashlib.sha256(obj.read_bytes()).hexdigest() != digest:
                raise IntegrityError(f"read-back digest mismatch for {digest}")
            prior = self.records(task_id)
            rec = ModelVersionRecord(
                task_id=task_id,
                version=len(prior) + 1,
                round=round,
                digest_hex=digest,
                bytes=len(blob),
                created_at_unix_ms=int(time.time() * 1000),
            )
            manifest = self.manifest_path(task_id)
            manifest.parent.mkdir(parents=True, exist_ok=True)
            with open(manifest, "a", encoding="utf-8") as f:
                f.write(json.dumps(asdict(rec)) + "\n")
                f.flush()
                os.fsync(f.fileno())
        return rec

    def record(self, task_id: str, version: int | None = None) -> ModelVersionRecord:
        recs = self.records(task_id)
        if not recs:
            raise NotFound(f"no versions stored for task {task_id!r}")
        if version is None:
            return recs[-1]
        if not 1 <= version <= len(recs):
            raise NotFound(f"task {task_id!r} has no version {version}")
        return recs[version - 1]

    def load_bytes(self, task_id: str, version: int | None = None) -> bytes:
        rec = self.record(task_id, version)
        path = self.object_path(rec.digest_hex)
        if not path.exists():
            raise NotFound(f"object {rec.digest_hex} missing")
        blob = path.read_bytes()
        if hashlib.sha256(blob).hexdigest() != rec.digest_hex:
            raise IntegrityError(f"object {rec.digest_hex} fails digest check")
        return blob

    def load_model(self, task_id: str, version: int | None = None, arch: ArchConfig | None = None) -> ModelParams:
        return params_from_bytes(self.load_bytes(task_id, version), arch)
