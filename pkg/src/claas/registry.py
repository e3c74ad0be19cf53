"""Model versioning on top of a pluggable blob store.

Layout under the store::

    experiments/<id>/config.json
    experiments/<id>/versions.jsonl          one JSON line per committed version
    experiments/<id>/runs/<r>/v<n>.clbw       weights
    experiments/<id>/runs/<r>/v<n>.state.npz  full strategy state (buffer, store)
    experiments/<id>/runs/<r>/v<n>.metrics.json
"""

from __future__ import annotations

import json
import os
import tempfile
import threading
from collections import defaultdict
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Protocol

from . import nn
from .errors import Conflict, InvalidKey, NotFound, StorageError
from .strategies import StrategyConfig, StrategyState


def utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds").replace("+00:00", "Z")


class BlobStore(Protocol):
    def put(self, key: str, data: bytes) -> None: ...

    def get(self, key: str) -> bytes: ...

    def exists(self, key: str) -> bool: ...

    def delete(self, key: str) -> None: ...

    def list(self, prefix: str = "") -> list[str]: ...


def validate_key(key: str) -> str:
    if not isinstance(key, str) or not key:
        raise InvalidKey("storage key must be a non-empty string")
    try:
        key.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise InvalidKey(f"key is not valid UTF-8: {key!r}") from exc
    if key.startswith("/") or "\\" in key or "\x00" in key:
        raise InvalidKey(f"invalid storage key {key!r}")
    for seg in key.split("/"):
        if seg in ("", ".", "..") or seg.startswith(".tmp-"):
            raise InvalidKey(f"invalid segment {seg!r} in storage key {key!r}")
    return key


class FsBlobStore:
    """Filesystem-backed store; every put is a temp-file write followed by a rename."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StorageError(f"cannot create storage root {self.root}: {exc}") from exc
        if not os.access(self.root, os.W_OK | os.X_OK):
            raise StorageError(f"storage root {self.root} is not writable")

    def _path(self, key: str) -> Path:
        return self.root.joinpath(*validate_key(key).split("/"))

    def put(self, key: str, data: bytes) -> None:
        path = self._path(key)
        tmp_name = None
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp_name = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp_name, path)
            tmp_name = None
        except OSError as exc:
            raise StorageError(f"put {key!r} failed: {exc}") from exc
        finally:
            if tmp_name is not None:
                try:
                    os.unlink(tmp_name)
                except OSError:
                    pass

    def get(self, key: str) -> bytes:
        path = self._path(key)
        try:
            return path.read_bytes()
        except FileNotFoundError as exc:
            raise NotFound(f"no blob at {key!r}") from exc
        except OSError as exc:
            raise StorageError(f"get {key!r} failed: {exc}") from exc

    def exists(self, key: str) -> bool:
        return self._path(key).is_file()

    def delete(self, key: str) -> None:
        try:
            self._path(key).unlink()
        except FileNotFoundError as exc:
            raise NotFound(f"no blob at {key!r}") from exc
        except OSError as exc:
            raise StorageError(f"delete {key!r} failed: {exc}") from exc

    def list(self, prefix: str = "") -> list[str]:
        keys = []
        for dirpath, _, files in os.walk(self.root):
            for name in files:
                if name.startswith(".tmp-"):
                    continue
                rel = Path(dirpath, name).relative_to(self.root).as_posix()
                if rel.startswith(prefix):
                    keys.append(rel)
        return sorted(keys)


def fs_store(root_dir: str | os.PathLike) -> FsBlobStore:
    return FsBlobStore(root_dir)


@dataclass(frozen=True)
class ModelVersion:
    experiment_id: str
    run: int
    version: int
    parent_version: int | None
    created_at: str
    strategy_snapshot: dict
    weights_key: str
    metrics_key: str | None
    state_key: str
    job_id: str | None = None
    experience_index: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelVersion":
        return cls(**d)


def experiment_prefix(experiment_id: str) -> str:
    validate_key(experiment_id)
    if "/" in experiment_id:
        raise InvalidKey(f"experiment id may not contain '/': {experiment_id!r}")
    return f"experiments/{experiment_id}"


class Registry:
    """Versioned model store; writes to one experiment are serialized here."""

    def __init__(self, store: BlobStore):
        self.store = store
        self._locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._guard = threading.Lock()
        self._index: dict[str, list[ModelVersion]] = {}

    def lock(self, experiment_id: str) -> threading.Lock:
        with self._guard:
            return self._locks[experiment_id]

    # experiments

    def create_experiment(self, experiment_id: str, config: dict) -> None:
        prefix = experiment_prefix(experiment_id)
        with self.lock(experiment_id):
            if self.store.exists(f"{prefix}/config.json"):
                raise Conflict(f"experiment {experiment_id!r} already exists", code="DuplicateExperiment")
            self.store.put(f"{prefix}/config.json", json.dumps(config, sort_keys=True).encode())

    def has_experiment(self, experiment_id: str) -> bool:
        try:
            return self.store.exists(f"{experiment_prefix(experiment_id)}/config.json")
        except InvalidKey:
            return False

    def experiment_config(self, experiment_id: str) -> dict:
        if not self.has_experiment(experiment_id):
            raise NotFound(f"unknown experiment {experiment_id!r}")
        return json.loads(self.store.get(f"{experiment_prefix(experiment_id)}/config.json"))

    def list_experiments(self) -> list[str]:
        return sorted(
            k.split("/")[1] for k in self.store.list("experiments/") if k.endswith("/config.json") and k.count("/") == 2
        )

    # versions

    def _journal(self, experiment_id: str) -> list[ModelVersion]:
        if experiment_id not in self._index:
            key = f"{experiment_prefix(experiment_id)}/versions.jsonl"
            entries = []
            if self.store.exists(key):
                for line in self.store.get(key).decode().splitlines():
                    if line.strip():
                        entries.append(ModelVersion.from_dict(json.loads(line)))
            self._index[experiment_id] = entries
        return self._index[experiment_id]

    def commit_version(
        self,
        experiment_id: str,
        state: StrategyState,
        cfg: StrategyConfig,
        metrics_ref: dict | str | None = None,
        *,
        run: int = 0,
        job_id: str | None = None,
        experience_index: int | None = None,
    ) -> ModelVersion:
        """Persist weights, state and metrics, then append the journal entry.

        The journal line is written last, so a failure at any point leaves no
        record behind.
        """
        if not self.has_experiment(experiment_id):
            raise NotFound(f"unknown experiment {experiment_id!r}")
        prefix = experiment_prefix(experiment_id)
        with self.lock(experiment_id):
            journal = self._journal(experiment_id)
            previous = [v.version for v in journal if v.run == run]
            version = max(previous, default=0) + 1
            base = f"{prefix}/runs/{run}/v{version}"
            weights_key, state_key = f"{base}.clbw", f"{base}.state.npz"
            if isinstance(metrics_ref, dict):
                metrics_key = f"{base}.metrics.json"
            else:
                metrics_key = metrics_ref
            written = []
            try:
                self.store.put(weights_key, nn.serialize_params(state.params))
                written.append(weights_key)
                self.store.put(state_key, state.to_bytes())
                written.append(state_key)
                if isinstance(metrics_ref, dict):
                    self.store.put(metrics_key, json.dumps(metrics_ref, sort_keys=True).encode())
                    written.append(metrics_key)
                stateful = cfg.name in ("naive", "replay")
                record = ModelVersion(
                    experiment_id=experiment_id,
                    run=run,
                    version=version,
                    parent_version=version - 1 if stateful and version > 1 else None,
                    created_at=utcnow(),
                    strategy_snapshot=cfg.to_dict(),
                    weights_key=weights_key,
                    metrics_key=metrics_key,
                    state_key=state_key,
                    job_id=job_id,
                    experience_index=experience_index,
                )
                journal_key = f"{prefix}/versions.jsonl"
                lines = [json.dumps(v.to_dict(), sort_keys=True) for v in journal + [record]]
                self.store.put(journal_key, ("\n".join(lines) + "\n").encode())
            except Exception as exc:
                for key in written:
                    try:
                        self.store.delete(key)
                    except Exception:
                        pass
                if isinstance(exc, StorageError):
                    raise
                raise StorageError(f"commit failed: {exc}") from exc
            journal.append(record)
            return record

    def list_versions(self, experiment_id: str, run: int | None = None) -> list[ModelVersion]:
        if not self.has_experiment(experiment_id):
            raise NotFound(f"unknown experiment {experiment_id!r}")
        with self.lock(experiment_id):
            journal = list(self._journal(experiment_id))
        return [v for v in journal if run is None or v.run == run]

    def latest(self, experiment_id: str, run: int = 0) -> ModelVersion | None:
        versions = self.list_versions(experiment_id, run)
        return max(versions, key=lambda v: v.version) if versions else None

    def get_version(self, experiment_id: str, version: int, run: int = 0) -> tuple[ModelVersion, bytes]:
        for v in self.list_versions(experiment_id, run):
            if v.version == version:
                return v, self.store.get(v.weights_key)
        raise NotFound(f"experiment {experiment_id!r} run {run} has no version {version}")

    def load_state(self, record: ModelVersion) -> StrategyState:
        return StrategyState.from_bytes(self.store.get(record.state_key))

    def load_metrics(self, record: ModelVersion) -> dict | None:
        if record.metrics_key is None:
            return None
        return json.loads(self.store.get(record.metrics_key))

    # generic JSON documents (experiences, jobs, audit log)

    def put_json(self, key: str, doc) -> None:
        self.store.put(key, json.dumps(doc, sort_keys=True).encode())

    def get_json(self, key: str):
        return json.loads(self.store.get(key))
