"""Versioned on-disk store for detector models.

Layout: ``<root>/<step>.<component>.<detector>/`` (each part percent-encoded,
dots included) holding ``v<N>.bin`` ModelBlob files and a ``latest`` pointer
file with the decimal version. Blobs are written to a temp file, fsynced and
renamed into place; the pointer is replaced last, the same way.
"""

from __future__ import annotations

import logging
import os
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable
from urllib.parse import quote, unquote

from .blob import DETECTOR_TAGS, CorruptBlobError, ModelBlob

log = logging.getLogger(__name__)

RETAIN = 5
_VERSION_RE = re.compile(r"^v(\d+)\.bin$")


class ModelNotFound(KeyError):
    pass


class SimulatedCrash(RuntimeError):
    """Raised by fault-injection hooks to abandon a put midway."""


def _enc(part: str) -> str:
    return quote(part, safe="").replace(".", "%2E")


@dataclass(frozen=True)
class ModelKey:
    step: str
    component: str
    detector: str

    def __post_init__(self) -> None:
        if not (self.step and self.component and self.detector):
            raise ValueError("model key parts must be non-empty")

    @property
    def dirname(self) -> str:
        return ".".join(_enc(p) for p in (self.step, self.component, self.detector))

    @classmethod
    def from_dirname(cls, name: str) -> "ModelKey":
        parts = name.split(".")
        if len(parts) != 3:
            raise ValueError(f"not a model key directory: {name!r}")
        return cls(*(unquote(p) for p in parts))

    @classmethod
    def parse(cls, text: str) -> "ModelKey":
        """``step/component/detector`` as used on the command line."""
        parts = text.split("/")
        if len(parts) != 3:
            raise ValueError(f"model key must be step/component/detector, got {text!r}")
        return cls(*parts)

    def __str__(self) -> str:
        return f"{self.step}/{self.component}/{self.detector}"


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


class ModelRepository:
    def __init__(self, root: str | os.PathLike, retain: int = RETAIN, crash_hook: Callable[[str], None] | None = None):
        self.root = Path(root)
        self.retain = retain
        # called with a stage name at each durable step; tests raise SimulatedCrash from it
        self.crash_hook = crash_hook
        self._locks: dict[ModelKey, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _lock(self, key: ModelKey) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(key, threading.Lock())

    def _hook(self, stage: str) -> None:
        if self.crash_hook is not None:
            self.crash_hook(stage)

    def key_dir(self, key: ModelKey) -> Path:
        return self.root / key.dirname

    def _pointer(self, kdir: Path) -> int | None:
        try:
            text = (kdir / "latest").read_text().strip()
        except FileNotFoundError:
            return None
        return int(text) if text.isdigit() else None

    def versions(self, key: ModelKey) -> list[int]:
        kdir = self.key_dir(key)
        if not kdir.is_dir():
            return []
        out = []
        for name in os.listdir(kdir):
            m = _VERSION_RE.match(name)
            if m:
                out.append(int(m.group(1)))
        return sorted(out)

    def keys(self) -> list[ModelKey]:
        if not self.root.is_dir():
            return []
        out = []
        for name in sorted(os.listdir(self.root)):
            try:
                key = ModelKey.from_dirname(name)
            except ValueError:
                continue
            if self._pointer(self.root / name) is not None:
                out.append(key)
        return out

    def _atomic_write(self, path: Path, data: bytes, stage: str) -> None:
        tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}-{threading.get_ident()}")
        try:
            with open(tmp, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            self._hook(f"{stage}:written")
            os.replace(tmp, path)
        except BaseException:
            try:
                tmp.unlink()
            except OSError:
                pass
            raise
        self._hook(f"{stage}:renamed")

    def put(self, key: ModelKey, payload: bytes) -> int:
        if not payload:
            raise ValueError("payload must be non-empty")
        if key.detector not in DETECTOR_TAGS:
            raise ValueError(f"unknown detector type {key.detector!r}")
        kdir = self.key_dir(key)
        with self._lock(key):
            kdir.mkdir(parents=True, exist_ok=True)
            # a crash after the blob rename but before the pointer update leaves an
            # orphan vN.bin; never reuse its number
            version = max([self._pointer(kdir) or 0, *self.versions(key)]) + 1
            blob = ModelBlob(key.detector, version, payload).encode()
            self._atomic_write(kdir / f"v{version}.bin", blob, "blob")
            self._atomic_write(kdir / "latest", f"{version}\n".encode(), "pointer")
            _fsync_dir(kdir)
            self._prune(key, version)
        return version

    def _prune(self, key: ModelKey, latest: int) -> None:
        kdir = self.key_dir(key)
        for v in self.versions(key):
            if v <= latest - self.retain:
                try:
                    (kdir / f"v{v}.bin").unlink()
                except OSError as exc:
                    log.warning("could not prune %s v%d: %s", key, v, exc)
        for name in os.listdir(kdir):
            if name.startswith(".") and ".tmp-" in name:
                try:
                    (kdir / name).unlink()
                except OSError:
                    pass

    def _read(self, key: ModelKey, version: int) -> bytes:
        path = self.key_dir(key) / f"v{version}.bin"
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise ModelNotFound(f"{key} has no version {version}") from None
        blob = ModelBlob.decode(data, source=str(path))
        if blob.version != version or blob.detector != key.detector:
            raise CorruptBlobError(f"{path}: header says {blob.detector} v{blob.version}")
        return blob.payload

    def get(self, key: ModelKey, version: int) -> bytes:
        return self._read(key, version)

    def get_latest(self, key: ModelKey) -> tuple[int, bytes]:
        kdir = self.key_dir(key)
        for _ in range(3):
            version = self._pointer(kdir)
            if version is None:
                raise ModelNotFound(str(key))
            try:
                return version, self._read(key, version)
            except ModelNotFound:
                # pruned by a concurrent writer between pointer read and file read
                continue
        raise ModelNotFound(str(key))


# ---------------------------------------------------------------------------
# warm start and periodic checkpoints


def warm_start(repo: ModelRepository, key: ModelKey, dim: int, params: dict | None = None, backend: str | None = None):
    """Return ``(detector, version)``; version is ``None`` for a cold start."""
    from .detectors import Detector

    try:
        version, payload = repo.get_latest(key)
    except ModelNotFound:
        return Detector(key.detector, dim, component=key.component, params=params, backend=backend), None
    det = Detector.from_state_bytes(payload, expected=key.detector, backend=backend)
    log.info("warm start of %s from version %d", key, version)
    return det, version


class CheckpointLoop:
    """Background thread: snapshot ``detector`` into ``repo`` every ``period`` seconds."""

    def __init__(self, repo: ModelRepository, detector, key: ModelKey, period: float):
        if period <= 0:
            raise ValueError("period must be > 0")
        self.repo = repo
        self.detector = detector
        self.key = key
        self.period = period
        self.versions: list[int] = []
        self.failures = 0
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name=f"checkpoint-{key}", daemon=True)

    def start(self) -> "CheckpointLoop":
        self._thread.start()
        return self

    def checkpoint(self) -> int | None:
        try:
            v = self.repo.put(self.key, self.detector.state_bytes())
        except Exception as exc:
            self.failures += 1
            log.error("checkpoint of %s failed: %s", self.key, exc)
            return None
        self.versions.append(v)
        return v

    def _run(self) -> None:
        while not self._stop.wait(self.period):
            self.checkpoint()

    def stop(self, final: bool = False) -> None:
        self._stop.set()
        self._thread.join()
        if final:
            self.checkpoint()

    def __enter__(self) -> "CheckpointLoop":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def checkpoint_loop(detector, key: ModelKey, period: float, repo: ModelRepository) -> CheckpointLoop:
    return CheckpointLoop(repo, detector, key, period).start()
