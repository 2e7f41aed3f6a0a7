"""Identity-function + threshold-model anomaly detector for one component."""

from __future__ import annotations

import inspect
import json
import math
import struct
import threading
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from ..blob import DetectorTypeMismatch, ModelBlob
from ..stream import Sample
from .models import MODEL_TYPES, Standardizer
from .threshold import ThresholdModel

ALGORITHMS = tuple(MODEL_TYPES)
THRESHOLD_PARAMS = ("alpha", "c", "warmup")
_U32 = struct.Struct(">I")


@dataclass
class AnomalyEvent:
    component: str
    timestamp: int
    detector: str
    error: float
    threshold: float
    per_metric_error: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "component": self.component,
            "ts_ns": self.timestamp,
            "detector": self.detector,
            "error": self.error,
            "threshold": self.threshold,
            "per_metric_error": list(self.per_metric_error),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AnomalyEvent":
        return cls(
            component=obj["component"],
            timestamp=int(obj["ts_ns"]),
            detector=obj["detector"],
            error=float(obj["error"]),
            threshold=float(obj["threshold"]),
            per_metric_error=[float(v) for v in obj["per_metric_error"]],
        )


def component_of(tags: dict[str, str]) -> str:
    for key in ("component", "host", "pod"):
        if key in tags:
            return tags[key]
    return ",".join(f"{k}={v}" for k, v in tags.items()) or "default"


def split_params(params: dict | None) -> tuple[dict, dict]:
    model, thresh = {}, {}
    for k, v in (params or {}).items():
        (thresh if k in THRESHOLD_PARAMS else model)[k] = v
    return model, thresh


class Detector:
    """Standardize -> reconstruct -> EMA threshold, bound to one component."""

    def __init__(
        self,
        algorithm: str,
        dim: int,
        component: str | None = None,
        params: dict | None = None,
        backend: str | None = None,
        eps: float = 1e-9,
    ):
        if algorithm not in MODEL_TYPES:
            raise ValueError(f"unknown detector {algorithm!r}; expected one of {ALGORITHMS}")
        self.algorithm = algorithm
        self.dim = int(dim)
        self.component = component
        model_params, thresh_params = split_params(params)
        self.standardizer = Standardizer(self.dim, eps=eps, backend=backend)
        self.model = MODEL_TYPES[algorithm](self.dim, backend=backend, **model_params)
        self.threshold = ThresholdModel(**thresh_params)
        self.backend = self.model.backend
        self.steps = 0
        self._lock = threading.Lock()

    # -- processing

    def score(self, x: np.ndarray) -> tuple[float, np.ndarray, bool, float]:
        """Process one raw vector: ``(error, per_metric_error, is_anomaly, threshold)``."""
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ValueError(f"expected a vector of length {self.dim}, got shape {x.shape}")
        with self._lock:
            z = self.standardizer(x)
            recon, err = self.model.step(z)
            self.steps += 1
            if not math.isfinite(err):
                return err, np.abs(z - recon), False, self.threshold.threshold
            flagged, theta = self.threshold.update(err)
        return err, np.abs(z - recon), flagged, theta

    def detect(self, sample: Sample) -> AnomalyEvent | None:
        if self.component is None:
            self.component = component_of(sample.tags)
        err, per_metric, flagged, theta = self.score(sample.values)
        if not flagged:
            return None
        return AnomalyEvent(
            component=self.component,
            timestamp=sample.timestamp,
            detector=self.algorithm,
            error=err,
            threshold=theta,
            per_metric_error=per_metric.tolist(),
        )

    def run(self, samples: Iterable[Sample]) -> Iterator[AnomalyEvent]:
        for s in samples:
            ev = self.detect(s)
            if ev is not None:
                yield ev

    # -- persistence

    def state_bytes(self) -> bytes:
        """Opaque, deterministic serialization of the full detector state."""
        with self._lock:
            smeta, sarr = self.standardizer.state()
            mmeta, marr = self.model.state()
            tm = self.threshold
            arrays: list[tuple[str, np.ndarray]] = [(f"std.{k}", v) for k, v in sarr.items()]
            arrays += [(f"model.{k}", v) for k, v in marr.items()]
            index, blobs, offset = [], [], 0
            for name, arr in arrays:
                arr = np.ascontiguousarray(arr)
                raw = arr.astype(arr.dtype.newbyteorder(">")).tobytes()
                index.append([name, arr.dtype.str.lstrip("<>=|"), list(arr.shape), offset, len(raw)])
                blobs.append(raw)
                offset += len(raw)
            meta = {
                "detector": self.algorithm,
                "dim": self.dim,
                "component": self.component,
                "backend": self.backend,
                "steps": self.steps,
                "standardizer": smeta,
                "model": mmeta,
                "threshold": {"alpha": tm.alpha, "c": tm.c, "warmup": tm.warmup, "mu": tm.mu, "s": tm.s, "count": tm.count},
                "arrays": index,
            }
        head = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return _U32.pack(len(head)) + head + b"".join(blobs)

    @classmethod
    def from_state_bytes(cls, payload: bytes, expected: str | None = None, backend: str | None = None) -> "Detector":
        (hlen,) = _U32.unpack_from(payload)
        meta = json.loads(payload[4 : 4 + hlen].decode("utf-8"))
        if expected is not None and meta["detector"] != expected:
            raise DetectorTypeMismatch(expected, meta["detector"])
        body = payload[4 + hlen :]
        arrays: dict[str, np.ndarray] = {}
        for name, dtype, shape, off, size in meta["arrays"]:
            dt = np.dtype(dtype).newbyteorder(">")
            arrays[name] = np.frombuffer(body[off : off + size], dtype=dt).astype(np.dtype(dtype)).reshape(shape)
        accepted = inspect.signature(MODEL_TYPES[meta["detector"]]).parameters
        mparams = {k: v for k, v in meta["model"].items() if k in accepted and k not in ("dim", "backend")}
        tmeta = meta["threshold"]
        det = cls(
            meta["detector"],
            meta["dim"],
            component=meta["component"],
            params={**mparams, "alpha": tmeta["alpha"], "c": tmeta["c"], "warmup": tmeta["warmup"]},
            backend=backend or meta["backend"],
            eps=meta["standardizer"]["eps"],
        )
        det.steps = int(meta["steps"])
        det.standardizer.load_state(meta["standardizer"], {k[4:]: v for k, v in arrays.items() if k.startswith("std.")})
        det.model.load_state(meta["model"], {k[6:]: v for k, v in arrays.items() if k.startswith("model.")})
        det.threshold.mu = tmeta["mu"]
        det.threshold.s = tmeta["s"]
        det.threshold.count = int(tmeta["count"])
        return det

    def snapshot(self) -> bytes:
        return ModelBlob(self.algorithm, 0, self.state_bytes()).encode()

    @classmethod
    def restore(cls, blob: bytes, expected: str | None = None, backend: str | None = None) -> "Detector":
        mb = ModelBlob.decode(blob)
        if expected is not None and mb.detector != expected:
            raise DetectorTypeMismatch(expected, mb.detector)
        return cls.from_state_bytes(mb.payload, expected=mb.detector, backend=backend)
