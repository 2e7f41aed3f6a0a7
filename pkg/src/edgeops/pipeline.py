"""One-process pipeline: samples -> detectors -> RCA -> decision engine.

Meant for integration runs. In a deployment the orchestrator spawns the
stages as separate workloads; here they are threads joined by a bounded
sample channel and the event bus, and every bus topic is journaled.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .bus import EventBus
from .collector import Collector, CollectorConfig
from .detectors import Detector, component_of
from .engine import ActionCatalogue, DecisionEngine, execute_action
from .model_repo import ModelKey, ModelRepository, warm_start
from .rca import DEFAULT_GAP_NS, DEFAULT_LATENESS_NS, DependencyModel, RcaProcessor, RootCauseVerdict
from .stream import BoundedChannel, Sample, open_source

log = logging.getLogger(__name__)

TOPIC_ANOMALIES = "anomalies"
TOPIC_VERDICTS = "verdicts"
TOPIC_ACTIONS = "actions"
TOPICS = (TOPIC_ANOMALIES, TOPIC_VERDICTS, TOPIC_ACTIONS)
# clean replays must stay silent end to end, so the band is wider than a lone detector's
PIPELINE_THRESHOLD_C = 8.0
MODEL_STEP = "pipeline"


@dataclass
class PipelineConfig:
    catalogue: str
    journal_dir: str
    input: str | None = None
    collector: CollectorConfig | None = None
    duration: float | None = None
    algorithm: str = "birch"
    params: dict = field(default_factory=lambda: {"c": PIPELINE_THRESHOLD_C})
    dependencies: str | None = None
    model_repo: str | None = None
    gap_ns: int = DEFAULT_GAP_NS
    lateness_ns: int = DEFAULT_LATENESS_NS
    backend: str | None = None

    def validate(self) -> None:
        if (self.input is None) == (self.collector is None):
            raise ValueError("exactly one of input (a sample stream) or collector must be given")
        for label, path in (("catalogue", self.catalogue), ("dependency model", self.dependencies)):
            if path is not None and not Path(path).is_file():
                raise FileNotFoundError(f"{label} file not found: {path}")
        for path in (self.journal_dir, self.model_repo):
            if path is not None:
                Path(path).mkdir(parents=True, exist_ok=True)


@dataclass
class PipelineResult:
    status: int
    events: int = 0
    verdicts: int = 0
    actions: int = 0
    samples: int = 0
    error: str | None = None
    journals: dict[str, Path] = field(default_factory=dict)


class _Watermark(int):
    """Stream time, forwarded to RCA between events."""


class Pipeline:
    def __init__(self, config: PipelineConfig):
        config.validate()
        self.config = config
        self.catalogue = ActionCatalogue.load(config.catalogue)
        self.deps = DependencyModel.load(config.dependencies) if config.dependencies else DependencyModel()
        self.repo = ModelRepository(config.model_repo) if config.model_repo else None
        self.bus = EventBus(config.journal_dir)
        for topic in TOPICS:
            self.bus.journal_path(topic).touch()
        self.rca = RcaProcessor(self.deps, config.gap_ns, config.lateness_ns)
        self.engine = DecisionEngine(self.catalogue)
        self.detectors: dict[str, Detector] = {}
        self.result = PipelineResult(status=0)
        self._errors: list[str] = []
        self._lock = threading.Lock()
        self._collector: Collector | None = None

    # -- stages

    def _samples(self) -> Iterable[Sample]:
        if self.config.input is not None:
            return open_source(self.config.input)
        self._collector = Collector(self.config.collector)
        return self._collector.samples(duration=self.config.duration)

    def _detector(self, component: str, dim: int) -> Detector:
        det = self.detectors.get(component)
        if det is None:
            params = dict(self.config.params)
            if self.repo is not None:
                key = ModelKey(MODEL_STEP, component, self.config.algorithm)
                det, version = warm_start(self.repo, key, dim, params, self.config.backend)
                det.component = component
                if version is not None:
                    log.info("component %s resumed from model version %d", component, version)
            else:
                det = Detector(self.config.algorithm, dim, component=component, params=params, backend=self.config.backend)
            self.detectors[component] = det
        return det

    def _fail(self, stage: str, exc: BaseException) -> None:
        log.error("%s stage failed: %s", stage, exc)
        with self._lock:
            self._errors.append(f"{stage}: {exc}")

    def _detect_stage(self, to_rca: BoundedChannel) -> None:
        try:
            for s in self._samples():
                self.result.samples += 1
                det = self._detector(component_of(s.tags), s.values.shape[0])
                ev = det.detect(s)
                if ev is not None:
                    self.bus.publish(TOPIC_ANOMALIES, ev.to_json())
                    self.result.events += 1
                    to_rca.put(ev)
                to_rca.put(_Watermark(s.timestamp))
        except Exception as exc:
            self._fail("detector", exc)
        finally:
            to_rca.close()

    def _rca_stage(self, inbox: BoundedChannel, done: threading.Event) -> None:
        def publish(verdicts) -> None:
            for v in verdicts:
                self.bus.publish(TOPIC_VERDICTS, v.to_json(), context=self.rca.incident(v.incident_id))
                self.result.verdicts += 1

        try:
            for item in inbox:
                publish(self.rca.advance(item) if isinstance(item, _Watermark) else self.rca.ingest(item))
            publish(self.rca.flush())
        except Exception as exc:
            self._fail("rca", exc)
        finally:
            done.set()

    def _engine_stage(self, sub, upstream_done: threading.Event) -> None:
        try:
            while True:
                msg = sub.get(timeout=0.05)
                if msg is None:
                    if upstream_done.is_set() and len(sub) == 0:
                        break
                    continue
                rec = self.engine.decide(msg.context, RootCauseVerdict.from_json(msg.payload))
                if rec is not None:
                    self.bus.publish(TOPIC_ACTIONS, rec.to_json())
                    self.result.actions += 1
                    execute_action(rec)
        except Exception as exc:
            self._fail("engine", exc)
        finally:
            sub.close()

    # -- driver

    def run(self) -> PipelineResult:
        to_rca = BoundedChannel(1024)
        rca_done = threading.Event()
        verdicts = self.bus.subscribe(TOPIC_VERDICTS, capacity=1 << 16)
        threads = [
            threading.Thread(target=self._detect_stage, args=(to_rca,), name="pipeline-detect"),
            threading.Thread(target=self._rca_stage, args=(to_rca, rca_done), name="pipeline-rca"),
            threading.Thread(target=self._engine_stage, args=(verdicts, rca_done), name="pipeline-engine"),
        ]
        for t in threads:
            t.start()
        # drain in stage order
        for t in threads:
            t.join()
        self._checkpoint()
        self.bus.close()
        self.result.journals = {t: self.bus.journal_path(t) for t in TOPICS}
        if self._errors:
            self.result.status = 2
            self.result.error = "; ".join(self._errors)
        return self.result

    def stop(self) -> None:
        if self._collector is not None:
            self._collector.stop()

    def _checkpoint(self) -> None:
        if self.repo is None:
            return
        for component, det in sorted(self.detectors.items()):
            try:
                self.repo.put(ModelKey(MODEL_STEP, component, det.algorithm), det.state_bytes())
            except Exception as exc:
                self._fail("checkpoint", exc)


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    """Run every stage to completion. Startup problems raise, stage failures set ``status`` 2."""
    return Pipeline(config).run()
