"""``edgeops`` command line.

Exit codes: 0 ok, 1 usage, 2 runtime failure, 3 unschedulable or infeasible.
Heavy modules are imported inside the handlers so that ``collect`` stays lean.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from ._util import coerce_params, parse_duration, parse_kv, read_ndjson

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_INFEASIBLE = 0, 1, 2, 3

log = logging.getLogger("edgeops")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2, which we reserve for runtime failures
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _duration(text: str) -> float:
    try:
        return parse_duration(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _kv(text: str) -> dict:
    try:
        return parse_kv(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _merge(maps) -> dict:
    out: dict = {}
    for m in maps or ():
        out.update(m)
    return out


def _open_out(path: str):
    return sys.stdout if path == "-" else open(path, "w", encoding="utf-8")


def _stop_on_signals(stop) -> None:
    if threading.current_thread() is not threading.main_thread():
        return
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop())


# ---------------------------------------------------------------------------
# collect


def cmd_collect(args) -> int:
    from .collector import HEADER, Collector, CollectorConfig, OverheadReport
    from .stream import open_sink

    try:
        cfg = CollectorConfig(args.interval, tags=_merge(args.tag), source=args.source, replay_path=args.replay)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.replay and args.source == "os-counters":
        cfg = CollectorConfig(args.interval, tags=cfg.tags, source="synthetic-replay", replay_path=args.replay)
    sink = open_sink(args.out, HEADER)
    collector = Collector(cfg)
    _stop_on_signals(collector.stop)
    report = collector.run(sink.write, duration=args.duration, max_samples=args.max_samples)
    failed = report.error is not None
    try:
        sink.close()
    except OSError as exc:
        log.error("sink failed: %s", exc)
        failed = True
    if args.report:
        path = Path(args.report)
        fresh = not path.exists() or path.stat().st_size == 0
        with open(path, "a", encoding="utf-8") as fh:
            if fresh:
                fh.write(OverheadReport.CSV_HEADER + "\n")
            fh.write(report.csv_row() + "\n")
    log.info(
        "collected %d samples in %.2fs, self CPU %.3f%%, peak RSS %d bytes",
        report.samples_emitted, report.wall_time, 100 * report.cpu_self_fraction, report.rss_bytes,
    )
    if failed:
        log.error("collection stopped early: %s", report.error)
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------------------
# detect


def cmd_detect(args) -> int:
    from .detectors import Detector, component_of
    from .model_repo import ModelKey, ModelRepository, warm_start
    from .stream import open_source

    params = coerce_params(_merge(args.param))
    repo = ModelRepository(args.model_repo) if args.model_repo else None
    detectors: dict[str, Detector] = {}
    source = open_source(args.input)
    out = _open_out(args.out)
    n = 0
    try:
        for s in source:
            comp = component_of(s.tags)
            det = detectors.get(comp)
            if det is None:
                if repo is not None:
                    det, _ = warm_start(repo, ModelKey(args.step, comp, args.algorithm), s.values.shape[0], params, args.backend)
                    det.component = comp
                else:
                    det = Detector(args.algorithm, s.values.shape[0], component=comp, params=params, backend=args.backend)
                detectors[comp] = det
            ev = det.detect(s)
            if ev is not None:
                out.write(json.dumps(ev.to_json(), separators=(",", ":")) + "\n")
                n += 1
        out.flush()
    finally:
        if out is not sys.stdout:
            out.close()
        if repo is not None:
            for comp, det in sorted(detectors.items()):
                repo.put(ModelKey(args.step, comp, args.algorithm), det.state_bytes())
    log.info("%d anomaly events from %d component(s)", n, len(detectors))
    return EXIT_OK


# ---------------------------------------------------------------------------
# rca


def _read_events(path: str):
    from .detectors import AnomalyEvent

    rows = (json.loads(line) for line in sys.stdin if line.strip()) if path == "-" else read_ndjson(path)
    return [AnomalyEvent.from_json(r) for r in rows]


def cmd_rca(args) -> int:
    from .rca import DependencyModel, RcaProcessor

    deps = DependencyModel.load(args.deps) if args.deps else None
    proc = RcaProcessor(deps, int(args.gap * 1e9), int(args.lateness * 1e9))
    events = _read_events(args.events)
    verdicts = proc.run(sorted(events, key=lambda e: e.timestamp) if args.sort else events)
    out = _open_out(args.out)
    for v in verdicts:
        out.write(json.dumps(v.to_json(), separators=(",", ":")) + "\n")
    if out is not sys.stdout:
        out.close()
    if proc.dropped:
        log.warning("%d late events dropped", proc.dropped)
    return EXIT_OK


# ---------------------------------------------------------------------------
# engine


def _incidents(verdicts_path: str, events_path: str):
    from .engine import incident_from_journal
    from .rca import RootCauseVerdict

    events = _read_events(events_path)
    for row in read_ndjson(verdicts_path):
        v = RootCauseVerdict.from_json(row)
        yield incident_from_journal(v, events), v


def cmd_engine_train(args) -> int:
    from .engine import ActionCatalogue, featurize, train_pattern

    path = Path(args.catalogue)
    cat = ActionCatalogue.load(path) if path.exists() else ActionCatalogue()
    feats = [f for f in (featurize(i, v) for i, v in _incidents(args.verdicts, args.events)) if not f.degenerate]
    if not feats:
        log.error("no usable incidents to train %r from", args.action)
        return EXIT_RUNTIME
    actions = dict(cat.actions)
    actions.setdefault(args.action, args.description or args.action)
    patterns = [p for p in cat.patterns if p.action != args.action]
    patterns.append(train_pattern(feats, args.action, args.resolution))
    ActionCatalogue(actions, patterns).save(path)
    log.info("trained %r from %d incident(s)", args.action, len(feats))
    return EXIT_OK


def cmd_engine_decide(args) -> int:
    from .engine import ActionCatalogue, DecisionEngine

    engine = DecisionEngine(ActionCatalogue.load(args.catalogue), floor=args.floor)
    out = _open_out(args.out)
    for inc, v in _incidents(args.verdicts, args.events):
        rec = engine.decide(inc, v)
        if rec is not None:
            out.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")
    if out is not sys.stdout:
        out.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# orchestrate


def cmd_orchestrate(args) -> int:
    from .orchestrator import Executor, Operator, dump_plan, load_objects, sync_from_objects

    op = Operator(executor=Executor(dry_run=not args.execute), tick=args.tick)
    sync_from_objects(op, load_objects(args.objects))
    out = _open_out(args.out)
    plan = op.step()

    def show(p) -> None:
        dump_plan(p, out)
        out.flush()
        for step, sources in sorted(p.unschedulable.items()):
            log.warning("step %s unschedulable for %s", step, ", ".join(sources))

    show(plan)
    if args.watch:
        stop = threading.Event()
        _stop_on_signals(stop.set)

        def tick(p) -> None:
            sync_from_objects(op, load_objects(args.objects))
            if not p.empty_diff:
                show(p)

        op.run(stop, on_plan=tick)
        op.executor.shutdown()
        plan = op.plans[-1]
    if out is not sys.stdout:
        out.close()
    return EXIT_INFEASIBLE if plan.unschedulable else EXIT_OK


# ---------------------------------------------------------------------------
# models


def cmd_models(args) -> int:
    from .blob import ModelBlob
    from .model_repo import ModelKey, ModelNotFound, ModelRepository

    repo = ModelRepository(args.repo)
    if args.models_cmd == "ls":
        for key in repo.keys():
            vs = repo.versions(key)
            print(f"{key}\t{','.join(map(str, vs))}")
        return EXIT_OK
    try:
        key = ModelKey.parse(args.key)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.models_cmd == "put":
        data = Path(args.file).read_bytes()
        if data[:4] == b"ZMDL":
            data = ModelBlob.decode(data, source=args.file).payload
        print(repo.put(key, data))
        return EXIT_OK
    try:
        version, payload = (args.version, repo.get(key, args.version)) if args.version else repo.get_latest(key)
    except ModelNotFound as exc:
        log.error("no such model: %s", exc)
        return EXIT_RUNTIME
    Path(args.out).write_bytes(payload)
    print(version)
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    from .bench import harness

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.bench_cmd == "freq-sweep":
        reports = harness.run_frequency_sweep(
            args.intervals, args.duration, replay=args.replay,
            progress=lambda r: log.info("interval %.0f ms: cpu %.3f%%, rss %d", r.interval * 1e3, 100 * r.cpu_self_fraction, r.rss_bytes),
        )
        (out / "frequency.csv").write_text(harness.frequency_csv(reports))
        (out / "overhead.csv").write_text(harness.overhead_csv(reports))
        return EXIT_OK
    if args.bench_cmd == "budget-sweep":
        from .bench import SyntheticSpec, generate_matrix

        data = generate_matrix(SyntheticSpec(n=args.samples, seed=args.seed))
        rows = harness.run_budget_sweep(
            args.algorithms, args.budgets, data, backend=args.backend,
            progress=lambda r: log.info("%s @ %.1f: %.4f ms/sample", r.algorithm, r.budget, r.mean_ms),
        )
        (out / "budget.csv").write_text(harness.budget_csv(rows))
        (out / "latency.csv").write_text(harness.latency_rows_csv(rows))
        return EXIT_OK
    if args.bench_cmd == "jit":
        from .collector import CollectorConfig

        cfg = CollectorConfig(args.interval, source="synthetic-replay" if args.replay else "os-counters", replay_path=args.replay)
        workload = harness.busy_workload(args.busy) if args.busy else None
        rep = harness.run_jit_check(args.interval, args.algorithm, args.duration, config=cfg, workload=workload, backend=args.backend)
        name = f"jit-{args.algorithm if not args.busy else 'busy'}-{args.interval * 1000:.0f}ms.json"
        (out / name).write_text(json.dumps(rep.to_json()))
        verdict = "pass" if rep.passed else "FAIL"
        print(f"{verdict}: max queue depth {rep.max_depth}, combined CPU {100 * rep.cpu_fraction:.2f}% over {rep.samples} samples")
        return EXIT_OK if rep.passed else EXIT_INFEASIBLE
    written = harness.plotdata(args.input, out)
    for p in written:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# pipeline


def cmd_pipeline(args) -> int:
    from .collector import CollectorConfig
    from .pipeline import PIPELINE_THRESHOLD_C, Pipeline, PipelineConfig

    if (args.input is None) == (args.interval is None):
        raise UsageError("give exactly one of --in or --interval")
    params = {"c": PIPELINE_THRESHOLD_C, **coerce_params(_merge(args.param))}
    collector = CollectorConfig(args.interval, tags=_merge(args.tag)) if args.interval else None
    cfg = PipelineConfig(
        catalogue=args.catalogue,
        journal_dir=args.journal_dir,
        input=args.input,
        collector=collector,
        duration=args.duration,
        algorithm=args.algorithm,
        params=params,
        dependencies=args.deps,
        model_repo=args.model_repo,
        gap_ns=int(args.gap * 1e9),
        lateness_ns=int(args.lateness * 1e9),
        backend=args.backend,
    )
    pipe = Pipeline(cfg)
    _stop_on_signals(pipe.stop)
    res = pipe.run()
    print(json.dumps({"samples": res.samples, "events": res.events, "verdicts": res.verdicts, "actions": res.actions, "status": res.status}))
    if res.status:
        log.error("pipeline failed: %s", res.error)
    return res.status


# ---------------------------------------------------------------------------
# parser


def _add_detector_args(p, default_algorithm: str = "birch") -> None:
    p.add_argument("--algorithm", choices=("birch", "arima", "rnn"), default=default_algorithm)
    p.add_argument("--param", type=_kv, action="append", metavar="K=V[,K=V]", help="model or threshold parameters (alpha, c, warmup, ...)")
    p.add_argument("--backend", choices=("numba", "numpy"), default=None, help="kernel backend (default: numba unless EDGEOPS_NO_NUMBA is set)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="edgeops", description="Edge AIOps toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("collect", help="sample host counters into a stream")
    c.add_argument("--interval", default="1s", help="100ms..10s (default 1s)")
    c.add_argument("--duration", type=_duration, default=None)
    c.add_argument("--max-samples", type=int, default=None)
    c.add_argument("--out", default="-", help="stream endpoint: file:PATH, tcp://host:port, tcp-listen://host:port or - (stdout)")
    c.add_argument("--source", choices=("os-counters", "synthetic-replay"), default="os-counters")
    c.add_argument("--replay", default=None, help="recorded snapshot trace (NDJSON) for synthetic-replay")
    c.add_argument("--tag", type=_kv, action="append", metavar="K=V[,K=V]")
    c.add_argument("--report", default=None, help="append an overhead CSV row here")
    c.set_defaults(func=cmd_collect)

    d = sub.add_parser("detect", help="run a detector over a sample stream, print anomaly events")
    d.add_argument("--in", dest="input", default="-")
    d.add_argument("--out", default="-")
    _add_detector_args(d)
    d.add_argument("--model-repo", default=None, help="warm start from and checkpoint into this repository")
    d.add_argument("--step", default="detect", help="analysis step name used in model keys")
    d.set_defaults(func=cmd_detect)

    r = sub.add_parser("rca", help="group anomaly events into incidents and rank root causes")
    r.add_argument("--events", default="-")
    r.add_argument("--deps", default=None, help="dependency model (NDJSON)")
    r.add_argument("--gap", type=_duration, default=30.0)
    r.add_argument("--lateness", type=_duration, default=5.0)
    r.add_argument("--sort", action="store_true", help="sort events by time first")
    r.add_argument("--out", default="-")
    r.set_defaults(func=cmd_rca)

    e = sub.add_parser("engine", help="train action patterns or recommend actions")
    esub = e.add_subparsers(dest="engine_cmd", required=True, parser_class=_Parser)
    for name, func in (("train", cmd_engine_train), ("decide", cmd_engine_decide)):
        ep = esub.add_parser(name)
        ep.add_argument("--catalogue", required=True)
        ep.add_argument("--verdicts", required=True)
        ep.add_argument("--events", required=True)
        ep.set_defaults(func=func)
    tr = esub.choices["train"]
    tr.add_argument("--action", required=True)
    tr.add_argument("--description", default=None)
    tr.add_argument("--resolution", type=int, default=8)
    de = esub.choices["decide"]
    de.add_argument("--floor", type=float, default=0.05)
    de.add_argument("--out", default="-")

    o = sub.add_parser("orchestrate", help="reconcile data sources and analysis steps onto nodes")
    o.add_argument("--objects", required=True, help="directory of *.ndjson object files")
    o.add_argument("--out", default="-", help="plan diff (NDJSON)")
    o.add_argument("--execute", action="store_true", help="spawn workloads instead of a dry run")
    o.add_argument("--watch", action="store_true", help="keep reconciling until interrupted")
    o.add_argument("--tick", type=_duration, default=2.0)
    o.set_defaults(func=cmd_orchestrate)

    m = sub.add_parser("models", help="inspect and edit the model repository")
    m.add_argument("--repo", required=True)
    msub = m.add_subparsers(dest="models_cmd", required=True, parser_class=_Parser)
    msub.add_parser("ls")
    g = msub.add_parser("get")
    g.add_argument("key", help="step/component/detector")
    g.add_argument("--version", type=int, default=None)
    g.add_argument("--out", required=True)
    pu = msub.add_parser("put")
    pu.add_argument("key")
    pu.add_argument("file", help="detector state payload or a full model blob")
    m.set_defaults(func=cmd_models)

    b = sub.add_parser("bench", help="overhead and latency experiments")
    bsub = b.add_subparsers(dest="bench_cmd", required=True, parser_class=_Parser)
    fs = bsub.add_parser("freq-sweep")
    fs.add_argument("--intervals", type=lambda t: [_duration(x) for x in t.split(",")],
                    default=[round(0.1 * i, 1) for i in range(1, 11)], help="comma list, default 100ms..1s")
    fs.add_argument("--duration", type=_duration, default=60.0)
    fs.add_argument("--replay", default=None)
    bs = bsub.add_parser("budget-sweep")
    bs.add_argument("--algorithms", type=lambda t: t.split(","), default=["birch", "rnn", "arima"])
    bs.add_argument("--budgets", type=lambda t: [float(x) for x in t.split(",")], default=None)
    bs.add_argument("--samples", type=int, default=10_000)
    bs.add_argument("--backend", choices=("numba", "numpy"), default=None)
    jt = bsub.add_parser("jit")
    jt.add_argument("--interval", type=_duration, default=0.5)
    jt.add_argument("--algorithm", choices=("birch", "arima", "rnn"), default="birch")
    jt.add_argument("--duration", type=_duration, default=600.0)
    jt.add_argument("--busy", type=_duration, default=None, help="replace the detector with a busy loop of this length")
    jt.add_argument("--replay", default=None)
    jt.add_argument("--backend", choices=("numba", "numpy"), default=None)
    pdp = bsub.add_parser("plotdata")
    pdp.add_argument("--in", dest="input", required=True)
    for sp in (fs, bs, jt, pdp):
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=42)
    b.set_defaults(func=cmd_bench)

    pl = sub.add_parser("pipeline", help="collector/replay -> detector -> RCA -> engine in one process")
    pl.add_argument("--in", dest="input", default=None, help="replay a sample stream endpoint")
    pl.add_argument("--interval", default=None, help="collect live at this interval instead")
    pl.add_argument("--duration", type=_duration, default=None)
    pl.add_argument("--tag", type=_kv, action="append")
    _add_detector_args(pl)
    pl.add_argument("--deps", default=None)
    pl.add_argument("--catalogue", required=True)
    pl.add_argument("--journal-dir", required=True)
    pl.add_argument("--model-repo", default=None)
    pl.add_argument("--gap", type=_duration, default=30.0)
    pl.add_argument("--lateness", type=_duration, default=5.0)
    pl.set_defaults(func=cmd_pipeline)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "bench_cmd", None) == "budget-sweep" and args.budgets is None:
        from .bench.harness import DEFAULT_BUDGETS

        args.budgets = list(DEFAULT_BUDGETS)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"edgeops: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"edgeops: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
