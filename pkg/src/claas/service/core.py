"""Experiment lifecycle, trigger rules, job queue and training workers.

Everything the REST layer does goes through :class:`Service`; the class has
no HTTP dependency so the CLI can embed it directly.
"""

from __future__ import annotations

import itertools
import json
import logging
import threading
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import drift as driftmod
from .. import nn
from ..errors import ClaasError, NotFound
from ..evaluation import SeedRecord, aggregate, evaluate_step
from ..nn import Batch
from ..registry import Registry, experiment_prefix, utcnow
from ..scenario import (
    DatasetManifest,
    Experience,
    Scenario,
    build_nc_scenario,
    format_csv,
    ingest_csv,
    parse_csv,
    synth_blobs,
)
from ..strategies import StrategyState, make_strategy, train_experience
from .config import ExperimentConfig, parse_config

logger = logging.getLogger(__name__)

JOB_STATES = ("queued", "running", "succeeded", "failed")
_TRANSITIONS = {"queued": {"running", "failed"}, "running": {"succeeded", "failed"}}


class ApiError(ClaasError):
    """An error with the HTTP status it maps to."""

    def __init__(self, status: int, code: str, detail: str, field: str | None = None):
        super().__init__(detail, code=code, field=field)
        self.status = status

    @classmethod
    def wrap(cls, status: int, exc: ClaasError) -> "ApiError":
        return cls(status, exc.code, exc.detail, exc.field)


@dataclass
class TrainingJob:
    job_id: str
    experiment_id: str
    trigger_cause: str
    state: str
    submitted_at: str
    seq: int
    upto: int
    started_at: str | None = None
    finished_at: str | None = None
    error: str | None = None
    versions: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentRuntime:
    config: ExperimentConfig
    experiences: list[dict] = field(default_factory=list)
    monitor: driftmod.MonitorState | None = None
    audit: list[dict] = field(default_factory=list)
    scenario: Scenario | None = None


class Service:
    def __init__(self, registry: Registry, workers: int = 1, start: bool = True):
        self.registry = registry
        self.store = registry.store
        self.workers = max(1, int(workers))
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._experiments: dict[str, ExperimentRuntime] = {}
        self._jobs: dict[str, TrainingJob] = {}
        self._queue: list[str] = []
        self._running: set[str] = set()
        self._seq = itertools.count()
        self._stop = False
        self._threads: list[threading.Thread] = []
        self._data_cache: dict[tuple[str, int], tuple[Batch, Batch]] = {}
        self._recover()
        if start:
            self.start()

    # lifecycle

    def start(self) -> None:
        with self._lock:
            if self._threads:
                return
            self._stop = False
            for i in range(self.workers):
                t = threading.Thread(target=self.run_worker, name=f"claas-worker-{i}", daemon=True)
                t.start()
                self._threads.append(t)

    def shutdown(self, timeout: float | None = None) -> None:
        with self._cond:
            self._stop = True
            self._cond.notify_all()
        for t in self._threads:
            t.join(timeout)
        self._threads = []

    def _recover(self) -> None:
        """Rebuild in-memory state from the store; interrupted jobs become failed."""
        for exp_id in self.registry.list_experiments():
            cfg = parse_config(self.registry.experiment_config(exp_id))
            rt = ExperimentRuntime(cfg)
            prefix = experiment_prefix(exp_id)
            idx = 0
            while self.store.exists(f"{prefix}/experiences/{idx}.json"):
                rt.experiences.append(self.registry.get_json(f"{prefix}/experiences/{idx}.json"))
                idx += 1
            if self.store.exists(f"{prefix}/audit.jsonl"):
                rt.audit = [json.loads(l) for l in self.store.get(f"{prefix}/audit.jsonl").decode().splitlines() if l]
            self._experiments[exp_id] = rt
            self._reset_monitor(exp_id)
        jobs = [TrainingJob(**self.registry.get_json(k)) for k in self.store.list("jobs/") if k.endswith(".json")]
        jobs.sort(key=lambda j: j.seq)
        for job in jobs:
            self._jobs[job.job_id] = job
            if job.state == "running":
                job.state = "failed"
                job.finished_at = utcnow()
                job.error = "interrupted: service stopped while the job was running"
                self._save_job(job)
                self._audit(job.experiment_id, "job_failed", job_id=job.job_id, error=job.error)
            elif job.state == "queued":
                self._queue.append(job.job_id)
        self._seq = itertools.count(max((j.seq for j in jobs), default=-1) + 1)

    # persistence helpers

    def _save_job(self, job: TrainingJob) -> None:
        self.registry.put_json(f"jobs/{job.job_id}.json", job.to_dict())

    def _audit(self, exp_id: str, event: str, **payload) -> None:
        rt = self._experiments[exp_id]
        rt.audit.append({"at": utcnow(), "event": event, **payload})
        body = "".join(json.dumps(e, sort_keys=True) + "\n" for e in rt.audit)
        self.store.put(f"{experiment_prefix(exp_id)}/audit.jsonl", body.encode())

    def _runtime(self, exp_id: str) -> ExperimentRuntime:
        rt = self._experiments.get(exp_id)
        if rt is None:
            raise ApiError(404, "NotFound", f"unknown experiment {exp_id!r}")
        return rt

    # experiments

    def create_experiment(self, doc) -> str:
        try:
            cfg = parse_config(doc)
        except ClaasError as exc:
            raise ApiError.wrap(400, exc) from exc
        exp_id = cfg.experiment_id or uuid.uuid4().hex[:12]
        cfg = cfg.model_copy(update={"experiment_id": exp_id})
        scenario = None
        if cfg.scenario is not None and (cfg.scenario.synthetic or cfg.scenario.manifest):
            try:
                scenario = self._materialize_scenario(cfg)
            except ClaasError as exc:
                raise ApiError.wrap(400, exc) from exc
        with self._lock:
            if exp_id in self._experiments:
                raise ApiError(409, "DuplicateExperiment", f"experiment {exp_id!r} already exists", "experiment_id")
            try:
                self.registry.create_experiment(exp_id, cfg.to_dict())
            except ClaasError as exc:
                raise ApiError.wrap(409 if exc.code == "DuplicateExperiment" else 500, exc) from exc
            rt = ExperimentRuntime(cfg, scenario=scenario)
            self._experiments[exp_id] = rt
            prefix = experiment_prefix(exp_id)
            # offline phase: initial weights per run and the class assignment
            strategy = cfg.strategy_config()
            for r in range(cfg.runs):
                state = make_strategy(strategy, cfg.model_spec(r))
                self.store.put(f"{prefix}/runs/{r}/initial.state.npz", state.to_bytes())
            if scenario is not None:
                skeleton = [{"index": e.index, "classes": e.class_set} for e in scenario.experiences]
                self.registry.put_json(f"{prefix}/scenario.json", skeleton)
            self._reset_monitor(exp_id)
            self._audit(exp_id, "created")
        return exp_id

    def _materialize_scenario(self, cfg: ExperimentConfig) -> Scenario:
        sc = cfg.scenario
        num_classes = cfg.model.num_classes
        if sc.synthetic is not None:
            s = sc.synthetic
            train, test = synth_blobs(
                num_classes, cfg.model.input_dim, s.per_class_train, s.per_class_test, s.spread, s.seed
            )
        else:
            manifest = DatasetManifest.load(sc.manifest)
            if manifest.feature_dim != cfg.model.input_dim or manifest.num_classes != num_classes:
                raise ClaasError("manifest dimensions disagree with the model", code="ValidationError", field="scenario.manifest")
            train, test = ingest_csv(manifest)
        return build_nc_scenario(
            train, test, num_classes, sc.first_size, sc.rest_size, sc.n_experiences, sc.seed,
            protocol=cfg.evaluation.protocol,
        )

    def _scenario(self, exp_id: str) -> Scenario:
        rt = self._experiments[exp_id]
        if rt.scenario is None:
            if rt.config.scenario is None or not (rt.config.scenario.synthetic or rt.config.scenario.manifest):
                raise ApiError(422, "NoScenarioSource", "experiment config has no scenario data source")
            rt.scenario = self._materialize_scenario(rt.config)
        return rt.scenario

    def get_experiment(self, exp_id: str) -> dict:
        with self._lock:
            rt = self._runtime(exp_id)
            jobs = [j for j in self._jobs.values() if j.experiment_id == exp_id]
            trained = self._trained_upto(exp_id)
            active = [j.job_id for j in jobs if j.state in ("queued", "running")]
            return {
                "experiment_id": exp_id,
                "config": rt.config.to_dict(),
                "status": {
                    "experiences": len(rt.experiences),
                    "trained": trained,
                    "pending": len(rt.experiences) - trained,
                    "jobs": [j.job_id for j in sorted(jobs, key=lambda j: j.seq)],
                    "active_jobs": active,
                    "versions": {r: self._latest_version(exp_id, r) for r in range(rt.config.runs)},
                },
            }

    def _latest_version(self, exp_id: str, run: int) -> int:
        v = self.registry.latest(exp_id, run)
        return 0 if v is None else v.version

    # experiences

    def push_experience(self, exp_id: str, payload: dict) -> int:
        with self._lock:
            rt = self._runtime(exp_id)
        if not isinstance(payload, dict):
            raise ApiError(400, "ValidationError", "payload must be a JSON object")
        cfg = rt.config
        if "from_scenario" in payload:
            extra = set(payload) - {"from_scenario"}
            if extra:
                raise ApiError(400, "UnknownField", f"unexpected fields {sorted(extra)}", sorted(extra)[0])
            i = payload["from_scenario"]
            scenario = self._scenario(exp_id)
            if not isinstance(i, int) or not 0 <= i < len(scenario):
                raise ApiError(422, "RangeError", f"scenario has no experience {i!r}", "from_scenario")
            src = scenario.experiences[i]
            classes, train, test = src.class_set, src.train, src.test
        else:
            extra = set(payload) - {"classes", "train_csv", "test_csv", "n_train", "n_test"}
            if extra:
                raise ApiError(400, "UnknownField", f"unexpected fields {sorted(extra)}", sorted(extra)[0])
            for key in ("classes", "train_csv", "test_csv"):
                if key not in payload:
                    raise ApiError(400, "MissingField", f"missing field {key!r}", key)
            classes = payload["classes"]
            if not isinstance(classes, list) or not classes or not all(isinstance(c, int) for c in classes):
                raise ApiError(400, "ValidationError", "classes must be a non-empty list of integers", "classes")
            if len(set(classes)) != len(classes):
                raise ApiError(400, "ValidationError", "classes contains duplicates", "classes")
            try:
                train = parse_csv(payload["train_csv"], cfg.model.input_dim, cfg.model.num_classes)
                test = parse_csv(payload["test_csv"], cfg.model.input_dim, cfg.model.num_classes)
                Experience(0, classes, train, test)
            except ClaasError as exc:
                raise ApiError.wrap(422, exc) from exc
            for key, batch in (("n_train", train), ("n_test", test)):
                if key in payload and payload[key] != len(batch):
                    raise ApiError(422, "CountMismatch", f"{key}={payload[key]} but CSV has {len(batch)} rows", key)
        classes = sorted(int(c) for c in classes)

        with self._lock:
            prior = set()
            for meta in rt.experiences:
                prior.update(meta["classes"])
            overlap = prior.intersection(classes)
            if overlap:
                raise ApiError(422, "ClassOverlap", f"classes {sorted(overlap)} already appeared in the stream", "classes")
            idx = len(rt.experiences)
            prefix = f"{experiment_prefix(exp_id)}/experiences/{idx}"
            self.store.put(f"{prefix}.train.csv", format_csv(train).encode())
            self.store.put(f"{prefix}.test.csv", format_csv(test).encode())
            meta = {"index": idx, "classes": classes, "n_train": len(train), "n_test": len(test)}
            self.registry.put_json(f"{prefix}.json", meta)
            rt.experiences.append(meta)
            self._data_cache[(exp_id, idx)] = (train, test)
            self._audit(exp_id, "experience_pushed", experience_index=idx)

            trigger = cfg.trigger
            if trigger.mode == "every_n_experiences":
                pending = len(rt.experiences) - self._claimed_upto(exp_id)
                if pending > 0 and pending % trigger.n == 0:
                    job = self._enqueue(exp_id, "schedule")
                    self._audit(exp_id, "schedule_trigger", job_id=job.job_id, experience_index=idx)
        return idx

    def _experience_data(self, exp_id: str, idx: int) -> tuple[Batch, Batch]:
        key = (exp_id, idx)
        if key not in self._data_cache:
            cfg = self._experiments[exp_id].config
            prefix = f"{experiment_prefix(exp_id)}/experiences/{idx}"
            train = parse_csv(self.store.get(f"{prefix}.train.csv").decode(), cfg.model.input_dim, cfg.model.num_classes)
            test = parse_csv(self.store.get(f"{prefix}.test.csv").decode(), cfg.model.input_dim, cfg.model.num_classes)
            self._data_cache[key] = (train, test)
        return self._data_cache[key]

    # jobs

    def _trained_upto(self, exp_id: str) -> int:
        runs = self._experiments[exp_id].config.runs
        done = []
        for r in range(runs):
            v = self.registry.latest(exp_id, r)
            done.append(0 if v is None else v.experience_index + 1)
        return min(done)

    def _claimed_upto(self, exp_id: str) -> int:
        active = [j.upto for j in self._jobs.values() if j.experiment_id == exp_id and j.state in ("queued", "running")]
        return max([self._trained_upto(exp_id), *active])

    def _queued_job(self, exp_id: str) -> TrainingJob | None:
        for jid in self._queue:
            job = self._jobs[jid]
            if job.experiment_id == exp_id and job.state == "queued":
                return job
        return None

    def _enqueue(self, exp_id: str, cause: str) -> TrainingJob:
        rt = self._experiments[exp_id]
        job = TrainingJob(
            job_id=uuid.uuid4().hex[:16],
            experiment_id=exp_id,
            trigger_cause=cause,
            state="queued",
            submitted_at=utcnow(),
            seq=next(self._seq),
            upto=len(rt.experiences),
        )
        self._jobs[job.job_id] = job
        self._save_job(job)
        self._queue.append(job.job_id)
        self._cond.notify_all()
        return job

    def _coalesce_or_enqueue(self, exp_id: str, cause: str) -> TrainingJob | None:
        """Extend a queued job to the newest experiences, or enqueue one if anything is pending."""
        rt = self._experiments[exp_id]
        queued = self._queued_job(exp_id)
        if queued is not None:
            if queued.upto != len(rt.experiences):
                queued.upto = len(rt.experiences)
                self._save_job(queued)
            return queued
        if len(rt.experiences) > self._claimed_upto(exp_id):
            return self._enqueue(exp_id, cause)
        return None

    def trigger_job(self, exp_id: str) -> str:
        with self._lock:
            self._runtime(exp_id)
            job = self._coalesce_or_enqueue(exp_id, "manual")
            if job is None:
                raise ApiError(409, "NothingToTrain", "no untrained experience is pending")
            self._audit(exp_id, "manual_trigger", job_id=job.job_id)
            return job.job_id

    def get_job(self, job_id: str) -> dict:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise ApiError(404, "NotFound", f"unknown job {job_id!r}")
            return job.to_dict()

    def list_jobs(self, exp_id: str | None = None) -> list[dict]:
        with self._lock:
            jobs = sorted(self._jobs.values(), key=lambda j: j.seq)
            return [j.to_dict() for j in jobs if exp_id is None or j.experiment_id == exp_id]

    def _set_state(self, job: TrainingJob, state: str, error: str | None = None) -> None:
        if state not in _TRANSITIONS.get(job.state, set()):
            raise RuntimeError(f"illegal job transition {job.state} -> {state}")
        job.state = state
        if state == "running":
            job.started_at = utcnow()
        else:
            job.finished_at = utcnow()
            job.error = error
        self._save_job(job)

    def wait_idle(self, timeout: float = 60.0) -> bool:
        """Block until no job is queued or running."""
        with self._cond:
            return self._cond.wait_for(lambda: not self._queue and not self._running, timeout)

    def wait_job(self, job_id: str, timeout: float = 60.0) -> dict:
        with self._cond:
            self._cond.wait_for(lambda: self._jobs[job_id].state in ("succeeded", "failed"), timeout)
            return self._jobs[job_id].to_dict()

    def _next_job(self) -> TrainingJob | None:
        for jid in self._queue:
            job = self._jobs[jid]
            if job.experiment_id not in self._running:
                self._queue.remove(jid)
                return job
        return None

    def run_worker(self) -> None:
        """Worker loop: take queued jobs FIFO, one running job per experiment."""
        while True:
            with self._cond:
                job = None
                while not self._stop:
                    job = self._next_job()
                    if job is not None:
                        break
                    self._cond.wait()
                if self._stop:
                    return
                self._running.add(job.experiment_id)
                self._set_state(job, "running")
            try:
                self._execute(job)
            except Exception as exc:  # job fails, the experiment stays usable
                logger.exception("job %s failed", job.job_id)
                with self._cond:
                    self._set_state(job, "failed", f"{type(exc).__name__}: {exc}")
                    self._audit(job.experiment_id, "job_failed", job_id=job.job_id, error=job.error)
            else:
                with self._cond:
                    self._set_state(job, "succeeded")
                    self._audit(job.experiment_id, "job_succeeded", job_id=job.job_id)
                    self._reset_monitor(job.experiment_id)
            finally:
                with self._cond:
                    self._running.discard(job.experiment_id)
                    self._cond.notify_all()

    def _initial_state(self, exp_id: str, run: int) -> StrategyState:
        key = f"{experiment_prefix(exp_id)}/runs/{run}/initial.state.npz"
        return StrategyState.from_bytes(self.store.get(key))

    def _execute(self, job: TrainingJob) -> None:
        exp_id = job.experiment_id
        with self._lock:
            rt = self._experiments[exp_id]
            cfg = rt.config
            upto = job.upto
        strategy = cfg.strategy_config()
        data = [self._experience_data(exp_id, i) for i in range(upto)]
        tests = [test for _, test in data]
        for run in range(cfg.runs):
            latest = self.registry.latest(exp_id, run)
            if latest is None:
                state = self._initial_state(exp_id, run)
                record = SeedRecord(
                    seed=cfg.model_spec(run).seed, protocol=cfg.evaluation.protocol, top_k=tuple(cfg.evaluation.top_k)
                )
                start = 0
            else:
                state = self.registry.load_state(latest)
                record = SeedRecord.from_dict(self.registry.load_metrics(latest))
                start = latest.experience_index + 1
            for idx in range(start, upto):
                meta = rt.experiences[idx]
                exp = Experience(idx, meta["classes"], *data[idx])
                state, stats = train_experience(state, strategy, exp)
                record.trace.append(stats.seconds, stats.patterns_trained_on)
                evaluate_step(record, state.params, tests[: idx + 1] if record.protocol == "accumulating_test" else tests, idx, state.spec.activation)
                version = self.registry.commit_version(
                    exp_id, state, strategy, record.to_dict(), run=run, job_id=job.job_id, experience_index=idx
                )
                with self._lock:
                    job.versions.append({"run": run, "version": version.version, "experience_index": idx})
                    self._save_job(job)

    # drift monitoring

    def _reset_monitor(self, exp_id: str) -> None:
        rt = self._experiments[exp_id]
        dcfg = rt.config.drift_config()
        if dcfg is None:
            rt.monitor = None
            return
        baseline = None
        latest = self.registry.latest(exp_id, 0)
        if latest is not None:
            metrics = self.registry.load_metrics(latest)
            k = str(min(rt.config.evaluation.top_k))
            baseline = metrics["stream_accuracy"][k][-1]
        if rt.monitor is None:
            rt.monitor = driftmod.MonitorState(dcfg, baseline_acc=baseline)
        else:
            rt.monitor = driftmod.reset_reference(rt.monitor, baseline)

    def observe(self, exp_id: str, payload: dict) -> dict:
        with self._lock:
            rt = self._runtime(exp_id)
            if rt.monitor is None:
                raise ApiError(409, "MonitoringDisabled", "experiment has no drift configuration")
            if not isinstance(payload, dict):
                raise ApiError(400, "ValidationError", "payload must be a JSON object")
            extra = set(payload) - {"samples", "labels", "preds"}
            if extra:
                raise ApiError(400, "UnknownField", f"unexpected fields {sorted(extra)}", sorted(extra)[0])
            samples = payload.get("samples")
            labels = payload.get("labels")
            preds = payload.get("preds")
            detector = rt.monitor.config.detector
            try:
                if detector == "perf_decay":
                    if labels is None:
                        raise driftmod.DataError("perf_decay needs labels")
                    if preds is None:
                        preds = self._predict(exp_id, samples)
                state, reports = driftmod.observe(rt.monitor, samples, labels, preds)
            except ClaasError as exc:
                raise ApiError.wrap(422, exc) from exc
            except (TypeError, ValueError) as exc:
                raise ApiError(422, "DataError", str(exc)) from exc
            rt.monitor = state
            job_id = None
            for report in reports:
                self._audit(exp_id, "drift_report", report=report.to_dict())
            if any(r.fired for r in reports) and rt.config.trigger.mode == "on_drift":
                job = self._coalesce_or_enqueue(exp_id, "drift")
                if job is not None:
                    job_id = job.job_id
                    self._audit(exp_id, "drift_trigger", job_id=job_id, window_id=reports[-1].window_id)
            last = reports[-1].to_dict() if reports else {
                "fired": False, "detector": detector, "statistic": None, "threshold": None,
                "window_id": None, "per_feature": None,
            }
            return {**last, "reports": [r.to_dict() for r in reports], "buffered": state.buffered, "job_id": job_id}

    def _predict(self, exp_id: str, samples) -> list[int]:
        if samples is None:
            raise driftmod.DataError("perf_decay needs predictions or samples to predict on")
        latest = self.registry.latest(exp_id, 0)
        if latest is None:
            raise driftmod.DataError("no trained model to predict with")
        params = nn.deserialize_params(self.store.get(latest.weights_key))
        activation = self._experiments[exp_id].config.model.activation
        x = np.asarray(samples, dtype=nn.DTYPE)
        return nn.predict_topk(params, x, 1, activation)[:, 0].tolist()

    # metrics and versions

    def metrics(self, exp_id: str):
        """Aggregate RunRecord over every run's latest committed metrics."""
        with self._lock:
            rt = self._runtime(exp_id)
            if not any(j.state == "succeeded" for j in self._jobs.values() if j.experiment_id == exp_id):
                raise ApiError(404, "NoMetricsYet", "no training job has completed")
            records = []
            for r in range(rt.config.runs):
                latest = self.registry.latest(exp_id, r)
                if latest is not None:
                    records.append(SeedRecord.from_dict(self.registry.load_metrics(latest)))
        if not records:
            raise ApiError(404, "NoMetricsYet", "no committed metrics")
        steps = min(r.steps for r in records)
        return aggregate([_truncate(r, steps) for r in records])

    def versions(self, exp_id: str, run: int | None = None) -> list[dict]:
        with self._lock:
            self._runtime(exp_id)
        return [v.to_dict() for v in self.registry.list_versions(exp_id, run)]

    def version(self, exp_id: str, version: int, run: int = 0) -> tuple[dict, bytes]:
        with self._lock:
            self._runtime(exp_id)
        try:
            record, blob = self.registry.get_version(exp_id, version, run)
        except NotFound as exc:
            raise ApiError.wrap(404, exc) from exc
        return record.to_dict(), blob

    def audit_log(self, exp_id: str) -> list[dict]:
        with self._lock:
            return list(self._runtime(exp_id).audit)


def _truncate(record: SeedRecord, steps: int) -> SeedRecord:
    if record.steps == steps:
        return record
    d = record.to_dict()
    d["accuracy_matrix"] = {k: m[:steps] for k, m in d["accuracy_matrix"].items()}
    d["stream_accuracy"] = {k: v[:steps] for k, v in d["stream_accuracy"].items()}
    d["seconds"] = d["seconds"][:steps]
    d["patterns"] = d["patterns"][:steps]
    return SeedRecord.from_dict(d)


def open_service(storage_root: str | Path, workers: int = 1, start: bool = True) -> Service:
    from ..registry import FsBlobStore

    return Service(Registry(FsBlobStore(storage_root)), workers=workers, start=start)
