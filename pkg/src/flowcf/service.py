"""HTTP facade over training, prediction and counterfactual queries.

Single-process, file-backed: logs, checkpoints and reports live under a
data directory as JSON. Trained models are immutable; training always
mints a new model id. One training job runs at a time; /explain is
synchronous with a wall-clock budget and reports truncation.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from pathlib import Path

from fastapi import FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import cfengine as cf
from . import eventlog as el
from . import evaluation as ev
from . import predictor as pr
from . import synthgen
from .cfengine import KnowledgeBank


class SessionStore:
    """Registered logs, trained models and background job statuses."""

    def __init__(self, data_dir: Path):
        self.data_dir = Path(data_dir)
        for sub in ("logs", "models", "reports"):
            (self.data_dir / sub).mkdir(parents=True, exist_ok=True)
        self.lock = threading.RLock()
        self.logs: dict[str, el.EventLog] = {}
        self.models: dict[str, tuple[pr.NextActivityModel, KnowledgeBank]] = {}
        self.jobs: dict[str, dict] = {}
        self.training_busy = threading.Lock()
        self._load_existing()

    def _load_existing(self) -> None:
        for path in sorted((self.data_dir / "logs").glob("*.json")):
            self.logs[path.stem] = el.load_log(path)
        for path in sorted((self.data_dir / "models").glob("*.ckpt.json")):
            model_id = path.name[: -len(".ckpt.json")]
            meta_path = self.data_dir / "models" / f"{model_id}.meta.json"
            if not meta_path.exists():
                continue
            meta = json.loads(meta_path.read_text())
            log = self.logs.get(meta["log_id"])
            if log is None:
                continue
            model = pr.load(path)
            self.models[model_id] = (model, _bank_for(model, log))

    def add_log(self, log: el.EventLog) -> str:
        log_id = f"log-{uuid.uuid4().hex[:8]}"
        with self.lock:
            self.logs[log_id] = log
            el.save_log(log, self.data_dir / "logs" / f"{log_id}.json")
        return log_id

    def get_log(self, log_id: str) -> el.EventLog:
        log = self.logs.get(log_id)
        if log is None:
            raise HTTPException(404, f"unknown log {log_id}")
        return log

    def get_model(self, model_id: str) -> tuple[pr.NextActivityModel, KnowledgeBank]:
        entry = self.models.get(model_id)
        if entry is None:
            raise HTTPException(404, f"unknown model {model_id}")
        return entry

    def report_path(self, model_id: str) -> Path:
        return self.data_dir / "reports" / f"{model_id}.json"


def _bank_for(model: pr.NextActivityModel, log: el.EventLog) -> KnowledgeBank:
    # The bank must share the model's vocabulary so encodings line up.
    shared = el.EventLog(log.cases, model.vocab)
    return KnowledgeBank(shared, model.config.max_len)


# ---------------------------------------------------------------------------
# Request schemas
# ---------------------------------------------------------------------------

class SynthLogRequest(BaseModel):
    synth: dict = Field(default_factory=dict)
    name: str | None = None


class TrainRequest(BaseModel):
    log_id: str
    config: dict = Field(default_factory=dict)


class PredictRequest(BaseModel):
    model_id: str
    prefix: list[tuple[str, str]]
    amount: float
    top_k: int = 5


class ExplainQuery(BaseModel):
    prefix: list[tuple[str, str]]
    amount: float
    milestone: str
    amount_mutable: bool = False
    k: int = 3


class ExplainRequest(BaseModel):
    model_id: str
    query: ExplainQuery
    weights: dict = Field(default_factory=dict)
    budget: dict = Field(default_factory=dict)
    run_baseline: bool = True


class ReportRequest(BaseModel):
    queries: list[dict]
    milestones: list[str] | None = None


def create_app(data_dir: str | Path, explain_timeout: float = 60.0,
               milestones: list[str] | None = None, explain_workers: int = 2,
               ui_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="flowcf service", version="0.1.0")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"],
    )
    store = SessionStore(Path(data_dir))
    app.state.store = store
    configured_milestones = milestones or ev.DEFAULT_MILESTONES
    explain_pool = threading.Semaphore(max(explain_workers, 1))
    if ui_dir is not None and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    @app.get("/health")
    def health():
        return {"status": "ok", "logs": len(store.logs), "models": len(store.models)}

    @app.post("/logs")
    async def create_log(request: Request):
        content_type = request.headers.get("content-type", "")
        if content_type.startswith("multipart/form-data"):
            form = await request.form()
            upload = form.get("file")
            if upload is None:
                raise HTTPException(422, "multipart upload needs a 'file' field")
            raw = await upload.read()
            tmp = store.data_dir / f"upload-{uuid.uuid4().hex[:8]}.csv"
            tmp.write_bytes(raw)
            try:
                log = el.parse_csv(tmp)
            except (el.MissingColumn, el.MalformedRow, el.NegativeAmount) as exc:
                raise HTTPException(422, str(exc)) from exc
            finally:
                tmp.unlink(missing_ok=True)
        else:
            body = SynthLogRequest(**(await request.json()))
            try:
                config = synthgen.SynthConfig(**body.synth)
                log = synthgen.generate(config)
            except (TypeError, ValueError) as exc:
                raise HTTPException(422, str(exc)) from exc
        log_id = store.add_log(log)
        return {
            "log_id": log_id,
            "n_cases": len(log.cases),
            "n_activities": len(log.vocab.activities),
            "n_resources": len(log.vocab.resources),
        }

    @app.post("/models", status_code=202)
    def create_model(body: TrainRequest):
        log = store.get_log(body.log_id)
        try:
            config = pr.ModelConfig(**body.config)
            config.validate()
        except (TypeError, ValueError) as exc:
            raise HTTPException(422, str(exc)) from exc
        if not store.training_busy.acquire(blocking=False):
            raise HTTPException(409, "a training job is already running")
        job_id = f"job-{uuid.uuid4().hex[:8]}"
        model_id = f"model-{uuid.uuid4().hex[:8]}"
        store.jobs[job_id] = {"state": "running", "model_id": model_id}

        def run():
            try:
                model, report = pr.train(log, config)
                with store.lock:
                    pr.save(model, store.data_dir / "models" / f"{model_id}.ckpt.json")
                    meta = {"log_id": body.log_id, "created": time.time()}
                    (store.data_dir / "models" / f"{model_id}.meta.json").write_text(
                        json.dumps(meta, sort_keys=True))
                    store.models[model_id] = (model, _bank_for(model, log))
                store.jobs[job_id] = {
                    "state": "done",
                    "model_id": model_id,
                    "metrics": {
                        "accuracy": report.accuracy,
                        "macro_precision": report.macro_precision,
                        "macro_recall": report.macro_recall,
                        "macro_f1": report.macro_f1,
                    },
                }
            except Exception as exc:  # surfaced through the job endpoint
                store.jobs[job_id] = {"state": "failed", "error": str(exc)}
            finally:
                store.training_busy.release()

        threading.Thread(target=run, daemon=True).start()
        return {"model_id": model_id, "job_id": job_id}

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        job = store.jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id}")
        return job

    @app.post("/predict")
    def predict(body: PredictRequest):
        model, _ = store.get_model(body.model_id)
        if not body.prefix:
            raise HTTPException(422, "prefix must be non-empty")
        try:
            token, probs = pr.predict_next(model, body.prefix, body.amount)
        except pr.UnknownToken as exc:
            raise HTTPException(422, f"unknown token: {exc}") from exc
        return {
            "next_activity": token,
            "top_k": [
                {"activity": a, "probability": p}
                for a, p in pr.top_k_activities(model, probs, body.top_k)
            ],
        }

    @app.post("/explain")
    def explain(body: ExplainRequest):
        model, bank = store.get_model(body.model_id)
        query = cf.CounterfactualQuery(
            prefix=[(a, r) for a, r in body.query.prefix],
            amount=body.query.amount,
            desired_activity=body.query.milestone,
            amount_mutable=body.query.amount_mutable,
            k=body.query.k,
        )
        try:
            query.validate(model.vocab)
            weights = cf.LossWeights(**body.weights)
            weights.validate()
            budget = cf.SearchBudget(**body.budget)
            budget.validate()
        except (TypeError, ValueError) as exc:
            raise HTTPException(422, str(exc)) from exc

        stop_at = time.monotonic() + explain_timeout
        deadline = lambda: time.monotonic() > stop_at  # noqa: E731
        with explain_pool:
            try:
                results = cf.generate(query, model, bank, weights, budget, deadline)
            except cf.NoReachableMilestone as exc:
                raise HTTPException(422, str(exc)) from exc
            except cf.NoCounterfactualFound:
                results = []
        truncated = deadline()

        baseline = None
        if body.run_baseline and not deadline():
            baseline_budget = cf.SearchBudget(max_iters=min(budget.max_iters, 50))
            outcome = cf.dice_baseline(query, model, bank, weights.lambda1,
                                       weights.lambda2, query.k, baseline_budget,
                                       dimension="activity")
            baseline = {
                "status": outcome.status,
                "dimension": outcome.dimension,
                "iterations": outcome.iterations,
                "projection_changed": outcome.projection_changed,
            }

        payload = {
            "results": [ev.result_to_dict(r) for r in results],
            "baseline_outcome": baseline,
            "truncated": truncated,
        }
        if truncated:
            return JSONResponse(status_code=504, content=payload)
        return payload

    @app.get("/milestones/{model_id}")
    def milestones_for(model_id: str):
        model, _ = store.get_model(model_id)
        usable = [m for m in configured_milestones if m in model.vocab.activities]
        return {"milestones": usable}

    @app.get("/vocab/{model_id}")
    def vocab_for(model_id: str):
        model, _ = store.get_model(model_id)
        return {
            "activities": model.vocab.activities.data_tokens,
            "resources": model.vocab.resources.data_tokens,
        }

    @app.get("/report/{model_id}")
    def get_report(model_id: str):
        store.get_model(model_id)
        path = store.report_path(model_id)
        if not path.exists():
            raise HTTPException(404, f"no report for {model_id}")
        return json.loads(path.read_text())

    @app.post("/report/{model_id}")
    def make_report(model_id: str, body: ReportRequest):
        model, bank = store.get_model(model_id)
        try:
            milestones_list, queries = ev.load_queries(
                {"milestones": body.milestones or configured_milestones,
                 "queries": body.queries})
            for q in queries:
                q.validate(model.vocab)
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(422, str(exc)) from exc
        report = ev.run_milestone_suite(model, bank, queries, milestones_list)
        store.report_path(model_id).write_text(report.to_json())
        return report.to_dict()

    return app
