"""REST interface (FastAPI) over :class:`~claas.service.core.Service`.

Environment variables read by :func:`main`:

``CLAAS_BIND``     host:port to listen on (default ``127.0.0.1:8000``)
``CLAAS_STORAGE``  storage root directory (default ``./claas-data``)
``CLAAS_WORKERS``  number of training workers (default 1)
"""

from __future__ import annotations

import json
import logging
import os

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, PlainTextResponse, Response

from ..errors import ClaasError
from .core import ApiError, Service, open_service

logger = logging.getLogger(__name__)


def _error(status: int, code: str, detail: str, field: str | None = None) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": code, "detail": detail, "field": field})


async def _json_body(request: Request):
    raw = await request.body()
    try:
        return json.loads(raw or b"null")
    except json.JSONDecodeError as exc:
        raise ApiError(400, "MalformedJSON", f"request body is not JSON: {exc}") from exc


def create_app(service: Service) -> FastAPI:
    app = FastAPI(title="claas", version="1")
    app.state.service = service

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return _error(exc.status, exc.code, exc.detail, exc.field)

    @app.exception_handler(ClaasError)
    async def _claas_error(request: Request, exc: ClaasError):
        return _error(500, exc.code, exc.detail, exc.field)

    @app.get("/v1/health")
    def health():
        return {"status": "ok"}

    @app.post("/v1/experiments", status_code=201)
    async def create_experiment(request: Request):
        doc = await _json_body(request)
        return {"experiment_id": service.create_experiment(doc)}

    @app.get("/v1/experiments/{exp_id}")
    def get_experiment(exp_id: str):
        return service.get_experiment(exp_id)

    @app.post("/v1/experiments/{exp_id}/experiences", status_code=202)
    async def push_experience(exp_id: str, request: Request):
        payload = await _json_body(request)
        return {"experience_index": service.push_experience(exp_id, payload)}

    @app.post("/v1/experiments/{exp_id}/jobs", status_code=202)
    def trigger_job(exp_id: str):
        return {"job_id": service.trigger_job(exp_id)}

    @app.get("/v1/experiments/{exp_id}/jobs")
    def list_jobs(exp_id: str):
        service.get_experiment(exp_id)
        return service.list_jobs(exp_id)

    @app.get("/v1/jobs/{job_id}")
    def get_job(job_id: str):
        return service.get_job(job_id)

    @app.get("/v1/experiments/{exp_id}/metrics")
    def get_metrics(exp_id: str, format: str = "json"):
        if format not in ("json", "csv"):
            raise ApiError(400, "ValidationError", "format must be json or csv", "format")
        record = service.metrics(exp_id)
        if format == "csv":
            return PlainTextResponse(record.to_csv(), media_type="text/csv")
        return {"experiment_id": exp_id, **record.to_dict()}

    @app.get("/v1/experiments/{exp_id}/versions")
    def list_versions(exp_id: str, run: int | None = None):
        return service.versions(exp_id, run)

    @app.get("/v1/experiments/{exp_id}/versions/{version}")
    def get_version(exp_id: str, version: int, run: int = 0):
        return service.version(exp_id, version, run)[0]

    @app.get("/v1/experiments/{exp_id}/versions/{version}/weights")
    def get_weights(exp_id: str, version: int, run: int = 0):
        _, blob = service.version(exp_id, version, run)
        return Response(blob, media_type="application/octet-stream")

    @app.post("/v1/experiments/{exp_id}/observe")
    async def observe(exp_id: str, request: Request):
        payload = await _json_body(request)
        return service.observe(exp_id, payload)

    @app.get("/v1/experiments/{exp_id}/audit")
    def audit(exp_id: str):
        return service.audit_log(exp_id)

    return app


def main() -> None:
    import uvicorn

    logging.basicConfig(level=logging.INFO, format="%(asctime)s [%(levelname)s] %(name)s: %(message)s")
    bind = os.environ.get("CLAAS_BIND", "127.0.0.1:8000")
    host, _, port = bind.rpartition(":")
    storage = os.environ.get("CLAAS_STORAGE", "./claas-data")
    workers = int(os.environ.get("CLAAS_WORKERS", "1"))
    service = open_service(storage, workers=workers)
    logger.info("storage at %s, %d worker(s)", storage, workers)
    try:
        uvicorn.run(create_app(service), host=host or "127.0.0.1", port=int(port))
    finally:
        service.shutdown(timeout=5)


if __name__ == "__main__":
    main()
