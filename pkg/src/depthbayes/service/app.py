"""FastAPI service wrapping the experiment pipeline.

Errors carry a machine-readable ``kind`` so thin clients can map them to
exit codes: config problems are 400, missing artifacts 404, numerical
failures 500. Handlers are synchronous on purpose; jobs are long-running and
FastAPI moves them off the event loop.
"""
from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..config import ConfigError, parse_config
from ..errors import DomainError, ShapeError
from ..pipeline import (
    MissingArtifactError,
    NumericalFailureError,
    run_evaluate,
    run_finetune,
    run_generate,
    run_report,
)
from .schemas import (
    CommandResponse,
    EvaluateRequest,
    FinetuneRequest,
    GenerateRequest,
    HealthResponse,
    ReportRequest,
)


def _execute(command, config_text: str, **kwargs) -> CommandResponse:
    try:
        config = parse_config(config_text)
        result = command(config, **kwargs)
    except (ConfigError, DomainError, ShapeError) as exc:
        raise HTTPException(status_code=400, detail={"kind": "config", "message": str(exc)})
    except OSError as exc:
        # bad paths come from the config, so they are config errors
        raise HTTPException(status_code=400, detail={"kind": "config", "message": str(exc)})
    except MissingArtifactError as exc:
        raise HTTPException(
            status_code=404, detail={"kind": "missing-artifact", "message": str(exc)}
        )
    except NumericalFailureError as exc:
        raise HTTPException(
            status_code=500, detail={"kind": "numerical-failure", "message": str(exc)}
        )
    return CommandResponse(status="ok", detail=result.detail, artifacts=list(result.artifacts))


def create_app() -> FastAPI:
    app = FastAPI(title="depthbayes", version=__version__)

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/v1/generate", response_model=CommandResponse)
    def generate(request: GenerateRequest) -> CommandResponse:
        return _execute(run_generate, request.config_text)

    @app.post("/v1/finetune", response_model=CommandResponse)
    def finetune(request: FinetuneRequest) -> CommandResponse:
        return _execute(
            run_finetune, request.config_text, only_seed=request.seed, init=request.init
        )

    @app.post("/v1/evaluate", response_model=CommandResponse)
    def evaluate(request: EvaluateRequest) -> CommandResponse:
        return _execute(run_evaluate, request.config_text, only_seed=request.seed)

    @app.post("/v1/report", response_model=CommandResponse)
    def report(request: ReportRequest) -> CommandResponse:
        return _execute(run_report, request.config_text)

    return app
